//! LiDAR odometry against a sparse semantic occupancy grid.
//!
//! Scans are registered to the map's voxel anchors with a weighted mix of
//! point-to-plane and point-to-point residuals, then fused back into the
//! map as occupancy evidence and class statistics.
//!
//! ```
//! use socc_core::{Odometry, PipelineConfig, Scan, Vec3};
//!
//! let mut odo = Odometry::new(PipelineConfig::default()).unwrap();
//! let scan = Scan::from_points(vec![Vec3::new(4.0, 0.0, 0.0), Vec3::new(0.0, 4.0, 0.5)]);
//! let report = odo.process_scan(&scan).unwrap();
//! assert_eq!(report.index, 0);
//! ```

pub mod config;
pub mod eval;
pub mod grid;
pub mod io;
pub mod pipeline;
pub mod preprocess;
pub mod registration;
pub mod scan;
pub mod se3;
pub mod synth;

pub use config::{ConfigError, Settings};
pub use eval::{eval_ape_rpe, eval_rte_rre, EvalError};
pub use grid::{AnchorMode, GridError, MappingConfig, OccupancyGrid, VoxelData, VoxelKey};
pub use io::{Dataset, IoError, LabelMap};
pub use pipeline::{Ablations, FrameReport, Odometry, PipelineConfig, PipelineError};
pub use preprocess::DownsampleConfig;
pub use registration::{register_scan, RegistrationConfig, RegistrationError};
pub use scan::{ClassId, Scan, ScanError, UNLABELED};
pub use se3::{GeometryError, Pose, Twist, Vec3};
