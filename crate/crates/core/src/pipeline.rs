//! Frame-by-frame odometry: predict, deskew, downsample, register, integrate.

use thiserror::Error;

use crate::grid::{AnchorMode, GridError, IntegrationSummary, MappingConfig, OccupancyGrid, VoxelData, VoxelKey};
use crate::preprocess::{deskew, predict_delta, semantic_downsample, voxel_downsample, DownsampleConfig, ThresholdState};
use crate::registration::{register_scan, Registration, RegistrationConfig, RegistrationError};
use crate::scan::Scan;
use crate::se3::{GeometryError, Pose, Vec3};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PipelineError {
    #[error("empty scan")]
    EmptyScan,
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Registration(#[from] RegistrationError),
    #[error("invalid pipeline configuration: {0}")]
    InvalidConfig(String),
}

/// Switches for the ablation study.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ablations {
    pub use_cleaning_ray: bool,
    pub use_occ_weight: bool,
    pub use_sem_weight: bool,
    pub use_semantic_downsample: bool,
    pub anchor_mode: AnchorMode,
}

impl Default for Ablations {
    fn default() -> Self {
        Self {
            use_cleaning_ray: true,
            use_occ_weight: true,
            use_sem_weight: true,
            use_semantic_downsample: true,
            anchor_mode: AnchorMode::First,
        }
    }
}

/// Adaptive correspondence threshold parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdConfig {
    pub tau_min: f64,
    pub sigma_multiplier: f64,
    pub initial: f64,
    pub max_history: usize,
    /// Range at which a rotation error is converted to a displacement.
    pub r_max: f64,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self {
            tau_min: 0.3,
            sigma_multiplier: 3.0,
            initial: 2.0,
            max_history: 1000,
            r_max: 100.0,
        }
    }
}

impl ThresholdConfig {
    pub fn state(&self) -> ThresholdState {
        ThresholdState::new(self.tau_min, self.sigma_multiplier, self.initial, self.max_history)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PipelineConfig {
    pub mapping: MappingConfig,
    pub downsample: DownsampleConfig,
    pub registration: RegistrationConfig,
    pub threshold: ThresholdConfig,
    pub ablations: Ablations,
}

impl PipelineConfig {
    /// Narrow-corridor profile: 0.2 m voxels and a default miss probability
    /// of 0.485; everything else as the default.
    pub fn corridor() -> Self {
        let mut cfg = Self::default();
        cfg.mapping.voxel_size = 0.2;
        let base = 0.49;
        for p in cfg.mapping.p_miss.iter_mut() {
            if *p == base {
                *p = 0.485;
            }
        }
        cfg
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.mapping.validate()?;
        self.effective_registration().validate()?;
        if !(self.downsample.base_multiplier > 0.0 && self.downsample.base_multiplier.is_finite()) {
            return Err(PipelineError::InvalidConfig(format!(
                "downsample base multiplier must be positive, got {}",
                self.downsample.base_multiplier
            )));
        }
        if let Some(f) = self.downsample.class_factors.iter().find(|f| !(**f >= 0.0 && f.is_finite())) {
            return Err(PipelineError::InvalidConfig(format!("class factor {f} is not >= 0")));
        }
        let t = &self.threshold;
        if !(t.tau_min > 0.0 && t.sigma_multiplier > 0.0 && t.initial > 0.0 && t.r_max > 0.0) {
            return Err(PipelineError::InvalidConfig(
                "threshold parameters must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Registration settings with the ablation switches applied.
    pub fn effective_registration(&self) -> RegistrationConfig {
        RegistrationConfig {
            use_occ_weight: self.ablations.use_occ_weight,
            use_sem_weight: self.ablations.use_sem_weight,
            anchor_mode: self.ablations.anchor_mode,
            ..self.registration.clone()
        }
    }

    pub fn v_adapt(&self) -> f64 {
        self.downsample.base_multiplier * self.mapping.voxel_size
    }
}

/// Registration target of a voxel under the given anchor mode.
pub fn anchor_of(v: &VoxelData, key: &VoxelKey, voxel_size: f64, mode: AnchorMode) -> Vec3 {
    v.anchor_for(mode, key, voxel_size)
}

/// What happened to one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameReport {
    pub index: usize,
    pub pose: Pose,
    pub delta_pred: Pose,
    /// Correspondence threshold used for this frame's registration.
    pub tau_corr: f64,
    pub downsampled_points: usize,
    /// `None` for the bootstrap frame.
    pub registration: Option<Registration>,
    /// Set when registration failed and the prediction was kept.
    pub fallback: Option<RegistrationError>,
    pub integration: IntegrationSummary,
    pub pruned: usize,
}

/// Odometry state for one trajectory.
#[derive(Debug, Clone)]
pub struct Odometry {
    cfg: PipelineConfig,
    grid: OccupancyGrid,
    trajectory: Vec<Pose>,
    threshold: ThresholdState,
}

impl Odometry {
    pub fn new(cfg: PipelineConfig) -> Result<Self, PipelineError> {
        cfg.validate()?;
        Ok(Self {
            grid: OccupancyGrid::new(cfg.mapping.clone())?,
            threshold: cfg.threshold.state(),
            trajectory: Vec::new(),
            cfg,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn grid(&self) -> &OccupancyGrid {
        &self.grid
    }

    pub fn trajectory(&self) -> &[Pose] {
        &self.trajectory
    }

    pub fn threshold(&self) -> &ThresholdState {
        &self.threshold
    }

    pub fn frame_index(&self) -> usize {
        self.trajectory.len()
    }

    fn downsample(&self, scan: &Scan) -> Scan {
        if self.cfg.ablations.use_semantic_downsample {
            semantic_downsample(scan, &self.cfg.downsample, self.cfg.v_adapt())
        } else {
            voxel_downsample(scan, self.cfg.v_adapt())
        }
    }

    fn integrate(&mut self, deskewed: &Scan, pose: &Pose) -> (IntegrationSummary, usize) {
        let world = deskewed.transformed(pose);
        let summary = self
            .grid
            .integrate_scan(&pose.translation, &world, self.cfg.ablations.use_cleaning_ray);
        let pruned = self.grid.prune_beyond(&pose.translation, self.cfg.mapping.max_range);
        (summary, pruned)
    }

    pub fn process_scan(&mut self, raw: &Scan) -> Result<FrameReport, PipelineError> {
        if raw.is_empty() {
            return Err(PipelineError::EmptyScan);
        }
        let index = self.trajectory.len();
        let Some(&last) = self.trajectory.last() else {
            let pose = Pose::identity();
            let (integration, pruned) = self.integrate(raw, &pose);
            self.trajectory.push(pose);
            return Ok(FrameReport {
                index,
                pose,
                delta_pred: Pose::identity(),
                tau_corr: self.threshold.current(),
                downsampled_points: 0,
                registration: None,
                fallback: None,
                integration,
                pruned,
            });
        };
        let delta_pred = match self.trajectory.len() {
            1 => Pose::identity(),
            n => predict_delta(&self.trajectory[n - 2], &last),
        };
        let deskewed = deskew(raw, &delta_pred)?;
        let source = self.downsample(&deskewed);
        let init = last.compose(&delta_pred);
        let tau_corr = self.threshold.current();
        let reg_cfg = self.cfg.effective_registration();
        let (pose, registration, fallback) = match register_scan(&source, &self.grid, &init, tau_corr, &reg_cfg) {
            Ok(r) => (r.pose, Some(r), None),
            Err(e) => (init, None, Some(e)),
        };
        let delta_est = last.inverse().compose(&pose);
        self.threshold.update(&delta_pred, &delta_est, self.cfg.threshold.r_max);
        let (integration, pruned) = self.integrate(&deskewed, &pose);
        self.trajectory.push(pose);
        Ok(FrameReport {
            index,
            pose,
            delta_pred,
            tau_corr,
            downsampled_points: source.len(),
            registration,
            fallback,
            integration,
            pruned,
        })
    }
}
