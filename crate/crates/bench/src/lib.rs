//! Benchmark fixtures built from the shipped corridor scene.

use socc_core::synth::{render_scene, SceneSpec};
use socc_core::{Odometry, PipelineConfig, Pose, Scan};

pub const CORRIDOR_SCENE: &str = include_str!("../../../scenes/corridor.scene");

pub fn corridor() -> SceneSpec {
    SceneSpec::parse(CORRIDOR_SCENE).expect("shipped scene parses")
}

/// Sensor-frame scans of the first `n` corridor frames.
pub fn corridor_scans(n: usize) -> Vec<Scan> {
    let spec = corridor();
    (0..n).map(|f| render_scene(&spec, f).0).collect()
}

/// Odometry that has processed `warmup` frames, and the scan that follows.
pub struct Warmed {
    pub odometry: Odometry,
    pub next: Scan,
    pub next_truth: Pose,
}

pub fn warmed_corridor(warmup: usize) -> Warmed {
    let spec = corridor();
    let mut odometry = Odometry::new(PipelineConfig::corridor()).expect("valid config");
    for f in 0..warmup {
        let (scan, _) = render_scene(&spec, f);
        odometry.process_scan(&scan).expect("frame processed");
    }
    let (next, pose) = render_scene(&spec, warmup);
    let next_truth = spec.trajectory[0].inverse().compose(&pose);
    Warmed {
        odometry,
        next,
        next_truth,
    }
}
