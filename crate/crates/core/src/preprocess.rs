//! Per-scan front end: motion prediction, deskewing, class-aware voxel
//! downsampling and the adaptive correspondence threshold.

use std::collections::VecDeque;

use rustc_hash::FxHashMap as HashMap;

use rayon::prelude::*;
use thiserror::Error;

use crate::grid::VoxelKey;
use crate::scan::{ClassId, Scan};
use crate::se3::{exp_map, log_map, GeometryError, Pose, Vec3};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClassTableError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Constant-velocity prediction: the last relative motion, reused.
pub fn predict_delta(prev2: &Pose, prev1: &Pose) -> Pose {
    prev2.inverse().compose(prev1)
}

/// Moves every timed point to the scan-end frame.
///
/// A point captured at relative time `s` is mapped by
/// `exp((s − 1) · log(delta))`, which is the identity at `s = 1`.
pub fn deskew(scan: &Scan, delta_pred: &Pose) -> Result<Scan, GeometryError> {
    let Some(times) = scan.times() else {
        return Ok(scan.clone());
    };
    if *delta_pred == Pose::identity() {
        return Ok(scan.clone());
    }
    let xi = log_map(delta_pred)?;
    let points = scan
        .points()
        .iter()
        .zip(times)
        .map(|(p, &s)| exp_map(&xi.scaled(s - 1.0)).transform_point(p))
        .collect();
    Ok(Scan::from_parts_unchecked(
        points,
        scan.classes().to_vec(),
        Some(times.to_vec()),
    ))
}

/// Class-dependent downsampling factors and the adaptive voxel multiplier.
#[derive(Debug, Clone, PartialEq)]
pub struct DownsampleConfig {
    /// Effective voxel size for class `c` is `class_factors[c] · v_adapt`;
    /// a factor of zero removes the class. Classes past the end use 1.0.
    pub class_factors: Vec<f64>,
    /// `v_adapt = base_multiplier · map voxel size`.
    pub base_multiplier: f64,
}

impl Default for DownsampleConfig {
    fn default() -> Self {
        Self {
            class_factors: ClassTable::semantic_kitti().factors(),
            base_multiplier: 1.5,
        }
    }
}

impl DownsampleConfig {
    pub fn factor(&self, c: ClassId) -> f64 {
        self.class_factors
            .get(usize::from(c))
            .copied()
            .unwrap_or(1.0)
    }
}

/// Names and downsampling factors of a label scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassTable {
    entries: Vec<(ClassId, f64, String)>,
}

impl ClassTable {
    /// The 20-class scheme (0 = unlabeled) with the default factors: poles
    /// and signs 0.75, ground 0.8, people 0, everything else 1.
    pub fn semantic_kitti() -> Self {
        let names = [
            "unlabeled", "car", "bicycle", "motorcycle", "truck", "other-vehicle", "person",
            "bicyclist", "motorcyclist", "road", "parking", "sidewalk", "other-ground",
            "building", "fence", "vegetation", "trunk", "terrain", "pole", "traffic-sign",
        ];
        let entries = names
            .iter()
            .enumerate()
            .map(|(i, n)| {
                let f = match i {
                    18 | 19 => 0.75,
                    9 | 10 | 11 | 17 => 0.8,
                    6..=8 => 0.0,
                    _ => 1.0,
                };
                (i as ClassId, f, (*n).to_string())
            })
            .collect();
        Self { entries }
    }

    /// Parses `class_id factor name` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, ClassTableError> {
        let mut entries = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| ClassTableError::Parse { line: n + 1, msg };
            let mut parts = line.split_whitespace();
            let id: ClassId = parts
                .next()
                .unwrap_or_default()
                .parse()
                .map_err(|e| err(format!("bad class id: {e}")))?;
            let factor: f64 = parts
                .next()
                .ok_or_else(|| err("missing factor".into()))?
                .parse()
                .map_err(|e| err(format!("bad factor: {e}")))?;
            if !(factor >= 0.0 && factor.is_finite()) {
                return Err(err(format!("factor must be a finite value >= 0, got {factor}")));
            }
            let name = parts.collect::<Vec<_>>().join(" ");
            entries.push((id, factor, name));
        }
        Ok(Self { entries })
    }

    /// Dense factor vector indexed by class id; gaps default to 1.0.
    pub fn factors(&self) -> Vec<f64> {
        let len = self
            .entries
            .iter()
            .map(|(id, _, _)| usize::from(*id) + 1)
            .max()
            .unwrap_or(0);
        let mut v = vec![1.0; len];
        for (id, f, _) in &self.entries {
            v[usize::from(*id)] = *f;
        }
        v
    }

    pub fn name(&self, id: ClassId) -> Option<&str> {
        self.entries
            .iter()
            .find(|(i, _, _)| *i == id)
            .map(|(_, _, n)| n.as_str())
    }
}

/// Accumulates the mean position and time of points sharing a voxel.
#[derive(Default)]
struct Bucket {
    sum: Vec3,
    time_sum: f64,
    count: usize,
    class_counts: Vec<(ClassId, usize)>,
}

fn voxelize<'a>(
    items: impl Iterator<Item = (usize, &'a Vec3)>,
    voxel_size: f64,
    times: Option<&[f64]>,
    classes: &[ClassId],
) -> Vec<(VoxelKey, Bucket)> {
    let mut buckets: HashMap<VoxelKey, Bucket> = HashMap::default();
    for (i, p) in items {
        let b = buckets.entry(VoxelKey::of(p, voxel_size)).or_default();
        b.sum += p;
        b.count += 1;
        if let Some(t) = times {
            b.time_sum += t[i];
        }
        let c = classes[i];
        match b.class_counts.iter_mut().find(|(k, _)| *k == c) {
            Some((_, n)) => *n += 1,
            None => b.class_counts.push((c, 1)),
        }
    }
    let mut out: Vec<(VoxelKey, Bucket)> = buckets.into_iter().collect();
    out.sort_unstable_by_key(|(k, _)| *k);
    out
}

fn majority(counts: &[(ClassId, usize)]) -> ClassId {
    counts
        .iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(c, _)| *c)
        .unwrap_or(0)
}

/// Class-aware mean-point voxel downsampling.
///
/// Each class is voxelized separately at `factor(c) · v_adapt`; classes with
/// factor zero are dropped. Output is ordered by class, then voxel key.
pub fn semantic_downsample(scan: &Scan, cfg: &DownsampleConfig, v_adapt: f64) -> Scan {
    let mut by_class: Vec<(ClassId, Vec<usize>)> = Vec::new();
    {
        let mut index: HashMap<ClassId, usize> = HashMap::default();
        for (i, &c) in scan.classes().iter().enumerate() {
            let slot = *index.entry(c).or_insert_with(|| {
                by_class.push((c, Vec::new()));
                by_class.len() - 1
            });
            by_class[slot].1.push(i);
        }
    }
    by_class.sort_unstable_by_key(|(c, _)| *c);
    by_class.retain(|(c, _)| cfg.factor(*c) > 0.0);

    let points = scan.points();
    let times = scan.times();
    let parts: Vec<Vec<(Vec3, ClassId, f64)>> = by_class
        .par_iter()
        .map(|(c, idx)| {
            let size = cfg.factor(*c) * v_adapt;
            voxelize(idx.iter().map(|&i| (i, &points[i])), size, times, scan.classes())
                .into_iter()
                .map(|(_, b)| {
                    let n = b.count as f64;
                    (b.sum / n, *c, b.time_sum / n)
                })
                .collect()
        })
        .collect();
    assemble(parts.into_iter().flatten(), times.is_some())
}

/// Plain mean-point voxel downsampling that ignores class factors. Each
/// output point takes the most frequent class of its voxel.
pub fn voxel_downsample(scan: &Scan, voxel_size: f64) -> Scan {
    let times = scan.times();
    let out = voxelize(scan.points().iter().enumerate(), voxel_size, times, scan.classes())
        .into_iter()
        .map(|(_, b)| {
            let n = b.count as f64;
            (b.sum / n, majority(&b.class_counts), b.time_sum / n)
        });
    assemble(out, times.is_some())
}

fn assemble(items: impl Iterator<Item = (Vec3, ClassId, f64)>, timed: bool) -> Scan {
    let mut points = Vec::new();
    let mut classes = Vec::new();
    let mut times = Vec::new();
    for (p, c, t) in items {
        points.push(p);
        classes.push(c);
        times.push(t.clamp(0.0, 1.0));
    }
    Scan::from_parts_unchecked(points, classes, timed.then_some(times))
}

/// Adaptive correspondence distance driven by how far the motion model's
/// prediction deviated from the registered motion.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdState {
    deviation_history: VecDeque<f64>,
    pub tau_min: f64,
    pub sigma_multiplier: f64,
    /// Threshold used before the first deviation has been observed.
    pub initial_threshold: f64,
    pub max_history: usize,
    updated: bool,
}

impl Default for ThresholdState {
    fn default() -> Self {
        Self::new(0.3, 3.0, 2.0, 1000)
    }
}

impl ThresholdState {
    pub fn new(tau_min: f64, sigma_multiplier: f64, initial_threshold: f64, max_history: usize) -> Self {
        Self {
            deviation_history: VecDeque::new(),
            tau_min,
            sigma_multiplier,
            initial_threshold,
            max_history: max_history.max(1),
            updated: false,
        }
    }

    pub fn history(&self) -> impl Iterator<Item = f64> + '_ {
        self.deviation_history.iter().copied()
    }

    /// Threshold for the next registration.
    pub fn current(&self) -> f64 {
        if !self.updated {
            return self.initial_threshold.max(self.tau_min);
        }
        let n = self.deviation_history.len();
        let rms = if n == 0 {
            0.0
        } else {
            (self.deviation_history.iter().map(|d| d * d).sum::<f64>() / n as f64).sqrt()
        };
        (self.sigma_multiplier * rms).max(self.tau_min)
    }

    /// Folds in the discrepancy between predicted and estimated motion and
    /// returns the new threshold.
    pub fn update(&mut self, delta_pred: &Pose, delta_est: &Pose, r_max: f64) -> f64 {
        let d = model_deviation(delta_pred, delta_est, r_max);
        if d >= self.tau_min / self.sigma_multiplier {
            if self.deviation_history.len() == self.max_history {
                self.deviation_history.pop_front();
            }
            self.deviation_history.push_back(d);
        }
        self.updated = true;
        self.current()
    }
}

/// `‖t_err‖ + 2 r_max sin(θ_err / 2)`: the largest displacement the error
/// transform causes for a point within `r_max` of the sensor.
pub fn model_deviation(delta_pred: &Pose, delta_est: &Pose, r_max: f64) -> f64 {
    let err = delta_pred.inverse().compose(delta_est);
    err.translation.norm() + 2.0 * r_max * (0.5 * err.rotation_angle()).sin()
}
