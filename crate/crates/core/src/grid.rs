//! Sparse semantic occupancy grid.
//!
//! Every stored voxel keeps running geometric moments, the first point ever
//! inserted into it (its anchor), an occupancy log-odds value and a
//! distribution over semantic classes. Voxels are only allocated by hits;
//! free-space observations decrement evidence on voxels that already exist.

use rustc_hash::{FxHashMap as HashMap, FxHashSet as HashSet};

use thiserror::Error;

use crate::scan::{ClassId, Scan, UNLABELED};
use crate::se3::{Moments, Vec3};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GridError {
    #[error("probability {0} outside the open interval (0, 1)")]
    Domain(f64),
    #[error("semantic update needs at least one observation")]
    EmptyObservation,
    #[error("invalid mapping configuration: {0}")]
    InvalidConfig(String),
}

pub fn logit(p: f64) -> Result<f64, GridError> {
    if p > 0.0 && p < 1.0 {
        Ok((p / (1.0 - p)).ln())
    } else {
        Err(GridError::Domain(p))
    }
}

pub fn sigmoid(l: f64) -> f64 {
    1.0 / (1.0 + (-l).exp())
}

/// Integer voxel index. Ordering is lexicographic `(x, y, z)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VoxelKey {
    pub x: i32,
    pub y: i32,
    pub z: i32,
}

impl VoxelKey {
    pub const fn new(x: i32, y: i32, z: i32) -> Self {
        Self { x, y, z }
    }

    /// `floor(p / voxel_size)` componentwise.
    pub fn of(p: &Vec3, voxel_size: f64) -> Self {
        Self {
            x: (p.x / voxel_size).floor() as i32,
            y: (p.y / voxel_size).floor() as i32,
            z: (p.z / voxel_size).floor() as i32,
        }
    }

    pub fn center(&self, voxel_size: f64) -> Vec3 {
        Vec3::new(
            (f64::from(self.x) + 0.5) * voxel_size,
            (f64::from(self.y) + 0.5) * voxel_size,
            (f64::from(self.z) + 0.5) * voxel_size,
        )
    }

    pub fn min_corner(&self, voxel_size: f64) -> Vec3 {
        Vec3::new(
            f64::from(self.x) * voxel_size,
            f64::from(self.y) * voxel_size,
            f64::from(self.z) * voxel_size,
        )
    }

    fn get(&self, axis: usize) -> i32 {
        match axis {
            0 => self.x,
            1 => self.y,
            _ => self.z,
        }
    }

    fn get_mut(&mut self, axis: usize) -> &mut i32 {
        match axis {
            0 => &mut self.x,
            1 => &mut self.y,
            _ => &mut self.z,
        }
    }
}

/// Which point of a voxel serves as its registration target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AnchorMode {
    /// The first point ever inserted.
    #[default]
    First,
    /// The running mean of all inserted points.
    Mean,
    /// The geometric center of the voxel cell.
    Center,
}

impl std::str::FromStr for AnchorMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "first" => Ok(Self::First),
            "mean" => Ok(Self::Mean),
            "center" => Ok(Self::Center),
            other => Err(format!("unknown anchor mode '{other}' (first|mean|center)")),
        }
    }
}

impl std::fmt::Display for AnchorMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::First => "first",
            Self::Mean => "mean",
            Self::Center => "center",
        })
    }
}

/// Mapping parameters. Per-class vectors are indexed by [`ClassId`].
#[derive(Debug, Clone, PartialEq)]
pub struct MappingConfig {
    pub voxel_size: f64,
    pub ema_alpha: f64,
    pub p_hit: Vec<f64>,
    pub p_miss: Vec<f64>,
    pub log_odds_min: f64,
    pub log_odds_max: f64,
    pub max_range: f64,
}

/// Moving classes of the 20-class label scheme used by default.
pub const DEFAULT_MOVING_CLASSES: [ClassId; 8] = [1, 2, 3, 4, 5, 6, 7, 8];
/// Static structure classes of the default label scheme.
pub const DEFAULT_STATIC_CLASSES: [ClassId; 11] = [9, 10, 11, 12, 13, 14, 15, 16, 17, 18, 19];
pub const DEFAULT_CLASS_COUNT: usize = 20;

impl Default for MappingConfig {
    fn default() -> Self {
        Self::with_miss_profile(
            DEFAULT_CLASS_COUNT,
            0.55,
            0.49,
            0.498,
            0.475,
            &DEFAULT_STATIC_CLASSES,
            &DEFAULT_MOVING_CLASSES,
        )
    }
}

impl MappingConfig {
    /// Uniform hit probability, a default miss probability and overrides for
    /// static and moving class groups.
    pub fn with_miss_profile(
        class_count: usize,
        p_hit: f64,
        p_miss: f64,
        p_miss_static: f64,
        p_miss_moving: f64,
        static_classes: &[ClassId],
        moving_classes: &[ClassId],
    ) -> Self {
        let mut miss = vec![p_miss; class_count];
        for &c in static_classes {
            if let Some(m) = miss.get_mut(usize::from(c)) {
                *m = p_miss_static;
            }
        }
        for &c in moving_classes {
            if let Some(m) = miss.get_mut(usize::from(c)) {
                *m = p_miss_moving;
            }
        }
        Self {
            voxel_size: 0.5,
            ema_alpha: 0.8,
            p_hit: vec![p_hit; class_count],
            p_miss: miss,
            // OctoMap clamping thresholds 0.12 / 0.97
            log_odds_min: (0.12f64 / (1.0 - 0.12)).ln(),
            log_odds_max: (0.97f64 / (1.0 - 0.97)).ln(),
            max_range: 100.0,
        }
    }

    /// Single hit and miss probability for every class.
    pub fn uniform(class_count: usize, p_hit: f64, p_miss: f64) -> Self {
        Self::with_miss_profile(class_count, p_hit, p_miss, p_miss, p_miss, &[], &[])
    }

    pub fn class_count(&self) -> usize {
        self.p_hit.len()
    }

    pub fn validate(&self) -> Result<(), GridError> {
        let bad = |msg: String| Err(GridError::InvalidConfig(msg));
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return bad(format!("voxel_size must be positive, got {}", self.voxel_size));
        }
        if !(0.0..=1.0).contains(&self.ema_alpha) {
            return bad(format!("ema_alpha must lie in [0, 1], got {}", self.ema_alpha));
        }
        if self.p_hit.is_empty() || self.p_hit.len() != self.p_miss.len() {
            return bad("p_hit and p_miss need one entry per class".into());
        }
        if let Some(p) = self.p_hit.iter().find(|p| !(**p > 0.5 && **p < 1.0)) {
            return bad(format!("p_hit must lie in (0.5, 1), got {p}"));
        }
        if let Some(p) = self.p_miss.iter().find(|p| !(**p > 0.0 && **p < 0.5)) {
            return bad(format!("p_miss must lie in (0, 0.5), got {p}"));
        }
        if !(self.log_odds_min < 0.0 && self.log_odds_max > 0.0) {
            return bad("log-odds clamp must straddle zero".into());
        }
        if !(self.max_range > 0.0) {
            return bad(format!("max_range must be positive, got {}", self.max_range));
        }
        Ok(())
    }

    fn class_index(&self, c: ClassId) -> usize {
        let i = usize::from(c);
        if i < self.p_hit.len() {
            i
        } else {
            usize::from(UNLABELED)
        }
    }

    pub fn hit_increment(&self, c: ClassId) -> f64 {
        let p = self.p_hit[self.class_index(c)];
        (p / (1.0 - p)).ln()
    }

    pub fn miss_increment(&self, c: ClassId) -> f64 {
        let p = self.p_miss[self.class_index(c)];
        (p / (1.0 - p)).ln()
    }

    fn clamp(&self, l: f64) -> f64 {
        l.clamp(self.log_odds_min, self.log_odds_max)
    }
}

/// Per-voxel statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelData {
    moments: Moments,
    anchor: Vec3,
    log_odds: f64,
    class_probs: Vec<f64>,
    label: ClassId,
    semantic_updates: u32,
}

impl VoxelData {
    /// An unobserved voxel: no points, neutral occupancy, all semantic mass
    /// on the unlabeled class.
    pub fn new(class_count: usize) -> Self {
        let mut class_probs = vec![0.0; class_count.max(1)];
        class_probs[0] = 1.0;
        Self {
            moments: Moments::new(),
            anchor: Vec3::zeros(),
            log_odds: 0.0,
            class_probs,
            label: UNLABELED,
            semantic_updates: 0,
        }
    }

    pub fn moments(&self) -> &Moments {
        &self.moments
    }

    pub fn count(&self) -> u64 {
        self.moments.count()
    }

    /// First inserted point. Meaningless while `count() == 0`.
    pub fn anchor(&self) -> Vec3 {
        self.anchor
    }

    pub fn log_odds(&self) -> f64 {
        self.log_odds
    }

    pub fn occupancy(&self) -> f64 {
        sigmoid(self.log_odds)
    }

    pub fn is_occupied(&self) -> bool {
        self.occupancy() >= 0.5
    }

    pub fn class_probs(&self) -> &[f64] {
        &self.class_probs
    }

    pub fn label(&self) -> ClassId {
        self.label
    }

    /// Probability mass of the dominant label.
    pub fn label_prob(&self) -> f64 {
        self.class_probs[usize::from(self.label)]
    }

    /// Registration target point under the given anchor mode.
    pub fn anchor_for(&self, mode: AnchorMode, key: &VoxelKey, voxel_size: f64) -> Vec3 {
        match mode {
            AnchorMode::First => self.anchor,
            AnchorMode::Mean => self.moments.mean(),
            AnchorMode::Center => key.center(voxel_size),
        }
    }

    /// Records one point falling inside this voxel. The hit increment uses
    /// the point's own class.
    pub fn apply_hit(&mut self, p: &Vec3, class: ClassId, cfg: &MappingConfig) {
        if self.moments.count() == 0 {
            self.anchor = *p;
        }
        self.moments.push(p);
        self.log_odds = cfg.clamp(self.log_odds + cfg.hit_increment(class));
    }

    /// Free-space observation. The decrement uses the voxel's current label.
    pub fn apply_miss(&mut self, cfg: &MappingConfig) {
        self.log_odds = cfg.clamp(self.log_odds + cfg.miss_increment(self.label));
    }

    /// Fuses the labels of one scan's hits in this voxel.
    ///
    /// The first update adopts the observed frequencies directly; later ones
    /// blend them in with an exponential moving average weighted by `alpha`.
    pub fn update_semantics(&mut self, hits: &[ClassId], alpha: f64) -> Result<(), GridError> {
        if hits.is_empty() {
            return Err(GridError::EmptyObservation);
        }
        let k = self.class_probs.len();
        let mut freq = vec![0.0; k];
        for &c in hits {
            let i = usize::from(c);
            freq[if i < k { i } else { 0 }] += 1.0;
        }
        let n = hits.len() as f64;
        freq.iter_mut().for_each(|f| *f /= n);

        if self.semantic_updates == 0 {
            self.class_probs = freq;
        } else {
            for (p, f) in self.class_probs.iter_mut().zip(&freq) {
                *p = alpha * *p + (1.0 - alpha) * f;
            }
        }
        let total: f64 = self.class_probs.iter().sum();
        if total > 0.0 {
            self.class_probs.iter_mut().for_each(|p| *p /= total);
        }
        self.semantic_updates += 1;
        self.label = argmax(&self.class_probs);
        Ok(())
    }

    pub(crate) fn from_raw(
        moments: Moments,
        anchor: Vec3,
        log_odds: f64,
        class_probs: Vec<f64>,
    ) -> Self {
        let label = argmax(&class_probs);
        Self {
            moments,
            anchor,
            log_odds,
            class_probs,
            label,
            semantic_updates: 1,
        }
    }
}

fn argmax(v: &[f64]) -> ClassId {
    let mut best = 0usize;
    for (i, p) in v.iter().enumerate() {
        if *p > v[best] {
            best = i;
        }
    }
    best as ClassId
}

/// Counts of what one [`OccupancyGrid::integrate_scan`] call touched.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IntegrationSummary {
    pub hits: usize,
    pub hit_voxels: usize,
    pub created: usize,
    pub missed_voxels: usize,
    pub skipped_out_of_range: usize,
}

#[derive(Debug, Clone)]
pub struct OccupancyGrid {
    config: MappingConfig,
    cells: HashMap<VoxelKey, VoxelData>,
}

impl OccupancyGrid {
    pub fn new(config: MappingConfig) -> Result<Self, GridError> {
        config.validate()?;
        Ok(Self {
            config,
            cells: HashMap::default(),
        })
    }

    pub fn config(&self) -> &MappingConfig {
        &self.config
    }

    pub fn voxel_size(&self) -> f64 {
        self.config.voxel_size
    }

    pub fn key_of(&self, p: &Vec3) -> VoxelKey {
        VoxelKey::of(p, self.config.voxel_size)
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn get(&self, key: &VoxelKey) -> Option<&VoxelData> {
        self.cells.get(key)
    }

    /// All cells in unspecified order.
    pub fn iter(&self) -> impl Iterator<Item = (&VoxelKey, &VoxelData)> {
        self.cells.iter()
    }

    /// All cells ordered by key.
    pub fn sorted_cells(&self) -> Vec<(VoxelKey, &VoxelData)> {
        let mut v: Vec<_> = self.cells.iter().map(|(k, d)| (*k, d)).collect();
        v.sort_unstable_by_key(|(k, _)| *k);
        v
    }

    pub fn occupied_count(&self) -> usize {
        self.cells.values().filter(|v| v.is_occupied()).count()
    }

    /// Single hit without ray casting or semantic fusion.
    pub fn insert_hit(&mut self, p: &Vec3, class: ClassId) {
        let key = self.key_of(p);
        let k = self.config.class_count();
        self.cells
            .entry(key)
            .or_insert_with(|| VoxelData::new(k))
            .apply_hit(p, class, &self.config);
    }

    pub(crate) fn insert_raw(&mut self, key: VoxelKey, data: VoxelData) {
        self.cells.insert(key, data);
    }

    /// Fuses one scan already expressed in the map frame.
    ///
    /// Hits are grouped per voxel: each point updates moments and log-odds,
    /// then each touched voxel gets one semantic update with the labels of
    /// its points. With `cleaning_ray`, every voxel crossed by a ray from
    /// `origin` to a hit (excluding voxels hit in this scan) that already
    /// exists receives exactly one miss.
    pub fn integrate_scan(
        &mut self,
        origin: &Vec3,
        scan_world: &Scan,
        cleaning_ray: bool,
    ) -> IntegrationSummary {
        let cfg = &self.config;
        let s = cfg.voxel_size;
        let mut summary = IntegrationSummary::default();
        let mut order: Vec<VoxelKey> = Vec::new();
        let mut groups: HashMap<VoxelKey, Vec<usize>> = HashMap::default();
        let mut kept: Vec<usize> = Vec::with_capacity(scan_world.len());
        for (i, p) in scan_world.points().iter().enumerate() {
            if (p - origin).norm() > cfg.max_range {
                summary.skipped_out_of_range += 1;
                continue;
            }
            kept.push(i);
            let key = VoxelKey::of(p, s);
            groups
                .entry(key)
                .or_insert_with(|| {
                    order.push(key);
                    Vec::new()
                })
                .push(i);
        }

        let class_count = cfg.class_count();
        let points = scan_world.points();
        let classes = scan_world.classes();
        let mut labels: Vec<ClassId> = Vec::new();
        for key in &order {
            let idx = &groups[key];
            let cell = self.cells.entry(*key).or_insert_with(|| {
                summary.created += 1;
                VoxelData::new(class_count)
            });
            labels.clear();
            for &i in idx {
                cell.apply_hit(&points[i], classes[i], cfg);
                labels.push(classes[i]);
            }
            cell.update_semantics(&labels, cfg.ema_alpha)
                .expect("every group holds at least one hit");
            summary.hits += idx.len();
        }
        summary.hit_voxels = order.len();

        if cleaning_ray {
            let mut free: HashSet<VoxelKey> = HashSet::default();
            for &i in &kept {
                traverse_ray(origin, &points[i], s, |k| {
                    free.insert(k);
                });
            }
            for key in free {
                if groups.contains_key(&key) {
                    continue;
                }
                if let Some(cell) = self.cells.get_mut(&key) {
                    cell.apply_miss(cfg);
                    summary.missed_voxels += 1;
                }
            }
        }
        summary
    }

    /// Occupied voxels whose anchor lies within `radius` of `center`,
    /// ordered by key.
    pub fn occupied_in_radius(&self, center: &Vec3, radius: f64) -> Vec<(VoxelKey, &VoxelData)> {
        let s = self.config.voxel_size;
        let lo = VoxelKey::of(&(center - Vec3::repeat(radius)), s);
        let hi = VoxelKey::of(&(center + Vec3::repeat(radius)), s);
        let span = |a: i32, b: i32| (i64::from(b) - i64::from(a) + 1) as u128;
        let volume = span(lo.x, hi.x) * span(lo.y, hi.y) * span(lo.z, hi.z);
        let r2 = radius * radius;
        let keep = |d: &VoxelData| d.is_occupied() && (d.anchor - center).norm_squared() <= r2;
        let mut out: Vec<(VoxelKey, &VoxelData)> = if volume <= self.cells.len() as u128 {
            let mut v = Vec::new();
            for x in lo.x..=hi.x {
                for y in lo.y..=hi.y {
                    for z in lo.z..=hi.z {
                        let k = VoxelKey::new(x, y, z);
                        if let Some(d) = self.cells.get(&k).filter(|d| keep(d)) {
                            v.push((k, d));
                        }
                    }
                }
            }
            v
        } else {
            self.cells
                .iter()
                .filter(|(_, d)| keep(d))
                .map(|(k, d)| (*k, d))
                .collect()
        };
        out.sort_unstable_by_key(|(k, _)| *k);
        out
    }

    /// Drops every cell whose anchor is farther than `max_range` from
    /// `center`. Returns the number of removed cells.
    pub fn prune_beyond(&mut self, center: &Vec3, max_range: f64) -> usize {
        let before = self.cells.len();
        let r2 = max_range * max_range;
        self.cells
            .retain(|_, d| (d.anchor - center).norm_squared() <= r2);
        before - self.cells.len()
    }
}

/// Voxels crossed by the segment `origin → endpoint`, excluding both the
/// origin's and the endpoint's voxel, in traversal order.
pub fn raycast_keys(origin: &Vec3, endpoint: &Vec3, voxel_size: f64) -> Vec<VoxelKey> {
    let mut out = Vec::new();
    traverse_ray(origin, endpoint, voxel_size, |k| out.push(k));
    out
}

/// Amanatides–Woo traversal. The number of steps per axis is fixed by the
/// key difference, so the walk always ends in the endpoint's voxel and every
/// step moves one unit along exactly one axis.
fn traverse_ray(origin: &Vec3, endpoint: &Vec3, s: f64, mut visit: impl FnMut(VoxelKey)) {
    let start = VoxelKey::of(origin, s);
    let stop = VoxelKey::of(endpoint, s);
    if start == stop {
        return;
    }
    let d = endpoint - origin;
    let mut remaining = [0u32; 3];
    let mut step = [0i32; 3];
    // index of the next boundary plane to cross along each axis
    let mut boundary = [0i64; 3];
    for a in 0..3 {
        let diff = i64::from(stop.get(a)) - i64::from(start.get(a));
        remaining[a] = diff.unsigned_abs() as u32;
        step[a] = diff.signum() as i32;
        boundary[a] = i64::from(start.get(a)) + i64::from(diff > 0);
    }
    let t_next = |a: usize, b: i64| (b as f64 * s - origin[a]) / d[a];
    let total: u32 = remaining.iter().sum();
    let mut cur = start;
    for n in 0..total {
        let mut best = usize::MAX;
        let mut best_t = f64::INFINITY;
        for a in 0..3 {
            if remaining[a] == 0 {
                continue;
            }
            let t = t_next(a, boundary[a]);
            if best == usize::MAX || t < best_t {
                best = a;
                best_t = t;
            }
        }
        *cur.get_mut(best) += step[best];
        remaining[best] -= 1;
        boundary[best] += i64::from(step[best]);
        if n + 1 < total {
            visit(cur);
        }
    }
}
