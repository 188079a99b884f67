//! Scan-to-map registration against voxel anchors.
//!
//! Each iteration pairs every scan point with the nearest anchor of an
//! occupied voxel, classifies the voxel as planar or not by its local
//! surface variation, and solves a weighted Gauss–Newton step that blends
//! point-to-plane and point-to-point residuals by the fraction of planar
//! correspondences.

use nalgebra::{Matrix1x6, Matrix3x6, Matrix6, SymmetricEigen, Vector6};
use rayon::prelude::*;
use thiserror::Error;

use crate::grid::{AnchorMode, OccupancyGrid, VoxelData, VoxelKey};
use crate::scan::{ClassId, Scan, UNLABELED};
use crate::se3::{eig3_symmetric, exp_map, skew, Mat3, Pose, Twist, Vec3};

/// Smallest eigenvalue of the normal matrix below which a direction counts
/// as unconstrained.
pub const DEGENERACY_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RegistrationError {
    #[error("no scan point has an occupied anchor within the correspondence threshold")]
    NoCorrespondences,
    #[error("normal equations are degenerate (smallest eigenvalue {min_eigenvalue:e})")]
    DegenerateSystem {
        min_eigenvalue: f64,
        /// Eigenvector of the smallest eigenvalue in `(ω, v)` order.
        direction: [f64; 6],
    },
    #[error("invalid registration configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationConfig {
    pub tau_planar: f64,
    pub min_points_for_plane: u64,
    /// Occupancy weight exponent.
    pub gamma: f64,
    /// Semantic weight given to label mismatches.
    pub w_lower: f64,
    /// Geman–McClure scale; `None` ties it to the correspondence threshold.
    pub gm_scale: Option<f64>,
    pub max_iterations: usize,
    /// Stop once the twist increment norm drops below this.
    pub convergence_eps: f64,
    pub anchor_mode: AnchorMode,
    pub use_occ_weight: bool,
    pub use_sem_weight: bool,
    /// Recompute the planar mixing weight every iteration instead of fixing
    /// it after the first correspondence search.
    pub recompute_mix_alpha: bool,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            tau_planar: 0.1,
            min_points_for_plane: 5,
            gamma: 1.5,
            w_lower: 0.25,
            gm_scale: None,
            max_iterations: 100,
            convergence_eps: 1e-6,
            anchor_mode: AnchorMode::First,
            use_occ_weight: true,
            use_sem_weight: true,
            recompute_mix_alpha: true,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<(), RegistrationError> {
        let bad = |m: String| Err(RegistrationError::InvalidConfig(m));
        if !(self.tau_planar > 0.0 && self.tau_planar <= 1.0 / 3.0) {
            return bad(format!("tau_planar must lie in (0, 1/3], got {}", self.tau_planar));
        }
        if self.min_points_for_plane < 3 {
            return bad("min_points_for_plane must be at least 3".into());
        }
        if !(self.gamma >= 0.0) {
            return bad(format!("gamma must be >= 0, got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.w_lower) {
            return bad(format!("w_lower must lie in [0, 1], got {}", self.w_lower));
        }
        if let Some(c) = self.gm_scale {
            if !(c > 0.0) {
                return bad(format!("gm_scale must be positive, got {c}"));
            }
        }
        if self.max_iterations == 0 {
            return bad("max_iterations must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurfaceKind {
    Planar,
    NonPlanar,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Classification {
    pub kind: SurfaceKind,
    pub normal: Option<Vec3>,
    /// Local surface variation `λ3 / (λ1 + λ2 + λ3)`, when computed.
    pub surface_variation: Option<f64>,
}

impl Classification {
    const NON_PLANAR: Self = Self {
        kind: SurfaceKind::NonPlanar,
        normal: None,
        surface_variation: None,
    };
}

/// Planarity test on a voxel's covariance. The normal is the eigenvector of
/// the smallest eigenvalue with its first nonzero component made positive.
pub fn classify_voxel(v: &VoxelData, cfg: &RegistrationConfig) -> Classification {
    if v.count() < cfg.min_points_for_plane {
        return Classification::NON_PLANAR;
    }
    classify_covariance(&v.moments().covariance(), cfg.tau_planar)
}

pub fn classify_covariance(cov: &Mat3, tau_planar: f64) -> Classification {
    let e = eig3_symmetric(cov);
    let sum: f64 = e.values.iter().sum();
    if sum < 1e-12 {
        return Classification::NON_PLANAR;
    }
    let tau = (e.values[2] / sum).max(0.0);
    if tau < tau_planar {
        Classification {
            kind: SurfaceKind::Planar,
            normal: Some(canonical_sign(e.vector(2).normalize())),
            surface_variation: Some(tau),
        }
    } else {
        Classification {
            kind: SurfaceKind::NonPlanar,
            normal: None,
            surface_variation: Some(tau),
        }
    }
}

fn canonical_sign(n: Vec3) -> Vec3 {
    match n.iter().find(|x| x.abs() > 1e-12) {
        Some(x) if *x < 0.0 => -n,
        _ => n,
    }
}

/// IRLS weight of the Geman–McClure loss, `(c² / (c² + r²))²`.
pub fn gm_weight(residual_norm: f64, c: f64) -> f64 {
    let c2 = c * c;
    let q = c2 / (c2 + residual_norm * residual_norm);
    q * q
}

pub fn occ_weight(p_occ: f64, gamma: f64) -> f64 {
    p_occ.powf(gamma)
}

/// Labels match when equal or when either side is unlabeled.
pub fn labels_match(c: ClassId, c_vox: ClassId) -> bool {
    c == c_vox || c == UNLABELED || c_vox == UNLABELED
}

pub fn sem_weight(c: ClassId, c_vox: ClassId, p_vox: f64, w_lower: f64) -> f64 {
    if labels_match(c, c_vox) {
        w_lower + (1.0 - w_lower) * p_vox
    } else {
        w_lower
    }
}

/// One scan point paired with a map voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct Correspondence {
    pub source_index: usize,
    /// Scan point in the map frame under the current estimate.
    pub source: Vec3,
    pub source_class: ClassId,
    pub key: VoxelKey,
    pub target_anchor: Vec3,
    pub kind: SurfaceKind,
    pub normal: Option<Vec3>,
    pub p_occ: f64,
    pub voxel_label: ClassId,
    pub voxel_label_prob: f64,
    pub w_gm: f64,
    pub w_occ: f64,
    pub w_sem: f64,
    pub weight: f64,
}

impl Correspondence {
    /// Scalar plane distance for planar pairs, Euclidean distance otherwise.
    pub fn residual_norm(&self) -> f64 {
        residual_norm(&self.source, &self.target_anchor, self.normal.as_ref())
    }
}

fn residual_norm(s: &Vec3, q: &Vec3, normal: Option<&Vec3>) -> f64 {
    match normal {
        Some(n) => n.dot(&(s - q)).abs(),
        None => (s - q).norm(),
    }
}

/// Nearest occupied anchor within `tau` of `p`: ties go to the smallest
/// key. Searches cubic shells of voxels outward and stops once no unvisited
/// voxel can hold a strictly closer anchor.
pub fn nearest_anchor<'g>(
    grid: &'g OccupancyGrid,
    p: &Vec3,
    tau: f64,
    mode: AnchorMode,
) -> Option<(VoxelKey, &'g VoxelData, Vec3)> {
    let s = grid.voxel_size();
    let kp = grid.key_of(p);
    let tau2 = tau * tau;
    let max_shell = (tau / s).ceil() as i32;
    let mut best: Option<(f64, VoxelKey, &VoxelData, Vec3)> = None;
    let consider = |k: VoxelKey, best: &mut Option<(f64, VoxelKey, &'g VoxelData, Vec3)>| {
        if let Some(v) = grid.get(&k) {
            if !v.is_occupied() {
                return;
            }
            let a = v.anchor_for(mode, &k, s);
            let d2 = (a - p).norm_squared();
            if d2 > tau2 {
                return;
            }
            let better = match best {
                None => true,
                Some((bd, bk, _, _)) => d2 < *bd || (d2 == *bd && k < *bk),
            };
            if better {
                *best = Some((d2, k, v, a));
            }
        }
    };
    for shell in 0..=max_shell {
        for dx in -shell..=shell {
            for dy in -shell..=shell {
                let edge = dx.abs() == shell || dy.abs() == shell;
                let mut visit_z = |dz: i32| {
                    consider(VoxelKey::new(kp.x + dx, kp.y + dy, kp.z + dz), &mut best);
                };
                if edge {
                    (-shell..=shell).for_each(&mut visit_z);
                } else {
                    visit_z(-shell);
                    if shell != 0 {
                        visit_z(shell);
                    }
                }
            }
        }
        if let Some((d2, ..)) = best {
            let lo = (0..3)
                .map(|a| {
                    let k = [kp.x, kp.y, kp.z][a];
                    let below = p[a] - f64::from(k - shell) * s;
                    let above = f64::from(k + shell + 1) * s - p[a];
                    below.min(above)
                })
                .fold(f64::INFINITY, f64::min);
            if d2 < lo * lo {
                break;
            }
        }
    }
    best.map(|(_, k, v, a)| (k, v, a))
}

/// Correspondences for scan points already expressed in the map frame.
/// Output follows scan order; points without an anchor within `tau_corr`
/// are dropped.
pub fn find_correspondences(
    points: &[Vec3],
    classes: &[ClassId],
    grid: &OccupancyGrid,
    tau_corr: f64,
    cfg: &RegistrationConfig,
) -> Vec<Correspondence> {
    let c = cfg.gm_scale.unwrap_or(tau_corr);
    points
        .par_iter()
        .zip(classes.par_iter())
        .enumerate()
        .filter_map(|(i, (p, &class))| {
            let (key, voxel, anchor) = nearest_anchor(grid, p, tau_corr, cfg.anchor_mode)?;
            let cls = classify_voxel(voxel, cfg);
            let p_occ = voxel.occupancy();
            let (label, label_prob) = (voxel.label(), voxel.label_prob());
            let w_gm = gm_weight(residual_norm(p, &anchor, cls.normal.as_ref()), c);
            let w_occ = if cfg.use_occ_weight {
                occ_weight(p_occ, cfg.gamma)
            } else {
                1.0
            };
            let w_sem = if cfg.use_sem_weight {
                sem_weight(class, label, label_prob, cfg.w_lower)
            } else {
                1.0
            };
            Some(Correspondence {
                source_index: i,
                source: *p,
                source_class: class,
                key,
                target_anchor: anchor,
                kind: cls.kind,
                normal: cls.normal,
                p_occ,
                voxel_label: label,
                voxel_label_prob: label_prob,
                w_gm,
                w_occ,
                w_sem,
                weight: w_gm * w_occ * w_sem,
            })
        })
        .collect()
}

/// `N_pl / (N_pl + N_po)`, or 0 without correspondences.
pub fn mix_alpha(n_planar: usize, n_nonplanar: usize) -> f64 {
    let total = n_planar + n_nonplanar;
    if total == 0 {
        0.0
    } else {
        n_planar as f64 / total as f64
    }
}

pub fn count_kinds(corrs: &[Correspondence]) -> (usize, usize) {
    let planar = corrs.iter().filter(|c| c.kind == SurfaceKind::Planar).count();
    (planar, corrs.len() - planar)
}

/// Jacobian row of `nᵀ(s − q)` with respect to a left twist `(ω, v)`.
pub fn plane_jacobian(s: &Vec3, n: &Vec3) -> Matrix1x6<f64> {
    let a = s.cross(n);
    Matrix1x6::new(a.x, a.y, a.z, n.x, n.y, n.z)
}

/// Jacobian of `s − q` with respect to a left twist `(ω, v)`.
pub fn point_jacobian(s: &Vec3) -> Matrix3x6<f64> {
    let mut j = Matrix3x6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(s)));
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&Mat3::identity());
    j
}

/// Gauss–Newton normal equations `H ξ = g` and the mixed weighted cost.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalEquations {
    pub h: Matrix6<f64>,
    pub g: Vector6<f64>,
    pub cost: f64,
}

/// Outcome of solving the normal equations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub twist: Twist,
    pub min_eigenvalue: f64,
    /// Set when the system was degenerate and Levenberg damping was applied.
    pub damped: bool,
}

impl NormalEquations {
    /// Accumulates in correspondence order; planar terms are scaled by
    /// `mix_alpha` and point terms by `1 − mix_alpha`.
    pub fn accumulate(corrs: &[Correspondence], mix_alpha: f64) -> Self {
        let mut h = Matrix6::zeros();
        let mut g = Vector6::zeros();
        let mut cost = 0.0;
        for c in corrs {
            match c.normal {
                Some(n) => {
                    let lw = mix_alpha * c.weight;
                    if lw == 0.0 {
                        continue;
                    }
                    let e = n.dot(&(c.source - c.target_anchor));
                    let j = plane_jacobian(&c.source, &n);
                    h += j.transpose() * j * lw;
                    g -= j.transpose() * (e * lw);
                    cost += lw * e * e;
                }
                None => {
                    let lw = (1.0 - mix_alpha) * c.weight;
                    if lw == 0.0 {
                        continue;
                    }
                    let e = c.source - c.target_anchor;
                    let j = point_jacobian(&c.source);
                    h += j.transpose() * j * lw;
                    g -= j.transpose() * e * lw;
                    cost += lw * e.norm_squared();
                }
            }
        }
        Self { h, g, cost }
    }

    fn min_eigen(&self) -> (f64, Vector6<f64>) {
        let eig = SymmetricEigen::new(self.h);
        let (i, v) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .expect("6 eigenvalues");
        (*v, eig.eigenvectors.column(i).into_owned())
    }

    pub fn check_conditioning(&self) -> Result<f64, RegistrationError> {
        let (min, dir) = self.min_eigen();
        if min < DEGENERACY_EPS || !min.is_finite() {
            Err(RegistrationError::DegenerateSystem {
                min_eigenvalue: min,
                direction: dir.into(),
            })
        } else {
            Ok(min)
        }
    }

    /// Solves `H ξ = g`. A degenerate system is retried once with damping
    /// `μ = 1e-6 · trace(H) / 6`; failure after that is reported.
    pub fn solve(&self) -> Result<Step, RegistrationError> {
        let (min, dir) = self.min_eigen();
        let degenerate = RegistrationError::DegenerateSystem {
            min_eigenvalue: min,
            direction: dir.into(),
        };
        let (h, damped) = if min >= DEGENERACY_EPS && min.is_finite() {
            (self.h, false)
        } else {
            let mu = 1e-6 * self.h.trace() / 6.0;
            if !(mu > 0.0 && mu.is_finite()) {
                return Err(degenerate);
            }
            (self.h + Matrix6::identity() * mu, true)
        };
        let x = h.cholesky().ok_or(degenerate.clone())?.solve(&self.g);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(degenerate);
        }
        Ok(Step {
            twist: Twist::from_vector(&x),
            min_eigenvalue: min,
            damped,
        })
    }
}

/// Normal equations with the degeneracy check applied.
pub fn build_system(corrs: &[Correspondence], mix_alpha: f64) -> Result<NormalEquations, RegistrationError> {
    let sys = NormalEquations::accumulate(corrs, mix_alpha);
    sys.check_conditioning()?;
    Ok(sys)
}

/// Mixed weighted cost after moving every source point by `delta`, with
/// pairs and weights held fixed.
pub fn fixed_pair_cost(corrs: &[Correspondence], mix_alpha: f64, delta: &Pose) -> f64 {
    corrs
        .iter()
        .map(|c| {
            let s = delta.transform_point(&c.source);
            match c.normal {
                Some(n) => {
                    let e = n.dot(&(s - c.target_anchor));
                    mix_alpha * c.weight * e * e
                }
                None => (1.0 - mix_alpha) * c.weight * (s - c.target_anchor).norm_squared(),
            }
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationStats {
    pub n_planar: usize,
    pub n_nonplanar: usize,
    pub mix_alpha: f64,
    /// Mixed weighted cost before the step.
    pub cost: f64,
    /// Cost of the accepted step on the same pairs and weights.
    pub cost_after: f64,
    pub correspondence_count: usize,
    pub step_norm: f64,
    pub step_halvings: u32,
    /// The normal matrix had an eigenvalue below [`DEGENERACY_EPS`].
    pub degenerate: bool,
    pub min_eigenvalue: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Registration {
    pub pose: Pose,
    pub stats: Vec<IterationStats>,
}

impl Registration {
    pub fn iterations(&self) -> usize {
        self.stats.len()
    }

    pub fn any_degenerate(&self) -> bool {
        self.stats.iter().any(|s| s.degenerate)
    }
}

const MAX_HALVINGS: u32 = 30;

/// Iterative registration of a sensor-frame scan starting from `init`.
///
/// Planarity is evaluated on the map as given; the map is not modified.
/// Returns `init` with no iterations if the map has no occupied voxel.
pub fn register_scan(
    scan: &Scan,
    grid: &OccupancyGrid,
    init: &Pose,
    tau_corr: f64,
    cfg: &RegistrationConfig,
) -> Result<Registration, RegistrationError> {
    cfg.validate()?;
    let mut pose = *init;
    let mut stats = Vec::new();
    if scan.is_empty() || grid.iter().all(|(_, v)| !v.is_occupied()) {
        return Ok(Registration { pose, stats });
    }
    let mut fixed_alpha: Option<f64> = None;
    let mut moved: Vec<Vec3> = Vec::with_capacity(scan.len());
    for _ in 0..cfg.max_iterations {
        moved.clear();
        moved.extend(scan.points().iter().map(|p| pose.transform_point(p)));
        let corrs = find_correspondences(&moved, scan.classes(), grid, tau_corr, cfg);
        if corrs.is_empty() {
            return Err(RegistrationError::NoCorrespondences);
        }
        let (n_planar, n_nonplanar) = count_kinds(&corrs);
        let alpha = match fixed_alpha {
            Some(a) if !cfg.recompute_mix_alpha => a,
            _ => mix_alpha(n_planar, n_nonplanar),
        };
        fixed_alpha.get_or_insert(alpha);

        let sys = NormalEquations::accumulate(&corrs, alpha);
        let step = sys.solve()?;
        let mut twist = step.twist;
        let mut delta = exp_map(&twist);
        let mut cost_after = fixed_pair_cost(&corrs, alpha, &delta);
        let mut halvings = 0;
        while cost_after > sys.cost && halvings < MAX_HALVINGS {
            twist = twist.scaled(0.5);
            delta = exp_map(&twist);
            cost_after = fixed_pair_cost(&corrs, alpha, &delta);
            halvings += 1;
        }
        if cost_after > sys.cost {
            twist = Twist::zero();
            delta = Pose::identity();
            cost_after = sys.cost;
        }
        pose = delta.compose(&pose);
        let step_norm = twist.norm();
        stats.push(IterationStats {
            n_planar,
            n_nonplanar,
            mix_alpha: alpha,
            cost: sys.cost,
            cost_after,
            correspondence_count: corrs.len(),
            step_norm,
            step_halvings: halvings,
            degenerate: step.damped,
            min_eigenvalue: step.min_eigenvalue,
        });
        if step_norm < cfg.convergence_eps {
            break;
        }
    }
    Ok(Registration { pose, stats })
}
