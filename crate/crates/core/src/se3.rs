//! Rigid-body math used by the odometry pipeline.
//!
//! Poses map sensor-frame points into the map frame. Increments are
//! parameterized by a twist `(ω, v)` and applied on the left:
//! `T ← exp(ξ) ∘ T`.

use std::f64::consts::PI;
use std::ops::Mul;

use nalgebra::{Matrix3, Vector3, Vector6};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Below this rotation angle the closed-form coefficients switch to Taylor series.
const SMALL_ANGLE: f64 = 1e-8;
/// Maximum tolerated `‖RᵀR − I‖` before a composed rotation is re-projected.
const ORTHONORMAL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum GeometryError {
    #[error("rotation angle {0} rad is too close to π for a unique logarithm")]
    AngleNearPi(f64),
}

/// Skew-symmetric matrix `[w]ₓ` such that `[w]ₓ p = w × p`.
pub fn skew(w: &Vec3) -> Mat3 {
    Mat3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Local 6-dof increment: rotational part first, translational part second.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Twist {
    pub rotation: Vec3,
    pub translation: Vec3,
}

impl Twist {
    pub fn new(rotation: Vec3, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_vector(x: &Vector6<f64>) -> Self {
        Self {
            rotation: Vec3::new(x[0], x[1], x[2]),
            translation: Vec3::new(x[3], x[4], x[5]),
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        let (w, v) = (self.rotation, self.translation);
        Vector6::new(w.x, w.y, w.z, v.x, v.y, v.z)
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            rotation: self.rotation * s,
            translation: self.translation * s,
        }
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }

    pub fn exp(&self) -> Pose {
        exp_map(self)
    }
}

/// Rigid transform `p ↦ R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self {
            rotation: Mat3::identity(),
            translation,
        }
    }

    /// Rotation about the z axis followed by a translation.
    pub fn from_yaw(yaw: f64, translation: Vec3) -> Self {
        exp_map(&Twist::new(Vec3::new(0.0, 0.0, yaw), Vec3::zeros())).with_translation(translation)
    }

    /// Intrinsic roll-pitch-yaw (radians), `R = Rz(yaw) Ry(pitch) Rx(roll)`.
    pub fn from_rpy(roll: f64, pitch: f64, yaw: f64, translation: Vec3) -> Self {
        let rx = exp_map(&Twist::new(Vec3::new(roll, 0.0, 0.0), Vec3::zeros())).rotation;
        let ry = exp_map(&Twist::new(Vec3::new(0.0, pitch, 0.0), Vec3::zeros())).rotation;
        let rz = exp_map(&Twist::new(Vec3::new(0.0, 0.0, yaw), Vec3::zeros())).rotation;
        Self::new(rz * ry * rx, translation)
    }

    pub fn with_translation(mut self, translation: Vec3) -> Self {
        self.translation = translation;
        self
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        let mut rotation = self.rotation * other.rotation;
        if orthonormality_error(&rotation) > ORTHONORMAL_TOL {
            rotation = project_to_rotation(&rotation);
        }
        Pose {
            rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Rotation angle in `[0, π]`.
    pub fn rotation_angle(&self) -> f64 {
        rotation_angle(&self.rotation)
    }

    pub fn log(&self) -> Result<Twist, GeometryError> {
        log_map(self)
    }

    /// Row-major top 3×4 block of the homogeneous matrix.
    pub fn to_row_major_3x4(&self) -> [f64; 12] {
        let (r, t) = (&self.rotation, &self.translation);
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
        ]
    }

    pub fn from_row_major_3x4(v: &[f64; 12]) -> Pose {
        Pose {
            rotation: Mat3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]),
            translation: Vec3::new(v[3], v[7], v[11]),
        }
    }

    /// Nearest proper rotation to the stored rotation block.
    pub fn renormalized(&self) -> Pose {
        Pose {
            rotation: project_to_rotation(&self.rotation),
            translation: self.translation,
        }
    }

    pub fn orthonormality_error(&self) -> f64 {
        orthonormality_error(&self.rotation)
    }
}

impl Mul for Pose {
    type Output = Pose;

    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl Mul<&Pose> for &Pose {
    type Output = Pose;

    fn mul(self, rhs: &Pose) -> Pose {
        self.compose(rhs)
    }
}

fn orthonormality_error(r: &Mat3) -> f64 {
    (r.transpose() * r - Mat3::identity()).amax()
}

fn project_to_rotation(r: &Mat3) -> Mat3 {
    let svd = r.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Mat3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * vt
}

fn rotation_angle(r: &Mat3) -> f64 {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let sin = vee_antisymmetric(r).norm();
    sin.atan2(cos)
}

/// `vee((R − Rᵀ)/2)`, which equals `sin θ · axis` for a rotation.
fn vee_antisymmetric(r: &Mat3) -> Vec3 {
    Vec3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    ) * 0.5
}

/// SE(3) exponential: Rodrigues for the rotation, left Jacobian of SO(3)
/// for the translation.
pub fn exp_map(xi: &Twist) -> Pose {
    let w = xi.rotation;
    let theta_sq = w.norm_squared();
    let theta = theta_sq.sqrt();
    // R = I + a K + b K², V = I + b K + c K²
    let (a, b, c) = if theta < SMALL_ANGLE {
        (
            1.0 - theta_sq / 6.0,
            0.5 - theta_sq / 24.0,
            1.0 / 6.0 - theta_sq / 120.0,
        )
    } else {
        let s = theta.sin();
        let half_sin = (0.5 * theta).sin();
        (
            s / theta,
            2.0 * half_sin * half_sin / theta_sq,
            (theta - s) / (theta_sq * theta),
        )
    };
    let k = skew(&w);
    let k2 = k * k;
    let id = Mat3::identity();
    let rotation = id + k * a + k2 * b;
    let v = id + k * b + k2 * c;
    Pose {
        rotation,
        translation: v * xi.translation,
    }
}

/// SE(3) logarithm, the inverse of [`exp_map`] for rotation angles below π.
pub fn log_map(pose: &Pose) -> Result<Twist, GeometryError> {
    let r = &pose.rotation;
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let sin_axis = vee_antisymmetric(r);
    let sin = sin_axis.norm();
    let theta = sin.atan2(cos);
    if theta > PI - 1e-6 {
        return Err(GeometryError::AngleNearPi(theta));
    }
    let theta_sq = theta * theta;
    let (w, d) = if theta < SMALL_ANGLE {
        (
            sin_axis * (1.0 + theta_sq / 6.0),
            1.0 / 12.0 + theta_sq / 720.0,
        )
    } else {
        let half = 0.5 * theta;
        (
            sin_axis * (theta / sin),
            (1.0 - half * half.cos() / half.sin()) / theta_sq,
        )
    };
    let k = skew(&w);
    let v_inv = Mat3::identity() - k * 0.5 + (k * k) * d;
    Ok(Twist {
        rotation: w,
        translation: v_inv * pose.translation,
    })
}

/// Eigendecomposition of a symmetric 3×3 matrix.
///
/// `values` are sorted descending; `vectors` holds the matching unit
/// eigenvectors as columns and forms a right-handed orthonormal basis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymmetricEigen3 {
    pub values: [f64; 3],
    pub vectors: Mat3,
}

impl SymmetricEigen3 {
    pub fn vector(&self, i: usize) -> Vec3 {
        self.vectors.column(i).into_owned()
    }
}

/// Closed-form symmetric 3×3 eigensolver with a cyclic Jacobi fallback.
///
/// The caller is responsible for passing a symmetric matrix; only the upper
/// triangle is read.
pub fn eig3_symmetric(m: &Mat3) -> SymmetricEigen3 {
    let a = Mat3::new(
        m[(0, 0)],
        m[(0, 1)],
        m[(0, 2)],
        m[(0, 1)],
        m[(1, 1)],
        m[(1, 2)],
        m[(0, 2)],
        m[(1, 2)],
        m[(2, 2)],
    );
    let scale = a.amax();
    if scale == 0.0 || !scale.is_finite() {
        return sorted(
            [a[(0, 0)], a[(1, 1)], a[(2, 2)]],
            Mat3::identity(),
        );
    }
    if a[(0, 1)] == 0.0 && a[(0, 2)] == 0.0 && a[(1, 2)] == 0.0 {
        return sorted([a[(0, 0)], a[(1, 1)], a[(2, 2)]], Mat3::identity());
    }
    let scaled = a / scale;
    let result = closed_form(&scaled)
        .filter(|e| residual_ok(&scaled, e))
        .unwrap_or_else(|| jacobi(&scaled));
    SymmetricEigen3 {
        values: result.values.map(|v| v * scale),
        vectors: result.vectors,
    }
}

fn sorted(values: [f64; 3], vectors: Mat3) -> SymmetricEigen3 {
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| values[j].total_cmp(&values[i]));
    let mut out_vectors = Mat3::zeros();
    for (dst, &src) in order.iter().enumerate() {
        out_vectors.set_column(dst, &vectors.column(src));
    }
    if out_vectors.determinant() < 0.0 {
        let flipped = -out_vectors.column(2);
        out_vectors.set_column(2, &flipped);
    }
    SymmetricEigen3 {
        values: order.map(|i| values[i]),
        vectors: out_vectors,
    }
}

fn residual_ok(a: &Mat3, e: &SymmetricEigen3) -> bool {
    (0..3).all(|i| {
        let v = e.vector(i);
        (a * v - v * e.values[i]).norm() <= 1e-11
    }) && (e.vectors.transpose() * e.vectors - Mat3::identity()).amax() <= 1e-12
}

/// Trigonometric eigenvalues, then the eigenvector of the best isolated
/// eigenvalue by row cross products, then a 2×2 solve in its complement.
fn closed_form(a: &Mat3) -> Option<SymmetricEigen3> {
    let q = a.trace() / 3.0;
    let p1 = a[(0, 1)].powi(2) + a[(0, 2)].powi(2) + a[(1, 2)].powi(2);
    let p2 = (a[(0, 0)] - q).powi(2) + (a[(1, 1)] - q).powi(2) + (a[(2, 2)] - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    if p == 0.0 {
        return Some(sorted([q, q, q], Mat3::identity()));
    }
    let b = (a - Mat3::identity() * q) / p;
    let r = (b.determinant() * 0.5).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    let l1 = q + 2.0 * p * phi.cos();
    let l3 = q + 2.0 * p * (phi + 2.0 * PI / 3.0).cos();
    let l2 = 3.0 * q - l1 - l3;

    // Pick whichever extreme eigenvalue is farther from the middle one.
    let (isolated, _) = if l1 - l2 >= l2 - l3 { (l1, 0) } else { (l3, 2) };
    let v_iso = null_vector(&(a - Mat3::identity() * isolated))?;

    let (u, w) = complement_basis(&v_iso);
    let au = a * u;
    let aw = a * w;
    let (m00, m01, m11) = (u.dot(&au), u.dot(&aw), w.dot(&aw));
    let angle = 0.5 * (2.0 * m01).atan2(m00 - m11);
    let (s, c) = angle.sin_cos();
    let e_big = u * c + w * s;
    let e_small = w * c - u * s;

    let vectors = Mat3::from_columns(&[v_iso, e_big, e_small]);
    let values = [
        v_iso.dot(&(a * v_iso)),
        e_big.dot(&(a * e_big)),
        e_small.dot(&(a * e_small)),
    ];
    Some(sorted(values, vectors))
}

/// Unit vector spanning the null space of a rank-2 symmetric matrix.
fn null_vector(m: &Mat3) -> Option<Vec3> {
    let r0 = m.row(0).transpose();
    let r1 = m.row(1).transpose();
    let r2 = m.row(2).transpose();
    let candidates = [r0.cross(&r1), r0.cross(&r2), r1.cross(&r2)];
    let best = candidates
        .iter()
        .max_by(|x, y| x.norm_squared().total_cmp(&y.norm_squared()))?;
    let n = best.norm();
    if n <= 1e-300 || !n.is_finite() {
        return None;
    }
    Some(best / n)
}

fn complement_basis(v: &Vec3) -> (Vec3, Vec3) {
    let u = if v.x.abs() > v.y.abs() {
        Vec3::new(-v.z, 0.0, v.x) / (v.x * v.x + v.z * v.z).sqrt()
    } else {
        Vec3::new(0.0, v.z, -v.y) / (v.y * v.y + v.z * v.z).sqrt()
    };
    (u, v.cross(&u))
}

fn jacobi(a: &Mat3) -> SymmetricEigen3 {
    let mut m = *a;
    let mut v = Mat3::identity();
    for _ in 0..64 {
        let off = m[(0, 1)].powi(2) + m[(0, 2)].powi(2) + m[(1, 2)].powi(2);
        if off < 1e-36 {
            break;
        }
        for (p, q) in [(0usize, 1usize), (0, 2), (1, 2)] {
            let apq = m[(p, q)];
            if apq == 0.0 {
                continue;
            }
            let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            let mut rot = Mat3::identity();
            rot[(p, p)] = c;
            rot[(q, q)] = c;
            rot[(p, q)] = s;
            rot[(q, p)] = -s;
            m = rot.transpose() * m * rot;
            m[(p, q)] = 0.0;
            m[(q, p)] = 0.0;
            v *= rot;
        }
    }
    sorted([m[(0, 0)], m[(1, 1)], m[(2, 2)]], v)
}

/// Running first and second moments of a point set.
///
/// The second moment is kept as the unnormalized scatter matrix
/// `Σ (p − μ)(p − μ)ᵀ` so updates stay exact under Welford's recurrence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    count: u64,
    mean: Vec3,
    scatter: Mat3,
}

impl Default for Moments {
    fn default() -> Self {
        Self::new()
    }
}

impl Moments {
    pub fn new() -> Self {
        Self {
            count: 0,
            mean: Vec3::zeros(),
            scatter: Mat3::zeros(),
        }
    }

    pub fn from_parts(count: u64, mean: Vec3, scatter: Mat3) -> Self {
        Self {
            count,
            mean,
            scatter,
        }
    }

    pub fn push(&mut self, p: &Vec3) {
        self.count += 1;
        let n = self.count as f64;
        let delta = p - self.mean;
        self.mean += delta / n;
        self.scatter += (delta * delta.transpose()) * ((n - 1.0) / n);
    }

    pub fn with_point(mut self, p: &Vec3) -> Self {
        self.push(p);
        self
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> Vec3 {
        self.mean
    }

    pub fn scatter(&self) -> Mat3 {
        self.scatter
    }

    /// Population covariance `scatter / count`; zero for an empty set.
    pub fn covariance(&self) -> Mat3 {
        if self.count == 0 {
            Mat3::zeros()
        } else {
            let c = self.scatter / self.count as f64;
            (c + c.transpose()) * 0.5
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix4;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Matrix exponential of the 4×4 twist generator by scaling and squaring
    /// a truncated Taylor series.
    fn expm_oracle(xi: &Twist) -> Matrix4<f64> {
        let mut g = Matrix4::zeros();
        g.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&xi.rotation));
        g.fixed_view_mut::<3, 1>(0, 3).copy_from(&xi.translation);
        let squarings = 12;
        let a = g / f64::from(1u32 << squarings);
        let mut term = Matrix4::identity();
        let mut sum = Matrix4::identity();
        for k in 1..30 {
            term = term * a / k as f64;
            sum += term;
        }
        for _ in 0..squarings {
            sum = sum * sum;
        }
        sum
    }

    fn random_twist(rng: &mut ChaCha8Rng, max_rot: f64) -> Twist {
        loop {
            let w = Vec3::new(
                rng.random_range(-max_rot..max_rot),
                rng.random_range(-max_rot..max_rot),
                rng.random_range(-max_rot..max_rot),
            );
            if w.norm() <= max_rot {
                let v = Vec3::new(
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                    rng.random_range(-5.0..5.0),
                );
                return Twist::new(w, v);
            }
        }
    }

    #[test]
    fn exp_of_zero_is_identity() {
        assert_eq!(exp_map(&Twist::zero()), Pose::identity());
    }

    #[test]
    fn exp_quarter_turn_about_z() {
        let p = exp_map(&Twist::new(Vec3::new(0.0, 0.0, PI / 2.0), Vec3::zeros()));
        let x = p.transform_point(&Vec3::x());
        assert!((x - Vec3::y()).norm() < 1e-15);
        assert_eq!(p.translation, Vec3::zeros());
    }

    #[test]
    fn exp_matches_series_oracle() {
        let xi = Twist::new(Vec3::new(0.1, -0.2, 0.3), Vec3::new(1.0, 2.0, 3.0));
        let p = exp_map(&xi);
        let oracle = expm_oracle(&xi);
        let r_err = (p.rotation - oracle.fixed_view::<3, 3>(0, 0)).amax();
        let t_err = (p.translation - oracle.fixed_view::<3, 1>(0, 3)).amax();
        assert!(r_err < 1e-10, "rotation error {r_err}");
        assert!(t_err < 1e-10, "translation error {t_err}");
    }

    #[test]
    fn exp_matches_oracle_near_identity() {
        for scale in [1e-3, 1e-6, 1e-9, 1e-12] {
            let xi = Twist::new(Vec3::new(0.3, -0.1, 0.2) * scale, Vec3::new(-1.0, 0.5, 2.0));
            let p = exp_map(&xi);
            let oracle = expm_oracle(&xi);
            assert!((p.rotation - oracle.fixed_view::<3, 3>(0, 0)).amax() < 1e-12);
            assert!((p.translation - oracle.fixed_view::<3, 1>(0, 3)).amax() < 1e-12);
        }
    }

    #[test]
    fn log_of_identity_and_pure_translation() {
        assert_eq!(log_map(&Pose::identity()).unwrap(), Twist::zero());
        let t = log_map(&Pose::from_translation(Vec3::new(0.0, 0.0, 5.0))).unwrap();
        assert_eq!(t.rotation, Vec3::zeros());
        assert_eq!(t.translation, Vec3::new(0.0, 0.0, 5.0));
    }

    #[test]
    fn log_rejects_half_turn() {
        let p = exp_map(&Twist::new(Vec3::new(PI, 0.0, 0.0), Vec3::zeros()));
        assert!(matches!(log_map(&p), Err(GeometryError::AngleNearPi(_))));
    }

    #[test]
    fn exp_log_round_trip_1000_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let xi = random_twist(&mut rng, 3.0);
            let back = log_map(&exp_map(&xi)).unwrap();
            let err = (back.to_vector() - xi.to_vector()).norm();
            assert!(err < 1e-9, "round trip error {err} for {xi:?}");
        }
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let p = exp_map(&random_twist(&mut rng, 3.0));
            let id = p.compose(&p.inverse());
            assert!((id.rotation - Mat3::identity()).amax() < 1e-9);
            assert!(id.translation.amax() < 1e-9);
        }
    }

    #[test]
    fn long_composition_chain_stays_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut acc = Pose::identity();
        for _ in 0..10_000 {
            acc = acc.compose(&exp_map(&random_twist(&mut rng, 0.5)));
        }
        assert!(acc.orthonormality_error() < 1e-9);
        assert!((acc.rotation.determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn compose_acts_like_function_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let a = exp_map(&random_twist(&mut rng, 3.0));
            let b = exp_map(&random_twist(&mut rng, 3.0));
            let p = Vec3::new(rng.random(), rng.random(), rng.random()) * 10.0;
            let lhs = a.compose(&b).transform_point(&p);
            let rhs = a.transform_point(&b.transform_point(&p));
            assert!((lhs - rhs).amax() < 1e-10);
        }
    }

    #[test]
    fn eig3_diagonal() {
        let e = eig3_symmetric(&Mat3::from_diagonal(&Vec3::new(1.0, 3.0, 2.0)));
        assert_eq!(e.values, [3.0, 2.0, 1.0]);
        assert_eq!(e.vector(0).map(f64::abs), Vec3::y());
        assert_eq!(e.vector(1).map(f64::abs), Vec3::z());
        assert_eq!(e.vector(2).map(f64::abs), Vec3::x());
    }

    #[test]
    fn eig3_planar_covariance_has_zero_smallest_value() {
        let mut m = Moments::new();
        for (x, y) in [(0.0, 0.0), (1.0, 0.2), (0.3, 0.9), (-0.4, 0.5), (0.7, -0.6)] {
            m.push(&Vec3::new(x, y, 0.0));
        }
        let e = eig3_symmetric(&m.covariance());
        assert!(e.values[2].abs() < 1e-15);
        assert!((e.vector(2).z.abs() - 1.0).abs() < 1e-12);
    }

    fn random_spd(rng: &mut ChaCha8Rng) -> Mat3 {
        let mut a = Mat3::zeros();
        for v in a.iter_mut() {
            *v = rng.random_range(-2.0..2.0);
        }
        a * a.transpose() + Mat3::identity() * rng.random_range(0.0..0.1)
    }

    fn check_decomposition(m: &Mat3) {
        let e = eig3_symmetric(m);
        let scale = m.norm().max(1.0);
        for i in 0..3 {
            let v = e.vector(i);
            assert!((m * v - v * e.values[i]).norm() <= 1e-8 * scale, "residual for {m}");
        }
        assert!(e.values[0] >= e.values[1] && e.values[1] >= e.values[2]);
        assert!((e.vectors.transpose() * e.vectors - Mat3::identity()).amax() < 1e-9);
        let rebuilt = e.vectors * Mat3::from_diagonal(&Vec3::from(e.values)) * e.vectors.transpose();
        assert!((rebuilt - m).amax() < 1e-8 * scale);
        let sum: f64 = e.values.iter().sum();
        assert!((sum - m.trace()).abs() < 1e-9 * scale);
        let prod: f64 = e.values.iter().product();
        assert!((prod - m.determinant()).abs() < 1e-8 * scale.powi(3));
    }

    #[test]
    fn eig3_random_spd_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..2000 {
            check_decomposition(&random_spd(&mut rng));
        }
    }

    #[test]
    fn eig3_repeated_eigenvalues() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for values in [[2.0, 2.0, 1.0], [1.0, 1.0, 1.0], [5.0, 1.0, 1.0], [1e-9, 0.0, 0.0]] {
            let q = exp_map(&random_twist(&mut rng, 3.0)).rotation;
            let m = q * Mat3::from_diagonal(&Vec3::from(values)) * q.transpose();
            let m = (m + m.transpose()) * 0.5;
            check_decomposition(&m);
        }
    }

    #[test]
    fn moments_single_point_and_two_points() {
        let p = Vec3::new(1.0, -2.0, 3.0);
        let m = Moments::new().with_point(&p);
        assert_eq!(m.count(), 1);
        assert_eq!(m.mean(), p);
        assert_eq!(m.scatter(), Mat3::zeros());

        let m = Moments::new()
            .with_point(&Vec3::zeros())
            .with_point(&Vec3::new(2.0, 0.0, 0.0));
        assert_eq!(m.mean(), Vec3::new(1.0, 0.0, 0.0));
        assert_eq!(m.covariance(), Mat3::from_diagonal(&Vec3::new(1.0, 0.0, 0.0)));
    }

    #[test]
    fn moments_match_two_pass_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let pts: Vec<Vec3> = (0..1000)
            .map(|_| Vec3::new(rng.random_range(10.0..11.0), rng.random_range(-3.0..3.0), rng.random()))
            .collect();
        let mut m = Moments::new();
        pts.iter().for_each(|p| m.push(p));

        let mean = pts.iter().sum::<Vec3>() / pts.len() as f64;
        let scatter = pts
            .iter()
            .map(|p| (p - mean) * (p - mean).transpose())
            .sum::<Mat3>();
        assert!((m.mean() - mean).norm() <= 1e-9 * mean.norm());
        assert!((m.scatter() - scatter).norm() <= 1e-9 * scatter.norm());
    }

    proptest! {
        #[test]
        fn moments_covariance_is_psd(pts in prop::collection::vec(
            (-100.0f64..100.0, -100.0f64..100.0, -100.0f64..100.0), 1..60)) {
            let mut m = Moments::new();
            for (x, y, z) in &pts {
                m.push(&Vec3::new(*x, *y, *z));
            }
            let e = eig3_symmetric(&m.covariance());
            let scale = m.covariance().amax().max(1.0);
            prop_assert!(e.values[2] >= -1e-12 * scale);
        }

        #[test]
        fn round_trip_property(wx in -1.7f64..1.7, wy in -1.7f64..1.7, wz in -1.7f64..1.7,
                               vx in -10.0f64..10.0, vy in -10.0f64..10.0, vz in -10.0f64..10.0) {
            let xi = Twist::new(Vec3::new(wx, wy, wz), Vec3::new(vx, vy, vz));
            prop_assume!(xi.rotation.norm() <= 3.0);
            let back = log_map(&exp_map(&xi)).unwrap();
            prop_assert!((back.to_vector() - xi.to_vector()).norm() < 1e-9);
        }
    }
}
