//! Trajectory accuracy metrics.

use nalgebra::Matrix3;
use thiserror::Error;

use crate::se3::{Pose, Vec3};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("trajectory too short: {0}")]
    TooShort(String),
    #[error("trajectory lengths differ: {est} estimated vs {gt} reference poses")]
    LengthMismatch { est: usize, gt: usize },
}

/// Subsequence lengths of the driving benchmark protocol, in meters.
pub const KITTI_LENGTHS: [f64; 8] = [100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativeErrors {
    /// Mean translational error over all subsequences, percent of length.
    pub rte_percent: f64,
    /// Mean rotational error, degrees per 100 m.
    pub rre_deg_per_100m: f64,
    pub segments: usize,
}

fn check_lengths(est: &[Pose], gt: &[Pose]) -> Result<(), EvalError> {
    if est.len() != gt.len() {
        return Err(EvalError::LengthMismatch {
            est: est.len(),
            gt: gt.len(),
        });
    }
    Ok(())
}

/// Cumulative path length of the reference trajectory.
pub fn arc_lengths(poses: &[Pose]) -> Vec<f64> {
    let mut out = Vec::with_capacity(poses.len());
    let mut acc = 0.0;
    for (i, p) in poses.iter().enumerate() {
        if i > 0 {
            acc += (p.translation - poses[i - 1].translation).norm();
        }
        out.push(acc);
    }
    out
}

/// Relative errors over 100–800 m subsequences starting at every frame.
///
/// A subsequence of nominal length `L` starting at `i` ends at the first
/// frame whose arc length reaches `dist[i] + L`; errors are normalized by
/// `L`. Subsequences running past the end are skipped.
pub fn eval_rte_rre(est: &[Pose], gt: &[Pose]) -> Result<RelativeErrors, EvalError> {
    eval_rte_rre_with(est, gt, &KITTI_LENGTHS)
}

pub fn eval_rte_rre_with(est: &[Pose], gt: &[Pose], lengths: &[f64]) -> Result<RelativeErrors, EvalError> {
    check_lengths(est, gt)?;
    if gt.len() < 2 {
        return Err(EvalError::TooShort("fewer than two poses".into()));
    }
    let dist = arc_lengths(gt);
    let mut t_sum = 0.0;
    let mut r_sum = 0.0;
    let mut n = 0usize;
    for i in 0..gt.len() {
        for &len in lengths {
            let target = dist[i] + len;
            let Some(j) = (i..gt.len()).find(|&j| dist[j] >= target) else {
                continue;
            };
            let d_gt = gt[i].inverse().compose(&gt[j]);
            let d_est = est[i].inverse().compose(&est[j]);
            let err = d_est.inverse().compose(&d_gt);
            t_sum += err.translation.norm() / len;
            r_sum += err.rotation_angle() / len;
            n += 1;
        }
    }
    if n == 0 {
        return Err(EvalError::TooShort(format!(
            "reference path is {:.3} m, shorter than the smallest subsequence",
            dist.last().copied().unwrap_or(0.0)
        )));
    }
    Ok(RelativeErrors {
        rte_percent: 100.0 * t_sum / n as f64,
        rre_deg_per_100m: 100.0 * (r_sum / n as f64).to_degrees(),
        segments: n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ErrorStats {
    pub mean: f64,
    pub max: f64,
    pub rmse: f64,
    pub std: f64,
}

impl ErrorStats {
    pub fn from_errors(e: &[f64]) -> Self {
        if e.is_empty() {
            return Self::default();
        }
        let n = e.len() as f64;
        let mean = e.iter().sum::<f64>() / n;
        let rmse = (e.iter().map(|x| x * x).sum::<f64>() / n).sqrt();
        let var = e.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Self {
            mean,
            max: e.iter().copied().fold(0.0, f64::max),
            rmse,
            std: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AbsoluteErrors {
    pub ape: ErrorStats,
    pub rpe: ErrorStats,
    /// Rigid transform applied to the estimate before computing the APE.
    pub alignment: Pose,
}

/// Rigid transform `(R, t)` minimizing `Σ ‖R·src + t − dst‖²`.
pub fn align_rigid(src: &[Vec3], dst: &[Vec3]) -> Pose {
    assert_eq!(src.len(), dst.len());
    if src.is_empty() {
        return Pose::identity();
    }
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vec3>() / n;
    let cd = dst.iter().sum::<Vec3>() / n;
    let mut cov = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        cov += (d - cd) * (s - cs).transpose();
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut fix = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        fix[(2, 2)] = -1.0;
    }
    let r = u * fix * vt;
    Pose::new(r, cd - r * cs)
}

/// APE after rigid alignment of `est` to `gt`, and RPE over frame pairs
/// `(i, i + rpe_delta)`, both on the translational part.
pub fn eval_ape_rpe(est: &[Pose], gt: &[Pose], rpe_delta: usize) -> Result<AbsoluteErrors, EvalError> {
    check_lengths(est, gt)?;
    if gt.is_empty() {
        return Err(EvalError::TooShort("empty trajectory".into()));
    }
    if rpe_delta == 0 || gt.len() <= rpe_delta {
        return Err(EvalError::TooShort(format!(
            "{} poses cannot form pairs {rpe_delta} frames apart",
            gt.len()
        )));
    }
    let src: Vec<Vec3> = est.iter().map(|p| p.translation).collect();
    let dst: Vec<Vec3> = gt.iter().map(|p| p.translation).collect();
    let alignment = align_rigid(&src, &dst);
    let ape: Vec<f64> = src
        .iter()
        .zip(&dst)
        .map(|(s, d)| (alignment.transform_point(s) - d).norm())
        .collect();
    let rpe: Vec<f64> = (0..gt.len() - rpe_delta)
        .map(|i| {
            let d_est = est[i].inverse().compose(&est[i + rpe_delta]);
            let d_gt = gt[i].inverse().compose(&gt[i + rpe_delta]);
            d_gt.inverse().compose(&d_est).translation.norm()
        })
        .collect();
    Ok(AbsoluteErrors {
        ape: ErrorStats::from_errors(&ape),
        rpe: ErrorStats::from_errors(&rpe),
        alignment,
    })
}

/// Distance between final positions as a fraction of the reference path.
pub fn endpoint_drift(est: &[Pose], gt: &[Pose]) -> Result<f64, EvalError> {
    check_lengths(est, gt)?;
    let len = arc_lengths(gt).last().copied().unwrap_or(0.0);
    if len <= 0.0 {
        return Err(EvalError::TooShort("reference path has zero length".into()));
    }
    let (a, b) = (est.last().unwrap(), gt.last().unwrap());
    Ok((a.translation - b.translation).norm() / len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix4, Quaternion, UnitQuaternion};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn line(n: usize, step: f64) -> Vec<Pose> {
        (0..n)
            .map(|i| Pose::from_translation(Vec3::new(i as f64 * step, 0.0, 0.0)))
            .collect()
    }

    #[test]
    fn identical_trajectories_score_zero() {
        let gt = line(301, 1.0);
        let r = eval_rte_rre(&gt, &gt).unwrap();
        assert_eq!((r.rte_percent, r.rre_deg_per_100m), (0.0, 0.0));
    }

    #[test]
    fn scaled_line_gives_one_percent() {
        let gt = line(1001, 1.0);
        let est: Vec<Pose> = gt.iter().map(|p| Pose::from_translation(p.translation * 1.01)).collect();
        let r = eval_rte_rre(&est, &gt).unwrap();
        assert!((r.rte_percent - 1.0).abs() < 1e-6, "{}", r.rte_percent);
        assert_eq!(r.rre_deg_per_100m, 0.0);
    }

    #[test]
    fn heading_bias_matches_hand_average() {
        // 300 m line; from frame 150 on, the estimate is yawed 1° about that
        // frame's position. Pairs straddling frame 150 see exactly 1°.
        let gt = line(301, 1.0);
        let pivot = Vec3::new(150.0, 0.0, 0.0);
        let bias = Pose::from_translation(pivot)
            .compose(&Pose::from_yaw(1f64.to_radians(), Vec3::zeros()))
            .compose(&Pose::from_translation(-pivot));
        let est: Vec<Pose> = gt
            .iter()
            .enumerate()
            .map(|(k, p)| if k >= 150 { bias.compose(p) } else { *p })
            .collect();
        let r = eval_rte_rre(&est, &gt).unwrap();
        // L=100: 201 starts, 100 straddle; L=200: 101 starts, all straddle;
        // L=300: 1 start, straddles.
        let expected = (100.0 * 1.0 + 101.0 * 0.5 + 1.0 / 3.0) / 303.0;
        assert_eq!(r.segments, 303);
        assert!((r.rre_deg_per_100m - expected).abs() < 1e-9, "{} vs {expected}", r.rre_deg_per_100m);
    }

    #[test]
    fn short_path_is_rejected() {
        let gt = line(50, 1.0);
        assert!(matches!(eval_rte_rre(&gt, &gt), Err(EvalError::TooShort(_))));
        assert!(matches!(eval_rte_rre(&gt[..3], &gt), Err(EvalError::LengthMismatch { .. })));
    }

    fn random_traj(rng: &mut ChaCha8Rng, n: usize) -> Vec<Pose> {
        let mut p = Pose::identity();
        (0..n)
            .map(|_| {
                let step = Pose::from_rpy(
                    rng.random_range(-0.05..0.05),
                    rng.random_range(-0.02..0.02),
                    rng.random_range(-0.1..0.1),
                    Vec3::new(rng.random_range(0.5..2.0), rng.random_range(-0.2..0.2), rng.random_range(-0.1..0.1)),
                );
                p = p.compose(&step);
                p
            })
            .collect()
    }

    #[test]
    fn relative_errors_ignore_a_global_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let gt = random_traj(&mut rng, 400);
        let est: Vec<Pose> = gt
            .iter()
            .map(|p| p.compose(&Pose::from_rpy(0.001, -0.002, 0.003, Vec3::new(0.01, 0.02, 0.0))))
            .collect();
        let g = Pose::from_rpy(0.3, -0.2, 1.1, Vec3::new(10.0, -4.0, 2.0));
        let a = eval_rte_rre(&est, &gt).unwrap();
        let b = eval_rte_rre(
            &est.iter().map(|p| g.compose(p)).collect::<Vec<_>>(),
            &gt.iter().map(|p| g.compose(p)).collect::<Vec<_>>(),
        )
        .unwrap();
        assert!((a.rte_percent - b.rte_percent).abs() < 1e-9);
        assert!((a.rre_deg_per_100m - b.rre_deg_per_100m).abs() < 1e-9);
    }

    /// Closed-form absolute orientation from unit quaternions.
    fn horn(src: &[Vec3], dst: &[Vec3]) -> Pose {
        let n = src.len() as f64;
        let cs = src.iter().sum::<Vec3>() / n;
        let cd = dst.iter().sum::<Vec3>() / n;
        let mut s = Matrix3::zeros();
        for (a, b) in src.iter().zip(dst) {
            s += (a - cs) * (b - cd).transpose();
        }
        let (sxx, sxy, sxz) = (s[(0, 0)], s[(0, 1)], s[(0, 2)]);
        let (syx, syy, syz) = (s[(1, 0)], s[(1, 1)], s[(1, 2)]);
        let (szx, szy, szz) = (s[(2, 0)], s[(2, 1)], s[(2, 2)]);
        let nm = Matrix4::new(
            sxx + syy + szz, syz - szy, szx - sxz, sxy - syx,
            syz - szy, sxx - syy - szz, sxy + syx, szx + sxz,
            szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy,
            sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz,
        );
        let eig = nm.symmetric_eigen();
        let i = eig.eigenvalues.imax();
        let q = eig.eigenvectors.column(i);
        let r = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]))
            .to_rotation_matrix()
            .into_inner();
        Pose::new(r, cd - r * cs)
    }

    #[test]
    fn alignment_matches_quaternion_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let src: Vec<Vec3> = (0..40)
                .map(|_| Vec3::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), rng.random_range(-3.0..3.0)))
                .collect();
            let g = Pose::from_rpy(rng.random_range(-3.0..3.0), rng.random_range(-1.5..1.5), rng.random_range(-3.0..3.0), Vec3::new(1.0, -2.0, 0.5));
            let dst: Vec<Vec3> = src
                .iter()
                .map(|p| g.transform_point(p) + Vec3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)))
                .collect();
            let a = align_rigid(&src, &dst);
            let b = horn(&src, &dst);
            assert!((a.rotation - b.rotation).norm() < 1e-9);
            assert!((a.translation - b.translation).norm() < 1e-9);
        }
    }

    #[test]
    fn ape_absorbs_rigid_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let gt = random_traj(&mut rng, 200);
        let g = Pose::from_rpy(0.2, 0.1, -0.7, Vec3::new(5.0, 3.0, -1.0));
        let est: Vec<Pose> = gt.iter().map(|p| g.compose(p)).collect();
        let r = eval_ape_rpe(&est, &gt, 1).unwrap();
        assert!(r.ape.max < 1e-9);
        assert!(r.rpe.max < 1e-9);
        let zero = eval_ape_rpe(&gt, &gt, 1).unwrap();
        assert!(zero.ape.max < 1e-9);
        assert_eq!(zero.rpe, ErrorStats::default());
    }

    #[test]
    fn single_spike_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let gt = random_traj(&mut rng, 100);
        let mut est = gt.clone();
        est[40].translation += Vec3::new(0.0, 0.3, 0.0);
        let r = eval_ape_rpe(&est, &gt, 1).unwrap();
        let a = horn(
            &est.iter().map(|p| p.translation).collect::<Vec<_>>(),
            &gt.iter().map(|p| p.translation).collect::<Vec<_>>(),
        );
        let brute: Vec<f64> = est
            .iter()
            .zip(&gt)
            .map(|(e, g)| (a.transform_point(&e.translation) - g.translation).norm())
            .collect();
        let want = ErrorStats::from_errors(&brute);
        assert!((r.ape.max - want.max).abs() < 1e-9);
        assert!((r.ape.rmse - want.rmse).abs() < 1e-9);
        // alignment spreads the spike a little
        assert!((r.ape.max - 0.3).abs() < 0.3 / 100.0 * 2.0);
    }

    #[test]
    fn stats_of_known_errors() {
        let s = ErrorStats::from_errors(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert_eq!(s.max, 4.0);
        assert!((s.rmse - 7.5f64.sqrt()).abs() < 1e-15);
        assert!((s.std - 1.25f64.sqrt()).abs() < 1e-15);
    }
}
