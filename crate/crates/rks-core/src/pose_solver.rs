//! Weighted closed-form rigid alignment of 2D point correspondences and its
//! reverse-mode gradients.
//!
//! Given correspondences `(q_s, q_d)` with non-negative weights, the solver
//! minimises `sum_i w_i ||R q_si + t - q_di||^2` in closed form: weighted
//! centroids, centred coordinates, the 2x2 weighted covariance, its SVD, a
//! determinant-corrected rotation, and the induced translation. The whole
//! pipeline is differentiable; gradients with respect to both point sets and
//! the weights are available whenever the geometry is well conditioned.

use crate::geometry::{rotation, rotation_derivative, Se2};
use crate::grid::WorldCoord;
use nalgebra::{Matrix2, Vector2};
use thiserror::Error;

/// Condition number of the weighted covariance above which a solution is
/// flagged ill-conditioned and gradients are refused.
pub const ILL_CONDITIONED_THRESHOLD: f64 = 1e8;

const SUM_WEIGHT_EPS: f64 = 1e-12;

/// Weighted point correspondences in metres.
#[derive(Debug, Clone)]
pub struct WeightedCorrespondences {
    src: Vec<WorldCoord>,
    dst: Vec<WorldCoord>,
    weights: Vec<f64>,
}

#[derive(Debug, Error)]
pub enum CorrespondenceError {
    #[error("source/destination/weight lengths disagree: {0}/{1}/{2}")]
    LengthMismatch(usize, usize, usize),
    #[error("at least 2 correspondences are required, got {0}")]
    TooFew(usize),
    #[error("weights must be finite and non-negative")]
    BadWeight,
    #[error("coordinates must be finite")]
    NonFinite,
}

impl WeightedCorrespondences {
    pub fn new(src: Vec<WorldCoord>, dst: Vec<WorldCoord>, weights: Vec<f64>) -> Result<Self, CorrespondenceError> {
        if src.len() != dst.len() || src.len() != weights.len() {
            return Err(CorrespondenceError::LengthMismatch(src.len(), dst.len(), weights.len()));
        }
        if src.len() < 2 {
            return Err(CorrespondenceError::TooFew(src.len()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(CorrespondenceError::BadWeight);
        }
        if src.iter().chain(dst.iter()).any(|q| !q.x.is_finite() || !q.y.is_finite()) {
            return Err(CorrespondenceError::NonFinite);
        }
        Ok(WeightedCorrespondences { src, dst, weights })
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    pub fn src(&self) -> &[WorldCoord] {
        &self.src
    }

    pub fn dst(&self) -> &[WorldCoord] {
        &self.dst
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Weighted sum of squared residuals under a candidate transform.
    pub fn weighted_sse(&self, pose: &Se2) -> f64 {
        let mut sse = 0.0;
        for i in 0..self.len() {
            let mapped = pose.apply(Vector2::new(self.src[i].x, self.src[i].y));
            let dx = mapped.x - self.dst[i].x;
            let dy = mapped.y - self.dst[i].y;
            sse += self.weights[i] * (dx * dx + dy * dy);
        }
        sse
    }
}

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("total correspondence weight is (near) zero; no information to solve from")]
    NoInformation,
    #[error("weighted points are concentrated at a single location; pose is unobservable")]
    DegenerateGeometry,
}

#[derive(Debug, Error)]
pub enum PoseGradError {
    #[error("geometry is degenerate or ill-conditioned; gradients are unavailable")]
    Degenerate,
}

/// Solver output: the optimal transform plus conditioning diagnostics.
#[derive(Debug, Clone)]
pub struct PoseSolution {
    pub pose: Se2,
    /// Ratio of covariance singular values (infinite for rank-1 geometry).
    pub condition: f64,
    /// Set when `condition` exceeds [`ILL_CONDITIONED_THRESHOLD`]; such
    /// solutions are returned but refuse to produce gradients.
    pub ill_conditioned: bool,
}

struct Internals {
    sum_w: f64,
    centroid_src: Vector2<f64>,
    centroid_dst: Vector2<f64>,
    /// Covariance trace term `sum_i w_i x_i . y_i` (rotation cosine axis).
    a: f64,
    /// Covariance skew term `sum_i w_i cross(x_i, y_i)` (rotation sine axis).
    b: f64,
    cov: Matrix2<f64>,
    /// Weighted mean squared spread, used to scale rank tests.
    spread: f64,
}

fn internals(corr: &WeightedCorrespondences) -> Result<Internals, SolveError> {
    let sum_w: f64 = corr.weights.iter().sum();
    if sum_w <= SUM_WEIGHT_EPS {
        return Err(SolveError::NoInformation);
    }
    let mut cs = Vector2::zeros();
    let mut cd = Vector2::zeros();
    for i in 0..corr.len() {
        cs += corr.weights[i] * Vector2::new(corr.src[i].x, corr.src[i].y);
        cd += corr.weights[i] * Vector2::new(corr.dst[i].x, corr.dst[i].y);
    }
    cs /= sum_w;
    cd /= sum_w;
    let mut cov = Matrix2::zeros();
    let mut spread = 0.0;
    for i in 0..corr.len() {
        let x = Vector2::new(corr.src[i].x, corr.src[i].y) - cs;
        let y = Vector2::new(corr.dst[i].x, corr.dst[i].y) - cd;
        cov += corr.weights[i] * x * y.transpose();
        spread += corr.weights[i] * (x.norm_squared() + y.norm_squared());
    }
    spread /= 2.0;
    let a = cov[(0, 0)] + cov[(1, 1)];
    let b = cov[(0, 1)] - cov[(1, 0)];
    Ok(Internals { sum_w, centroid_src: cs, centroid_dst: cd, a, b, cov, spread })
}

/// Singular value decomposition of a 2x2 matrix: `m = u * diag(s) * v^T`
/// with `s[0] >= s[1] >= 0` and orthogonal `u`, `v` (`det(v) = +1`).
///
/// `v` comes from the closed-form eigendecomposition of `m^T m`; the left
/// vectors follow as `m v_i / s_i`, falling back to an orthonormal
/// completion when the second singular value vanishes.
pub fn svd2(m: &Matrix2<f64>) -> (Matrix2<f64>, [f64; 2], Matrix2<f64>) {
    let g = m.transpose() * m;
    let (ga, gb, gc) = (g[(0, 0)], g[(0, 1)], g[(1, 1)]);
    let half_tr = 0.5 * (ga + gc);
    let disc = (0.25 * (ga - gc) * (ga - gc) + gb * gb).sqrt();
    let l1 = (half_tr + disc).max(0.0);
    let l2 = (half_tr - disc).max(0.0);
    let v1 = if gb.abs() > 0.0 {
        Vector2::new(gb, l1 - ga).normalize()
    } else if ga >= gc {
        Vector2::new(1.0, 0.0)
    } else {
        Vector2::new(0.0, 1.0)
    };
    let v2 = Vector2::new(-v1.y, v1.x); // det(V) = +1
    let s1 = l1.sqrt();
    let s2 = l2.sqrt();
    let u1 = if s1 > 0.0 { (m * v1) / s1 } else { Vector2::new(1.0, 0.0) };
    let u2 = if s2 > 1e-14 * s1.max(1.0) {
        (m * v2) / s2
    } else {
        Vector2::new(-u1.y, u1.x)
    };
    let u = Matrix2::from_columns(&[u1, u2]);
    let v = Matrix2::from_columns(&[v1, v2]);
    (u, [s1, s2], v)
}

/// Solves the weighted rigid alignment in closed form.
///
/// Steps: weighted centroids, centred coordinates, the 2x2 weighted
/// covariance `S = X W Y^T`, `svd2(S) = U diag(sigma) V^T`, then the
/// determinant-corrected rotation `R = V diag(1, det(V U^T)) U^T` and
/// `t = centroid_dst - R centroid_src`.
///
/// Rank-0 covariance (all weighted points coincident) is an error; rank-1
/// (collinear) geometry solves but is flagged ill-conditioned.
pub fn solve_pose(corr: &WeightedCorrespondences) -> Result<PoseSolution, SolveError> {
    let ints = internals(corr)?;
    let (u, sigma, v) = svd2(&ints.cov);
    if ints.spread <= 0.0 || sigma[0] <= 1e-14 * ints.spread {
        return Err(SolveError::DegenerateGeometry);
    }
    let d = (v * u.transpose()).determinant().signum();
    let correction = Matrix2::new(1.0, 0.0, 0.0, d);
    let rot = v * correction * u.transpose();
    let translation = ints.centroid_dst - rot * ints.centroid_src;
    let pose = Se2::from_matrix(&rot, translation).map_err(|_| SolveError::DegenerateGeometry)?;
    let condition = if sigma[1] > 0.0 { sigma[0] / sigma[1] } else { f64::INFINITY };
    Ok(PoseSolution { pose, condition, ill_conditioned: condition > ILL_CONDITIONED_THRESHOLD })
}

/// Upstream gradient of a scalar objective with respect to a pose, split
/// into rotation-matrix and translation components.
#[derive(Debug, Clone, Copy)]
pub struct PoseGrad {
    pub d_rotation: Matrix2<f64>,
    pub d_translation: Vector2<f64>,
}

/// Gradients of a scalar objective with respect to the solver inputs.
#[derive(Debug, Clone)]
pub struct CorrespondenceGrads {
    pub d_src: Vec<Vector2<f64>>,
    pub d_dst: Vec<Vector2<f64>>,
    pub d_weights: Vec<f64>,
}

/// Reverse-mode gradient of [`solve_pose`].
///
/// Uses the angle parametrisation of the optimal rotation:
/// `theta = atan2(b, a)` with `a = tr(S)` and `b = skew(S)`, which agrees
/// with the determinant-corrected SVD rotation whenever `(a, b) != 0`.
/// Ill-conditioned solutions refuse gradients rather than returning noise.
pub fn solve_pose_backward(
    corr: &WeightedCorrespondences,
    solution: &PoseSolution,
    upstream: &PoseGrad,
) -> Result<CorrespondenceGrads, PoseGradError> {
    if solution.ill_conditioned {
        return Err(PoseGradError::Degenerate);
    }
    let ints = internals(corr).map_err(|_| PoseGradError::Degenerate)?;
    let r2 = ints.a * ints.a + ints.b * ints.b;
    if r2 <= (1e-12 * ints.spread) * (1e-12 * ints.spread) {
        // Rotation is indeterminate (balanced reflective geometry).
        return Err(PoseGradError::Degenerate);
    }
    let theta = solution.pose.angle();
    let rot = rotation(theta);
    let rot_d = rotation_derivative(theta);
    let g_t = upstream.d_translation;

    // d(loss)/d(theta): direct rotation-matrix term plus the path through
    // t = centroid_dst - R centroid_src.
    let mut g_theta = 0.0;
    for r in 0..2 {
        for c in 0..2 {
            g_theta += upstream.d_rotation[(r, c)] * rot_d[(r, c)];
        }
    }
    g_theta -= g_t.dot(&(rot_d * ints.centroid_src));

    let g_a = -g_theta * ints.b / r2;
    let g_b = g_theta * ints.a / r2;
    let g_centroid_src = -(rot.transpose() * g_t);
    let g_centroid_dst = g_t;

    let n = corr.len();
    let mut gx = vec![Vector2::zeros(); n];
    let mut gy = vec![Vector2::zeros(); n];
    let mut sum_gx = Vector2::zeros();
    let mut sum_gy = Vector2::zeros();
    for i in 0..n {
        let w = corr.weights[i];
        let x = Vector2::new(corr.src[i].x, corr.src[i].y) - ints.centroid_src;
        let y = Vector2::new(corr.dst[i].x, corr.dst[i].y) - ints.centroid_dst;
        gx[i] = w * (g_a * y + g_b * Vector2::new(y.y, -y.x));
        gy[i] = w * (g_a * x + g_b * Vector2::new(-x.y, x.x));
        sum_gx += gx[i];
        sum_gy += gy[i];
    }

    let mut d_src = Vec::with_capacity(n);
    let mut d_dst = Vec::with_capacity(n);
    let mut d_weights = Vec::with_capacity(n);
    for i in 0..n {
        let w = corr.weights[i];
        let x = Vector2::new(corr.src[i].x, corr.src[i].y) - ints.centroid_src;
        let y = Vector2::new(corr.dst[i].x, corr.dst[i].y) - ints.centroid_dst;
        d_src.push(gx[i] + (w / ints.sum_w) * (g_centroid_src - sum_gx));
        d_dst.push(gy[i] + (w / ints.sum_w) * (g_centroid_dst - sum_gy));
        let dw = g_a * x.dot(&y)
            + g_b * (x.x * y.y - x.y * y.x)
            + (x.dot(&(g_centroid_src - sum_gx)) + y.dot(&(g_centroid_dst - sum_gy))) / ints.sum_w;
        d_weights.push(dw);
    }
    Ok(CorrespondenceGrads { d_src, d_dst, d_weights })
}

/// Training loss between an estimated and a ground-truth transform:
/// the translation error norm plus `alpha` times the Frobenius norm of
/// `R_est R_gt^T - I`.
#[derive(Debug, Clone, Copy)]
pub struct PoseLoss {
    pub value: f64,
    pub translation_term: f64,
    pub rotation_term: f64,
    pub alpha: f64,
}

pub fn pose_loss(est: &Se2, gt: &Se2, alpha: f64) -> PoseLoss {
    let dt = est.translation() - gt.translation();
    let translation_term = dt.norm();
    let m = est.rotation() * gt.rotation().transpose() - Matrix2::identity();
    let rotation_term = m.norm();
    PoseLoss { value: translation_term + alpha * rotation_term, translation_term, rotation_term, alpha }
}

/// Residual norms at or below this are treated as exactly zero when
/// differentiating the loss, so the norm kink at the minimum yields the
/// zero subgradient instead of float-noise unit vectors.
const LOSS_KINK_EPS: f64 = 1e-12;

/// Gradient of [`pose_loss`] with respect to the estimate.
pub fn pose_loss_backward(est: &Se2, gt: &Se2, alpha: f64) -> PoseGrad {
    let dt = est.translation() - gt.translation();
    let tnorm = dt.norm();
    let d_translation = if tnorm > LOSS_KINK_EPS { dt / tnorm } else { Vector2::zeros() };
    let m = est.rotation() * gt.rotation().transpose() - Matrix2::identity();
    let fro = m.norm();
    let d_rotation = if fro > LOSS_KINK_EPS { (alpha / fro) * m * gt.rotation() } else { Matrix2::zeros() };
    PoseGrad { d_rotation, d_translation }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn corr(src: &[(f64, f64)], dst: &[(f64, f64)], w: &[f64]) -> WeightedCorrespondences {
        WeightedCorrespondences::new(
            src.iter().map(|&(x, y)| WorldCoord::new(x, y)).collect(),
            dst.iter().map(|&(x, y)| WorldCoord::new(x, y)).collect(),
            w.to_vec(),
        )
        .unwrap()
    }

    fn transformed(src: &[(f64, f64)], pose: &Se2) -> Vec<(f64, f64)> {
        src.iter()
            .map(|&(x, y)| {
                let q = pose.apply(Vector2::new(x, y));
                (q.x, q.y)
            })
            .collect()
    }

    const TRIANGLE: [(f64, f64); 3] = [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0)];

    #[test]
    fn identity_for_identical_point_sets() {
        let c = corr(&TRIANGLE, &TRIANGLE, &[1.0, 1.0, 1.0]);
        let sol = solve_pose(&c).unwrap();
        assert_abs_diff_eq!(sol.pose.angle(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.pose.translation().norm(), 0.0, epsilon = 1e-12);
        assert!(!sol.ill_conditioned);
    }

    #[test]
    fn pure_translation_is_exact() {
        let dst: Vec<(f64, f64)> = TRIANGLE.iter().map(|&(x, y)| (x + 1.0, y + 2.0)).collect();
        let sol = solve_pose(&corr(&TRIANGLE, &dst, &[1.0, 1.0, 1.0])).unwrap();
        assert_abs_diff_eq!(sol.pose.angle(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(sol.pose.x(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(sol.pose.y(), 2.0, epsilon = 1e-15);
    }

    #[test]
    fn ninety_degree_rotation_about_origin() {
        let rot90 = Se2::new(0.0, 0.0, std::f64::consts::FRAC_PI_2);
        let dst = transformed(&TRIANGLE, &rot90);
        let sol = solve_pose(&corr(&TRIANGLE, &dst, &[1.0, 1.0, 1.0])).unwrap();
        assert_abs_diff_eq!(sol.pose.angle(), std::f64::consts::FRAC_PI_2, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.pose.translation().norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_weight_point_is_inert() {
        let gt = Se2::new(0.4, -0.2, 0.3);
        let dst = transformed(&TRIANGLE, &gt);
        let base = solve_pose(&corr(&TRIANGLE, &dst, &[1.0, 0.5, 2.0])).unwrap();
        let mut src2: Vec<(f64, f64)> = TRIANGLE.to_vec();
        src2.push((123.0, -77.0));
        let mut dst2 = dst.clone();
        dst2.push((-5.0, 9.0));
        let extended = solve_pose(&corr(&src2, &dst2, &[1.0, 0.5, 2.0, 0.0])).unwrap();
        assert_abs_diff_eq!(base.pose.angle(), extended.pose.angle(), epsilon = 1e-12);
        assert!((base.pose.translation() - extended.pose.translation()).norm() < 1e-12);
    }

    #[test]
    fn beats_random_search_on_noisy_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let gt = Se2::new(1.0, -2.0, 0.8);
        let src: Vec<(f64, f64)> = (0..12).map(|_| (rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0))).collect();
        let dst: Vec<(f64, f64)> = src
            .iter()
            .map(|&(x, y)| {
                let q = gt.apply(Vector2::new(x, y));
                (q.x + rng.gen_range(-0.2..0.2), q.y + rng.gen_range(-0.2..0.2))
            })
            .collect();
        let weights: Vec<f64> = (0..12).map(|_| rng.gen_range(0.1..1.0)).collect();
        let c = corr(&src, &dst, &weights);
        let sol = solve_pose(&c).unwrap();
        let sse = c.weighted_sse(&sol.pose);
        for _ in 0..10_000 {
            let candidate = Se2::new(
                rng.gen_range(-4.0..4.0),
                rng.gen_range(-4.0..4.0),
                rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
            );
            assert!(sse <= c.weighted_sse(&candidate) + 1e-12);
        }
    }

    #[test]
    fn optimality_conditions_hold() {
        // Stationarity of the weighted objective at the solution.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let n = rng.gen_range(3..20);
            let src: Vec<(f64, f64)> = (0..n).map(|_| (rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0))).collect();
            let dst: Vec<(f64, f64)> = (0..n).map(|_| (rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0))).collect();
            let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.5)).collect();
            let c = corr(&src, &dst, &w);
            let sol = solve_pose(&c).unwrap();
            let rot = sol.pose.rotation();
            let rot_d = rotation_derivative(sol.pose.angle());
            let t = sol.pose.translation();
            let mut grad_t = Vector2::zeros();
            let mut grad_theta = 0.0;
            let mut scale = 0.0;
            for i in 0..n {
                let q = Vector2::new(src[i].0, src[i].1);
                let resid = rot * q + t - Vector2::new(dst[i].0, dst[i].1);
                grad_t += 2.0 * w[i] * resid;
                grad_theta += 2.0 * w[i] * resid.dot(&(rot_d * q));
                scale += w[i] * (1.0 + q.norm_squared());
            }
            assert!(grad_t.norm() / scale < 1e-9, "translation stationarity violated");
            assert!(grad_theta.abs() / scale < 1e-9, "rotation stationarity violated");
        }
    }

    #[test]
    fn svd_route_matches_angle_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..200 {
            let m = Matrix2::new(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            );
            let (u, s, v) = svd2(&m);
            // Reconstruction and orthogonality.
            let recon = u * Matrix2::new(s[0], 0.0, 0.0, s[1]) * v.transpose();
            assert!((recon - m).norm() < 1e-12 * (1.0 + m.norm()));
            assert!((u.transpose() * u - Matrix2::identity()).norm() < 1e-12);
            assert!((v.transpose() * v - Matrix2::identity()).norm() < 1e-12);
            assert!(s[0] >= s[1] && s[1] >= 0.0);
            // Determinant-corrected rotation equals the closed-form angle.
            let d = (v * u.transpose()).determinant().signum();
            let rot = v * Matrix2::new(1.0, 0.0, 0.0, d) * u.transpose();
            let a = m[(0, 0)] + m[(1, 1)];
            let b = m[(0, 1)] - m[(1, 0)];
            if a.hypot(b) > 1e-9 {
                let expected = rotation(b.atan2(a));
                assert!((rot - expected).norm() < 1e-9, "{rot} vs {expected}");
            }
        }
    }

    #[test]
    fn reflective_noise_still_yields_proper_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        // Destination is a reflection of the source plus noise: the naive
        // V U^T product would be a reflection without the correction term.
        let src: Vec<(f64, f64)> = (0..10).map(|_| (rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0))).collect();
        let dst: Vec<(f64, f64)> = src
            .iter()
            .map(|&(x, y)| (x + rng.gen_range(-0.05..0.05), -y + rng.gen_range(-0.05..0.05)))
            .collect();
        let c = corr(&src, &dst, &vec![1.0; 10]);
        let sol = solve_pose(&c).unwrap();
        let r = sol.pose.rotation();
        assert_abs_diff_eq!(r.determinant(), 1.0, epsilon = 1e-12);
        // Still the global optimum among proper rotations.
        let sse = c.weighted_sse(&sol.pose);
        for _ in 0..2000 {
            let cand = Se2::new(
                sol.pose.x() + rng.gen_range(-1.0..1.0),
                sol.pose.y() + rng.gen_range(-1.0..1.0),
                rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
            );
            assert!(sse <= c.weighted_sse(&cand) + 1e-12);
        }
    }

    #[test]
    fn coincident_points_are_degenerate() {
        let src = vec![(1.0, 1.0); 4];
        let dst = vec![(2.0, 0.0); 4];
        match solve_pose(&corr(&src, &dst, &[1.0; 4])) {
            Err(SolveError::DegenerateGeometry) => {}
            other => panic!("expected degenerate geometry, got {other:?}"),
        }
    }

    #[test]
    fn zero_weights_are_no_information() {
        let c = corr(&TRIANGLE, &TRIANGLE, &[0.0, 0.0, 0.0]);
        match solve_pose(&c) {
            Err(SolveError::NoInformation) => {}
            other => panic!("expected no information, got {other:?}"),
        }
    }

    #[test]
    fn collinear_points_solve_but_flag() {
        let src = [(0.0, 0.0), (1.0, 0.0), (2.0, 0.0), (3.0, 0.0)];
        let gt = Se2::new(0.5, -0.5, 0.4);
        let dst = transformed(&src, &gt);
        let sol = solve_pose(&corr(&src, &dst, &[1.0; 4])).unwrap();
        assert!(sol.ill_conditioned);
        // The recovered transform still maps the line correctly.
        assert!(corr(&src, &dst, &[1.0; 4]).weighted_sse(&sol.pose) < 1e-18);
        // And gradients are refused rather than silently wrong.
        let upstream = PoseGrad { d_rotation: Matrix2::identity(), d_translation: Vector2::new(1.0, 0.0) };
        assert!(solve_pose_backward(&corr(&src, &dst, &[1.0; 4]), &sol, &upstream).is_err());
    }

    #[test]
    fn loss_examples() {
        let gt = Se2::new(0.3, 0.4, 0.5);
        assert_abs_diff_eq!(pose_loss(&gt, &gt, 10.0).value, 0.0, epsilon = 1e-15);

        let est = Se2::new(0.3, 0.4, 0.5 + std::f64::consts::PI);
        let loss = pose_loss(&est, &gt, 10.0);
        assert_abs_diff_eq!(loss.value, 20.0 * 2.0f64.sqrt(), epsilon = 1e-9);

        let est = Se2::new(3.3, 4.4, 0.5);
        assert_abs_diff_eq!(pose_loss(&est, &gt, 10.0).value, 5.0, epsilon = 1e-12);
    }

    #[test]
    fn loss_backward_matches_finite_differences() {
        let gt = Se2::new(0.2, -0.7, 0.9);
        let est = Se2::new(0.5, -0.3, 0.4);
        let alpha = 10.0;
        let grad = pose_loss_backward(&est, &gt, alpha);
        let h = 1e-7;
        // Translation components.
        for axis in 0..2 {
            let mut tp = est.translation();
            tp[axis] += h;
            let mut tm = est.translation();
            tm[axis] -= h;
            let fp = pose_loss(&Se2::from_parts(tp, est.angle()), &gt, alpha).value;
            let fm = pose_loss(&Se2::from_parts(tm, est.angle()), &gt, alpha).value;
            assert_abs_diff_eq!(grad.d_translation[axis], (fp - fm) / (2.0 * h), epsilon = 1e-6);
        }
        // Angle (through the rotation matrix gradient).
        let rot_d = rotation_derivative(est.angle());
        let mut g_theta = 0.0;
        for r in 0..2 {
            for c in 0..2 {
                g_theta += grad.d_rotation[(r, c)] * rot_d[(r, c)];
            }
        }
        let fp = pose_loss(&Se2::from_parts(est.translation(), est.angle() + h), &gt, alpha).value;
        let fm = pose_loss(&Se2::from_parts(est.translation(), est.angle() - h), &gt, alpha).value;
        assert_abs_diff_eq!(g_theta, (fp - fm) / (2.0 * h), epsilon = 1e-6);
    }

    /// End-to-end scalar: pose_loss(solve_pose(inputs), gt).
    fn chain_loss(src: &[(f64, f64)], dst: &[(f64, f64)], w: &[f64], gt: &Se2) -> f64 {
        let c = corr(src, dst, w);
        let sol = solve_pose(&c).unwrap();
        pose_loss(&sol.pose, gt, 10.0).value
    }

    #[test]
    fn solver_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let gt = Se2::new(0.3, 0.1, -0.4);
        let n = 8;
        let src: Vec<(f64, f64)> = (0..n).map(|_| (rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0))).collect();
        let dst: Vec<(f64, f64)> = (0..n).map(|_| (rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0))).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..1.0)).collect();

        let c = corr(&src, &dst, &w);
        let sol = solve_pose(&c).unwrap();
        let upstream = pose_loss_backward(&sol.pose, &gt, 10.0);
        let grads = solve_pose_backward(&c, &sol, &upstream).unwrap();

        let h = 1e-6;
        let check = |analytic: f64, fd: f64, what: &str| {
            let scale = analytic.abs().max(fd.abs()).max(1e-8);
            assert!((analytic - fd).abs() / scale < 1e-4, "{what}: {analytic} vs {fd}");
        };
        for i in 0..n {
            for axis in 0..2 {
                let mut sp = src.clone();
                let mut sm = src.clone();
                if axis == 0 {
                    sp[i].0 += h;
                    sm[i].0 -= h;
                } else {
                    sp[i].1 += h;
                    sm[i].1 -= h;
                }
                let fd = (chain_loss(&sp, &dst, &w, &gt) - chain_loss(&sm, &dst, &w, &gt)) / (2.0 * h);
                check(grads.d_src[i][axis], fd, "d_src");

                let mut dp = dst.clone();
                let mut dm = dst.clone();
                if axis == 0 {
                    dp[i].0 += h;
                    dm[i].0 -= h;
                } else {
                    dp[i].1 += h;
                    dm[i].1 -= h;
                }
                let fd = (chain_loss(&src, &dp, &w, &gt) - chain_loss(&src, &dm, &w, &gt)) / (2.0 * h);
                check(grads.d_dst[i][axis], fd, "d_dst");
            }
            let mut wp = w.clone();
            wp[i] += h;
            let mut wm = w.clone();
            wm[i] -= h;
            let fd = (chain_loss(&src, &dst, &wp, &gt) - chain_loss(&src, &dst, &wm, &gt)) / (2.0 * h);
            check(grads.d_weights[i], fd, "d_weights");
        }
    }

    #[test]
    fn gradient_vanishes_at_perfect_fit() {
        let gt = Se2::new(0.7, -0.3, 0.6);
        let dst = transformed(&TRIANGLE, &gt);
        let c = corr(&TRIANGLE, &dst, &[1.0, 0.7, 1.3]);
        let sol = solve_pose(&c).unwrap();
        let upstream = pose_loss_backward(&sol.pose, &gt, 10.0);
        let grads = solve_pose_backward(&c, &sol, &upstream).unwrap();
        let total: f64 = grads
            .d_src
            .iter()
            .chain(grads.d_dst.iter())
            .map(|g| g.norm())
            .chain(grads.d_weights.iter().map(|g| g.abs()))
            .sum();
        assert!(total < 1e-8, "gradient at minimum should vanish, got {total}");
    }

    #[test]
    fn weight_gradient_has_no_uniform_component() {
        // Scaling all weights leaves the pose unchanged, so the gradient
        // must be orthogonal to the all-ones direction.
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let gt = Se2::new(-0.2, 0.5, 0.2);
        let n = 10;
        let src: Vec<(f64, f64)> = (0..n).map(|_| (rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0))).collect();
        let dst: Vec<(f64, f64)> = (0..n).map(|_| (rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0))).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..1.0)).collect();
        let c = corr(&src, &dst, &w);
        let sol = solve_pose(&c).unwrap();
        let upstream = pose_loss_backward(&sol.pose, &gt, 10.0);
        let grads = solve_pose_backward(&c, &sol, &upstream).unwrap();
        // Homogeneity direction is w itself: d/dc loss(c*w) at c=1 is sum w_i g_i.
        let along: f64 = grads.d_weights.iter().zip(&w).map(|(g, wi)| g * wi).sum();
        let norm: f64 = grads.d_weights.iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!(along.abs() < 1e-9 * norm.max(1.0), "uniform weight direction not flat: {along}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn exact_recovery_for_rigid_motions(
            seed in 0u64..10_000,
            n in 3usize..50,
            x in -20.0..20.0f64,
            y in -20.0..20.0f64,
            theta in -3.1..3.1f64,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // Three well-spread anchors guarantee non-collinearity.
            let mut src = vec![(0.0, 0.0), (6.0, 0.0), (0.0, 6.0)];
            for _ in 3..n {
                src.push((rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)));
            }
            let gt = Se2::new(x, y, theta);
            let dst = transformed(&src, &gt);
            let w: Vec<f64> = (0..src.len()).map(|_| rng.gen_range(0.01..2.0)).collect();
            let sol = solve_pose(&corr(&src, &dst, &w)).unwrap();
            prop_assert!(crate::geometry::wrap_angle(sol.pose.angle() - gt.angle()).abs() < 1e-9);
            prop_assert!((sol.pose.translation() - gt.translation()).norm() < 1e-9);
        }

        #[test]
        fn weight_scale_invariance(scale in 0.001..1000.0f64) {
            let gt = Se2::new(1.0, 2.0, 0.7);
            let src = [(0.0, 0.0), (3.0, 1.0), (-2.0, 4.0), (1.0, -3.0)];
            let dst = transformed(&src, &gt);
            let w = [0.3, 0.9, 0.5, 1.2];
            let scaled: Vec<f64> = w.iter().map(|x| x * scale).collect();
            let a = solve_pose(&corr(&src, &dst, &w)).unwrap();
            let b = solve_pose(&corr(&src, &dst, &scaled)).unwrap();
            prop_assert!((a.pose.translation() - b.pose.translation()).norm() < 1e-9);
            prop_assert!(crate::geometry::wrap_angle(a.pose.angle() - b.pose.angle()).abs() < 1e-12);
        }

        #[test]
        fn left_equivariance(gx in -5.0..5.0f64, gy in -5.0..5.0f64, gth in -3.0..3.0f64) {
            let g = Se2::new(gx, gy, gth);
            let src = [(0.0, 0.0), (3.0, 1.0), (-2.0, 4.0), (1.5, 2.5)];
            let dst = [(0.5, 0.2), (2.5, 1.5), (-1.0, 3.0), (2.0, 2.0)];
            let w = [1.0, 0.5, 0.8, 1.1];
            let base = solve_pose(&corr(&src, &dst, &w)).unwrap();
            let gsrc = transformed(&src, &g);
            let gdst = transformed(&dst, &g);
            let moved = solve_pose(&corr(&gsrc, &gdst, &w)).unwrap();
            let expected = g.compose(&base.pose).compose(&g.inverse());
            prop_assert!((moved.pose.translation() - expected.translation()).norm() < 1e-8);
            prop_assert!(crate::geometry::wrap_angle(moved.pose.angle() - expected.angle()).abs() < 1e-10);
        }
    }
}
