//! Differentiable sampling primitives: bilinear interpolation and l2
//! normalisation, each with a hand-written backward pass.

use crate::grid::{Grid2, PixelCoord};

/// Norm threshold below which a vector is treated as a degenerate
/// descriptor.
pub const DEGENERATE_NORM_EPS: f64 = 1e-12;

/// The four-corner footprint of a bilinear lookup: corner indices plus
/// blend weights and whether the query had to be clamped into bounds.
#[derive(Debug, Clone, Copy)]
pub struct BilinearFootprint {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    /// Fractional offsets inside the cell, each in [0, 1].
    pub fx: f64,
    pub fy: f64,
    pub clamped: bool,
}

impl BilinearFootprint {
    /// Blend weights for corners (x0,y0), (x1,y0), (x0,y1), (x1,y1).
    pub fn weights(&self) -> [f64; 4] {
        let (fx, fy) = (self.fx, self.fy);
        [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy]
    }
}

/// Resolves a (possibly out-of-bounds) query point to its bilinear
/// footprint. Out-of-bounds coordinates clamp to the boundary pixel and set
/// the `clamped` flag.
pub fn footprint(map: &Grid2, p: PixelCoord) -> BilinearFootprint {
    let max_x = (map.width() - 1) as f64;
    let max_y = (map.height() - 1) as f64;
    let clamped = p.x < 0.0 || p.y < 0.0 || p.x > max_x || p.y > max_y || !p.x.is_finite() || !p.y.is_finite();
    let cx = if p.x.is_finite() { p.x.clamp(0.0, max_x) } else { 0.0 };
    let cy = if p.y.is_finite() { p.y.clamp(0.0, max_y) } else { 0.0 };
    let x0 = (cx.floor() as usize).min(map.width() - 1);
    let y0 = (cy.floor() as usize).min(map.height() - 1);
    let x1 = (x0 + 1).min(map.width() - 1);
    let y1 = (y0 + 1).min(map.height() - 1);
    BilinearFootprint { x0, y0, x1, y1, fx: cx - x0 as f64, fy: cy - y0 as f64, clamped }
}

/// Bilinear interpolation of all channels at `p`, written into `out`.
/// Returns true when the query point was clamped to the boundary.
pub fn bilinear_sample_into(map: &Grid2, p: PixelCoord, out: &mut [f64]) -> bool {
    assert_eq!(out.len(), map.channels());
    let fp = footprint(map, p);
    let [w00, w10, w01, w11] = fp.weights();
    let p00 = map.pixel(fp.x0, fp.y0);
    let p10 = map.pixel(fp.x1, fp.y0);
    let p01 = map.pixel(fp.x0, fp.y1);
    let p11 = map.pixel(fp.x1, fp.y1);
    for c in 0..map.channels() {
        out[c] = w00 * p00[c] + w10 * p10[c] + w01 * p01[c] + w11 * p11[c];
    }
    fp.clamped
}

/// Convenience wrapper over [`bilinear_sample_into`] returning a fresh
/// vector and the clamp flag.
pub fn bilinear_sample(map: &Grid2, p: PixelCoord) -> (Vec<f64>, bool) {
    let mut out = vec![0.0; map.channels()];
    let clamped = bilinear_sample_into(map, p, &mut out);
    (out, clamped)
}

/// Single-channel fast path.
pub fn bilinear_sample1(map: &Grid2, p: PixelCoord) -> f64 {
    debug_assert_eq!(map.channels(), 1);
    let fp = footprint(map, p);
    let [w00, w10, w01, w11] = fp.weights();
    w00 * map.at(fp.x0, fp.y0, 0)
        + w10 * map.at(fp.x1, fp.y0, 0)
        + w01 * map.at(fp.x0, fp.y1, 0)
        + w11 * map.at(fp.x1, fp.y1, 0)
}

/// Derivative of each sampled channel with respect to the query point.
/// Piecewise constant per cell; at clamped queries the derivative of the
/// clamp is folded in (zero along the clamped axis).
pub fn bilinear_sample_grad_point(map: &Grid2, p: PixelCoord) -> (Vec<f64>, Vec<f64>) {
    let fp = footprint(map, p);
    let c = map.channels();
    let mut dx = vec![0.0; c];
    let mut dy = vec![0.0; c];
    let p00 = map.pixel(fp.x0, fp.y0);
    let p10 = map.pixel(fp.x1, fp.y0);
    let p01 = map.pixel(fp.x0, fp.y1);
    let p11 = map.pixel(fp.x1, fp.y1);
    let in_x = !fp.clamped || (p.x >= 0.0 && p.x <= (map.width() - 1) as f64);
    let in_y = !fp.clamped || (p.y >= 0.0 && p.y <= (map.height() - 1) as f64);
    for i in 0..c {
        if in_x {
            dx[i] = (1.0 - fp.fy) * (p10[i] - p00[i]) + fp.fy * (p11[i] - p01[i]);
        }
        if in_y {
            dy[i] = (1.0 - fp.fx) * (p01[i] - p00[i]) + fp.fx * (p11[i] - p10[i]);
        }
    }
    (dx, dy)
}

/// Scatters an upstream gradient on the sampled value back onto the four
/// contributing pixels of `grad_map` (flat buffer with the same layout as
/// the sampled grid).
pub fn bilinear_scatter_grad(map: &Grid2, p: PixelCoord, upstream: &[f64], grad_map: &mut [f64]) {
    assert_eq!(upstream.len(), map.channels());
    assert_eq!(grad_map.len(), map.data().len());
    let fp = footprint(map, p);
    let [w00, w10, w01, w11] = fp.weights();
    let ch = map.channels();
    let idx = |x: usize, y: usize| (y * map.width() + x) * ch;
    for c in 0..ch {
        let g = upstream[c];
        grad_map[idx(fp.x0, fp.y0) + c] += w00 * g;
        grad_map[idx(fp.x1, fp.y0) + c] += w10 * g;
        grad_map[idx(fp.x0, fp.y1) + c] += w01 * g;
        grad_map[idx(fp.x1, fp.y1) + c] += w11 * g;
    }
}

/// l2-normalises `v` into `out`. Returns true (degenerate) when the input
/// norm is at or below [`DEGENERATE_NORM_EPS`], in which case `out` is zero.
pub fn l2_normalize_into(v: &[f64], out: &mut [f64]) -> bool {
    assert_eq!(v.len(), out.len());
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= DEGENERATE_NORM_EPS {
        out.fill(0.0);
        true
    } else {
        for (o, x) in out.iter_mut().zip(v) {
            *o = x / norm;
        }
        false
    }
}

pub fn l2_normalize(v: &[f64]) -> (Vec<f64>, bool) {
    let mut out = vec![0.0; v.len()];
    let degenerate = l2_normalize_into(v, &mut out);
    (out, degenerate)
}

/// Backward pass of l2 normalisation: given the raw input and the upstream
/// gradient on the normalised output, returns the gradient on the input.
/// Degenerate inputs receive a zero gradient.
pub fn l2_normalize_backward(raw: &[f64], upstream: &[f64]) -> Vec<f64> {
    let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= DEGENERATE_NORM_EPS {
        return vec![0.0; raw.len()];
    }
    let unit: Vec<f64> = raw.iter().map(|x| x / norm).collect();
    let dot: f64 = unit.iter().zip(upstream).map(|(u, g)| u * g).sum();
    unit.iter().zip(upstream).map(|(u, g)| (g - u * dot) / norm).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_grid(w: usize, h: usize, c: usize, seed: u64) -> Grid2 {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..w * h * c).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Grid2::from_values(w, h, c, data).unwrap()
    }

    #[test]
    fn integer_coordinates_are_exact() {
        let g = random_grid(5, 4, 3, 1);
        let (v, clamped) = bilinear_sample(&g, PixelCoord::new(3.0, 2.0));
        assert!(!clamped);
        for c in 0..3 {
            assert_eq!(v[c], g.at(3, 2, c));
        }
    }

    #[test]
    fn midpoint_blends_evenly() {
        let g = Grid2::from_values(2, 1, 1, vec![0.0, 1.0]).unwrap();
        let (v, _) = bilinear_sample(&g, PixelCoord::new(0.5, 0.0));
        assert_abs_diff_eq!(v[0], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn out_of_bounds_clamps_and_flags() {
        let g = random_grid(4, 4, 2, 2);
        let (v, clamped) = bilinear_sample(&g, PixelCoord::new(-1.5, 2.0));
        assert!(clamped);
        assert_eq!(v[0], g.at(0, 2, 0));
        let (v2, clamped2) = bilinear_sample(&g, PixelCoord::new(10.0, 10.0));
        assert!(clamped2);
        assert_eq!(v2[1], g.at(3, 3, 1));
    }

    #[test]
    fn point_gradient_matches_central_differences() {
        let g = random_grid(8, 8, 2, 3);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            // Stay strictly inside one interpolation cell so the derivative
            // is smooth across the finite-difference stencil.
            let p = PixelCoord::new(rng.gen_range(0.1..6.8), rng.gen_range(0.1..6.8));
            let h = 1e-6;
            let (dx, dy) = bilinear_sample_grad_point(&g, p);
            let (vxp, _) = bilinear_sample(&g, PixelCoord::new(p.x + h, p.y));
            let (vxm, _) = bilinear_sample(&g, PixelCoord::new(p.x - h, p.y));
            let (vyp, _) = bilinear_sample(&g, PixelCoord::new(p.x, p.y + h));
            let (vym, _) = bilinear_sample(&g, PixelCoord::new(p.x, p.y - h));
            for c in 0..2 {
                let fdx = (vxp[c] - vxm[c]) / (2.0 * h);
                let fdy = (vyp[c] - vym[c]) / (2.0 * h);
                let scale = fdx.abs().max(dx[c].abs()).max(1e-9);
                assert!((fdx - dx[c]).abs() / scale < 1e-6, "dx mismatch {} vs {}", dx[c], fdx);
                let scale = fdy.abs().max(dy[c].abs()).max(1e-9);
                assert!((fdy - dy[c]).abs() / scale < 1e-6, "dy mismatch {} vs {}", dy[c], fdy);
            }
        }
    }

    #[test]
    fn scatter_is_adjoint_of_sample() {
        // <scatter(g), m> must equal <g, sample(m)> for random g, m.
        let g = random_grid(6, 5, 3, 4);
        let p = PixelCoord::new(2.3, 1.7);
        let upstream = vec![0.5, -1.5, 2.0];
        let mut grad = vec![0.0; g.data().len()];
        bilinear_scatter_grad(&g, p, &upstream, &mut grad);
        let lhs: f64 = grad.iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let (v, _) = bilinear_sample(&g, p);
        let rhs: f64 = v.iter().zip(&upstream).map(|(a, b)| a * b).sum();
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-12);
    }

    #[test]
    fn l2_345_triangle() {
        let (v, degenerate) = l2_normalize(&[3.0, 4.0]);
        assert!(!degenerate);
        assert_abs_diff_eq!(v[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(v[1], 0.8, epsilon = 1e-15);
    }

    #[test]
    fn l2_unit_input_unchanged() {
        let (v, _) = l2_normalize(&[0.6, 0.8]);
        assert_abs_diff_eq!(v[0], 0.6, epsilon = 1e-14);
        assert_abs_diff_eq!(v[1], 0.8, epsilon = 1e-14);
    }

    #[test]
    fn l2_zero_is_degenerate() {
        let (v, degenerate) = l2_normalize(&[0.0, 0.0]);
        assert!(degenerate);
        assert_eq!(v, vec![0.0, 0.0]);
    }

    #[test]
    fn l2_backward_matches_finite_differences() {
        let raw = vec![0.4, -1.2, 2.0];
        let upstream = vec![1.0, -0.5, 0.25];
        let analytic = l2_normalize_backward(&raw, &upstream);
        let h = 1e-7;
        for i in 0..raw.len() {
            let mut plus = raw.clone();
            plus[i] += h;
            let mut minus = raw.clone();
            minus[i] -= h;
            let f = |v: &[f64]| -> f64 {
                let (n, _) = l2_normalize(v);
                n.iter().zip(&upstream).map(|(a, b)| a * b).sum()
            };
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            assert_abs_diff_eq!(analytic[i], fd, epsilon = 1e-6);
        }
    }

    proptest! {
        #[test]
        fn sample_is_linear_in_map(seed in 0u64..50, px in 0.0..4.0f64, py in 0.0..4.0f64, a in -3.0..3.0f64, b in -3.0..3.0f64) {
            let m1 = random_grid(5, 5, 2, seed);
            let m2 = random_grid(5, 5, 2, seed + 1000);
            let blended_data: Vec<f64> = m1.data().iter().zip(m2.data()).map(|(x, y)| a * x + b * y).collect();
            let blended = m1.with_data(blended_data).unwrap();
            let p = PixelCoord::new(px, py);
            let (vb, _) = bilinear_sample(&blended, p);
            let (v1, _) = bilinear_sample(&m1, p);
            let (v2, _) = bilinear_sample(&m2, p);
            for c in 0..2 {
                prop_assert!((vb[c] - (a * v1[c] + b * v2[c])).abs() < 1e-10);
            }
        }

        #[test]
        fn l2_output_is_unit_or_zero(v in proptest::collection::vec(-10.0..10.0f64, 1..8)) {
            let (n, degenerate) = l2_normalize(&v);
            let norm: f64 = n.iter().map(|x| x * x).sum::<f64>().sqrt();
            if degenerate {
                prop_assert!(norm == 0.0);
            } else {
                prop_assert!((norm - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn l2_cosines_in_range() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let a: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (na, _) = l2_normalize(&a);
            let (nb, _) = l2_normalize(&b);
            let cos: f64 = na.iter().zip(&nb).map(|(x, y)| x * y).sum();
            assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&cos));
        }
    }
}
