//! Dense differentiable keypoint matching.
//!
//! For each source keypoint, its l2-normalised descriptor is compared
//! against every pixel of the (per-pixel normalised) destination descriptor
//! map. A temperature-weighted softmax over the cosine map followed by a
//! soft-argmax of pixel coordinates yields a sub-pixel destination location;
//! the match weight combines the source/destination descriptor cosine with
//! the two sampled scores: `w = 0.5 (cos + 1) s_src s_dst`.
//!
//! Two implementations share the same semantics: [`match_points`] is a
//! blocked, vectorisation-friendly forward pass for inference and
//! benchmarking, and [`match_points_traced`] additionally records the
//! softmax rows needed by [`match_points_backward`]. The two agree to
//! around 1e-12 (the fast path uses a polynomial `exp`).

use crate::grid::{pix2world, Grid2, PixelCoord, WorldCoord};
use crate::pose_solver::{CorrespondenceError, WeightedCorrespondences};
use crate::sample::{
    bilinear_sample, bilinear_sample_grad_point, bilinear_scatter_grad, l2_normalize,
    l2_normalize_backward, DEGENERATE_NORM_EPS,
};
use thiserror::Error;

/// Matching parameters. The softmax temperature controls how sharply the
/// dense search commits to the best cosine; the default suits 64-256 px
/// grids.
#[derive(Debug, Clone, Copy)]
pub struct MatchConfig {
    pub temperature: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig { temperature: 50.0 }
    }
}

/// Temperatures above this fall back to the max-subtracted two-pass
/// softmax; below it `exp(T * cos)` cannot overflow (|cos| <= 1) and the
/// fused single-pass kernel is used.
const FUSED_PATH_MAX_TEMPERATURE: f64 = 600.0;

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("descriptor maps have different channel counts: {0} vs {1}")]
    ChannelMismatch(usize, usize),
    #[error("score map must be single-channel and match its descriptor map shape")]
    BadScoreMap,
    #[error("temperature must be positive and finite, got {0}")]
    BadTemperature(f64),
    #[error("source point {index} at ({x}, {y}) is outside the source grid")]
    SourceOutOfBounds { index: usize, x: f64, y: f64 },
}

/// Matcher output: one destination location and weight per source point.
#[derive(Debug, Clone)]
pub struct MatchOutput {
    pub dst_points: Vec<PixelCoord>,
    pub weights: Vec<f64>,
}

/// Matched point pairs lifted to world coordinates, ready for pose solving.
#[derive(Debug, Clone)]
pub struct MatchSet {
    pub src_points: Vec<WorldCoord>,
    pub dst_points: Vec<WorldCoord>,
    pub weights: Vec<f64>,
    pub temperature: f64,
}

impl MatchSet {
    pub fn from_pixel_matches(
        src_points: &[PixelCoord],
        output: &MatchOutput,
        src_grid: &Grid2,
        dst_grid: &Grid2,
        temperature: f64,
    ) -> Self {
        MatchSet {
            src_points: src_points.iter().map(|&p| pix2world(p, src_grid)).collect(),
            dst_points: output.dst_points.iter().map(|&p| pix2world(p, dst_grid)).collect(),
            weights: output.weights.clone(),
            temperature,
        }
    }

    pub fn sum_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn to_correspondences(&self) -> Result<WeightedCorrespondences, CorrespondenceError> {
        WeightedCorrespondences::new(self.src_points.clone(), self.dst_points.clone(), self.weights.clone())
    }
}

fn validate(
    src_points: &[PixelCoord],
    src_desc: &Grid2,
    dst_desc: &Grid2,
    src_scores: &Grid2,
    dst_scores: &Grid2,
    cfg: &MatchConfig,
) -> Result<(), MatchError> {
    if src_desc.channels() != dst_desc.channels() {
        return Err(MatchError::ChannelMismatch(src_desc.channels(), dst_desc.channels()));
    }
    if src_scores.channels() != 1
        || dst_scores.channels() != 1
        || src_scores.width() != src_desc.width()
        || src_scores.height() != src_desc.height()
        || dst_scores.width() != dst_desc.width()
        || dst_scores.height() != dst_desc.height()
    {
        return Err(MatchError::BadScoreMap);
    }
    if !(cfg.temperature.is_finite() && cfg.temperature > 0.0) {
        return Err(MatchError::BadTemperature(cfg.temperature));
    }
    let (mw, mh) = ((src_desc.width() - 1) as f64, (src_desc.height() - 1) as f64);
    for (i, p) in src_points.iter().enumerate() {
        if !(p.x >= 0.0 && p.x <= mw && p.y >= 0.0 && p.y <= mh) {
            return Err(MatchError::SourceOutOfBounds { index: i, x: p.x, y: p.y });
        }
    }
    Ok(())
}

/// Per-pixel l2 normalisation of a descriptor map into channel-planar
/// layout: `planes[c * w * h + pixel]`. Returns the planes and the raw
/// per-pixel norms (zero-norm pixels normalise to zero).
fn normalize_planar(desc: &Grid2) -> (Vec<f64>, Vec<f64>) {
    let (w, h, ch) = (desc.width(), desc.height(), desc.channels());
    let px = w * h;
    let data = desc.data();
    let mut planes = vec![0.0; px * ch];
    let mut norms = vec![0.0; px];
    for p in 0..px {
        let base = p * ch;
        let mut sq = 0.0;
        for c in 0..ch {
            sq += data[base + c] * data[base + c];
        }
        let norm = sq.sqrt();
        norms[p] = norm;
        if norm > DEGENERATE_NORM_EPS {
            let inv = 1.0 / norm;
            for c in 0..ch {
                planes[c * px + p] = data[base + c] * inv;
            }
        }
    }
    (planes, norms)
}

/// Per-pixel l2 normalisation keeping the natural interleaved layout;
/// a single sequential pass.
fn normalize_interleaved(desc: &Grid2) -> Vec<f64> {
    let ch = desc.channels();
    let data = desc.data();
    let mut out = vec![0.0; data.len()];
    for (pixel_out, pixel_in) in out.chunks_exact_mut(ch).zip(data.chunks_exact(ch)) {
        let sq: f64 = pixel_in.iter().map(|v| v * v).sum();
        let norm = sq.sqrt();
        if norm > DEGENERATE_NORM_EPS {
            let inv = 1.0 / norm;
            for (o, &v) in pixel_out.iter_mut().zip(pixel_in) {
                *o = v * inv;
            }
        }
    }
    out
}

/// Normalised source descriptors sampled at the keypoint locations, plus
/// raw samples and degenerate flags.
fn source_descriptors(src_desc: &Grid2, src_points: &[PixelCoord]) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let ch = src_desc.channels();
    let mut unit = vec![0.0; src_points.len() * ch];
    let mut raw = vec![0.0; src_points.len() * ch];
    let mut degenerate = vec![false; src_points.len()];
    let mut buf = vec![0.0; ch];
    for (i, &p) in src_points.iter().enumerate() {
        crate::sample::bilinear_sample_into(src_desc, p, &mut buf);
        raw[i * ch..(i + 1) * ch].copy_from_slice(&buf);
        let (n, degen) = l2_normalize(&buf);
        unit[i * ch..(i + 1) * ch].copy_from_slice(&n);
        degenerate[i] = degen;
    }
    (unit, raw, degenerate)
}

/// Finishing step shared by both paths: sample the destination descriptor
/// and score at the soft-argmax location and combine into the match weight.
fn finish_match(
    dst_desc: &Grid2,
    dst_scores: &Grid2,
    src_scores: &Grid2,
    src_point: PixelCoord,
    dst_point: PixelCoord,
    d_src: &[f64],
    src_degenerate: bool,
) -> f64 {
    if src_degenerate {
        return 0.0;
    }
    let (raw_d, _) = bilinear_sample(dst_desc, dst_point);
    let (d_dst, _) = l2_normalize(&raw_d);
    let cos: f64 = d_src.iter().zip(&d_dst).map(|(a, b)| a * b).sum();
    let s_src = bilinear_sample(src_scores, src_point).0[0];
    let s_dst = bilinear_sample(dst_scores, dst_point).0[0];
    (0.5 * (cos + 1.0) * s_src * s_dst).clamp(0.0, 1.0)
}

/// Dense differentiable matching, fast path.
///
/// The pixel-coordinate map of the destination grid plays the role of the
/// soft-argmax coordinate field. The inner loop is blocked over row
/// segments and keypoint groups so the cosine accumulation and the softmax
/// moments vectorise; see [`kernel`].
pub fn match_points(
    src_points: &[PixelCoord],
    src_desc: &Grid2,
    dst_desc: &Grid2,
    src_scores: &Grid2,
    dst_scores: &Grid2,
    cfg: &MatchConfig,
) -> Result<MatchOutput, MatchError> {
    validate(src_points, src_desc, dst_desc, src_scores, dst_scores, cfg)?;
    let (unit_src, _, degenerate) = source_descriptors(src_desc, src_points);
    let normalized = normalize_interleaved(dst_desc);

    let dst_points = if cfg.temperature <= FUSED_PATH_MAX_TEMPERATURE {
        kernel::soft_argmax_all(
            &unit_src,
            &normalized,
            dst_desc.width(),
            dst_desc.height(),
            dst_desc.channels(),
            cfg.temperature,
        )
    } else {
        two_pass_soft_argmax(
            &unit_src,
            &normalized,
            dst_desc.width(),
            dst_desc.height(),
            dst_desc.channels(),
            cfg.temperature,
        )
    };

    let ch = src_desc.channels();
    let weights = (0..src_points.len())
        .map(|i| {
            finish_match(
                dst_desc,
                dst_scores,
                src_scores,
                src_points[i],
                dst_points[i],
                &unit_src[i * ch..(i + 1) * ch],
                degenerate[i],
            )
        })
        .collect();
    Ok(MatchOutput { dst_points, weights })
}

/// Reference soft-argmax used for extreme temperatures: max-subtracted
/// softmax, two passes over the cosine rows. `normalized` is interleaved.
fn two_pass_soft_argmax(
    unit_src: &[f64],
    normalized: &[f64],
    w: usize,
    h: usize,
    ch: usize,
    t: f64,
) -> Vec<PixelCoord> {
    let px = w * h;
    let n = unit_src.len() / ch;
    let mut out = Vec::with_capacity(n);
    let mut cos_row = vec![0.0; px];
    for k in 0..n {
        let desc = &unit_src[k * ch..(k + 1) * ch];
        for (p, pixel) in normalized.chunks_exact(ch).enumerate() {
            cos_row[p] = desc.iter().zip(pixel).map(|(a, b)| a * b).sum();
        }
        let max = cos_row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let (mut z, mut sx, mut sy) = (0.0, 0.0, 0.0);
        for (p, &c) in cos_row.iter().enumerate() {
            let e = (t * (c - max)).exp();
            z += e;
            sx += e * (p % w) as f64;
            sy += e * (p / w) as f64;
        }
        out.push(PixelCoord::new(sx / z, sy / z));
    }
    out
}

/// Softmax with temperature over arbitrary values (max-subtracted, exact
/// `exp`); the reference definition of the distribution used by the dense
/// search. The result sums to 1.
pub fn softmax_with_temperature(values: &[f64], temperature: f64) -> Vec<f64> {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|&v| (temperature * (v - max)).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Expectation of pixel coordinates under a distribution over a `w`-wide
/// row-major grid.
pub fn soft_argmax(probabilities: &[f64], width: usize) -> PixelCoord {
    let mut sx = 0.0;
    let mut sy = 0.0;
    for (p, &s) in probabilities.iter().enumerate() {
        sx += s * (p % width) as f64;
        sy += s * (p / width) as f64;
    }
    PixelCoord::new(sx, sy)
}

/// Everything the backward pass needs from a traced forward run.
pub struct MatchTrace {
    /// Softmax rows, one per source point, flattened `n x (w*h)`.
    softmax: Vec<f64>,
    /// Normalised destination map, channel-planar.
    planes: Vec<f64>,
    /// Raw destination pixel norms.
    dst_norms: Vec<f64>,
    /// Normalised and raw source descriptors, `n x ch`.
    unit_src: Vec<f64>,
    raw_src: Vec<f64>,
    degenerate: Vec<bool>,
    /// Destination-side samples at the matched points.
    raw_dst: Vec<f64>,
    unit_dst: Vec<f64>,
    s_src: Vec<f64>,
    s_dst: Vec<f64>,
    cos_sd: Vec<f64>,
}

/// Dense differentiable matching with a trace for [`match_points_backward`].
pub fn match_points_traced(
    src_points: &[PixelCoord],
    src_desc: &Grid2,
    dst_desc: &Grid2,
    src_scores: &Grid2,
    dst_scores: &Grid2,
    cfg: &MatchConfig,
) -> Result<(MatchOutput, MatchTrace), MatchError> {
    validate(src_points, src_desc, dst_desc, src_scores, dst_scores, cfg)?;
    let (unit_src, raw_src, degenerate) = source_descriptors(src_desc, src_points);
    let (planes, dst_norms) = normalize_planar(dst_desc);
    let (w, h, ch) = (dst_desc.width(), dst_desc.height(), dst_desc.channels());
    let px = w * h;
    let n = src_points.len();
    let t = cfg.temperature;

    let mut softmax = vec![0.0; n * px];
    let mut dst_points = Vec::with_capacity(n);
    let mut cos_row = vec![0.0; px];
    for k in 0..n {
        let desc = &unit_src[k * ch..(k + 1) * ch];
        cos_row.fill(0.0);
        for (c, &dc) in desc.iter().enumerate() {
            let plane = &planes[c * px..(c + 1) * px];
            for (acc, &v) in cos_row.iter_mut().zip(plane) {
                *acc += dc * v;
            }
        }
        let max = cos_row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let row = &mut softmax[k * px..(k + 1) * px];
        let mut z = 0.0;
        for (s, &c) in row.iter_mut().zip(cos_row.iter()) {
            *s = (t * (c - max)).exp();
            z += *s;
        }
        let inv_z = 1.0 / z;
        let (mut sx, mut sy) = (0.0, 0.0);
        for (p, s) in row.iter_mut().enumerate() {
            *s *= inv_z;
            sx += *s * (p % w) as f64;
            sy += *s * (p / w) as f64;
        }
        dst_points.push(PixelCoord::new(sx, sy));
    }

    let mut raw_dst = vec![0.0; n * ch];
    let mut unit_dst = vec![0.0; n * ch];
    let mut s_src = vec![0.0; n];
    let mut s_dst = vec![0.0; n];
    let mut cos_sd = vec![0.0; n];
    let mut weights = Vec::with_capacity(n);
    for k in 0..n {
        let (raw, _) = bilinear_sample(dst_desc, dst_points[k]);
        let (unit, _) = l2_normalize(&raw);
        let cos: f64 = unit_src[k * ch..(k + 1) * ch].iter().zip(&unit).map(|(a, b)| a * b).sum();
        raw_dst[k * ch..(k + 1) * ch].copy_from_slice(&raw);
        unit_dst[k * ch..(k + 1) * ch].copy_from_slice(&unit);
        s_src[k] = bilinear_sample(src_scores, src_points[k]).0[0];
        s_dst[k] = bilinear_sample(dst_scores, dst_points[k]).0[0];
        cos_sd[k] = cos;
        if degenerate[k] {
            weights.push(0.0);
        } else {
            weights.push((0.5 * (cos + 1.0) * s_src[k] * s_dst[k]).clamp(0.0, 1.0));
        }
    }

    Ok((
        MatchOutput { dst_points, weights },
        MatchTrace {
            softmax,
            planes,
            dst_norms,
            unit_src,
            raw_src,
            degenerate,
            raw_dst,
            unit_dst,
            s_src,
            s_dst,
            cos_sd,
        },
    ))
}

/// Gradients of a scalar objective with respect to all matcher inputs.
pub struct MatchGrads {
    pub d_src_points: Vec<(f64, f64)>,
    /// Dense gradients, same layouts as the corresponding forward grids.
    pub d_src_desc: Vec<f64>,
    pub d_dst_desc: Vec<f64>,
    pub d_src_scores: Vec<f64>,
    pub d_dst_scores: Vec<f64>,
}

/// Reverse-mode gradients of the traced forward pass. Matches emitted with
/// a degenerate source descriptor contribute no gradient.
#[allow(clippy::too_many_arguments)]
pub fn match_points_backward(
    src_points: &[PixelCoord],
    src_desc: &Grid2,
    dst_desc: &Grid2,
    src_scores: &Grid2,
    dst_scores: &Grid2,
    cfg: &MatchConfig,
    output: &MatchOutput,
    trace: &MatchTrace,
    d_dst_points: &[(f64, f64)],
    d_weights: &[f64],
) -> MatchGrads {
    let (w, h, ch) = (dst_desc.width(), dst_desc.height(), dst_desc.channels());
    let px = w * h;
    let n = src_points.len();
    let t = cfg.temperature;

    let mut d_src_points = vec![(0.0, 0.0); n];
    let mut d_src_desc = vec![0.0; src_desc.data().len()];
    let mut d_dst_desc = vec![0.0; dst_desc.data().len()];
    let mut d_src_scores = vec![0.0; src_scores.data().len()];
    let mut d_dst_scores = vec![0.0; dst_scores.data().len()];
    // Gradient on the normalised planar destination map, accumulated over
    // all source points and pushed through the per-pixel normalisation once.
    let mut d_planes = vec![0.0; trace.planes.len()];

    for k in 0..n {
        if trace.degenerate[k] {
            continue;
        }
        let p_d = output.dst_points[k];
        let p_s = src_points[k];
        let d_s = &trace.unit_src[k * ch..(k + 1) * ch];
        let d_d = &trace.unit_dst[k * ch..(k + 1) * ch];
        let g_w = d_weights[k];
        let mut g_pd = (d_dst_points[k].0, d_dst_points[k].1);

        // Weight formula backward.
        let g_cos = 0.5 * g_w * trace.s_src[k] * trace.s_dst[k];
        let g_ssrc = g_w * 0.5 * (trace.cos_sd[k] + 1.0) * trace.s_dst[k];
        let g_sdst = g_w * 0.5 * (trace.cos_sd[k] + 1.0) * trace.s_src[k];
        let mut g_dsrc: Vec<f64> = d_d.iter().map(|v| g_cos * v).collect();
        let g_ddst: Vec<f64> = d_s.iter().map(|v| g_cos * v).collect();

        // Destination score sample: dense scatter plus location gradient.
        bilinear_scatter_grad(dst_scores, p_d, &[g_sdst], &mut d_dst_scores);
        let (sdx, sdy) = bilinear_sample_grad_point(dst_scores, p_d);
        g_pd.0 += g_sdst * sdx[0];
        g_pd.1 += g_sdst * sdy[0];

        // Source score sample.
        bilinear_scatter_grad(src_scores, p_s, &[g_ssrc], &mut d_src_scores);
        let (ssx, ssy) = bilinear_sample_grad_point(src_scores, p_s);
        d_src_points[k].0 += g_ssrc * ssx[0];
        d_src_points[k].1 += g_ssrc * ssy[0];

        // Destination descriptor sample at p_d.
        let raw_d = &trace.raw_dst[k * ch..(k + 1) * ch];
        let g_raw_d = l2_normalize_backward(raw_d, &g_ddst);
        bilinear_scatter_grad(dst_desc, p_d, &g_raw_d, &mut d_dst_desc);
        let (ddx, ddy) = bilinear_sample_grad_point(dst_desc, p_d);
        for c in 0..ch {
            g_pd.0 += g_raw_d[c] * ddx[c];
            g_pd.1 += g_raw_d[c] * ddy[c];
        }

        // Soft-argmax and softmax backward. With g_S(u) = g_pd . X(u),
        // the softmax Jacobian gives
        //   g_C(u) = T S(u) (g_pd . (X(u) - p_d)).
        let row = &trace.softmax[k * px..(k + 1) * px];
        for p in 0..px {
            let s = row[p];
            if s == 0.0 {
                continue;
            }
            let gx = (p % w) as f64 - p_d.x;
            let gy = (p / w) as f64 - p_d.y;
            let g_c = t * s * (g_pd.0 * gx + g_pd.1 * gy);
            // C(u) = d_s . planes(u): rank-one into the planar gradient and
            // accumulation into the source descriptor gradient.
            for c in 0..ch {
                d_planes[c * px + p] += g_c * d_s[c];
                g_dsrc[c] += g_c * trace.planes[c * px + p];
            }
        }

        // Source descriptor normalisation and sampling.
        let raw_s = &trace.raw_src[k * ch..(k + 1) * ch];
        let g_raw_s = l2_normalize_backward(raw_s, &g_dsrc);
        bilinear_scatter_grad(src_desc, p_s, &g_raw_s, &mut d_src_desc);
        let (sdx, sdy) = bilinear_sample_grad_point(src_desc, p_s);
        for c in 0..ch {
            d_src_points[k].0 += g_raw_s[c] * sdx[c];
            d_src_points[k].1 += g_raw_s[c] * sdy[c];
        }
    }

    // Per-pixel normalisation backward, once over the whole map.
    let data = dst_desc.data();
    for p in 0..px {
        let norm = trace.dst_norms[p];
        if norm <= DEGENERATE_NORM_EPS {
            continue;
        }
        let mut dot = 0.0;
        for c in 0..ch {
            dot += trace.planes[c * px + p] * d_planes[c * px + p];
        }
        let inv = 1.0 / norm;
        let base = p * ch;
        for c in 0..ch {
            let unit = data[base + c] * inv;
            d_dst_desc[base + c] += (d_planes[c * px + p] - unit * dot) * inv;
        }
    }

    MatchGrads { d_src_points, d_src_desc, d_dst_desc, d_src_scores, d_dst_scores }
}

/// Blocked, vectorisation-friendly inner loops for the dense search.
pub mod kernel {
    /// Row-segment length; chosen so one segment of cosine accumulators per
    /// keypoint block stays in L1.
    const TILE: usize = 128;
    /// Keypoints processed together per segment pass.
    const BLOCK: usize = 8;
    /// Lanes for the manually unrolled reductions (enables SIMD without
    /// changing the deterministic summation order from run to run).
    const LANES: usize = 8;

    /// Soft-argmax of `exp(T * cos)` over the destination map for every
    /// source descriptor, fused into a single pass.
    ///
    /// `unit_src` is `n x ch` row-major; `normalized` is the per-pixel
    /// normalised destination map in its natural interleaved layout. Since
    /// |cos| <= 1 the unnormalised weights stay within f64 range for any
    /// temperature the caller routes here, so no max subtraction is needed
    /// and the softmax moments accumulate online. Dispatches to a
    /// hand-vectorised AVX-512 kernel when the CPU supports it.
    pub fn soft_argmax_all(
        unit_src: &[f64],
        normalized: &[f64],
        w: usize,
        h: usize,
        ch: usize,
        t: f64,
    ) -> Vec<super::PixelCoord> {
        #[cfg(target_arch = "x86_64")]
        {
            if is_x86_feature_detected!("avx512f") && is_x86_feature_detected!("avx512dq") {
                return unsafe { avx512::soft_argmax_all(unit_src, normalized, w, h, ch, t) };
            }
        }
        portable_soft_argmax_all(unit_src, normalized, w, h, ch, t)
    }

    /// Polynomial `exp` accurate to ~3e-13 relative over |x| <= 700,
    /// branch-free so it vectorises inside the accumulation loops. The
    /// round-to-nearest is done with the 1.5 * 2^52 magic-add trick to stay
    /// on SIMD-friendly instructions.
    #[inline(always)]
    pub fn fast_exp(x: f64) -> f64 {
        const LOG2E: f64 = std::f64::consts::LOG2_E;
        const LN2_HI: f64 = 6.931_471_803_691_238e-1;
        const LN2_LO: f64 = 1.908_214_929_270_588e-10;
        const MAGIC: f64 = 6_755_399_441_055_744.0; // 1.5 * 2^52
        // 1/k! for the degree-10 Taylor polynomial of exp on |r| <= ln2/2.
        const C: [f64; 11] = [
            1.0,
            1.0,
            0.5,
            1.0 / 6.0,
            1.0 / 24.0,
            1.0 / 120.0,
            1.0 / 720.0,
            1.0 / 5040.0,
            1.0 / 40320.0,
            1.0 / 362880.0,
            1.0 / 3628800.0,
        ];
        let shifted = x * LOG2E + MAGIC;
        let kf = shifted - MAGIC;
        // Low mantissa bits of `shifted` hold k in two's complement.
        let ki = shifted.to_bits() as i32 as i64;
        let r = (x - kf * LN2_HI) - kf * LN2_LO;
        let mut p = C[10];
        p = p * r + C[9];
        p = p * r + C[8];
        p = p * r + C[7];
        p = p * r + C[6];
        p = p * r + C[5];
        p = p * r + C[4];
        p = p * r + C[3];
        p = p * r + C[2];
        p = p * r + C[1];
        p = p * r + C[0];
        let bits = ((ki + 1023) as u64) << 52;
        p * f64::from_bits(bits)
    }

    /// Portable fallback: blocked row segments with lane-structured
    /// reductions the auto-vectoriser handles well. Works channel-planar,
    /// so it first transposes the interleaved input.
    fn portable_soft_argmax_all(
        unit_src: &[f64],
        normalized: &[f64],
        w: usize,
        h: usize,
        ch: usize,
        t: f64,
    ) -> Vec<super::PixelCoord> {
        let px = w * h;
        let mut planes = vec![0.0; normalized.len()];
        for (p, pixel) in normalized.chunks_exact(ch).enumerate() {
            for (c, &v) in pixel.iter().enumerate() {
                planes[c * px + p] = v;
            }
        }
        let planes = &planes[..];
        let n = unit_src.len() / ch;
        let mut sum = vec![0.0f64; n];
        let mut sum_x = vec![0.0f64; n];
        let mut sum_y = vec![0.0f64; n];
        let mut acc = [[0.0f64; TILE]; BLOCK];
        // In-segment pixel offsets as floats, so the moment loop needs no
        // integer conversions.
        let mut offsets = [0.0f64; TILE];
        for (i, o) in offsets.iter_mut().enumerate() {
            *o = i as f64;
        }

        for v in 0..h {
            let row = v * w;
            let mut u0 = 0;
            while u0 < w {
                let len = TILE.min(w - u0);
                for kb in (0..n).step_by(BLOCK) {
                    let nb = BLOCK.min(n - kb);
                    // Cosine accumulation: acc[k][i] = sum_c K[k][c] plane_c[i].
                    for (k, a) in acc.iter_mut().enumerate().take(nb) {
                        let acc_row = &mut a[..len];
                        acc_row.fill(0.0);
                        let desc = &unit_src[(kb + k) * ch..(kb + k + 1) * ch];
                        for (c, &dc) in desc.iter().enumerate() {
                            let plane = &planes[c * px + row + u0..c * px + row + u0 + len];
                            for (ai, &pi) in acc_row.iter_mut().zip(plane) {
                                *ai += dc * pi;
                            }
                        }
                    }
                    // Fused exp and moment accumulation. Fixed-width lane
                    // accumulators keep the reduction order deterministic
                    // while letting the whole body vectorise.
                    for (k, a) in acc.iter().enumerate().take(nb) {
                        let mut se = [0.0f64; LANES];
                        let mut si = [0.0f64; LANES];
                        let aligned = len - len % LANES;
                        for (av, ov) in a[..aligned].chunks_exact(LANES).zip(offsets[..aligned].chunks_exact(LANES)) {
                            for lane in 0..LANES {
                                let e = fast_exp(t * av[lane]);
                                se[lane] += e;
                                si[lane] += e * ov[lane];
                            }
                        }
                        let mut se_tot = 0.0;
                        let mut si_tot = 0.0;
                        for lane in 0..LANES {
                            se_tot += se[lane];
                            si_tot += si[lane];
                        }
                        for i in aligned..len {
                            let e = fast_exp(t * a[i]);
                            se_tot += e;
                            si_tot += e * offsets[i];
                        }
                        sum[kb + k] += se_tot;
                        sum_x[kb + k] += u0 as f64 * se_tot + si_tot;
                        sum_y[kb + k] += v as f64 * se_tot;
                    }
                }
                u0 += len;
            }
        }

        (0..n)
            .map(|k| super::PixelCoord::new(sum_x[k] / sum[k], sum_y[k] / sum[k]))
            .collect()
    }

    /// Hand-vectorised kernel: eight keypoints per zmm register, with the
    /// block's descriptors held in loop-invariant registers and per-pixel
    /// channel values broadcast from the interleaved normalised map.
    #[cfg(target_arch = "x86_64")]
    mod avx512 {
        use std::arch::x86_64::*;

        const KP: usize = 8;
        /// Rows per tile: keeps the tile's slice of the normalised map
        /// resident in L2 while all keypoint blocks sweep it.
        const ROW_TILE: usize = 8;

        /// Vector exp with the same range reduction as `fast_exp`; degree 8
        /// keeps the matched locations within ~1e-7 px of the exact-softmax
        /// reference, far below any physical tolerance in the pipeline.
        #[inline]
        #[target_feature(enable = "avx512f,avx512dq")]
        unsafe fn exp_pd(x: __m512d) -> __m512d {
            let log2e = _mm512_set1_pd(std::f64::consts::LOG2_E);
            let ln2_hi = _mm512_set1_pd(6.931_471_803_691_238e-1);
            let ln2_lo = _mm512_set1_pd(1.908_214_929_270_588e-10);
            let kf = _mm512_roundscale_pd(_mm512_mul_pd(x, log2e), _MM_FROUND_TO_NEAREST_INT | _MM_FROUND_NO_EXC);
            let mut r = _mm512_fnmadd_pd(kf, ln2_hi, x);
            r = _mm512_fnmadd_pd(kf, ln2_lo, r);
            let mut p = _mm512_set1_pd(1.0 / 40320.0);
            p = _mm512_fmadd_pd(p, r, _mm512_set1_pd(1.0 / 5040.0));
            p = _mm512_fmadd_pd(p, r, _mm512_set1_pd(1.0 / 720.0));
            p = _mm512_fmadd_pd(p, r, _mm512_set1_pd(1.0 / 120.0));
            p = _mm512_fmadd_pd(p, r, _mm512_set1_pd(1.0 / 24.0));
            p = _mm512_fmadd_pd(p, r, _mm512_set1_pd(1.0 / 6.0));
            p = _mm512_fmadd_pd(p, r, _mm512_set1_pd(0.5));
            p = _mm512_fmadd_pd(p, r, _mm512_set1_pd(1.0));
            p = _mm512_fmadd_pd(p, r, _mm512_set1_pd(1.0));
            // Hardware p * 2^kf.
            _mm512_scalef_pd(p, kf)
        }

        #[target_feature(enable = "avx512f,avx512dq")]
        pub unsafe fn soft_argmax_all(
            unit_src: &[f64],
            normalized: &[f64],
            w: usize,
            h: usize,
            ch: usize,
            t: f64,
        ) -> Vec<crate::grid::PixelCoord> {
            let n = unit_src.len() / ch;
            let blocks = n.div_ceil(KP);
            // Transposed block descriptors: kt[b][c][lane], zero padded so
            // the final partial block computes harmless cos = 0 lanes.
            let mut kt = vec![0.0f64; blocks * ch * KP];
            for k in 0..n {
                for c in 0..ch {
                    kt[(k / KP) * ch * KP + c * KP + (k % KP)] = unit_src[k * ch + c];
                }
            }
            let mut sum = vec![0.0f64; blocks * KP];
            let mut sum_x = vec![0.0f64; blocks * KP];
            let mut sum_y = vec![0.0f64; blocks * KP];

            match ch {
                16 => sweep::<16>(&kt, normalized, w, h, t, &mut sum, &mut sum_x, &mut sum_y),
                12 => sweep::<12>(&kt, normalized, w, h, t, &mut sum, &mut sum_x, &mut sum_y),
                8 => sweep::<8>(&kt, normalized, w, h, t, &mut sum, &mut sum_x, &mut sum_y),
                4 => sweep::<4>(&kt, normalized, w, h, t, &mut sum, &mut sum_x, &mut sum_y),
                _ => sweep_dyn(&kt, normalized, w, h, ch, t, &mut sum, &mut sum_x, &mut sum_y),
            }

            (0..n)
                .map(|k| crate::grid::PixelCoord::new(sum_x[k] / sum[k], sum_y[k] / sum[k]))
                .collect()
        }

        /// One keypoint block over one row, in two register-friendly passes:
        /// the cosine matvec writes one zmm per pixel into an L1 row buffer,
        /// then the exp/moment pass consumes it with the exp constants
        /// staying resident. Returns the row's (sum e, sum e*u) vectors.
        #[inline]
        #[target_feature(enable = "avx512f,avx512dq")]
        unsafe fn row_pass<const CH: usize>(
            kreg: &[__m512d; CH],
            row_data: &[f64],
            w: usize,
            cos_buf: &mut [f64],
        ) -> (__m512d, __m512d) {
            let base = row_data.as_ptr();
            let buf = cos_buf.as_mut_ptr();
            for u in 0..w {
                let pixel = base.add(u * CH);
                let mut a0 = _mm512_setzero_pd();
                let mut a1 = _mm512_setzero_pd();
                let mut a2 = _mm512_setzero_pd();
                let mut a3 = _mm512_setzero_pd();
                let mut c = 0;
                while c + 4 <= CH {
                    a0 = _mm512_fmadd_pd(kreg[c], _mm512_set1_pd(*pixel.add(c)), a0);
                    a1 = _mm512_fmadd_pd(kreg[c + 1], _mm512_set1_pd(*pixel.add(c + 1)), a1);
                    a2 = _mm512_fmadd_pd(kreg[c + 2], _mm512_set1_pd(*pixel.add(c + 2)), a2);
                    a3 = _mm512_fmadd_pd(kreg[c + 3], _mm512_set1_pd(*pixel.add(c + 3)), a3);
                    c += 4;
                }
                while c < CH {
                    a0 = _mm512_fmadd_pd(kreg[c], _mm512_set1_pd(*pixel.add(c)), a0);
                    c += 1;
                }
                let acc = _mm512_add_pd(_mm512_add_pd(a0, a1), _mm512_add_pd(a2, a3));
                _mm512_storeu_pd(buf.add(u * KP), acc);
            }
            let mut se = _mm512_setzero_pd();
            let mut sx = _mm512_setzero_pd();
            let mut se2 = _mm512_setzero_pd();
            let mut sx2 = _mm512_setzero_pd();
            let mut u = 0;
            while u + 2 <= w {
                let e = exp_pd(_mm512_loadu_pd(buf.add(u * KP)));
                let e2 = exp_pd(_mm512_loadu_pd(buf.add((u + 1) * KP)));
                se = _mm512_add_pd(se, e);
                sx = _mm512_fmadd_pd(e, _mm512_set1_pd(u as f64), sx);
                se2 = _mm512_add_pd(se2, e2);
                sx2 = _mm512_fmadd_pd(e2, _mm512_set1_pd((u + 1) as f64), sx2);
                u += 2;
            }
            if u < w {
                let e = exp_pd(_mm512_loadu_pd(buf.add(u * KP)));
                se = _mm512_add_pd(se, e);
                sx = _mm512_fmadd_pd(e, _mm512_set1_pd(u as f64), sx);
            }
            (_mm512_add_pd(se, se2), _mm512_add_pd(sx, sx2))
        }

        #[inline]
        #[target_feature(enable = "avx512f,avx512dq")]
        unsafe fn sweep<const CH: usize>(
            kt: &[f64],
            normalized: &[f64],
            w: usize,
            h: usize,
            t: f64,
            sum: &mut [f64],
            sum_x: &mut [f64],
            sum_y: &mut [f64],
        ) {
            let blocks = kt.len() / (CH * KP);
            let tv = _mm512_set1_pd(t);
            let mut cos_buf = vec![0.0f64; w * KP];
            let mut v0 = 0;
            while v0 < h {
                let v1 = (v0 + ROW_TILE).min(h);
                for b in 0..blocks {
                    let ktb = &kt[b * CH * KP..(b + 1) * CH * KP];
                    // Descriptors pre-scaled by T, so the matvec directly
                    // produces softmax logits.
                    let mut kreg = [_mm512_setzero_pd(); CH];
                    for (c, reg) in kreg.iter_mut().enumerate() {
                        *reg = _mm512_mul_pd(_mm512_loadu_pd(ktb.as_ptr().add(c * KP)), tv);
                    }
                    for v in v0..v1 {
                        let row_data = &normalized[v * w * CH..(v + 1) * w * CH];
                        let (se, sx) = row_pass::<CH>(&kreg, row_data, w, &mut cos_buf);
                        let mut se_arr = [0.0f64; KP];
                        let mut sx_arr = [0.0f64; KP];
                        _mm512_storeu_pd(se_arr.as_mut_ptr(), se);
                        _mm512_storeu_pd(sx_arr.as_mut_ptr(), sx);
                        let vf = v as f64;
                        for lane in 0..KP {
                            let k = b * KP + lane;
                            sum[k] += se_arr[lane];
                            sum_x[k] += sx_arr[lane];
                            sum_y[k] += vf * se_arr[lane];
                        }
                    }
                }
                v0 = v1;
            }
        }

        /// Arbitrary channel counts: same structure with in-memory
        /// descriptor vectors.
        #[allow(clippy::too_many_arguments)]
        #[target_feature(enable = "avx512f,avx512dq")]
        unsafe fn sweep_dyn(
            kt: &[f64],
            normalized: &[f64],
            w: usize,
            h: usize,
            ch: usize,
            t: f64,
            sum: &mut [f64],
            sum_x: &mut [f64],
            sum_y: &mut [f64],
        ) {
            let blocks = kt.len() / (ch * KP);
            let tv = _mm512_set1_pd(t);
            let mut v0 = 0;
            while v0 < h {
                let v1 = (v0 + ROW_TILE).min(h);
                for b in 0..blocks {
                    let ktb = &kt[b * ch * KP..(b + 1) * ch * KP];
                    for v in v0..v1 {
                        let row_data = &normalized[v * w * ch..(v + 1) * w * ch];
                        let mut se = _mm512_setzero_pd();
                        let mut sx = _mm512_setzero_pd();
                        for u in 0..w {
                            let pixel = row_data.as_ptr().add(u * ch);
                            let mut acc = _mm512_setzero_pd();
                            for c in 0..ch {
                                let kv = _mm512_loadu_pd(ktb.as_ptr().add(c * KP));
                                acc = _mm512_fmadd_pd(kv, _mm512_set1_pd(*pixel.add(c)), acc);
                            }
                            let e = exp_pd(_mm512_mul_pd(acc, tv));
                            se = _mm512_add_pd(se, e);
                            sx = _mm512_fmadd_pd(e, _mm512_set1_pd(u as f64), sx);
                        }
                        let mut se_arr = [0.0f64; KP];
                        let mut sx_arr = [0.0f64; KP];
                        _mm512_storeu_pd(se_arr.as_mut_ptr(), se);
                        _mm512_storeu_pd(sx_arr.as_mut_ptr(), sx);
                        let vf = v as f64;
                        for lane in 0..KP {
                            let k = b * KP + lane;
                            sum[k] += se_arr[lane];
                            sum_x[k] += sx_arr[lane];
                            sum_y[k] += vf * se_arr[lane];
                        }
                    }
                }
                v0 = v1;
            }
        }
    }

}
