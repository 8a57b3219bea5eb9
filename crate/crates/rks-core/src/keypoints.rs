//! Keypoint extraction from dense network heads.
//!
//! The dense outputs (location logits, score logits, descriptor map) are
//! reduced to one candidate keypoint per grid cell: a spatial softmax over
//! the cell gives a sub-pixel location, the sigmoid of the score logits is
//! sampled there, and the descriptor map is sampled and l2-normalised.
//! Every step carries an analytic backward pass.

use crate::grid::{Grid2, PixelCoord};
use crate::sample::{
    bilinear_sample, bilinear_sample_grad_point, bilinear_scatter_grad, l2_normalize,
    l2_normalize_backward,
};
use thiserror::Error;

/// Dense head outputs for one scan. All three grids share spatial
/// dimensions; the descriptor channel count is a configuration choice.
#[derive(Debug, Clone)]
pub struct KeypointHeadOutput {
    pub location_logits: Grid2,
    pub score_logits: Grid2,
    pub descriptor_map: Grid2,
}

impl KeypointHeadOutput {
    pub fn validate(&self) -> Result<(), KeypointError> {
        let (w, h) = (self.location_logits.width(), self.location_logits.height());
        if self.score_logits.width() != w
            || self.score_logits.height() != h
            || self.descriptor_map.width() != w
            || self.descriptor_map.height() != h
        {
            return Err(KeypointError::ShapeMismatch);
        }
        if self.location_logits.channels() != 1 || self.score_logits.channels() != 1 {
            return Err(KeypointError::ShapeMismatch);
        }
        Ok(())
    }
}

/// One candidate keypoint per cell: sub-pixel location, score in [0, 1],
/// unit descriptor (or zero vector with the degenerate flag set).
#[derive(Debug, Clone)]
pub struct KeypointSet {
    pub locations: Vec<PixelCoord>,
    pub scores: Vec<f64>,
    pub descriptors: Vec<Vec<f64>>,
    pub degenerate: Vec<bool>,
}

impl KeypointSet {
    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum KeypointError {
    #[error("head output grids disagree in shape")]
    ShapeMismatch,
    #[error(
        "no square cell tiling of {width}x{height} yields {target} keypoints; valid counts: {valid:?}"
    )]
    NoTiling { width: usize, height: usize, target: usize, valid: Vec<usize> },
    #[error("target keypoint count must be at least 1")]
    ZeroTarget,
}

/// An exact tiling of a `width x height` grid into square cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellGrid {
    pub cell_size: usize,
    pub cells_x: usize,
    pub cells_y: usize,
}

impl CellGrid {
    pub fn cell_count(&self) -> usize {
        self.cells_x * self.cells_y
    }

    /// Top-left pixel of cell `i` (row-major cell ordering).
    pub fn cell_corner(&self, i: usize) -> (usize, usize) {
        let cx = i % self.cells_x;
        let cy = i / self.cells_x;
        (cx * self.cell_size, cy * self.cell_size)
    }
}

/// Splits the grid into equally sized square cells so that exactly
/// `target_count` cells (one keypoint each) tile it. Rejects impossible
/// targets with the list of achievable counts.
pub fn cell_partition(width: usize, height: usize, target_count: usize) -> Result<CellGrid, KeypointError> {
    if target_count == 0 {
        return Err(KeypointError::ZeroTarget);
    }
    let mut valid = Vec::new();
    for s in 1..=width.min(height) {
        if width % s == 0 && height % s == 0 {
            let count = (width / s) * (height / s);
            if count == target_count {
                return Ok(CellGrid { cell_size: s, cells_x: width / s, cells_y: height / s });
            }
            valid.push(count);
        }
    }
    valid.sort_unstable();
    valid.dedup();
    Err(KeypointError::NoTiling { width, height, target: target_count, valid })
}

/// Per-cell spatial softmax over the location logits followed by the
/// expectation of absolute pixel coordinates: one sub-pixel location per
/// cell, strictly inside the cell's convex hull.
pub fn soft_locations(location_logits: &Grid2, cells: &CellGrid) -> Vec<PixelCoord> {
    let mut out = Vec::with_capacity(cells.cell_count());
    for i in 0..cells.cell_count() {
        let (x0, y0) = cells.cell_corner(i);
        // Max-subtracted softmax over the cell.
        let mut max = f64::NEG_INFINITY;
        for y in y0..y0 + cells.cell_size {
            for x in x0..x0 + cells.cell_size {
                max = max.max(location_logits.at(x, y, 0));
            }
        }
        let (mut z, mut sx, mut sy) = (0.0, 0.0, 0.0);
        for y in y0..y0 + cells.cell_size {
            for x in x0..x0 + cells.cell_size {
                let e = (location_logits.at(x, y, 0) - max).exp();
                z += e;
                sx += e * x as f64;
                sy += e * y as f64;
            }
        }
        out.push(PixelCoord::new(sx / z, sy / z));
    }
    out
}

/// Backward pass of [`soft_locations`]: accumulates the gradient on the
/// location logits given upstream gradients on each cell's location.
pub fn soft_locations_backward(
    location_logits: &Grid2,
    cells: &CellGrid,
    locations: &[PixelCoord],
    upstream: &[(f64, f64)],
    grad_logits: &mut [f64],
) {
    assert_eq!(upstream.len(), cells.cell_count());
    assert_eq!(grad_logits.len(), location_logits.data().len());
    let w = location_logits.width();
    for i in 0..cells.cell_count() {
        let (x0, y0) = cells.cell_corner(i);
        let p = locations[i];
        let (gx, gy) = upstream[i];
        let mut max = f64::NEG_INFINITY;
        for y in y0..y0 + cells.cell_size {
            for x in x0..x0 + cells.cell_size {
                max = max.max(location_logits.at(x, y, 0));
            }
        }
        let mut z = 0.0;
        for y in y0..y0 + cells.cell_size {
            for x in x0..x0 + cells.cell_size {
                z += (location_logits.at(x, y, 0) - max).exp();
            }
        }
        // d p / d logit_u = s_u (x_u - p); chain with the upstream vector.
        for y in y0..y0 + cells.cell_size {
            for x in x0..x0 + cells.cell_size {
                let s = (location_logits.at(x, y, 0) - max).exp() / z;
                grad_logits[y * w + x] += s * (gx * (x as f64 - p.x) + gy * (y as f64 - p.y));
            }
        }
    }
}

/// Applies a sigmoid to the full-resolution score logits and samples the
/// result bilinearly at each keypoint location.
pub fn keypoint_scores(score_logits: &Grid2, locations: &[PixelCoord]) -> Vec<f64> {
    let sig = sigmoid_map(score_logits);
    locations.iter().map(|&p| bilinear_sample(&sig, p).0[0]).collect()
}

/// Dense sigmoid of a single-channel grid.
pub fn sigmoid_map(logits: &Grid2) -> Grid2 {
    logits.map(|v| 1.0 / (1.0 + (-v).exp())).expect("sigmoid preserves finiteness")
}

/// Backward pass of [`keypoint_scores`] through both the dense sigmoid map
/// and the sample locations. `sig` must be the forward sigmoid map.
pub fn keypoint_scores_backward(
    sig: &Grid2,
    locations: &[PixelCoord],
    upstream: &[f64],
    grad_logits: &mut [f64],
    grad_locations: &mut [(f64, f64)],
) {
    assert_eq!(locations.len(), upstream.len());
    assert_eq!(grad_locations.len(), locations.len());
    let mut grad_sig = vec![0.0; sig.data().len()];
    for (i, (&p, &g)) in locations.iter().zip(upstream).enumerate() {
        bilinear_scatter_grad(sig, p, &[g], &mut grad_sig);
        let (dx, dy) = bilinear_sample_grad_point(sig, p);
        grad_locations[i].0 += g * dx[0];
        grad_locations[i].1 += g * dy[0];
    }
    for ((gl, gs), &s) in grad_logits.iter_mut().zip(&grad_sig).zip(sig.data()) {
        *gl += gs * s * (1.0 - s);
    }
}

/// Samples the descriptor map at each location and l2-normalises the
/// result. Returns descriptors plus per-keypoint degenerate flags.
pub fn sample_descriptors(descriptor_map: &Grid2, locations: &[PixelCoord]) -> (Vec<Vec<f64>>, Vec<bool>) {
    let mut descriptors = Vec::with_capacity(locations.len());
    let mut degenerate = Vec::with_capacity(locations.len());
    for &p in locations {
        let (raw, _) = bilinear_sample(descriptor_map, p);
        let (unit, degen) = l2_normalize(&raw);
        descriptors.push(unit);
        degenerate.push(degen);
    }
    (descriptors, degenerate)
}

/// Backward pass of [`sample_descriptors`].
pub fn sample_descriptors_backward(
    descriptor_map: &Grid2,
    locations: &[PixelCoord],
    upstream: &[Vec<f64>],
    grad_map: &mut [f64],
    grad_locations: &mut [(f64, f64)],
) {
    for (i, &p) in locations.iter().enumerate() {
        let (raw, _) = bilinear_sample(descriptor_map, p);
        let g_raw = l2_normalize_backward(&raw, &upstream[i]);
        bilinear_scatter_grad(descriptor_map, p, &g_raw, grad_map);
        let (dx, dy) = bilinear_sample_grad_point(descriptor_map, p);
        let mut gx = 0.0;
        let mut gy = 0.0;
        for c in 0..raw.len() {
            gx += g_raw[c] * dx[c];
            gy += g_raw[c] * dy[c];
        }
        grad_locations[i].0 += gx;
        grad_locations[i].1 += gy;
    }
}

/// Full extraction: locations, scores and descriptors for one scan.
pub fn extract_keypoints(head: &KeypointHeadOutput, cells: &CellGrid) -> Result<KeypointSet, KeypointError> {
    head.validate()?;
    let locations = soft_locations(&head.location_logits, cells);
    let scores = keypoint_scores(&head.score_logits, &locations);
    let (descriptors, degenerate) = sample_descriptors(&head.descriptor_map, &locations);
    Ok(KeypointSet { locations, scores, descriptors, degenerate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(w: usize, h: usize, c: usize, seed: u64) -> Grid2 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..w * h * c).map(|_| rng.gen_range(-1.5..1.5)).collect();
        Grid2::from_values(w, h, c, data).unwrap()
    }

    #[test]
    fn partition_256_into_256_cells() {
        let cells = cell_partition(256, 256, 256).unwrap();
        assert_eq!(cells.cell_size, 16);
        assert_eq!((cells.cells_x, cells.cells_y), (16, 16));
    }

    #[test]
    fn partition_single_cell() {
        let cells = cell_partition(8, 8, 1).unwrap();
        assert_eq!(cells.cell_size, 8);
        assert_eq!(cells.cell_count(), 1);
    }

    #[test]
    fn partition_impossible_target_errors_with_valid_counts() {
        let err = cell_partition(10, 10, 3).unwrap_err();
        match err {
            KeypointError::NoTiling { valid, .. } => {
                assert!(valid.contains(&4));
                assert!(valid.contains(&100));
                assert!(!valid.contains(&3));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn partition_matches_exhaustive_search() {
        // Independent oracle: enumerate all square tilings directly.
        for (w, h) in [(16usize, 16usize), (64, 64), (24, 16)] {
            for target in 1..=(w * h) {
                let brute = (1..=w.min(h))
                    .find(|s| w % s == 0 && h % s == 0 && (w / s) * (h / s) == target);
                match (cell_partition(w, h, target), brute) {
                    (Ok(cells), Some(s)) => assert_eq!(cells.cell_size, s),
                    (Err(_), None) => {}
                    (got, want) => panic!("{w}x{h} target {target}: {got:?} vs brute {want:?}"),
                }
            }
        }
    }

    #[test]
    fn uniform_logits_give_cell_centroids() {
        let logits = Grid2::from_values(8, 8, 1, vec![0.7; 64]).unwrap();
        let cells = cell_partition(8, 8, 4).unwrap();
        let locs = soft_locations(&logits, &cells);
        assert_abs_diff_eq!(locs[0].x, 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(locs[0].y, 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(locs[3].x, 5.5, epsilon = 1e-12);
        assert_abs_diff_eq!(locs[3].y, 5.5, epsilon = 1e-12);
    }

    #[test]
    fn saturated_logit_pins_location() {
        let mut data = vec![0.0; 64];
        data[2 * 8 + 3] = 50.0;
        let logits = Grid2::from_values(8, 8, 1, data).unwrap();
        let cells = cell_partition(8, 8, 1).unwrap();
        let locs = soft_locations(&logits, &cells);
        assert_abs_diff_eq!(locs[0].x, 3.0, epsilon = 1e-9);
        assert_abs_diff_eq!(locs[0].y, 2.0, epsilon = 1e-9);
    }

    #[test]
    fn locations_stay_inside_their_cells() {
        let logits = random_grid(16, 16, 1, 11);
        let cells = cell_partition(16, 16, 16).unwrap();
        for (i, p) in soft_locations(&logits, &cells).iter().enumerate() {
            let (x0, y0) = cells.cell_corner(i);
            assert!(p.x > x0 as f64 && p.x < (x0 + cells.cell_size - 1) as f64);
            assert!(p.y > y0 as f64 && p.y < (y0 + cells.cell_size - 1) as f64);
        }
    }

    #[test]
    fn raising_a_logit_attracts_the_keypoint() {
        let logits = random_grid(8, 8, 1, 3);
        let cells = cell_partition(8, 8, 4).unwrap();
        let before = soft_locations(&logits, &cells);
        let target = (2usize, 1usize); // pixel inside cell 0
        let mut data = logits.data().to_vec();
        data[target.1 * 8 + target.0] += 1.0;
        let bumped = logits.with_data(data).unwrap();
        let after = soft_locations(&bumped, &cells);
        let to_target = (target.0 as f64 - before[0].x, target.1 as f64 - before[0].y);
        let moved = (after[0].x - before[0].x, after[0].y - before[0].y);
        let dot = to_target.0 * moved.0 + to_target.1 * moved.1;
        assert!(dot > 0.0, "keypoint moved away from the raised logit");
    }

    #[test]
    fn soft_locations_gradient_matches_finite_differences() {
        let logits = random_grid(8, 8, 1, 21);
        let cells = cell_partition(8, 8, 4).unwrap();
        let upstream: Vec<(f64, f64)> = (0..4).map(|i| (0.3 + i as f64 * 0.1, -0.2 + i as f64 * 0.05)).collect();
        let locs = soft_locations(&logits, &cells);
        let mut grad = vec![0.0; 64];
        soft_locations_backward(&logits, &cells, &locs, &upstream, &mut grad);

        let scalar = |g: &Grid2| -> f64 {
            soft_locations(g, &cells)
                .iter()
                .zip(&upstream)
                .map(|(p, (gx, gy))| gx * p.x + gy * p.y)
                .sum()
        };
        let h = 1e-6;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..25 {
            let i = rng.gen_range(0..64);
            let mut plus = logits.data().to_vec();
            plus[i] += h;
            let mut minus = logits.data().to_vec();
            minus[i] -= h;
            let fd = (scalar(&logits.with_data(plus).unwrap()) - scalar(&logits.with_data(minus).unwrap())) / (2.0 * h);
            let scale = fd.abs().max(grad[i].abs()).max(1e-8);
            assert!((fd - grad[i]).abs() / scale < 1e-5, "logit {i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn zero_logits_score_half() {
        let logits = Grid2::from_values(4, 4, 1, vec![0.0; 16]).unwrap();
        let locs = vec![PixelCoord::new(1.3, 2.1), PixelCoord::new(0.0, 0.0)];
        for s in keypoint_scores(&logits, &locs) {
            assert_abs_diff_eq!(s, 0.5, epsilon = 1e-15);
        }
    }

    #[test]
    fn saturated_logits_score_one() {
        let logits = Grid2::from_values(4, 4, 1, vec![20.0; 16]).unwrap();
        for s in keypoint_scores(&logits, &[PixelCoord::new(2.0, 2.0)]) {
            assert_abs_diff_eq!(s, 1.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn score_sampling_blends_sigmoid_values() {
        // Two pixels with sigmoid values 0.2 and 0.4; the midpoint reads 0.3.
        let inv_sigmoid = |s: f64| (s / (1.0 - s)).ln();
        let logits = Grid2::from_values(2, 1, 1, vec![inv_sigmoid(0.2), inv_sigmoid(0.4)]).unwrap();
        let scores = keypoint_scores(&logits, &[PixelCoord::new(0.5, 0.0)]);
        assert_abs_diff_eq!(scores[0], 0.3, epsilon = 1e-12);
    }

    #[test]
    fn scores_backward_matches_finite_differences() {
        let logits = random_grid(6, 6, 1, 31);
        let locs = vec![PixelCoord::new(1.2, 3.4), PixelCoord::new(4.1, 0.7)];
        let upstream = vec![0.8, -0.6];
        let sig = sigmoid_map(&logits);
        let mut grad_logits = vec![0.0; 36];
        let mut grad_locs = vec![(0.0, 0.0); 2];
        keypoint_scores_backward(&sig, &locs, &upstream, &mut grad_logits, &mut grad_locs);
        let scalar = |g: &Grid2| -> f64 {
            keypoint_scores(g, &locs).iter().zip(&upstream).map(|(s, u)| s * u).sum()
        };
        let h = 1e-6;
        for i in [0usize, 7, 20, 35] {
            let mut plus = logits.data().to_vec();
            plus[i] += h;
            let mut minus = logits.data().to_vec();
            minus[i] -= h;
            let fd = (scalar(&logits.with_data(plus).unwrap()) - scalar(&logits.with_data(minus).unwrap())) / (2.0 * h);
            assert_abs_diff_eq!(fd, grad_logits[i], epsilon = 1e-7);
        }
    }

    #[test]
    fn constant_descriptor_map_normalises_to_direction() {
        let c = 3;
        let mut data = Vec::new();
        for _ in 0..16 {
            data.extend_from_slice(&[1.0, 2.0, 2.0]);
        }
        let map = Grid2::from_values(4, 4, c, data).unwrap();
        let (descs, degen) = sample_descriptors(&map, &[PixelCoord::new(1.7, 2.2)]);
        assert!(!degen[0]);
        assert_abs_diff_eq!(descs[0][0], 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(descs[0][1], 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(descs[0][2], 2.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn integer_location_descriptor_is_normalised_column() {
        let map = random_grid(5, 5, 4, 41);
        let (descs, _) = sample_descriptors(&map, &[PixelCoord::new(3.0, 1.0)]);
        let (expected, _) = l2_normalize(map.pixel(3, 1));
        for c in 0..4 {
            assert_abs_diff_eq!(descs[0][c], expected[c], epsilon = 1e-14);
        }
    }

    #[test]
    fn descriptor_equals_two_step_oracle() {
        let map = random_grid(7, 6, 5, 42);
        let p = PixelCoord::new(2.37, 4.81);
        let (descs, _) = sample_descriptors(&map, &[p]);
        let (raw, _) = bilinear_sample(&map, p);
        let (unit, _) = l2_normalize(&raw);
        for c in 0..5 {
            assert_abs_diff_eq!(descs[0][c], unit[c], epsilon = 1e-14);
        }
    }

    #[test]
    fn descriptor_backward_matches_finite_differences() {
        let map = random_grid(5, 5, 3, 55);
        let locs = vec![PixelCoord::new(1.4, 2.6)];
        let upstream = vec![vec![0.7, -0.3, 0.5]];
        let mut grad_map = vec![0.0; map.data().len()];
        let mut grad_locs = vec![(0.0, 0.0)];
        sample_descriptors_backward(&map, &locs, &upstream, &mut grad_map, &mut grad_locs);
        let scalar = |g: &Grid2| -> f64 {
            let (d, _) = sample_descriptors(g, &locs);
            d[0].iter().zip(&upstream[0]).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for i in [18usize, 19, 20, 33, 34, 35] {
            let mut plus = map.data().to_vec();
            plus[i] += h;
            let mut minus = map.data().to_vec();
            minus[i] -= h;
            let fd = (scalar(&map.with_data(plus).unwrap()) - scalar(&map.with_data(minus).unwrap())) / (2.0 * h);
            assert_abs_diff_eq!(fd, grad_map[i], epsilon = 1e-7);
        }
    }
}
