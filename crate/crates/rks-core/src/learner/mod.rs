//! Desk-scale feature extractor and self-supervised training loop.
//!
//! A small convolutional encoder/decoder produces the three dense heads
//! (location logits, score logits, descriptor map) from a single-channel
//! Cartesian scan. The descriptor map is the channel concatenation of the
//! (bilinearly upsampled) encoder stages. Training drives the whole chain
//! keypoints -> matching -> pose solve -> pose loss with hand-written
//! reverse-mode gradients and an in-module Adam optimiser; the only
//! supervision is the relative pose between scan pairs.

mod adam;
mod checkpoint;
mod layers;

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};

use crate::geometry::Se2;
use crate::grid::{pix2world, world2pix, Grid2, PixelCoord, WorldCoord};
use crate::keypoints::{
    cell_partition, keypoint_scores_backward, sigmoid_map, soft_locations, soft_locations_backward,
    CellGrid, KeypointError, KeypointHeadOutput,
};
use crate::matcher::{match_points_backward, match_points_traced, MatchConfig, MatchError, MatchSet};
use crate::pose_solver::{
    pose_loss, pose_loss_backward, solve_pose, solve_pose_backward, PoseLoss, SolveError,
};
use crate::sample::bilinear_sample;
use layers::{
    concat_channels, conv_backward, conv_forward, conv_param_count, maxpool2_backward,
    maxpool2_forward, relu_backward, relu_forward, resize_bilinear_backward,
    resize_bilinear_forward, split_channels, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("scan must be single-channel with dimensions divisible by 4")]
    BadScanShape,
    #[error("non-finite values encountered in {0}; training aborted")]
    NonFinite(&'static str),
    #[error(transparent)]
    Keypoint(#[from] KeypointError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error("scan pair shapes disagree")]
    PairShapeMismatch,
    #[error("{0} consecutive degenerate steps; training cannot proceed")]
    TooManySkips(usize),
}

/// Channel widths of the fixed three-stage encoder / three-stage decoder
/// topology. The descriptor map is the concatenation of the encoder
/// outputs, so its channel count is the sum of the encoder widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct NetConfig {
    pub encoder_channels: [usize; 3],
    pub decoder_channels: [usize; 3],
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig { encoder_channels: [4, 4, 8], decoder_channels: [8, 8, 8] }
    }
}

impl NetConfig {
    pub fn descriptor_channels(&self) -> usize {
        self.encoder_channels.iter().sum()
    }

    /// Conv layers in order: enc1..enc3, dec3..dec1, then the two pointwise
    /// heads. Returns (ci, co, k) per layer.
    fn layer_shapes(&self) -> [(usize, usize, usize); 8] {
        let [c1, c2, c3] = self.encoder_channels;
        let [d1, d2, d3] = self.decoder_channels;
        [
            (1, c1, 3),
            (c1, c2, 3),
            (c2, c3, 3),
            (c3, d1, 3),
            (d1 + c2, d2, 3),
            (d2 + c1, d3, 3),
            (d3, 1, 1),
            (d3, 1, 1),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|&(ci, co, k)| conv_param_count(ci, co, k)).sum()
    }
}

/// The feature network: a flat parameter vector plus the layout to
/// interpret it.
#[derive(Debug, Clone)]
pub struct FeatureNet {
    config: NetConfig,
    params: Vec<f64>,
}

/// Cached activations from one forward pass, consumed by the backward pass.
pub struct NetTrace {
    input: Tensor,
    e1: Tensor,
    p1_argmax: Vec<u32>,
    p1: Tensor,
    e2: Tensor,
    p2_argmax: Vec<u32>,
    p2: Tensor,
    e3: Tensor,
    d3: Tensor,
    cat2: Tensor,
    d2: Tensor,
    cat1: Tensor,
    d1: Tensor,
}

impl FeatureNet {
    /// Seeded He-style initialisation; biases start at zero.
    pub fn init(config: NetConfig, seed: u64) -> FeatureNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6a09_e667_f3bc_c908);
        let mut params = Vec::with_capacity(config.param_count());
        for (ci, co, k) in config.layer_shapes() {
            let std = (2.0 / (ci * k * k) as f64).sqrt();
            for _ in 0..co * ci * k * k {
                params.push(std * gaussian(&mut rng));
            }
            params.extend(std::iter::repeat(0.0).take(co));
        }
        FeatureNet { config, params }
    }

    /// All-zero parameters: every head emits exactly zero logits.
    pub fn zeros(config: NetConfig) -> FeatureNet {
        let params = vec![0.0; config.param_count()];
        FeatureNet { config, params }
    }

    pub fn from_params(config: NetConfig, params: Vec<f64>) -> FeatureNet {
        assert_eq!(params.len(), config.param_count());
        FeatureNet { config, params }
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Vec<f64> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn layer_param_ranges(&self) -> [std::ops::Range<usize>; 8] {
        let mut out: [std::ops::Range<usize>; 8] = Default::default();
        let mut offset = 0;
        for (i, (ci, co, k)) in self.config.layer_shapes().iter().enumerate() {
            let len = conv_param_count(*ci, *co, *k);
            out[i] = offset..offset + len;
            offset += len;
        }
        out
    }

    /// Runs the network on a single-channel scan, producing the dense heads
    /// (grids inherit the scan's spatial metadata) and the backward trace.
    pub fn forward(&self, scan: &Grid2) -> Result<(KeypointHeadOutput, NetTrace), LearnError> {
        if scan.channels() != 1 || scan.width() % 4 != 0 || scan.height() % 4 != 0 {
            return Err(LearnError::BadScanShape);
        }
        let shapes = self.config.layer_shapes();
        let ranges = self.layer_param_ranges();
        let layer = |i: usize| &self.params[ranges[i].clone()];

        let input = Tensor::from_data(1, scan.height(), scan.width(), scan.data().to_vec());
        let e1 = relu_forward(&conv_forward(&input, layer(0), shapes[0].0, shapes[0].1, shapes[0].2));
        let (p1, p1_argmax) = maxpool2_forward(&e1);
        let e2 = relu_forward(&conv_forward(&p1, layer(1), shapes[1].0, shapes[1].1, shapes[1].2));
        let (p2, p2_argmax) = maxpool2_forward(&e2);
        let e3 = relu_forward(&conv_forward(&p2, layer(2), shapes[2].0, shapes[2].1, shapes[2].2));

        let d3 = relu_forward(&conv_forward(&e3, layer(3), shapes[3].0, shapes[3].1, shapes[3].2));
        let u2 = resize_bilinear_forward(&d3, e2.h, e2.w);
        let cat2 = concat_channels(&[&u2, &e2]);
        let d2 = relu_forward(&conv_forward(&cat2, layer(4), shapes[4].0, shapes[4].1, shapes[4].2));
        let u1 = resize_bilinear_forward(&d2, e1.h, e1.w);
        let cat1 = concat_channels(&[&u1, &e1]);
        let d1 = relu_forward(&conv_forward(&cat1, layer(5), shapes[5].0, shapes[5].1, shapes[5].2));

        let loc = conv_forward(&d1, layer(6), shapes[6].0, shapes[6].1, shapes[6].2);
        let score = conv_forward(&d1, layer(7), shapes[7].0, shapes[7].1, shapes[7].2);
        let desc = concat_channels(&[
            &e1,
            &resize_bilinear_forward(&e2, e1.h, e1.w),
            &resize_bilinear_forward(&e3, e1.h, e1.w),
        ]);

        if !(loc.is_finite() && score.is_finite() && desc.is_finite()) {
            return Err(LearnError::NonFinite("head outputs"));
        }

        let to_grid = |t: Tensor| {
            Grid2::new(scan.width(), scan.height(), t.c, scan.resolution(), scan.origin(), t.data)
                .expect("finite head grid")
        };
        let heads = KeypointHeadOutput {
            location_logits: to_grid(loc),
            score_logits: to_grid(score),
            descriptor_map: to_grid(desc),
        };
        let trace = NetTrace { input, e1, p1_argmax, p1, e2, p2_argmax, p2, e3, d3, cat2, d2, cat1, d1 };
        Ok((heads, trace))
    }

    /// Accumulates parameter gradients for upstream gradients on the three
    /// heads (flat buffers in the head grids' layouts).
    pub fn backward(
        &self,
        trace: &NetTrace,
        d_location_logits: &[f64],
        d_score_logits: &[f64],
        d_descriptor: &[f64],
        grad_params: &mut [f64],
    ) {
        assert_eq!(grad_params.len(), self.params.len());
        let shapes = self.config.layer_shapes();
        let ranges = self.layer_param_ranges();
        let (h, w) = (trace.input.h, trace.input.w);
        let [c1, c2, c3] = self.config.encoder_channels;

        // Descriptor concat backward: split into encoder contributions.
        let d_desc = Tensor::from_data(c1 + c2 + c3, h, w, d_descriptor.to_vec());
        let desc_parts = split_channels(&d_desc, &[c1, c2, c3]);
        let mut g_e1 = desc_parts[0].clone();
        let mut g_e2 = resize_bilinear_backward((c2, trace.e2.h, trace.e2.w), &desc_parts[1]);
        let g_e3_desc = resize_bilinear_backward((c3, trace.e3.h, trace.e3.w), &desc_parts[2]);

        // Head convolutions.
        let d_loc = Tensor::from_data(1, h, w, d_location_logits.to_vec());
        let d_score = Tensor::from_data(1, h, w, d_score_logits.to_vec());
        let mut g_d1 = conv_backward(
            &trace.d1,
            &d_loc,
            &self.params[ranges[6].clone()],
            &mut grad_params[ranges[6].clone()],
            shapes[6].0,
            shapes[6].1,
            shapes[6].2,
        );
        let g_d1_score = conv_backward(
            &trace.d1,
            &d_score,
            &self.params[ranges[7].clone()],
            &mut grad_params[ranges[7].clone()],
            shapes[7].0,
            shapes[7].1,
            shapes[7].2,
        );
        for (a, b) in g_d1.data.iter_mut().zip(&g_d1_score.data) {
            *a += b;
        }

        // Decoder stage 1 (full resolution).
        let g_d1_pre = relu_backward(&trace.d1, &g_d1);
        let g_cat1 = conv_backward(
            &trace.cat1,
            &g_d1_pre,
            &self.params[ranges[5].clone()],
            &mut grad_params[ranges[5].clone()],
            shapes[5].0,
            shapes[5].1,
            shapes[5].2,
        );
        let parts = split_channels(&g_cat1, &[self.config.decoder_channels[1], c1]);
        for (a, b) in g_e1.data.iter_mut().zip(&parts[1].data) {
            *a += b;
        }
        let g_d2 = resize_bilinear_backward((self.config.decoder_channels[1], trace.d2.h, trace.d2.w), &parts[0]);

        // Decoder stage 2 (half resolution).
        let g_d2_pre = relu_backward(&trace.d2, &g_d2);
        let g_cat2 = conv_backward(
            &trace.cat2,
            &g_d2_pre,
            &self.params[ranges[4].clone()],
            &mut grad_params[ranges[4].clone()],
            shapes[4].0,
            shapes[4].1,
            shapes[4].2,
        );
        let parts = split_channels(&g_cat2, &[self.config.decoder_channels[0], c2]);
        for (a, b) in g_e2.data.iter_mut().zip(&parts[1].data) {
            *a += b;
        }
        let g_d3 = resize_bilinear_backward((self.config.decoder_channels[0], trace.d3.h, trace.d3.w), &parts[0]);

        // Decoder stage 3 (bottleneck).
        let g_d3_pre = relu_backward(&trace.d3, &g_d3);
        let mut g_e3 = conv_backward(
            &trace.e3,
            &g_d3_pre,
            &self.params[ranges[3].clone()],
            &mut grad_params[ranges[3].clone()],
            shapes[3].0,
            shapes[3].1,
            shapes[3].2,
        );
        for (a, b) in g_e3.data.iter_mut().zip(&g_e3_desc.data) {
            *a += b;
        }

        // Encoder stack.
        let g_e3_pre = relu_backward(&trace.e3, &g_e3);
        let g_p2 = conv_backward(
            &trace.p2,
            &g_e3_pre,
            &self.params[ranges[2].clone()],
            &mut grad_params[ranges[2].clone()],
            shapes[2].0,
            shapes[2].1,
            shapes[2].2,
        );
        let g_e2_pool = maxpool2_backward((c2, trace.e2.h, trace.e2.w), &trace.p2_argmax, &g_p2);
        for (a, b) in g_e2.data.iter_mut().zip(&g_e2_pool.data) {
            *a += b;
        }
        let g_e2_pre = relu_backward(&trace.e2, &g_e2);
        let g_p1 = conv_backward(
            &trace.p1,
            &g_e2_pre,
            &self.params[ranges[1].clone()],
            &mut grad_params[ranges[1].clone()],
            shapes[1].0,
            shapes[1].1,
            shapes[1].2,
        );
        let g_e1_pool = maxpool2_backward((c1, trace.e1.h, trace.e1.w), &trace.p1_argmax, &g_p1);
        for (a, b) in g_e1.data.iter_mut().zip(&g_e1_pool.data) {
            *a += b;
        }
        let g_e1_pre = relu_backward(&trace.e1, &g_e1);
        conv_backward(
            &trace.input,
            &g_e1_pre,
            &self.params[ranges[0].clone()],
            &mut grad_params[ranges[0].clone()],
            shapes[0].0,
            shapes[0].1,
            shapes[0].2,
        );
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// A training pair. The matcher sources keypoints from `src` (the later
/// scan) and matches them into `dst` (the earlier scan); the ground truth
/// is the pose of `src` expressed in `dst`'s frame.
#[derive(Debug, Clone)]
pub struct ScanPair {
    pub dst: Grid2,
    pub src: Grid2,
}

/// Rotates a sensor-centred scan by `angle` about its grid centre,
/// zero-filling content that rotates in from outside the original grid.
pub fn rotate_scan(scan: &Grid2, angle: f64) -> Grid2 {
    if angle == 0.0 {
        return scan.clone();
    }
    let (w, h) = (scan.width(), scan.height());
    let inv = Se2::new(0.0, 0.0, -angle);
    let mut data = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let world = pix2world(PixelCoord::new(x as f64, y as f64), scan);
            let src_world = inv.apply(nalgebra::Vector2::new(world.x, world.y));
            let p = world2pix(WorldCoord::new(src_world.x, src_world.y), scan);
            if p.x >= 0.0 && p.y >= 0.0 && p.x <= (w - 1) as f64 && p.y <= (h - 1) as f64 {
                data[y * w + x] = bilinear_sample(scan, p).0[0];
            }
        }
    }
    scan.with_data(data).expect("rotated scan stays finite")
}

/// Rotation augmentation: resamples the destination scan by `angle` about
/// the grid centre and composes the rotation into the ground truth so the
/// supervised objective is unchanged in the noiseless limit.
pub fn augment(pair: &ScanPair, gt: &Se2, angle: f64) -> (ScanPair, Se2) {
    let rotated = rotate_scan(&pair.dst, angle);
    let gt2 = Se2::new(0.0, 0.0, angle).compose(gt);
    (ScanPair { dst: rotated, src: pair.src.clone() }, gt2)
}

/// Training hyperparameters.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Uniform rotation augmentation range in radians: angles are drawn
    /// from [-max, max]. Zero disables augmentation.
    pub augment_max_angle: f64,
    pub temperature: f64,
    pub alpha: f64,
    pub keypoint_count: usize,
    pub seed: u64,
    /// Abort after this many consecutive degenerate (skipped) steps.
    pub max_consecutive_skips: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            steps: 3000,
            batch_size: 1,
            augment_max_angle: std::f64::consts::PI,
            temperature: 50.0,
            alpha: 10.0,
            keypoint_count: 64,
            seed: 0,
            max_consecutive_skips: 25,
        }
    }
}

/// Outcome of one optimisation step.
#[derive(Debug, Clone, Copy)]
pub struct StepResult {
    pub loss: f64,
    /// Set when the step was skipped because the solve was degenerate.
    pub skipped: bool,
}

/// Loss plus gradients for one pair, or the reason the pair is unusable.
enum PairOutcome {
    Ok { loss: f64 },
    Degenerate,
}

/// Owns the optimiser state and RNG for a training run.
pub struct Trainer {
    pub cfg: TrainConfig,
    adam: Adam,
    rng: ChaCha8Rng,
    consecutive_skips: usize,
}

impl Trainer {
    pub fn new(net: &FeatureNet, cfg: TrainConfig) -> Trainer {
        let adam = Adam::new(net.param_count(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x3c6e_f372_fe94_f82b);
        Trainer { cfg, adam, rng, consecutive_skips: 0 }
    }

    /// Forward and backward through the whole chain for one pair,
    /// accumulating parameter gradients. Pure with respect to the trainer.
    fn pair_backward(
        &self,
        net: &FeatureNet,
        pair: &ScanPair,
        gt: &Se2,
        grad_params: &mut [f64],
    ) -> Result<PairOutcome, LearnError> {
        if pair.src.width() != pair.dst.width() || pair.src.height() != pair.dst.height() {
            return Err(LearnError::PairShapeMismatch);
        }
        let (head_src, trace_src) = net.forward(&pair.src)?;
        let (head_dst, trace_dst) = net.forward(&pair.dst)?;
        let cells = cell_partition(pair.src.width(), pair.src.height(), self.cfg.keypoint_count)?;

        let p_src = soft_locations(&head_src.location_logits, &cells);
        let sig_src = sigmoid_map(&head_src.score_logits);
        let sig_dst = sigmoid_map(&head_dst.score_logits);
        let match_cfg = MatchConfig { temperature: self.cfg.temperature };
        let (match_out, match_trace) = match_points_traced(
            &p_src,
            &head_src.descriptor_map,
            &head_dst.descriptor_map,
            &sig_src,
            &sig_dst,
            &match_cfg,
        )?;

        let match_set = MatchSet::from_pixel_matches(
            &p_src,
            &match_out,
            &head_src.descriptor_map,
            &head_dst.descriptor_map,
            self.cfg.temperature,
        );
        let corr = match match_set.to_correspondences() {
            Ok(c) => c,
            Err(_) => return Ok(PairOutcome::Degenerate),
        };
        let solution = match solve_pose(&corr) {
            Ok(s) if !s.ill_conditioned => s,
            Ok(_) | Err(SolveError::NoInformation) | Err(SolveError::DegenerateGeometry) => {
                return Ok(PairOutcome::Degenerate)
            }
        };
        let loss: PoseLoss = pose_loss(&solution.pose, gt, self.cfg.alpha);
        if !loss.value.is_finite() {
            return Err(LearnError::NonFinite("loss"));
        }

        // Backward: loss -> pose -> correspondences.
        let upstream = pose_loss_backward(&solution.pose, gt, self.cfg.alpha);
        let corr_grads = match solve_pose_backward(&corr, &solution, &upstream) {
            Ok(g) => g,
            Err(_) => return Ok(PairOutcome::Degenerate),
        };

        // World-coordinate gradients scale by resolution to pixel space.
        let res_src = head_src.descriptor_map.resolution();
        let res_dst = head_dst.descriptor_map.resolution();
        let d_dst_points: Vec<(f64, f64)> = corr_grads
            .d_dst
            .iter()
            .map(|g| (g.x * res_dst, g.y * res_dst))
            .collect();
        let d_weights = corr_grads.d_weights.clone();

        let match_grads = match_points_backward(
            &p_src,
            &head_src.descriptor_map,
            &head_dst.descriptor_map,
            &sig_src,
            &sig_dst,
            &match_cfg,
            &match_out,
            &match_trace,
            &d_dst_points,
            &d_weights,
        );

        // Source keypoint locations get gradient from both the matcher and
        // the solver's source-point path.
        let mut d_p_src: Vec<(f64, f64)> = match_grads.d_src_points.clone();
        for (d, g) in d_p_src.iter_mut().zip(&corr_grads.d_src) {
            d.0 += g.x * res_src;
            d.1 += g.y * res_src;
        }

        // Score-map gradients flow through the dense sigmoid.
        let mut d_score_logits_src = vec![0.0; sig_src.data().len()];
        for ((g, &gs), &s) in d_score_logits_src
            .iter_mut()
            .zip(&match_grads.d_src_scores)
            .zip(sig_src.data())
        {
            *g = gs * s * (1.0 - s);
        }
        let mut d_score_logits_dst = vec![0.0; sig_dst.data().len()];
        for ((g, &gs), &s) in d_score_logits_dst
            .iter_mut()
            .zip(&match_grads.d_dst_scores)
            .zip(sig_dst.data())
        {
            *g = gs * s * (1.0 - s);
        }

        // Location gradients through the per-cell soft-argmax.
        let mut d_loc_logits_src = vec![0.0; head_src.location_logits.data().len()];
        soft_locations_backward(&head_src.location_logits, &cells, &p_src, &d_p_src, &mut d_loc_logits_src);

        let zeros_loc = vec![0.0; head_dst.location_logits.data().len()];
        net.backward(
            &trace_src,
            &d_loc_logits_src,
            &d_score_logits_src,
            &match_grads.d_src_desc,
            grad_params,
        );
        net.backward(
            &trace_dst,
            &zeros_loc,
            &d_score_logits_dst,
            &match_grads.d_dst_desc,
            grad_params,
        );
        Ok(PairOutcome::Ok { loss: loss.value })
    }

    /// One Adam update on a single pair. Degenerate solves skip the update
    /// and count toward the consecutive-skip budget.
    pub fn train_step(&mut self, net: &mut FeatureNet, pair: &ScanPair, gt: &Se2) -> Result<StepResult, LearnError> {
        let mut grads = vec![0.0; net.param_count()];
        match self.pair_backward(net, pair, gt, &mut grads)? {
            PairOutcome::Ok { loss } => {
                self.consecutive_skips = 0;
                self.adam.step(net.params_mut(), &grads);
                Ok(StepResult { loss, skipped: false })
            }
            PairOutcome::Degenerate => {
                self.consecutive_skips += 1;
                if self.consecutive_skips >= self.cfg.max_consecutive_skips {
                    return Err(LearnError::TooManySkips(self.consecutive_skips));
                }
                Ok(StepResult { loss: f64::NAN, skipped: true })
            }
        }
    }

    /// Forward-only loss of a pair under the current parameters; the
    /// scalar used by finite-difference validation of the full chain.
    pub fn pair_loss(&self, net: &FeatureNet, pair: &ScanPair, gt: &Se2) -> Result<Option<f64>, LearnError> {
        let mut scratch = vec![0.0; net.param_count()];
        match self.pair_backward(net, pair, gt, &mut scratch)? {
            PairOutcome::Ok { loss } => Ok(Some(loss)),
            PairOutcome::Degenerate => Ok(None),
        }
    }

    fn draw_angle(&mut self) -> f64 {
        if self.cfg.augment_max_angle > 0.0 {
            self.rng.gen_range(-self.cfg.augment_max_angle..=self.cfg.augment_max_angle)
        } else {
            0.0
        }
    }

    fn draw_pair_index(&mut self, pair_count: usize) -> usize {
        self.rng.gen_range(0..pair_count)
    }
}

/// Per-run training summary.
#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Loss per optimisation step (NaN entries mark skipped steps).
    pub losses: Vec<f64>,
    pub skipped_steps: usize,
}

/// Trains on consecutive scan pairs sampled from the dataset, with seeded
/// pair order and rotation augmentation. Identical seeds reproduce the loss
/// curve bit for bit.
pub fn train(
    net: &mut FeatureNet,
    dataset: &crate::simulator::Dataset,
    cfg: &TrainConfig,
) -> Result<TrainReport, LearnError> {
    let mut trainer = Trainer::new(net, cfg.clone());
    let pair_count = dataset.scans.len() - 1;
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut skipped = 0usize;
    let mut grads = vec![0.0; net.param_count()];
    for _ in 0..cfg.steps {
        grads.fill(0.0);
        let mut batch_loss = 0.0;
        let mut batch_used = 0usize;
        for _ in 0..cfg.batch_size.max(1) {
            let i = trainer.draw_pair_index(pair_count);
            let pair = ScanPair { dst: dataset.scans[i].clone(), src: dataset.scans[i + 1].clone() };
            let gt = dataset.relative_gt[i];
            let angle = trainer.draw_angle();
            let (pair, gt) = if angle != 0.0 { augment(&pair, &gt, angle) } else { (pair, gt) };
            match trainer.pair_backward(net, &pair, &gt, &mut grads)? {
                PairOutcome::Ok { loss } => {
                    batch_loss += loss;
                    batch_used += 1;
                }
                PairOutcome::Degenerate => {}
            }
        }
        if batch_used == 0 {
            skipped += 1;
            trainer.consecutive_skips += 1;
            if trainer.consecutive_skips >= cfg.max_consecutive_skips {
                return Err(LearnError::TooManySkips(trainer.consecutive_skips));
            }
            losses.push(f64::NAN);
            continue;
        }
        trainer.consecutive_skips = 0;
        let scale = 1.0 / batch_used as f64;
        for g in grads.iter_mut() {
            *g *= scale;
        }
        trainer.adam.step(net.params_mut(), &grads);
        losses.push(batch_loss * scale);
    }
    Ok(TrainReport { losses, skipped_steps: skipped })
}

/// Inference helper: heads plus extracted keypoints for one scan.
pub fn extract_for_scan(
    net: &FeatureNet,
    scan: &Grid2,
    keypoint_count: usize,
) -> Result<(KeypointHeadOutput, CellGrid, crate::keypoints::KeypointSet), LearnError> {
    let (heads, _) = net.forward(scan)?;
    let cells = cell_partition(scan.width(), scan.height(), keypoint_count)?;
    let set = crate::keypoints::extract_keypoints(&heads, &cells)?;
    Ok((heads, cells, set))
}

// keypoint_scores_backward is re-exported through the keypoints module; the
// import keeps the backward-contract surface visible from the learner.
#[allow(unused_imports)]
use keypoint_scores_backward as _keypoint_scores_backward_contract;
