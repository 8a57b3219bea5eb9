//! Synthetic radar worlds, trajectories and scans.
//!
//! Worlds hold static landmarks (wall segments, point reflectors) and
//! moving objects on piecewise-linear tracks. Scans are rendered by ray
//! casting a polar power image (with speckle, per-azimuth gain noise,
//! range-doubled ghost returns, saturation and sector dropout), then
//! resampling to a sensor-centred Cartesian grid. Rendering is a pure
//! function of (seed, pose, spec): identical inputs give identical scans.

use crate::geometry::{wrap_angle, Se2};
use crate::grid::{Grid2, PixelCoord, WorldCoord};
use crate::sample::bilinear_sample1;
use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("pose ({0}, {1}) is outside the world bounds")]
    PoseOutOfBounds(f64, f64),
    #[error("invalid scan spec: {0}")]
    BadSpec(String),
    #[error("trajectory must have at least 2 poses")]
    TooShort,
    #[error("trajectory timestamps must be strictly increasing")]
    BadTimestamps,
    #[error("consecutive poses exceed the speed bound ({speed:.2} m/s > {bound:.2} m/s)")]
    TooFast { speed: f64, bound: f64 },
}

/// A wall segment between two points, in metres.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Wall {
    pub start: (f64, f64),
    pub end: (f64, f64),
    pub reflectivity: f64,
}

/// A small disc reflector.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Reflector {
    pub position: (f64, f64),
    pub radius: f64,
    pub reflectivity: f64,
}

/// An object moving back and forth along a straight track.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Mover {
    pub start: (f64, f64),
    pub end: (f64, f64),
    pub speed: f64,
    pub radius: f64,
    pub reflectivity: f64,
}

impl Mover {
    /// Position at time `t`, ping-ponging between the endpoints.
    pub fn position_at(&self, t: f64) -> (f64, f64) {
        let dx = self.end.0 - self.start.0;
        let dy = self.end.1 - self.start.1;
        let len = (dx * dx + dy * dy).sqrt();
        if len == 0.0 || self.speed == 0.0 {
            return self.start;
        }
        let period = 2.0 * len / self.speed;
        let mut s = (t % period + period) % period * self.speed;
        if s > len {
            s = 2.0 * len - s;
        }
        (self.start.0 + dx * s / len, self.start.1 + dy * s / len)
    }
}

/// A bounded world of landmarks. The seed fixes all generated randomness.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct World {
    pub half_extent: f64,
    pub walls: Vec<Wall>,
    pub reflectors: Vec<Reflector>,
    pub movers: Vec<Mover>,
    pub seed: u64,
}

impl World {
    /// A procedurally generated world: a boundary box plus interior walls,
    /// scattered point reflectors and a few moving objects.
    pub fn generate(seed: u64, half_extent: f64, walls: usize, reflectors: usize, movers: usize) -> World {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77a3_9cd1_5b02_e4f6);
        let e = half_extent;
        let mut wall_list = vec![
            Wall { start: (-e, -e), end: (e, -e), reflectivity: 0.9 },
            Wall { start: (e, -e), end: (e, e), reflectivity: 0.9 },
            Wall { start: (e, e), end: (-e, e), reflectivity: 0.9 },
            Wall { start: (-e, e), end: (-e, -e), reflectivity: 0.9 },
        ];
        for _ in 0..walls {
            let cx = rng.gen_range(-0.7 * e..0.7 * e);
            let cy = rng.gen_range(-0.7 * e..0.7 * e);
            let len = rng.gen_range(0.15 * e..0.5 * e);
            let angle = rng.gen_range(0.0..std::f64::consts::PI);
            let (s, c) = angle.sin_cos();
            wall_list.push(Wall {
                start: (cx - 0.5 * len * c, cy - 0.5 * len * s),
                end: (cx + 0.5 * len * c, cy + 0.5 * len * s),
                reflectivity: rng.gen_range(0.6..1.0),
            });
        }
        let reflector_list = (0..reflectors)
            .map(|_| Reflector {
                position: (rng.gen_range(-0.85 * e..0.85 * e), rng.gen_range(-0.85 * e..0.85 * e)),
                radius: rng.gen_range(0.2..0.5),
                reflectivity: rng.gen_range(0.7..1.0),
            })
            .collect();
        let mover_list = (0..movers)
            .map(|_| {
                let sx = rng.gen_range(-0.6 * e..0.6 * e);
                let sy = rng.gen_range(-0.6 * e..0.6 * e);
                Mover {
                    start: (sx, sy),
                    end: (sx + rng.gen_range(-0.4 * e..0.4 * e), sy + rng.gen_range(-0.4 * e..0.4 * e)),
                    speed: rng.gen_range(0.5..2.0),
                    radius: rng.gen_range(0.3..0.6),
                    reflectivity: rng.gen_range(0.7..1.0),
                }
            })
            .collect();
        World {
            half_extent,
            walls: wall_list,
            reflectors: reflector_list,
            movers: mover_list,
            seed,
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x.abs() <= self.half_extent && y.abs() <= self.half_extent
    }
}

/// Noise model knobs; each can be disabled independently by setting it to
/// zero.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NoiseParams {
    /// Additive folded-normal speckle sigma (power units).
    pub speckle_sigma: f64,
    /// Per-azimuth multiplicative gain sigma.
    pub gain_sigma: f64,
    /// Probability that a landmark return spawns a range-doubled ghost.
    pub ghost_rate: f64,
    /// Probability that an azimuth saturates (amplified then clipped).
    pub saturation_prob: f64,
    /// Probability that an azimuth drops out entirely.
    pub dropout_rate: f64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        NoiseParams {
            speckle_sigma: 0.05,
            gain_sigma: 0.1,
            ghost_rate: 0.15,
            saturation_prob: 0.02,
            dropout_rate: 0.01,
        }
    }
}

impl NoiseParams {
    pub fn none() -> Self {
        NoiseParams { speckle_sigma: 0.0, gain_sigma: 0.0, ghost_rate: 0.0, saturation_prob: 0.0, dropout_rate: 0.0 }
    }
}

/// Geometry of one scan: polar resolution and the Cartesian output grid.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ScanSpec {
    pub azimuth_bins: usize,
    pub range_bins: usize,
    pub max_range: f64,
    /// Cartesian output side length in pixels.
    pub cart_size: usize,
    /// Cartesian resolution in metres per pixel.
    pub resolution: f64,
    pub noise: NoiseParams,
}

impl Default for ScanSpec {
    fn default() -> Self {
        ScanSpec {
            azimuth_bins: 180,
            range_bins: 128,
            max_range: 24.0,
            cart_size: 64,
            resolution: 0.7,
            noise: NoiseParams::default(),
        }
    }
}

impl ScanSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.azimuth_bins < 4 || self.range_bins < 4 {
            return Err(SimError::BadSpec("too few polar bins".into()));
        }
        if !(self.max_range > 0.0 && self.resolution > 0.0) {
            return Err(SimError::BadSpec("max range and resolution must be positive".into()));
        }
        if self.cart_size < 8 {
            return Err(SimError::BadSpec("cartesian output too small".into()));
        }
        Ok(())
    }

    /// World coordinates of Cartesian pixel (0, 0): the grid is centred on
    /// the sensor.
    pub fn cart_origin(&self) -> WorldCoord {
        let half = self.resolution * (self.cart_size - 1) as f64 / 2.0;
        WorldCoord::new(-half, -half)
    }
}

/// Distance along a ray to the nearest landmark intersection, if any.
fn ray_segment_distance(origin: (f64, f64), dir: (f64, f64), wall: &Wall) -> Option<f64> {
    // Solve origin + t dir = start + s (end - start), t >= 0, s in [0, 1].
    let (sx, sy) = wall.start;
    let (ex, ey) = wall.end;
    let (dx, dy) = dir;
    let (wx, wy) = (ex - sx, ey - sy);
    let denom = dx * wy - dy * wx;
    if denom.abs() < 1e-12 {
        return None;
    }
    let (ox, oy) = origin;
    let t = ((sx - ox) * wy - (sy - oy) * wx) / denom;
    let s = ((sx - ox) * dy - (sy - oy) * dx) / denom;
    if t >= 0.0 && (0.0..=1.0).contains(&s) {
        Some(t)
    } else {
        None
    }
}

/// Distance along a ray to a disc of radius `r` at `centre`, if hit.
fn ray_disc_distance(origin: (f64, f64), dir: (f64, f64), centre: (f64, f64), r: f64) -> Option<f64> {
    let (ox, oy) = (centre.0 - origin.0, centre.1 - origin.1);
    let along = ox * dir.0 + oy * dir.1;
    if along < 0.0 {
        return None;
    }
    let perp2 = (ox * ox + oy * oy) - along * along;
    if perp2 <= r * r {
        Some((along - (r * r - perp2).sqrt()).max(0.0))
    } else {
        None
    }
}

struct Return {
    range: f64,
    power: f64,
}

/// All landmark returns along one ray (no occlusion: radar sees through
/// partial reflectors; walls simply contribute the strongest echo).
fn cast_ray(world: &World, origin: (f64, f64), dir: (f64, f64), time: f64, include_movers: bool, max_range: f64) -> Vec<Return> {
    let mut out = Vec::new();
    for wall in &world.walls {
        if let Some(t) = ray_segment_distance(origin, dir, wall) {
            if t <= max_range {
                out.push(Return { range: t, power: wall.reflectivity });
            }
        }
    }
    for r in &world.reflectors {
        if let Some(t) = ray_disc_distance(origin, dir, r.position, r.radius) {
            if t <= max_range {
                out.push(Return { range: t, power: r.reflectivity });
            }
        }
    }
    if include_movers {
        for m in &world.movers {
            if let Some(t) = ray_disc_distance(origin, dir, m.position_at(time), m.radius) {
                if t <= max_range {
                    out.push(Return { range: t, power: m.reflectivity });
                }
            }
        }
    }
    out
}

fn mix_seed(seed: u64, pose: &Se2) -> u64 {
    // Deterministic function of (seed, pose) so identical poses rescan
    // identically; quantise to the nanometre to avoid last-ulp surprises.
    let q = |v: f64| (v * 1e9).round() as i64 as u64;
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for part in [q(pose.x()), q(pose.y()), q(pose.angle())] {
        h ^= part;
        h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
        h ^= h >> 33;
    }
    h
}

struct PolarRender {
    /// Row-major `range_bins x azimuth_bins` power image (azimuth = row).
    power: Vec<f64>,
}

fn render_polar_internal(
    world: &World,
    pose: &Se2,
    spec: &ScanSpec,
    seed: u64,
    include_movers: bool,
    with_noise: bool,
    time: f64,
) -> PolarRender {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, pose));
    let (na, nr) = (spec.azimuth_bins, spec.range_bins);
    let bin_width = spec.max_range / nr as f64;
    let mut power = vec![0.0; na * nr];
    let origin = (pose.x(), pose.y());
    let sigma_bins = 0.75; // range spread of one return, in bins

    for a in 0..na {
        let azimuth = a as f64 / na as f64 * std::f64::consts::TAU;
        let world_angle = pose.angle() + azimuth;
        let dir = (world_angle.cos(), world_angle.sin());
        let mut returns = cast_ray(world, origin, dir, time, include_movers, spec.max_range * 2.0);
        // Ghost echoes at doubled range.
        if with_noise && spec.noise.ghost_rate > 0.0 {
            let mut ghosts = Vec::new();
            for r in &returns {
                if rng.gen::<f64>() < spec.noise.ghost_rate {
                    ghosts.push(Return { range: 2.0 * r.range, power: 0.5 * r.power });
                }
            }
            returns.extend(ghosts);
        }
        let gain = if with_noise && spec.noise.gain_sigma > 0.0 {
            (1.0 + spec.noise.gain_sigma * gaussian(&mut rng)).max(0.0)
        } else {
            1.0
        };
        let row = &mut power[a * nr..(a + 1) * nr];
        for ret in &returns {
            if ret.range > spec.max_range {
                continue;
            }
            let centre = ret.range / bin_width;
            let lo = ((centre - 3.0 * sigma_bins).floor().max(0.0)) as usize;
            let hi = ((centre + 3.0 * sigma_bins).ceil() as usize).min(nr - 1);
            for bin in lo..=hi {
                let d = bin as f64 - centre;
                row[bin] += gain * ret.power * (-0.5 * d * d / (sigma_bins * sigma_bins)).exp();
            }
        }
        if with_noise {
            if spec.noise.speckle_sigma > 0.0 {
                for v in row.iter_mut() {
                    *v += (spec.noise.speckle_sigma * gaussian(&mut rng)).abs();
                }
            }
            if spec.noise.saturation_prob > 0.0 && rng.gen::<f64>() < spec.noise.saturation_prob {
                for v in row.iter_mut() {
                    *v *= 3.0;
                }
            }
            if spec.noise.dropout_rate > 0.0 && rng.gen::<f64>() < spec.noise.dropout_rate {
                row.fill(0.0);
            }
        }
        for v in row.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    PolarRender { power }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniforms per sample keeps the stream layout simple.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Renders the polar power image for a pose (azimuth rows, range columns),
/// exposed for statistical tests of the noise model.
pub fn render_polar(world: &World, pose: &Se2, spec: &ScanSpec, seed: u64) -> Result<Grid2, SimError> {
    spec.validate()?;
    if !world.contains(pose.x(), pose.y()) {
        return Err(SimError::PoseOutOfBounds(pose.x(), pose.y()));
    }
    let polar = render_polar_internal(world, pose, spec, seed, true, true, 0.0);
    Grid2::new(
        spec.range_bins,
        spec.azimuth_bins,
        1,
        spec.max_range / spec.range_bins as f64,
        WorldCoord::new(0.0, 0.0),
        polar.power,
    )
    .map_err(|e| SimError::BadSpec(e.to_string()))
}

fn polar_to_cartesian(polar: &PolarRender, spec: &ScanSpec) -> Grid2 {
    let (na, nr) = (spec.azimuth_bins, spec.range_bins);
    let n = spec.cart_size;
    let origin = spec.cart_origin();
    // Pad one duplicated azimuth row so bilinear lookups wrap cleanly.
    let mut padded = vec![0.0; (na + 1) * nr];
    padded[..na * nr].copy_from_slice(&polar.power);
    padded[na * nr..].copy_from_slice(&polar.power[..nr]);
    let polar_grid = Grid2::from_values(nr, na + 1, 1, padded).expect("padded polar grid");

    let bin_width = spec.max_range / nr as f64;
    let mut data = vec![0.0; n * n];
    for py in 0..n {
        for px in 0..n {
            let wx = origin.x + spec.resolution * px as f64;
            let wy = origin.y + spec.resolution * py as f64;
            let range = (wx * wx + wy * wy).sqrt();
            if range > spec.max_range {
                continue; // unobserved beyond max range
            }
            let mut azimuth = wy.atan2(wx);
            if azimuth < 0.0 {
                azimuth += std::f64::consts::TAU;
            }
            let az_pix = azimuth / std::f64::consts::TAU * na as f64;
            let r_pix = (range / bin_width).min((nr - 1) as f64);
            data[py * n + px] = bilinear_sample1(&polar_grid, PixelCoord::new(r_pix, az_pix));
        }
    }
    Grid2::new(n, n, 1, spec.resolution, origin, data).expect("cartesian scan grid")
}

/// Renders one sensor-centred Cartesian scan for the pose. Deterministic in
/// (seed, pose, spec).
pub fn render_scan(world: &World, pose: &Se2, spec: &ScanSpec, seed: u64) -> Result<Grid2, SimError> {
    render_scan_at_time(world, pose, spec, seed, 0.0)
}

/// As [`render_scan`] with explicit scan time (moves the moving objects).
pub fn render_scan_at_time(world: &World, pose: &Se2, spec: &ScanSpec, seed: u64, time: f64) -> Result<Grid2, SimError> {
    spec.validate()?;
    if !world.contains(pose.x(), pose.y()) {
        return Err(SimError::PoseOutOfBounds(pose.x(), pose.y()));
    }
    let polar = render_polar_internal(world, pose, spec, seed, true, true, time);
    Ok(polar_to_cartesian(&polar, spec))
}

/// Noise-free render of only the static landmarks; thresholding it gives a
/// ground-truth mask of static structure for score evaluation.
pub fn render_static_truth(world: &World, pose: &Se2, spec: &ScanSpec) -> Result<Grid2, SimError> {
    spec.validate()?;
    if !world.contains(pose.x(), pose.y()) {
        return Err(SimError::PoseOutOfBounds(pose.x(), pose.y()));
    }
    let polar = render_polar_internal(world, pose, spec, 0, false, false, 0.0);
    Ok(polar_to_cartesian(&polar, spec))
}

/// Trajectory shapes the generator can produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrajectoryKind {
    Loop,
    FigureEight,
    Straight,
}

/// Timestamped ground-truth poses (sensor in world frame).
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub poses: Vec<Se2>,
}

impl Trajectory {
    pub fn new(times: Vec<f64>, poses: Vec<Se2>, speed_bound: f64) -> Result<Self, SimError> {
        if poses.len() < 2 || times.len() != poses.len() {
            return Err(SimError::TooShort);
        }
        for pair in times.windows(2) {
            if pair[1] <= pair[0] {
                return Err(SimError::BadTimestamps);
            }
        }
        for i in 1..poses.len() {
            let dist = (poses[i].translation() - poses[i - 1].translation()).norm();
            let speed = dist / (times[i] - times[i - 1]);
            if speed > speed_bound {
                return Err(SimError::TooFast { speed, bound: speed_bound });
            }
        }
        Ok(Trajectory { times, poses })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Relative poses `T_i^{-1} compose T_{i+1}`: the motion of the sensor
    /// between consecutive scans, expressed in the earlier frame.
    pub fn relative_poses(&self) -> Vec<Se2> {
        self.poses.windows(2).map(|w| w[0].inverse().compose(&w[1])).collect()
    }
}

/// Generates a smooth trajectory of the requested shape, arc length and
/// step. Loops close on themselves to within a metre.
pub fn generate_trajectory(kind: TrajectoryKind, length: f64, step: f64) -> Result<Trajectory, SimError> {
    if !(length >= step && step > 0.0) {
        return Err(SimError::BadSpec("need length >= step > 0".into()));
    }
    let n = (length / step).round() as usize;
    let mut poses = Vec::with_capacity(n + 1);
    match kind {
        TrajectoryKind::Straight => {
            for i in 0..=n {
                poses.push(Se2::new(i as f64 * step, 0.0, 0.0));
            }
        }
        TrajectoryKind::Loop => {
            let radius = length / std::f64::consts::TAU;
            for i in 0..=n {
                let phi = i as f64 / n as f64 * std::f64::consts::TAU;
                poses.push(Se2::new(
                    radius * phi.sin(),
                    radius * (1.0 - phi.cos()),
                    wrap_angle(phi),
                ));
            }
        }
        TrajectoryKind::FigureEight => {
            // Lemniscate-like figure eight, stepped by approximate arc length.
            let scale = length / 6.1; // empirical arc-length factor
            let samples = 4096;
            let mut arc = vec![0.0; samples + 1];
            let point = |t: f64| -> (f64, f64) {
                (scale * (2.0 * t).sin(), scale * 2.0 * t.sin())
            };
            for i in 1..=samples {
                let t0 = (i - 1) as f64 / samples as f64 * std::f64::consts::TAU;
                let t1 = i as f64 / samples as f64 * std::f64::consts::TAU;
                let (x0, y0) = point(t0);
                let (x1, y1) = point(t1);
                arc[i] = arc[i - 1] + ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt();
            }
            let total = arc[samples];
            for i in 0..=n {
                let target = i as f64 / n as f64 * total;
                let j = arc.partition_point(|&a| a < target).min(samples);
                let t = j as f64 / samples as f64 * std::f64::consts::TAU;
                let (x, y) = point(t);
                let h = 1e-4;
                let (xa, ya) = point(t - h);
                let (xb, yb) = point(t + h);
                poses.push(Se2::new(x, y, (yb - ya).atan2(xb - xa)));
            }
        }
    }
    let times = (0..poses.len()).map(|i| i as f64).collect();
    Trajectory::new(times, poses, 3.0 * step.max(1.0))
}

/// A rendered dataset: scans aligned with ground-truth absolute poses and
/// the derived relative edges.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub scans: Vec<Grid2>,
    pub trajectory: Trajectory,
    pub relative_gt: Vec<Se2>,
    pub spec: ScanSpec,
    pub seed: u64,
}

/// Renders one scan per trajectory pose. Per-scan randomness derives from
/// (seed, pose): re-rendering the same dataset is bit-identical, and
/// identical poses produce identical scans.
pub fn make_dataset(world: &World, trajectory: &Trajectory, spec: &ScanSpec, seed: u64) -> Result<Dataset, SimError> {
    let mut scans = Vec::with_capacity(trajectory.len());
    for (i, pose) in trajectory.poses.iter().enumerate() {
        scans.push(render_scan_at_time(world, pose, spec, seed, trajectory.times[i])?);
    }
    Ok(Dataset {
        scans,
        trajectory: trajectory.clone(),
        relative_gt: trajectory.relative_poses(),
        spec: *spec,
        seed,
    })
}

#[derive(Debug, Error)]
pub enum ScanIoError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic at byte offset 0 (expected RKSCAN1)")]
    BadMagic,
    #[error("scan file truncated at byte offset {0}")]
    Truncated(usize),
    #[error("non-finite payload value at byte offset {0}")]
    NonFinite(usize),
    #[error("invalid scan dimensions at byte offset {0}")]
    BadDimensions(usize),
}

const SCAN_MAGIC: &[u8; 8] = b"RKSCAN1\0";

/// Writes a single-channel scan: 8-byte magic `RKSCAN1\0`, u32 width,
/// u32 height, f64 resolution, u64 pose id, then f32 row-major payload.
/// All integers and floats little-endian.
pub fn write_scan(path: &Path, scan: &Grid2, pose_id: u64) -> Result<(), ScanIoError> {
    let mut buf = Vec::with_capacity(32 + scan.data().len() * 4);
    buf.extend_from_slice(SCAN_MAGIC);
    buf.extend_from_slice(&(scan.width() as u32).to_le_bytes());
    buf.extend_from_slice(&(scan.height() as u32).to_le_bytes());
    buf.extend_from_slice(&scan.resolution().to_le_bytes());
    buf.extend_from_slice(&pose_id.to_le_bytes());
    for v in scan.data() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Reads a scan written by [`write_scan`]. The grid origin is recomputed
/// for a sensor-centred scan.
pub fn read_scan(path: &Path) -> Result<(Grid2, u64), ScanIoError> {
    let mut file = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    if bytes.len() < 8 || &bytes[..8] != SCAN_MAGIC {
        return Err(ScanIoError::BadMagic);
    }
    if bytes.len() < 32 {
        return Err(ScanIoError::Truncated(bytes.len()));
    }
    let width = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let resolution = f64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let pose_id = u64::from_le_bytes(bytes[24..32].try_into().unwrap());
    if width == 0 || height == 0 || width > 1 << 20 || height > 1 << 20 || !(resolution > 0.0) {
        return Err(ScanIoError::BadDimensions(8));
    }
    let expected = 32 + width * height * 4;
    if bytes.len() != expected {
        return Err(ScanIoError::Truncated(bytes.len().min(expected)));
    }
    let mut data = Vec::with_capacity(width * height);
    for i in 0..width * height {
        let off = 32 + i * 4;
        let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64;
        if !v.is_finite() {
            return Err(ScanIoError::NonFinite(off));
        }
        data.push(v);
    }
    let half = resolution * (width - 1) as f64 / 2.0;
    let origin = WorldCoord::new(-half, -half);
    let grid = Grid2::new(width, height, 1, resolution, origin, data)
        .map_err(|_| ScanIoError::BadDimensions(8))?;
    Ok((grid, pose_id))
}

#[derive(Debug, Error)]
pub enum TrajectoryIoError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("missing RKTRAJ1 header on line 1 (byte offset 0)")]
    BadHeader,
    #[error("parse error on line {line} (byte offset {offset}): {message}")]
    Parse { line: usize, offset: usize, message: String },
}

/// Writes `# RKTRAJ1` then one `id x y theta` line per pose, with optional
/// `# key value` comment lines after the header.
pub fn write_trajectory(path: &Path, poses: &[(u64, Se2)], comments: &[(String, String)]) -> Result<(), TrajectoryIoError> {
    let mut out = String::from("# RKTRAJ1\n");
    for (k, v) in comments {
        out.push_str(&format!("# {k} {v}\n"));
    }
    for (id, pose) in poses {
        out.push_str(&format!("{id} {:.17e} {:.17e} {:.17e}\n", pose.x(), pose.y(), pose.angle()));
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

/// Reads a trajectory file written by [`write_trajectory`].
pub fn read_trajectory(path: &Path) -> Result<Vec<(u64, Se2)>, TrajectoryIoError> {
    let text = std::fs::read_to_string(path)?;
    let mut offset = 0usize;
    let mut poses = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line_offset = offset;
        offset += line.len() + 1;
        if lineno == 0 {
            if line.trim() != "# RKTRAJ1" {
                return Err(TrajectoryIoError::BadHeader);
            }
            continue;
        }
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(TrajectoryIoError::Parse {
                line: lineno + 1,
                offset: line_offset,
                message: format!("expected 4 fields, got {}", fields.len()),
            });
        }
        let parse = |s: &str, what: &str| -> Result<f64, TrajectoryIoError> {
            s.parse::<f64>().map_err(|e| TrajectoryIoError::Parse {
                line: lineno + 1,
                offset: line_offset,
                message: format!("bad {what}: {e}"),
            })
        };
        let id = fields[0].parse::<u64>().map_err(|e| TrajectoryIoError::Parse {
            line: lineno + 1,
            offset: line_offset,
            message: format!("bad id: {e}"),
        })?;
        let x = parse(fields[1], "x")?;
        let y = parse(fields[2], "y")?;
        let theta = parse(fields[3], "theta")?;
        poses.push((id, Se2::new(x, y, theta)));
    }
    Ok(poses)
}

/// Convenience for tests and fixtures: the sensor-frame position of a world
/// point as seen from a pose.
pub fn world_to_sensor(pose: &Se2, point: (f64, f64)) -> Vector2<f64> {
    pose.inverse().apply(Vector2::new(point.0, point.1))
}
