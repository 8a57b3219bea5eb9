//! Dense 2D scalar/vector fields with spatial metadata.

use thiserror::Error;

/// Continuous (sub-pixel) image coordinates. Pixel `(i, j)` has its sample
/// point at exactly `(i, j)`; the valid sampling domain is
/// `[0, width-1] x [0, height-1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelCoord {
    pub x: f64,
    pub y: f64,
}

impl PixelCoord {
    pub fn new(x: f64, y: f64) -> Self {
        PixelCoord { x, y }
    }
}

/// A position in metres. The pixel-to-world map shares axis directions with
/// the image: +x pixel is +x world, +y pixel is +y world.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldCoord {
    pub x: f64,
    pub y: f64,
}

impl WorldCoord {
    pub fn new(x: f64, y: f64) -> Self {
        WorldCoord { x, y }
    }
}

#[derive(Debug, Error)]
pub enum GridError {
    #[error("resolution must be positive and finite, got {0}")]
    BadResolution(f64),
    #[error("data length {got} does not match {width}x{height}x{channels}")]
    BadLength { got: usize, width: usize, height: usize, channels: usize },
    #[error("grid contains a non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("grid dimensions must be non-zero")]
    EmptyGrid,
}

/// A dense `width x height x channels` field stored row-major with
/// interleaved channels: flat index `(y * width + x) * channels + c`.
///
/// `resolution` is metres per pixel and `origin` is the world position of
/// the sample point of pixel `(0, 0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2 {
    width: usize,
    height: usize,
    channels: usize,
    resolution: f64,
    origin: WorldCoord,
    data: Vec<f64>,
}

impl Grid2 {
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        resolution: f64,
        origin: WorldCoord,
        data: Vec<f64>,
    ) -> Result<Self, GridError> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(GridError::EmptyGrid);
        }
        if !(resolution.is_finite() && resolution > 0.0) {
            return Err(GridError::BadResolution(resolution));
        }
        if data.len() != width * height * channels {
            return Err(GridError::BadLength { got: data.len(), width, height, channels });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(GridError::NonFinite(i));
        }
        Ok(Grid2 { width, height, channels, resolution, origin, data })
    }

    /// All-zero grid with the given shape and metadata.
    pub fn zeros(width: usize, height: usize, channels: usize, resolution: f64, origin: WorldCoord) -> Self {
        Grid2::new(width, height, channels, resolution, origin, vec![0.0; width * height * channels])
            .expect("zero grid is always valid")
    }

    /// Unit-resolution grid with origin at (0, 0); convenient for tests and
    /// purely pixel-space fields such as logits.
    pub fn from_values(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self, GridError> {
        Grid2::new(width, height, channels, 1.0, WorldCoord::new(0.0, 0.0), data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn origin(&self) -> WorldCoord {
        self.origin
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, x: usize, y: usize, c: usize) -> f64 {
        debug_assert!(x < self.width && y < self.height && c < self.channels);
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// The interleaved channel values of one pixel.
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let base = (y * self.width + x) * self.channels;
        &self.data[base..base + self.channels]
    }

    /// Rebuilds the grid with the same metadata but new values.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self, GridError> {
        Grid2::new(self.width, self.height, self.channels, self.resolution, self.origin, data)
    }

    /// Same shape and metadata, contents replaced by `f(value)`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self, GridError> {
        self.with_data(self.data.iter().map(|&v| f(v)).collect())
    }
}

/// Converts sub-pixel image coordinates to world metres:
/// `q = origin + resolution * p`.
pub fn pix2world(p: PixelCoord, grid: &Grid2) -> WorldCoord {
    WorldCoord::new(grid.origin.x + grid.resolution * p.x, grid.origin.y + grid.resolution * p.y)
}

/// Inverse of [`pix2world`].
pub fn world2pix(q: WorldCoord, grid: &Grid2) -> PixelCoord {
    PixelCoord::new((q.x - grid.origin.x) / grid.resolution, (q.y - grid.origin.y) / grid.resolution)
}
