//! Raster and token-grid containers.
//!
//! Both containers are flat `f32` buffers in row-major, channel-last order
//! and are immutable after construction, so they can be shared freely
//! across parallel workers.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("data length {actual} does not match dimensions {dims} (expected {expected})")]
    LengthMismatch {
        dims: String,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("invalid dimensions: {0}")]
    BadDims(String),
}

fn check_finite(data: &[f32]) -> Result<(), GridError> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(GridError::NonFinite(i)),
        None => Ok(()),
    }
}

/// Dense image-resolution buffer: `height` rows of `width` pixels with
/// `channels` interleaved floats per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Raster {
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<f32>,
    ) -> Result<Self, GridError> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(GridError::BadDims(format!(
                "{width}x{height}x{channels}"
            )));
        }
        let expected = width * height * channels;
        if data.len() != expected {
            return Err(GridError::LengthMismatch {
                dims: format!("{width}x{height}x{channels}"),
                expected,
                actual: data.len(),
            });
        }
        check_finite(&data)?;
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self, GridError> {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self::new(width, height, channels, data)
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

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }
}

/// Token grid at latent resolution: `grid_h` rows of `grid_w` tokens with a
/// `dim`-dimensional feature vector per token.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    grid_w: usize,
    grid_h: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureGrid {
    pub fn new(
        grid_w: usize,
        grid_h: usize,
        dim: usize,
        data: Vec<f32>,
    ) -> Result<Self, GridError> {
        if grid_w == 0 || grid_h == 0 || dim == 0 {
            return Err(GridError::BadDims(format!("{grid_w}x{grid_h}x{dim}")));
        }
        let expected = grid_w * grid_h * dim;
        if data.len() != expected {
            return Err(GridError::LengthMismatch {
                dims: format!("{grid_w}x{grid_h}x{dim}"),
                expected,
                actual: data.len(),
            });
        }
        check_finite(&data)?;
        Ok(Self {
            grid_w,
            grid_h,
            dim,
            data,
        })
    }

    pub fn zeros(grid_w: usize, grid_h: usize, dim: usize) -> Self {
        Self::new(grid_w, grid_h, dim, vec![0.0; grid_w * grid_h * dim])
            .expect("zero grid dimensions must be positive")
    }

    pub fn from_fn(
        grid_w: usize,
        grid_h: usize,
        dim: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self, GridError> {
        let mut data = Vec::with_capacity(grid_w * grid_h * dim);
        for y in 0..grid_h {
            for x in 0..grid_w {
                for c in 0..dim {
                    data.push(f(x, y, c));
                }
            }
        }
        Self::new(grid_w, grid_h, dim, data)
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_tokens(&self) -> usize {
        self.grid_w * self.grid_h
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn token(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.grid_w + x) * self.dim;
        &self.data[i..i + self.dim]
    }

    /// Token vector by flat row-major token index.
    pub fn token_flat(&self, idx: usize) -> &[f32] {
        let i = idx * self.dim;
        &self.data[i..i + self.dim]
    }

    pub fn same_shape(&self, other: &FeatureGrid) -> bool {
        self.grid_w == other.grid_w && self.grid_h == other.grid_h && self.dim == other.dim
    }

    /// Rebuilds a grid of identical shape from a raw buffer.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self, GridError> {
        Self::new(self.grid_w, self.grid_h, self.dim, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raster_length_invariant() {
        let r = Raster::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(r.pixel(1, 1), &[4.0]);
        assert!(matches!(
            Raster::new(2, 2, 1, vec![1.0, 2.0, 3.0]),
            Err(GridError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn raster_rejects_non_finite() {
        assert!(matches!(
            Raster::new(2, 1, 1, vec![1.0, f32::NAN]),
            Err(GridError::NonFinite(1))
        ));
        assert!(matches!(
            Raster::new(2, 1, 1, vec![f32::INFINITY, 0.0]),
            Err(GridError::NonFinite(0))
        ));
    }

    #[test]
    fn grid_token_indexing_is_row_major() {
        let g = FeatureGrid::from_fn(3, 2, 2, |x, y, c| (y * 3 + x) as f32 * 10.0 + c as f32)
            .unwrap();
        assert_eq!(g.token(2, 1), &[50.0, 51.0]);
        assert_eq!(g.token_flat(5), g.token(2, 1));
    }

    #[test]
    fn zero_dims_rejected() {
        assert!(FeatureGrid::new(0, 2, 2, vec![]).is_err());
        assert!(Raster::new(2, 2, 0, vec![]).is_err());
    }
}
