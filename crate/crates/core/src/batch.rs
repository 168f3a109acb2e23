//! Aligned multi-view bundle of images, depth maps and cameras.

use thiserror::Error;

use crate::geometry::CameraParams;
use crate::grid::Raster;

#[derive(Debug, Error)]
pub enum BatchError {
    #[error("batch needs at least one view")]
    Empty,
    #[error("view {0}: {1}")]
    View(usize, String),
}

/// N views sharing one image size. Depths are single-channel camera-space z
/// with 0 encoding "no geometry"; negative or non-finite depths are rejected
/// up front so downstream arithmetic never sees them.
#[derive(Debug, Clone)]
pub struct MultiViewBatch {
    images: Vec<Raster>,
    depths: Vec<Raster>,
    cameras: Vec<CameraParams>,
}

impl MultiViewBatch {
    pub fn new(
        images: Vec<Raster>,
        depths: Vec<Raster>,
        cameras: Vec<CameraParams>,
    ) -> Result<Self, BatchError> {
        if images.is_empty() {
            return Err(BatchError::Empty);
        }
        if images.len() != depths.len() || images.len() != cameras.len() {
            return Err(BatchError::View(
                0,
                format!(
                    "got {} images, {} depths, {} cameras",
                    images.len(),
                    depths.len(),
                    cameras.len()
                ),
            ));
        }
        let (w, h) = (images[0].width(), images[0].height());
        for (i, ((img, dep), cam)) in images.iter().zip(&depths).zip(&cameras).enumerate() {
            if img.width() != w || img.height() != h {
                return Err(BatchError::View(i, "image size differs across views".into()));
            }
            if dep.width() != w || dep.height() != h {
                return Err(BatchError::View(i, "depth size differs from image".into()));
            }
            if dep.channels() != 1 {
                return Err(BatchError::View(
                    i,
                    format!("depth must have 1 channel, got {}", dep.channels()),
                ));
            }
            if dep.data().iter().any(|&d| d < 0.0) {
                return Err(BatchError::View(i, "negative depth value".into()));
            }
            if cam.width as usize != w || cam.height as usize != h {
                return Err(BatchError::View(i, "camera size differs from image".into()));
            }
        }
        Ok(Self {
            images,
            depths,
            cameras,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn width(&self) -> usize {
        self.images[0].width()
    }

    pub fn height(&self) -> usize {
        self.images[0].height()
    }

    pub fn images(&self) -> &[Raster] {
        &self.images
    }

    pub fn depths(&self) -> &[Raster] {
        &self.depths
    }

    pub fn cameras(&self) -> &[CameraParams] {
        &self.cameras
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix4;

    fn cam(size: u32) -> CameraParams {
        CameraParams::new(
            100.0,
            100.0,
            size as f64 / 2.0 - 0.5,
            size as f64 / 2.0 - 0.5,
            Matrix4::identity(),
            size,
            size,
        )
        .unwrap()
    }

    #[test]
    fn mismatched_depth_size_rejected() {
        let img = Raster::new(4, 4, 1, vec![0.0; 16]).unwrap();
        let dep = Raster::new(2, 2, 1, vec![1.0; 4]).unwrap();
        assert!(MultiViewBatch::new(vec![img], vec![dep], vec![cam(4)]).is_err());
    }

    #[test]
    fn negative_depth_rejected() {
        let img = Raster::new(2, 2, 1, vec![0.0; 4]).unwrap();
        let dep = Raster::new(2, 2, 1, vec![1.0, 1.0, -0.5, 1.0]).unwrap();
        assert!(MultiViewBatch::new(vec![img], vec![dep], vec![cam(2)]).is_err());
    }

    #[test]
    fn zero_depth_is_allowed_as_invalid_marker() {
        let img = Raster::new(2, 2, 1, vec![0.0; 4]).unwrap();
        let dep = Raster::new(2, 2, 1, vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        assert!(MultiViewBatch::new(vec![img], vec![dep], vec![cam(2)]).is_ok());
    }
}
