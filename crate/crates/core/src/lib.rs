//! Multi-view correspondence construction and correspondence-constrained
//! attention over a pluggable denoiser.
//!
//! The crate covers the full editing core: bit-exact raster/grid containers
//! and file formats, pinhole geometry with occlusion-aware depth matching,
//! geometry+semantic correspondence sets with attention masks, reference and
//! correspondence-constrained attention, a deterministic DDIM engine with
//! per-layer hook points, the two-stage selective editing pipeline, and
//! synthetic scenes with closed-form correspondence oracles for testing.

pub mod attention;
pub mod batch;
pub mod cameras;
pub mod correspondence;
pub mod diffusion;
pub mod geometry;
pub mod grid;
pub mod mvdt;
pub mod pipeline;
pub mod predictors;
pub mod synthetic;

pub use batch::MultiViewBatch;
pub use geometry::CameraParams;
pub use grid::{FeatureGrid, Raster};
