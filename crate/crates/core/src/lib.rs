//! Two-stage diffusion pipeline for multi-class nuclei data augmentation.

pub mod checkpoint;
pub mod conditioning;
pub mod dataset;
pub mod denoiser;
pub mod error;
pub mod field;
pub mod geometry;
pub mod grid;
pub mod kernels;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod stage2;
pub mod toydata;

pub use error::{Error, Result};
pub use field::Field;
pub use grid::{Grid, InstanceGrid, LabelGrid};
pub use rng::RandomStream;
