//! Numerics for ultra-low-field diffusion tensor imaging.
//!
//! Covers volume and gradient-table I/O, tensor fitting, a second-order
//! real spherical-harmonic engine, direction-dependent bias-field
//! estimation, augmentation and degradation, a synthetic phantom, and the
//! evaluation statistics.

pub mod augment;
pub mod bias;
pub mod error;
pub mod gradients;
pub mod linalg;
pub mod nifti;
pub mod optim;
pub mod phantom;
pub mod resample;
pub mod rng;
pub mod sample;
pub mod sh;
pub mod stats;
pub mod tensor;
pub mod volume;

pub use error::{Error, Result};
pub use gradients::{DwiDataset, GradientTable};
pub use sample::ShSample;
pub use volume::{Volume, VolumeGrid};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
