//! Desk-scale super-resolution network for seven-channel SH samples:
//! icosphere graph-convolution blocks around a small U-Net with global
//! token attention, trained with a channel-split, angular and
//! forward-model consistency loss.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod infer;
pub mod kernels;
pub mod loss;
pub mod model;
pub mod params;
pub mod tape;
pub mod train;
pub mod unet;

pub use error::{NetError, Result};
pub use model::{DiffSrModel, ModelConfig};
pub use tape::{Tape, Tensor, Var};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
