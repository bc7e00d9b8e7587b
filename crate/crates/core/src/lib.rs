//! Learned non-Cartesian dynamic MRI acquisition with a windowed-attention reconstruction
//! network, trained end to end through an exact non-uniform DFT.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod metrics;
pub mod nufft;
pub mod pipeline;
pub mod recon;
pub mod trajectory;

pub use error::{Error, Result};
