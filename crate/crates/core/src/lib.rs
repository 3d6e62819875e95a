//! Inference-time latent optimization through distilled diffusion models on
//! toy spectrograms.

pub mod autodiff;
pub mod bench;
pub mod controls;
pub mod diffusion;
pub mod distill;
pub mod error;
pub mod ito;
pub mod scorenet;

pub use error::{Error, Result};

/// Frequency bins of a toy spectrogram.
pub const BINS: usize = 16;
/// Time frames of a toy spectrogram.
pub const FRAMES: usize = 32;
