//! Neural source-filter waveform model.
//!
//! A sine-based excitation built from an F0 track is shaped by a stack of
//! dilated-convolution stages into a speech waveform. Training minimizes
//! multi-resolution spectral distances whose waveform gradients are computed
//! analytically (DFT, per-bin gradient, Hermitian inverse DFT, deframing).

pub mod dsp;
pub mod error;
pub mod loss;

pub use error::{NsfError, Result};
pub mod filter;
pub mod gradcheck;
pub mod metrics;
pub mod source;
pub mod train;
