//! Location-variable convolution (LVC) and a WaveGlow-style normalizing-flow
//! vocoder whose coupling networks are built from LVC layers.
//!
//! The crate is organised bottom-up:
//!
//! - [`frontend`]: WAV I/O, STFT, mel filter bank, squeeze/unsqueeze and a
//!   Griffin-Lim baseline.
//! - [`lvc`]: the location-variable gated convolution with exact adjoints.
//! - [`predictor`]: the kernel-predictor hypernetwork that turns a
//!   mel-spectrogram into per-frame kernel sets.
//! - [`flow`]: the invertible multi-scale flow, its likelihood and inverse,
//!   and parameter accounting.
//! - [`train`]: Adam, data pipeline, synthetic data, training loop and the
//!   gradient-checking harness.
//! - [`checkpoint`], [`config`], [`verify`]: file formats, configuration
//!   documents and the property suites behind `melglow verify`.
//!
//! Every numeric routine is generic over [`Real`] so the same code runs in
//! single precision for training and in double precision for verification.

// `!(x > 0.0)` deliberately rejects NaN along with non-positive values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
mod error;
pub mod flow;
pub mod frontend;
mod gemm;
pub mod gradcheck;
pub mod linalg;
pub mod lvc;
pub mod params;
pub mod predictor;
mod real;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;
