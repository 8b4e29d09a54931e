//! Invertible multi-scale flow conditioned on mel spectrograms.
//!
//! The waveform is squeezed into `squeeze_channels` interleaved channels and
//! passed through `n_flows` steps, each an invertible channel mix `y = W x`
//! followed by an affine coupling
//!
//! ```text
//! x_a, x_b = split(y)            (x_a gets ceil(C/2) channels)
//! s, b     = coupling(x_a, mel)  (LVC stack with predicted kernels)
//! x_b'     = x_b ⊙ exp(s) + b
//! ```
//!
//! Every `n_early_every` steps the first `n_early_size` channels leave the
//! flow as latent variables.

pub mod accounting;
pub mod config;
mod model;

pub use config::{preset_names, FlowConfig, LOG_SCALE_CLAMP};
pub use model::{
    nll_per_element, BatchGradient, FlowOutput, FlowStep, LatentVector, MelGlow, Projection,
    StepKernels,
};

#[cfg(test)]
mod tests;
