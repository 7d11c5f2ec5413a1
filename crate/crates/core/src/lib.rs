//! Reference-conditioned audio enhancement.
//!
//! A denoising / selective-suppression model and a separately trained
//! separation model share one architecture: two reference encoders embed a
//! recording of what to keep and a recording of what to remove, and a
//! conditioned residual network estimates a ratio mask for the noisy input.
//! The crate also carries the data-mixing harness, the objective metrics used
//! to score enhancement, a from-scratch training loop and the `nhans` CLI.

pub mod audio;
pub mod bench;
pub mod cli;
pub mod dsp;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod synth;
pub mod train;

pub use audio::AudioBuffer;
pub use error::{Error, Result};
pub use model::{PmAuxModel, Reference, TaskKind};
