//! Deep prompt adaptation of a frozen mixture-of-experts spectrogram
//! transformer for automatic modulation classification.
//!
//! Pipeline: IQ samples → STFT magnitude spectrogram ([`dsp`]) → patch
//! tokens → three expert encoders with per-layer prompt injection
//! ([`backbone`], [`prompt`]) → routed fusion and classifier head
//! ([`router`]) → training regimes ([`train`]) and experiment sweeps
//! ([`harness`]).

pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod dsp;
pub mod error;
pub mod harness;
pub mod model;
pub mod param;
pub mod prompt;
pub mod rng;
pub mod router;
pub mod synth;
pub mod train;
pub mod tensor;

pub use autograd::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
