//! Day-night adaptation for segmentation under distribution shift.
//!
//! The pipeline freezes a source-trained segmentation model during the day
//! and trains a per-sample low-frequency Fourier prompt against a
//! BN-statistics alignment loss, banking trained prompts for retrieval.
//! At night it self-trains on the day's collected records through a
//! student / global-student / teacher trio, and hands the EMA teacher to
//! the next day. Everything runs on a small CPU-friendly stack: flat f64
//! tensors, a reverse-mode tape, and a tiny 5-BN-layer encoder-decoder.

pub mod bank;
pub mod checkpoint;
pub mod day;
pub mod error;
pub mod fft;
pub mod harness;
pub mod metrics;
pub mod night;
pub mod prompt;
pub mod nn;
pub mod optim;
pub mod seeds;
pub mod segnet;
pub mod synth;
pub mod tape;
pub mod tensor;

#[doc(hidden)]
pub mod testutil;

pub use error::{DynaError, Result};
pub use tensor::{Spectrum, Tensor};
