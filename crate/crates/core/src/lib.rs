//! Structured mass segmentation: position-prior FCN unaries, a dense
//! pairwise CRF unrolled as a differentiable mean-field recurrence, and
//! adversarial training, all on a small reverse-mode autodiff engine.
//!
//! Runnable walkthroughs live in `examples/`; the `masscrf` binary wraps the
//! same pipeline as batch commands (`synth`, `train`, `eval`, `gradcheck`).

pub mod adversarial;
pub mod checkpoint;
pub mod cli;
pub mod crf;
pub mod dataio;
pub mod error;
pub mod fcn;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Padding, Tape, Tensor, Var};
