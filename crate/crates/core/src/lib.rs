//! Audio-visual valence/arousal regression with a cross-modal attention
//! transformer, trained to tolerate missing modalities.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: dense `f64` tensors, a reverse-mode tape and Adam.
//! - [`model`]: two encoder branches fused by cross-modal attention, plus
//!   the binary checkpoint format.
//! - [`augment`]: Clip-Zero, Frame-Zero and Frame-Repeat corruption.
//! - [`metrics`]: concordance correlation coefficient, as a metric and a loss.
//! - [`data`]: synthetic paired clips, stream synchronisation, normalisation,
//!   windowing and the dataset file format.
//! - [`harness`]: training, evaluation sweeps, gradient checking and reports.

pub mod augment;
pub mod autodiff;
mod binio;
pub mod data;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod rng;

pub use autodiff::{AdamConfig, AdamState, Tape, Tensor, TensorError, Var};
pub use model::{ModelConfig, ParameterSet};
