//! Reference implementation of a two-stream image manipulation detector
//! built around wavelet-guided efficient attention.
//!
//! The crate is organised bottom-up: [`numerics`] provides the f64 tensor
//! core with reverse-mode gradients, [`wavelet`] the Haar transform,
//! [`ewtb`] the attention block, [`network`] the full model and its cost
//! accounting, [`supervision`] losses and metrics, [`data`] synthetic
//! samples and degradations, and [`harness`] training, evaluation and
//! persistence.

pub mod data;
pub mod error;
pub mod ewtb;
pub mod harness;
pub mod mask;
pub mod network;
pub mod numerics;
pub mod params;
pub mod supervision;
pub mod wavelet;

pub use error::{CheckpointError, Error, Result};
pub use mask::{BoundingBox, Mask};
pub use numerics::{Tape, Tensor, Var};
