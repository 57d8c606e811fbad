//! Modality-invariant multimodal fusion (X-Fusion) for human sensing tasks.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`]: dense f64 tensors, a reverse-mode tape and a finite-difference gradient check.
//! * [`encoding`]: frozen stub extractors, learned projections and multi-modal embedding assembly.
//! * [`xfusion`]: key-value generators, the cross-modal transformer, cross-attention injection,
//!   the iterative fusion driver, architecture variants and task heads.
//! * [`training`]: existence-list sampling, losses, optimizers, metrics and baselines.
//! * [`harness`]: configuration, synthetic data, checkpoints, reports and experiment commands.

pub mod encoding;
pub mod error;
pub mod harness;
pub mod tensor;
pub mod training;
pub mod xfusion;

pub use error::{Result, XfiError};
