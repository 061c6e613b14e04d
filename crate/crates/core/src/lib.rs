//! Desk-scale simulator for federated continual self-learning of a small
//! neural transducer, with EMA-paired teacher pseudo-labeling, rehearsal
//! pseudo-devices, and weak-supervision losses (expected semantic cost and
//! policy-gradient feedback scores, optionally noise-corrupted).
//!
//! Layering:
//! - [`numerics`]: flat parameter vectors, a record/replay reverse-mode
//!   trace, SGD/Adam, and the checkpoint format.
//! - [`transducer`]: encoder + prediction + joint networks and the exact
//!   alignment-marginalized loss in log space.
//! - [`decoder`]: n-best beam search with exact lattice rescoring and
//!   confidence filtering.
//! - [`weaksup`]: cost metrics (semantic / WER / binary), the truncated
//!   Gaussian noise model, expected-cost and policy-gradient losses.
//! - [`corpus`]: synthetic slot-annotated utterances with a controlled
//!   distribution shift, plus feature synthesis and augmentation.
//! - [`fedsim`]: round orchestration — device sampling, local training,
//!   delta aggregation, server optimizer, EMA teacher, rehearsal.
//! - [`eval`]: WER/SER/WERR evaluation, forgetting and divergence reports.
//! - [`config`]: the TOML experiment configuration.

pub mod config;
pub mod corpus;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod fedsim;
pub mod numerics;
pub mod rng;
pub mod scalar;
pub mod transducer;
pub mod weaksup;

pub use error::{Error, Result};
pub use scalar::{Real, Scalar};

