//! Evoked-expression prediction from precomputed per-frame video features.
//!
//! The crate covers the whole pipeline: per-modality bidirectional GRU stacks
//! with context-gated late fusion ([`model`]), three training objectives
//! ([`losses`]), rate conversion and label filters ([`signal`]), Pearson/CCC
//! evaluation ([`metrics`]), file formats and a synthetic data generator
//! ([`dataio`]), and training, sparse-sampling inference and ensembling
//! ([`trainer`]). All model gradients are written by hand and verified with
//! [`numerics::grad_check`].

pub mod dataio;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod signal;
pub mod trainer;

pub use error::{Error, FormatError, Result};
pub use numerics::Matrix;

/// Number of emotion channels predicted per frame.
pub const EMOTIONS: usize = 15;

/// Rate of the label tracks and of the required dense predictions.
pub const LABEL_RATE_HZ: f64 = 6.0;
