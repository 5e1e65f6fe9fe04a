//! Step-level anomaly detection for multi-agent execution traces.
//!
//! A detector is trained without labels on normal trajectories. At every step it
//! predicts the embedding of the upcoming step from the query and the history
//! so far, using a frozen sequence backbone with trainable projections, and
//! scores the realized step by its reconstruction error plus its misalignment
//! with a learned prototype of normal behaviour. Steps scoring above a
//! calibrated threshold can be routed to a correction agent before the output
//! enters the shared history.
//!
//! Module map:
//!
//! - [`trace`]: trajectory model and JSONL I/O
//! - [`embedding`]: hashing and remote embedders, on-disk cache
//! - [`numerics`]: linear algebra, reverse-mode gradients, Adam
//! - [`detector`]: backbone, model, losses and anomaly scores
//! - [`training`]: unsupervised training, threshold calibration, checkpoints
//! - [`evaluation`]: AUC-ROC, step accuracy, histograms, embedding diagnostics
//! - [`pipeline`]: checkpoint scoring and the per-step score table
//! - [`correction`]: recovery prompt protocol and intervention gating
//! - [`simulator`]: turn-based multi-agent runs with fault injection
//! - [`synthetic`]: planted-anomaly trajectory generator used for testing

pub mod correction;
pub mod detector;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod http;
pub mod numerics;
pub mod pipeline;
pub mod simulator;
pub mod synthetic;
pub mod trace;
pub mod training;

pub use error::{MascError, Result};

/// Crate version embedded in reports.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
