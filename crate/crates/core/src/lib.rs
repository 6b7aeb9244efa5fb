//! Hybrid neural forecasting of weekly drought scores from heterogeneous
//! inputs: daily meteorological series, static numeric soil descriptors and
//! categorical soil descriptors.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] / [`autodiff`]: a small dense tensor with a taped
//!   reverse-mode differentiation graph.
//! - [`layers`]: embedding tables, affine layers, a multi-layer LSTM and a
//!   scalar-score attention head.
//! - [`model`]: the hybrid model with its ablation switches.
//! - [`data`]: CSV ingestion, window construction, normalisation, splits.
//! - [`train`]: AdamW, the cyclical learning-rate schedule, the fit loop and
//!   checkpoints.
//! - [`metrics`] / [`stats`] / [`eval`]: regression and classification
//!   metrics, cross-validation summaries and paired t-tests.
//! - [`introspect`] / [`tsne`] / [`figures`]: attention profiles, embedding
//!   export, exact t-SNE and SVG rendering.
//! - [`experiment`]: the run configuration and the experiment commands used
//!   by the CLI.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod figures;
pub mod introspect;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod report;
pub mod rng;
pub mod stats;
pub mod synthetic;
pub mod tensor;
pub mod train;
pub mod tsne;

pub use error::{Error, Result};
pub use rng::RngState;
pub use tensor::Tensor;

/// Number of weekly forecast horizons produced by the model.
pub const HORIZON: usize = 6;
