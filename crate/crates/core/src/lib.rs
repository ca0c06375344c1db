//! Flow matching for multivariate time series with hard-routed, dissipative
//! Koopman experts that add residual corrections to a global velocity field.
//!
//! The pieces, roughly in pipeline order:
//!
//! * [`datasets`]: synthetic generators, CSV windows, normalization.
//! * [`flowpath`]: linear probability path and the global velocity network.
//! * [`experts`], [`router`]: the expert bank, routing and the WTA objective.
//! * [`trainer`]: combined objective and the training loop.
//! * [`sampler`]: Euler generation, imputation and forecasting.
//! * [`spectra`], [`metrics`]: DMD spectra and evaluation scores.
//! * [`checkpoint`]: binary model persistence.
//! * [`config`]: the TOML run configuration.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod artifact;
pub mod checkpoint;
pub mod config;
pub mod datasets;
pub mod error;
pub mod experts;
pub mod flowpath;
pub mod metrics;
pub mod model;
pub mod numcore;
pub mod router;
pub mod sampler;
pub mod spectra;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{ModelConfig, PrismFlow};
