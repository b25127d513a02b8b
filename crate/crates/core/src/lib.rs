//! Probabilistic demand forecasting for panels of daily count series.
//!
//! The crate covers the whole evaluation pipeline: building panels from
//! usage logs (or synthesizing them), five forecasters ranging from the
//! seasonal naïve benchmark to a low-rank Gaussian copula network, error
//! metrics, and a rolling-origin backtest that ties them together.

pub mod backtest;
pub mod classical;
pub mod deep;
pub mod error;
pub mod forecast;
pub mod ingest;
pub mod metrics;
pub mod panel;
pub mod plot;
pub mod seed;
pub mod tensor;

pub use error::{Error, Result};
pub use forecast::ForecastDistribution;
pub use panel::{Calendar, Panel, SeriesKey};
