//! Seasonal naïve benchmark and SARIMA with automatic order selection.

pub mod auto;
pub mod naive;
pub mod optim;
pub mod sarima;

pub use auto::{auto_sarima, SearchMode};
pub use naive::seasonal_naive;
pub use sarima::{difference, fit_sarima, fit_sarima_with, integrate, FitMethod, sarima_forecast, sarima_loglik, SarimaFit, SarimaOrder, SarimaParams};
