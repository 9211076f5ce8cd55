//! CTPNet: channel, trend and period-wise representation learning for
//! long-term multivariate time series forecasting.
//!
//! The crate bundles a float64 autograd engine, period-aware series
//! preparation, the CTPNet model itself, and a training/evaluation
//! harness with ablation and downsample-interval sweeps.

pub mod block;
pub mod crl;
pub mod data;
pub mod error;
pub mod harness;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Parameter, Tensor};
