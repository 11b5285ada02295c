pub mod backtest_metrics;
pub mod changepoint;
pub mod error;
pub mod features;
pub mod market_data;
pub mod momentum_model;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
