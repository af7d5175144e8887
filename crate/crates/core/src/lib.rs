//! Blood-glucose forecasting on 5-minute continuous glucose monitoring grids.

pub mod arima;
pub mod baseline_eval;
pub mod cgm_data;
pub mod error;
pub mod experiment;
pub mod lstm_net;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
