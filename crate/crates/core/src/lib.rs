//! Single-cell downlink massive-MIMO simulator with slice-aware spectrum
//! sharing, a static-share benchmark and benchmark estimators.

mod error;

pub mod channel_model;
pub mod harness;
pub mod power_allocation;
pub mod precoding;
pub mod predictor;
pub mod rate_function;
pub mod rng;
pub mod scheduler;
pub mod user_selection;

pub use error::{Error, Result};
