pub mod config;
pub mod datasets;
pub mod error;
pub mod imaging;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod study;
pub mod trainer;

pub use error::{Error, Result};

pub use candle_core::{DType, Device, Tensor};
