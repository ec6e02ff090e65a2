//! Forecasting networks that combine categorical entity embeddings with
//! temporal convolutional or recurrent feature extractors.

pub mod analysis;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod seed;
pub mod training;

pub use error::{Error, Result};
