//! Synthetic data, training, metrics and checkpoints around `fractal_ir`.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod optim;
pub mod padding;
pub mod schedule;
pub mod train;

pub use config::RunConfig;
pub use error::{HarnessError, Result};
