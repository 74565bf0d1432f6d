//! Scheduled sampling for recurrent sequence models.

pub mod checkpoint;
pub mod decoder;
pub mod error;
pub mod harness;
pub mod math;
pub mod metrics;
pub mod model;
pub mod schedule;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};
