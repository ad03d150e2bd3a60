pub mod baseline;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod head;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod params;
pub mod tcn;
pub mod trainer;

pub use error::{Error, Result};
