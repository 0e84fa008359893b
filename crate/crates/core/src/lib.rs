pub mod error;
pub mod experiment;
pub mod gate;
pub mod kalman;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod par;
pub mod pendulum;
pub mod trainer;

pub use error::{DrfError, Result};
