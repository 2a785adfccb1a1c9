//! Runtime prediction for workloads on heterogeneous platforms under
//! co-located interference, with calibrated upper bounds.

pub mod baseline;
pub mod conformal;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod format;
pub mod linalg;
pub mod model;
pub mod training;

pub use error::{Error, Result};
