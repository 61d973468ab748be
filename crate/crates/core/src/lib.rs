pub mod error;
pub mod gaussian;
pub mod model;
pub mod estimator;
pub mod objective;
pub mod optimizer;
pub mod design;
pub mod simulator;
pub mod replay;
pub mod validation;

pub use error::{Error, Result};
