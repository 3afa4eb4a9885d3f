pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod model;
pub mod planner;
pub mod relations;
pub mod scene;
pub mod sim;
pub mod train;

pub use error::{Error, Result};
