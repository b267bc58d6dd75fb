pub mod config;
pub mod cv;
pub mod dataset;
pub mod error;
pub mod features;
pub mod format;
pub mod geo;
pub mod lasso;
pub mod methods;
pub mod pipeline;
pub mod standardize;

pub use error::{Error, ErrorClass, Result};
