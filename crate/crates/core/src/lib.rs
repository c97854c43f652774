pub mod calibrate;
pub mod cox;
pub mod data;
pub mod error;
pub mod imputation;
pub mod io;
pub mod jackknife;
mod linalg;
pub mod model;
pub mod pipeline;
pub mod propensity;
pub mod sim;

pub use error::{Error, Result};
