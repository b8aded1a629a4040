pub mod checkpoint;
pub mod encoders;
pub mod error;
pub mod experiment;
pub mod extractor;
pub mod io;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod signals;
pub mod streaming;
pub mod training;

pub use error::{Error, Result};
