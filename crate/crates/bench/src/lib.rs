pub mod dataset;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod report;
pub mod synth;

pub use error::{BenchError, Result};
