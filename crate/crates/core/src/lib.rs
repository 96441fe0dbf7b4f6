pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod halting;
pub mod linalg;
pub mod nets;
pub mod problems;
pub mod rng;
pub mod solvers;
pub mod training;

pub use error::{Error, Result};
