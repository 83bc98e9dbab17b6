pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod mdms;
pub mod meta;
pub mod rng;
pub mod segnet;
pub mod tensor;

pub use error::{Error, Result};
