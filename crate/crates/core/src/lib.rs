pub mod cli;
pub mod corpus;
pub mod distribution;
pub mod error;
pub mod experiment;
pub mod io;
pub mod model;
pub mod modes;
pub mod rng;
pub mod sgld;
pub mod truncation;

pub use error::{Error, Result};
