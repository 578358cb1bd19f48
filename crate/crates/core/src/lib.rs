pub mod autodiff;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod fusion;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod trainer;
pub mod views;

pub use error::{Error, Result};
