pub mod dataio;
pub mod error;
pub mod evalsuite;
pub mod losses;
pub mod network;
pub mod rng;
pub mod synthdata;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
