pub mod backbone;
pub mod config;
pub mod data;
pub mod dsa;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod tfc;
pub mod training;

pub use error::{HatError, Result};
