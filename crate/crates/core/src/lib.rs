pub mod colorspace;
pub mod config;
pub mod detector;
pub mod error;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod patchgen;
pub mod pipeline;
pub mod rng;
pub mod scene;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
