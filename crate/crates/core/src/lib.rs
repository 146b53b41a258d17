pub mod autodiff;
pub mod backbone;
pub mod batch;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod optim;
pub mod params;
pub mod rng;
pub mod synth;
pub mod train;
pub mod tta;

pub use error::{Error, Result};
