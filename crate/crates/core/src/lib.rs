pub mod bev;
pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod geom;
pub mod hypersphere;
pub mod losses;
pub mod mapper;
pub mod nn;
pub mod supervision;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
