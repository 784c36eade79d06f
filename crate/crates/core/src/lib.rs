pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod neural;
pub mod raster;
pub mod rng;
pub mod scene;
pub mod ssim;
pub mod synth;
pub mod train;
pub mod voting;

pub use error::{Error, Result};
