pub mod cli;
pub mod error;
pub mod evalkit;
pub mod flow;
pub mod iterate;
pub mod model;
pub mod raster;
pub mod rope;
pub mod seq;
pub mod tape;
pub mod train;
pub mod vocab;
pub mod world;

pub use error::{Error, Result};
pub use raster::Raster;
