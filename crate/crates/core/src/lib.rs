pub mod camera;
pub mod densify;
pub mod error;
pub mod grad;
pub mod io;
pub mod lod;
pub mod loss;
pub mod math;
pub mod primitive;
pub mod raster;
pub mod rng;
pub mod scene;
pub mod sh;
pub mod train;
pub mod shape;

pub use error::{Error, Result};
