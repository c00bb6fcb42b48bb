//! Concatenated-CNN rock classification for petrographic thin-section images.

pub mod classes;
pub mod dataset;
pub mod ensemble;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod patching;
pub mod preprocess;
pub mod raster_io;
pub mod tensor;

pub use classes::{ClassDistribution, RockType};
pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
