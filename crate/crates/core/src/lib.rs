pub mod config;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod imageio;
pub mod losses;
pub mod model;
pub mod params;
pub mod perceptual;
pub mod ppe;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;
pub mod transformer;
pub mod upsampler;
pub mod verify;

pub use error::{Error, Result};
