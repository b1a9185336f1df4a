pub mod autograd;
pub mod datagen;
pub mod decoder;
pub mod dkd;
pub mod dkl;
pub mod dsmae;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod params;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
