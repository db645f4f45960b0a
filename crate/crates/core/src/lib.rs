pub mod autograd;
pub mod benchmark;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod losses;
pub mod nn;
pub mod par;
pub mod params;
pub mod scene;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
