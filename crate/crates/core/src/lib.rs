pub mod error;
pub mod eval;
pub mod evidence;
pub mod generator;
pub mod model;
pub mod numerics;
pub mod retrieval;
pub mod text;
pub mod trainer;
pub mod transformer;
pub mod vqvae;

pub use error::{Error, Result};
