pub mod audio;
pub mod container;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod features;
pub mod gallery;
pub mod gmm;
pub mod linalg;
pub mod pipeline;
pub mod plda;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
