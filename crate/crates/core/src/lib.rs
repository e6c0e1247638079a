pub mod backbone;
pub mod compressor;
pub mod container;
pub mod datasets;
pub mod evaluation;
pub mod error;
pub mod generator;
pub mod merger;
pub mod numerics;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
