pub mod bits;
pub mod config;
pub mod entropy;
pub mod error;
pub mod extractor;
pub mod homodyne;
pub mod pipeline;
pub mod special;
pub mod stats;
pub mod toeplitz;

pub use error::{Error, Result};
