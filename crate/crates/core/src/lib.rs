pub mod backbone;
pub mod cli;
pub mod data;
pub mod error;
pub mod masking;
pub mod numerics;
pub mod pipeline;
pub mod rng;
pub mod store;
pub mod tokenizer;

pub use error::{Error, Result};
