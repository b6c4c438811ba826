pub mod backbone;
pub mod bg;
pub mod contrastive;
pub mod data;
pub mod distractor;
pub mod config;
pub mod error;
pub mod eval;
pub mod model;
pub mod graph;
pub mod matching;
pub mod metrics;
pub mod nn;
pub mod serial;
pub mod tensor;
pub mod train;
pub mod types;

pub use error::{Error, Result};
