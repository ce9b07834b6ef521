//! Weakly-supervised human-object interaction detection with an alignment
//! layer over a small encoder-decoder transformer.

pub mod align;
pub mod boxes;
pub mod config;
pub mod error;
pub mod eval;
pub mod inspect;
pub mod loss;
pub mod matching;
pub mod model;
pub mod rng;
pub mod scenegen;
pub mod targets;
pub mod train;

pub use config::Config;
pub use error::{Error, Result};
