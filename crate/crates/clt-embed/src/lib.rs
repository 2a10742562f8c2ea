//! Martingale embeddings of discrete measures via stochastic localization,
//! with the quantitative CLT machinery built on top of them.

pub mod engine;
pub mod entropy;
pub mod error;
pub mod measure;
pub mod psd;
pub mod rng;
pub mod sums;
pub mod transport;

pub use error::{Error, Result};
