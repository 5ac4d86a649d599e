//! Low-latency hand gesture recognition on low-resolution thermal video.
//!
//! A per-frame 2D encoder feeds a 1D temporal convolution network built from
//! dilated basic blocks whose causality can be mixed per block. The crate covers
//! training (averaged-logit cross-entropy and CTC), sliding-window streaming
//! inference, detection metrics, cost accounting and a synthetic data generator.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod dataio;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod rng;
pub mod streaming;
pub mod tcn;
pub mod training;

pub use error::{Error, FormatError, Result};
