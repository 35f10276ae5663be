//! Two-stream multilingual acoustic modeling.
//!
//! Pronunciation (mel-cepstra) and prosody (energy, logF0, voicing) are
//! modeled by separate encoders whose convolution weights are generated
//! from a language embedding, joined by one location-sensitive attention
//! and decoded by two LSTM decoders. An adversarial speaker classifier
//! behind a gradient reversal layer strips speaker identity from the
//! encoder outputs.

pub mod autodiff;
pub mod cli;
pub mod error;
pub mod features;
pub mod frontend;
pub mod metrics;
pub mod model;
pub mod training;

pub use error::{Error, Result};
