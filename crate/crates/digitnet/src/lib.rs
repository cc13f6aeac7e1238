//! A self-contained CPU deep-learning micro-engine for handwritten digit
//! recognition and semi-supervised GAN digit generation.
//!
//! The crate provides an autograd tensor core, the layer zoo needed for a
//! six-block convolutional recognizer and a DCGAN-style generator /
//! discriminator pair, RMSprop and Adam optimizers, IDX data ingestion, and
//! checkpoint / metrics / image-grid persistence behind a CLI.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod models;
pub mod ops;
pub mod optim;
pub mod pgm;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
