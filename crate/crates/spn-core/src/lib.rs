//! From-scratch CNN engine for solitary pulmonary nodule classification.
//!
//! The crate provides dense f64 tensors, the layer set needed by the three
//! nodule classifiers (convolution, pooling, dense, batch normalization,
//! dropout, the usual activations), a small static-graph executor with exact
//! reverse-mode gradients, first-order optimizers, the dataset rules
//! (rating-based labeling, per-nodule image caps, stratified folds), image
//! augmentation, and a synthetic PGM corpus generator for desk-scale runs.
//!
//! Everything is deterministic given a seed: stochastic components draw from
//! independent substreams derived in [`rng`].

pub mod augment;
pub mod dataset;
pub mod error;
pub mod models;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;

#[cfg(any(test, feature = "test-utils"))]
pub mod testing;

pub use error::{Error, Result};
pub use tensor::Tensor;
