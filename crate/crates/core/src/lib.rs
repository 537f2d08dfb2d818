//! Verification backend for embedding vectors built on a diagonal variational
//! autoencoder, with a two-covariance PLDA baseline.
//!
//! The crate covers the full desk-scale pipeline: synthetic corpus generation,
//! preprocessing (centering, whitening, PCA, length normalization), VAE
//! training with hand-derived analytic gradients and RMS-prop, trial scoring
//! via importance-sampled likelihood ratios, PLDA training/scoring, and
//! EER/minDCF evaluation.

pub mod error;
pub mod eval;
pub mod io;
pub mod linalg;
pub mod model;
pub mod plda;
pub mod preprocess;
pub mod scoring;
pub mod seeds;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
