//! Spoken pass-phrase classification and open-set verification.
//!
//! The crate trains a GMM-UBM, monophone HMMs and a total-variability
//! i-vector extractor, extracts utterance i-vectors under GMM or HMM frame
//! alignment, and scores them with a linear Gaussian classifier or cosine
//! similarity (optionally max-normalized). GMM-UBM, left-to-right HMM and DTW
//! baselines plus pooled-EER evaluation complete the toolkit.
//!
//! Numeric code is generic over [`Real`] (`f32` or `f64`); the aliases at the
//! crate root fix the scalar to `f64`, which is what the pipeline and the
//! binary formats use.

pub mod baselines;
pub mod binio;
pub mod error;
pub mod eval;
pub mod frontend;
pub mod gmm;
pub mod hmm;
pub mod ivector;
pub mod linalg;
pub mod pipeline;
pub mod real;
pub mod rng;
pub mod scoring;

pub use error::{Error, Result};
pub use real::Real;

pub type AudioBuffer = frontend::AudioBuffer<f64>;
pub type FeatureMatrix = frontend::FeatureMatrix<f64>;
pub type Matrix = linalg::Matrix<f64>;
