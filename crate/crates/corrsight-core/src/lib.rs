//! Anomaly detection for multivariate sensor streams.
//!
//! The pipeline turns raw per-experiment time series into sliding windows,
//! summarizes each window as a matrix of pairwise signal correlations (a
//! "feature image"), trains a convolutional-recurrent autoencoder to
//! reconstruct healthy images, and flags windows whose per-pair
//! reconstruction errors cross statistically fitted thresholds. The same
//! errors, aggregated across flagged windows, rank which signals most
//! likely caused a fault.
//!
//! Everything numeric runs on the crate's own reverse-mode autodiff engine
//! ([`tensor::Tensor`]), in f64, with explicit seeding throughout so a run
//! is reproducible bit for bit from its config.

pub mod error;
pub mod feature_image;
pub mod detect;
pub mod hpo;
pub mod layers;
pub mod model;
pub mod optim;
pub mod train;
pub mod preprocess;
pub mod rng;
pub mod synth;
pub mod tensor;

#[cfg(any(test, feature = "testkit"))]
pub mod testkit;

pub use error::{Error, Result};
pub use tensor::{Activation, Padding, Tensor};
