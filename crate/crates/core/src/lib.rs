//! Outlier-robust spatio-temporal interpolation of crowd-sourced temperature
//! observations with a Gaussian-uniform mixture density network.
//!
//! The model has two branches. The signal branch sees a terrain patch and a
//! location/time vector and predicts the mean and spread of the true
//! temperature. The outlier branch sees a one-hot site id and time and
//! predicts the probability that a reading is genuine. Both are trained
//! jointly on the mixture likelihood; at prediction time only the signal
//! branch is used, with Monte Carlo dropout providing epistemic uncertainty.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod mixture;
pub mod network;
pub mod rng;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
pub use mixture::{MixtureParams, SIGMA_FLOOR};
pub use network::{ModelGraph, NetworkConfig};
pub use rng::Streams;
