//! Unsupervised surgical-tool presence detection.
//!
//! Frames are encoded by an MMD-regularised variational autoencoder and the
//! encodings are scored three ways: cosine queries ([`direct_eval`]), a
//! two-component Gaussian mixture fitted by MCMC ([`mixture`]), and LSTM
//! future-prediction sequence encodings ([`future`]).

pub mod artifact;
pub mod dataset;
pub mod direct_eval;
pub mod error;
pub mod future;
pub mod mixture;
pub mod rng;
pub mod vae;

pub use error::{Error, Result};
