//! Return-time prediction for website users.
//!
//! The centrepiece is a recurrent survival model: an LSTM reads a user's
//! session history and parameterizes the hazard of the next return,
//! `λ(t) = exp(o_j + w (t − t_j))`, trained on a censored likelihood so that
//! users who never come back within the prediction window still contribute.
//! Cox proportional-hazards and simple baselines are included for comparison,
//! along with a synthetic session generator and the evaluation metrics.

pub mod baselines;
pub mod checkpoint;
pub mod cox;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod features;
pub mod generator;
pub mod ingest;
pub mod network;
pub mod quadrature;
pub mod rnnsm;
pub mod training;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
