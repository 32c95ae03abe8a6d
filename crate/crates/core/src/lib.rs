//! Detect-and-correct training for classifiers under label noise.
//!
//! Stage one pre-trains a classifier under a cyclic learning rate, records
//! every sample's loss per epoch, fits a two-component Gaussian mixture to
//! the aggregated losses and flags samples above the sensitivity/specificity
//! balancing threshold. The flagged samples seed a row-stochastic noise
//! transition matrix. Stage two trains with plain cross-entropy on unflagged
//! samples and a forward-corrected loss on flagged ones, updating the
//! transition matrix alongside the model.

pub mod config;
pub mod data;
pub mod error;
pub mod gmm;
pub mod nn;
pub mod noise;
pub mod pipeline;
pub mod pretrain;
pub mod rng;
pub mod transition;

pub use error::{Error, Result};
