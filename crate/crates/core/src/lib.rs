//! Adversarial robustness toolkit for Wi-Fi CSI time-series classifiers.
//!
//! * [`data`]: synthetic WSSUS CSI, z-score normalization, stratified
//!   splits and the CSIB file format.
//! * [`models`]: large (CNN, GRU) and tiny (TCN bottleneck encoder with
//!   TCN/GRU heads) classifiers and their training loops.
//! * [`attacks`]: PGD, DeepFool, universal perturbations, transfer.
//! * [`physcon`]: channel-realism projection and MMD.
//! * [`defenses`]: PGD adversarial training and TRADES.
//! * [`metrics`]: ASR, accuracy, macro-F1.

pub mod attacks;
pub mod data;
pub mod defenses;
mod error;
pub mod metrics;
pub mod models;
pub mod physcon;
pub mod rng;

pub use error::{CsiError, Result};

/// Tensors in this crate are double precision.
pub type Tensor = csi_grad::Tensor<f64>;
