//! Reasoning-aware one-shot compression for a small decoder-only transformer.
//!
//! Layer inputs are collected either from prompts alone or from prompts plus
//! the model's own decode rollouts, reduced to per-layer Gram matrices, and
//! fed to layerwise reconstruction solvers (magnitude, WANDA, OBS pruning and
//! OBS quantization). [`diagnostics`] measures how far a compressed model's
//! last-layer hidden states drift from the dense model along a rollout.

pub mod calibration;
pub mod compress;
pub mod diagnostics;
pub mod error;
pub mod model;
pub mod numkernel;
pub mod par;

pub use error::{Error, Result};
pub use par::Exec;
