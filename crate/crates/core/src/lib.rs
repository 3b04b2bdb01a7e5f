//! Dissimilarity-space maximum mean discrepancy (D-MMD) for unsupervised
//! domain adaptation of re-identification embeddings.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: a small reverse-mode differentiation graph over `f64` tensors.
//! - [`backbone`]: MLP embedding network, classification head, Adam.
//! - [`losses`]: label-smoothed cross-entropy and batch-hard triplet loss.
//! - [`dissimilarity`]: within/between-class pair distances, MMD and the D-MMD loss.
//! - [`data`]: synthetic domain-shifted datasets with tracklets, file I/O, P×K sampling.
//! - [`trainer`]: supervised source training followed by the adaptation phase.
//! - [`eval`]: CMC / mAP evaluation and distance-distribution overlap.
//! - [`cli`]: experiment configuration and the `dmmd` command line.

pub mod autodiff;
pub mod backbone;
pub mod cli;
pub mod data;
pub mod dissimilarity;
pub mod error;
pub mod eval;
pub mod losses;
pub mod trainer;

pub use error::{Error, Result};
