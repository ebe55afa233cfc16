//! Deep Miner: a multi-branch re-identification network built on a
//! from-scratch f64 reverse-mode autodiff engine.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] — dense arrays, the computation tape, gradients and the
//!   finite-difference checker everything else is validated against.
//! - [`nn`] — parameter storage, batch normalization and the residual
//!   convolution blocks the backbone is made of.
//! - [`erasing`] — the erasing operation that suppresses the most salient
//!   spatial positions of a feature map.
//! - [`attention`] — spatial and channel attention modules.
//! - [`model`] — the assembled network: global branch, input-erased
//!   branches, local stripe branch, BNNeck heads and checkpointing.
//! - [`losses`] — label-smoothed ID loss, batch-hard soft-margin triplet
//!   loss and center loss.
//! - [`metrics`] — pairwise distances, CMC and mAP with cross-camera
//!   gallery filtering.
//! - [`data`] — synthetic identity datasets, directory ingestion,
//!   augmentation and P×K batch sampling.
//! - [`train`] — Adam, the warmup/decay learning-rate schedule and the
//!   training loop.
//! - [`viz`] — activation / mask heatmap dumps.

pub mod attention;
pub mod config;
pub mod data;
pub mod erasing;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor};
