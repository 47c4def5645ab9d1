#![no_std]
//! Allocation-only core of a bird's-eye-view trajectory predictor.
//!
//! Rasterized static and dynamic scene context goes in; multi-modal
//! trajectories with per-waypoint Laplace scales and mode probabilities come
//! out. The crate holds everything that does not need an operating system:
//! a small reverse-mode autodiff engine, the synthetic scene generator and
//! rasterizer, the model, its training objective, evaluation metrics and the
//! AdamW optimizer. File formats and the command line live in the `bevtraj`
//! crate.

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod attention;
pub mod backbone;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod scene;
pub mod tensor;

use alloc::string::String;

/// Errors raised while configuring or running the model.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
