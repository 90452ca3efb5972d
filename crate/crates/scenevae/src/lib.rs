//! A generative model of 3D scenes built on latent-conditioned radiance
//! fields and differentiable volumetric rendering.
//!
//! The crate is organized around the data path of the model:
//!
//! * [`geometry`] — cameras, rays, Fourier input encoding, camera trajectories.
//! * [`tape`] — a small reverse-mode autodiff engine over dense `f64` matrices.
//! * [`nn`] — parameter store, layers (linear, conv, LSTM) and the Adam optimizer.
//! * [`field`] — unconditional and latent-conditioned scene functions.
//! * [`renderer`] — stratified sampling, transmittance compositing, hierarchical
//!   resampling, per-pixel and full-image rendering, depth statistics.
//! * [`inference`] — context encoding, posterior parameterization, iterative
//!   refinement of posterior parameters from objective gradients.
//! * [`objective`] — pixel likelihood, KL, the subsampled training objective,
//!   beta scheduling, trainers, and prior sampling.
//! * [`synthdata`] — a miniature SDF raytracer and the multi-view dataset format.
//! * [`harness`] — experiment drivers and the command line interface.

pub mod checkpoint;
pub mod config;
pub mod field;
pub mod geometry;
pub mod harness;
pub mod inference;
pub mod model;
pub mod nn;
pub mod objective;
pub mod renderer;
pub mod rng;
pub mod synthdata;
pub mod tape;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid caller-supplied value (out-of-range index, bad shape, ...).
    #[error("input error: {0}")]
    Input(String),
    /// Inconsistent configuration (conditioning/latent mismatch, bad key, ...).
    #[error("configuration error: {0}")]
    Config(String),
    /// Training diverged or produced non-finite values.
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
