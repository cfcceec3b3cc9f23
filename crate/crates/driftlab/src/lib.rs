//! driftlab: a Lagrangian data assimilation laboratory.
//!
//! The crate simulates a two-layer quasi-geostrophic flow carrying passive
//! drifters, generates observation datasets from it, and recovers the unseen
//! flow from drifter tracks three ways: a learned conditional Gaussian latent
//! surrogate with closed-form filtering, a serial ensemble adjustment Kalman
//! filter running the true model, and optimal-interpolation / climatology /
//! persistence baselines. A small reverse-mode kernel in [`nn`] powers the
//! surrogate's training, including backpropagation through the filter
//! recursion itself.

pub mod baselines;
pub mod cg;
pub mod cli;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod fft;
pub mod qg;
pub mod rng;
pub mod dataset;
pub mod tracer;

pub use error::{Error, Result};
