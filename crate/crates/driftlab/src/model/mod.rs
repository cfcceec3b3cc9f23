//! The learned surrogate for filtering tracer observations: latent
//! autoencoder, conditional Gaussian coefficient networks, training stages,
//! and the inference paths built on top of them.

pub mod batch;
pub mod config;
pub mod infer;
pub mod loss;
pub mod surrogate;
pub mod synthetic;
pub mod train;

pub use config::{AeKind, SurrogateConfig};
pub use surrogate::Surrogate;
