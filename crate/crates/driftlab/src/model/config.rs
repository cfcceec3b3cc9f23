//! Architecture and training hyperparameters of the latent surrogate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AeKind {
    /// Circular strided convolutions down, mirrored transposed convolutions up.
    Conv,
    /// One dense map each way; used by the constructed-system tests where the
    /// generating decoder is known to be linear.
    Linear,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurrogateConfig {
    /// Latent spatial grid and channel count; d_z = z_h * z_w * n_c.
    pub z_h: usize,
    pub z_w: usize,
    pub n_c: usize,
    /// Fourier frequencies per coordinate in the position features.
    pub k_freq: usize,
    /// Rank of the low-rank transition; 0 requests a dense G2.
    pub rank: usize,
    pub ae_kind: AeKind,
    /// Width of the shared coefficient networks.
    pub hidden: usize,
    /// Channel count inside the convolutional autoencoder.
    pub conv_channels: usize,
    /// Forecast steps in the rollout losses.
    pub n_s: usize,
    /// Assimilation steps per training window.
    pub n_l: usize,
    /// Leading assimilation steps excluded from the loss.
    pub n_b: usize,
    pub lambda_ae: f64,
    pub lambda_u: f64,
    pub lambda_z: f64,
    pub lambda_da: f64,
    /// Latent process noise std (diagonal), fixed rather than learned.
    pub sigma2: f64,
    pub lr: f64,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub stage1_windows_per_epoch: usize,
    pub stage2_windows_per_epoch: usize,
    /// Tracer subsample size per training window.
    pub batch_tracers: usize,
    pub uncertainty_epochs: usize,
    pub uncertainty_hidden: usize,
    /// Initialization seed for weights and batch sampling.
    pub seed: u64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig {
            z_h: 8,
            z_w: 8,
            n_c: 2,
            k_freq: 6,
            rank: 32,
            ae_kind: AeKind::Conv,
            hidden: 64,
            conv_channels: 16,
            n_s: 1,
            n_l: 40,
            n_b: 10,
            lambda_ae: 1.0,
            lambda_u: 1.0,
            lambda_z: 1.0,
            lambda_da: 1.0,
            sigma2: 0.05,
            lr: 1e-3,
            stage1_epochs: 150,
            stage2_epochs: 3,
            stage1_windows_per_epoch: 16,
            stage2_windows_per_epoch: 8,
            batch_tracers: 16,
            uncertainty_epochs: 300,
            uncertainty_hidden: 32,
            seed: 7,
        }
    }
}

impl SurrogateConfig {
    pub fn d_z(&self) -> usize {
        self.z_h * self.z_w * self.n_c
    }

    /// Stride-2 stages needed to go from the data grid to the latent grid.
    pub fn conv_blocks(&self, data_grid: usize) -> Result<usize> {
        if self.z_h != self.z_w {
            return Err(Error::Config("latent grid must be square".into()));
        }
        if data_grid % self.z_h != 0 {
            return Err(Error::Config(format!(
                "latent grid {} does not divide data grid {data_grid}",
                self.z_h
            )));
        }
        let ratio = data_grid / self.z_h;
        if !ratio.is_power_of_two() {
            return Err(Error::Config(format!(
                "data grid {data_grid} over latent grid {} must be a power of two",
                self.z_h
            )));
        }
        Ok(ratio.trailing_zeros() as usize)
    }

    pub fn validate(&self, data_grid: usize) -> Result<()> {
        if self.n_c < 1 {
            return Err(Error::Config("latent channel count must be >= 1".into()));
        }
        if self.n_s < 1 {
            return Err(Error::Config("rollout length must be >= 1".into()));
        }
        if self.n_b >= self.n_l {
            return Err(Error::Config(format!(
                "assimilation warm-up {} must be shorter than the window {}",
                self.n_b, self.n_l
            )));
        }
        for (name, v) in [
            ("lambda_ae", self.lambda_ae),
            ("lambda_u", self.lambda_u),
            ("lambda_z", self.lambda_z),
            ("lambda_da", self.lambda_da),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.rank > self.d_z() {
            return Err(Error::Config(format!(
                "rank {} exceeds latent dimension {}",
                self.rank,
                self.d_z()
            )));
        }
        if self.sigma2 < 0.0 {
            return Err(Error::Config("sigma2 must be >= 0".into()));
        }
        if self.batch_tracers == 0 {
            return Err(Error::Config("batch tracer count must be >= 1".into()));
        }
        if self.ae_kind == AeKind::Conv {
            self.conv_blocks(data_grid)?;
        }
        Ok(())
    }
}
