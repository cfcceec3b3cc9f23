//! Closed-form filtering for conditionally Gaussian latent dynamics.
//!
//! Given an observed process u and latent z obeying, conditionally on u,
//!
//! ```text
//! u_{n+1} = F1(u_n) + G1(u_n) z_n + Sigma1 eps1
//! z_{n+1} = F2(u_n) + G2(u_n) z_n + Sigma2 eps2
//! ```
//!
//! the posterior of z stays Gaussian and its mean and covariance obey an
//! exact recursion: a Kalman measurement update of z_n by the new observation
//! u_{n+1}, followed by propagation through (F2, G2, Sigma2). Coefficients
//! are always evaluated at the current observation, never the incoming one.
//! The innovation covariance is factored (Cholesky), not inverted, and the
//! propagated covariance is symmetrized and eigenvalue-floored at zero.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

#[derive(Clone, Debug)]
pub struct CGCoefficients {
    pub f1: DVector<f64>,
    pub g1: DMatrix<f64>,
    pub f2: DVector<f64>,
    pub g2: DMatrix<f64>,
    /// Observation noise stds (diagonal Sigma1), all strictly positive.
    pub sigma1: DVector<f64>,
    /// Latent noise stds (diagonal Sigma2).
    pub sigma2: DVector<f64>,
}

impl CGCoefficients {
    pub fn dims(&self) -> (usize, usize) {
        (self.f1.len(), self.f2.len())
    }

    fn validate(&self) -> Result<()> {
        let (d_obs, d_z) = self.dims();
        let ok = self.g1.nrows() == d_obs
            && self.g1.ncols() == d_z
            && self.g2.nrows() == d_z
            && self.g2.ncols() == d_z
            && self.sigma1.len() == d_obs
            && self.sigma2.len() == d_z;
        if !ok {
            return Err(Error::Config(format!(
                "coefficient shapes disagree: f1 {}, g1 {}x{}, f2 {}, g2 {}x{}, sigma1 {}, sigma2 {}",
                d_obs,
                self.g1.nrows(),
                self.g1.ncols(),
                d_z,
                self.g2.nrows(),
                self.g2.ncols(),
                self.sigma1.len(),
                self.sigma2.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LatentPosterior {
    pub mu: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl LatentPosterior {
    /// Spherical start: mu = 0, cov = std^2 I.
    pub fn spherical(d_z: usize, std: f64) -> Self {
        LatentPosterior {
            mu: DVector::zeros(d_z),
            cov: DMatrix::identity(d_z, d_z) * (std * std),
        }
    }
}

const MAX_CONDITION: f64 = 1e12;

/// One filter step: absorb `obs_next` using coefficients evaluated at the
/// current observation, then propagate. `step` only labels error messages.
pub fn cg_update(
    post: &LatentPosterior,
    coeffs: &CGCoefficients,
    obs_next: &DVector<f64>,
    step: usize,
) -> Result<LatentPosterior> {
    coeffs.validate()?;
    let (d_obs, d_z) = coeffs.dims();
    if post.mu.len() != d_z || post.cov.nrows() != d_z || post.cov.ncols() != d_z {
        return Err(Error::Config(format!(
            "posterior dimension {} does not match coefficients ({d_z})",
            post.mu.len()
        )));
    }
    if obs_next.len() != d_obs {
        return Err(Error::Config(format!(
            "observation length {} does not match coefficients ({d_obs})",
            obs_next.len()
        )));
    }

    let r = &post.cov;
    let g1t_r = &coeffs.g1 * r; // d_obs x d_z
    let mut s = &g1t_r * coeffs.g1.transpose(); // d_obs x d_obs
    for i in 0..d_obs {
        s[(i, i)] += coeffs.sigma1[i] * coeffs.sigma1[i];
    }
    // Symmetrize before factoring; the product picks up round-off skew.
    let s = (&s + s.transpose()) * 0.5;

    let eig = s.clone().symmetric_eigen();
    let lam_max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lam_min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(lam_min > 0.0) {
        return Err(Error::Numerics(format!(
            "innovation covariance not positive definite at step {step} (min eigenvalue {lam_min:.3e})"
        )));
    }
    if lam_max / lam_min > MAX_CONDITION {
        return Err(Error::Numerics(format!(
            "innovation covariance ill-conditioned at step {step} (condition {:.3e})",
            lam_max / lam_min
        )));
    }
    let chol = s.clone().cholesky().ok_or_else(|| {
        Error::Numerics(format!("innovation covariance failed Cholesky at step {step}"))
    })?;

    let b = &g1t_r * coeffs.g2.transpose(); // G1 R G2^T, d_obs x d_z
    let gain = chol.solve(&b).transpose(); // K = G2 R G1^T S^{-1}, d_z x d_obs

    let innovation = obs_next - &coeffs.f1 - &coeffs.g1 * &post.mu;
    let mu = &coeffs.f2 + &coeffs.g2 * &post.mu + &gain * innovation;

    let mut cov = &coeffs.g2 * r * coeffs.g2.transpose() - &gain * &b;
    for i in 0..d_z {
        cov[(i, i)] += coeffs.sigma2[i] * coeffs.sigma2[i];
    }
    let cov = (&cov + cov.transpose()) * 0.5;

    // Floor tiny negative eigenvalues from round-off at zero.
    let mut eig = cov.symmetric_eigen();
    for v in eig.eigenvalues.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let cov = eig.recompose();
    let cov = (&cov + cov.transpose()) * 0.5;

    if mu.iter().any(|v| !v.is_finite()) || cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerics(format!("filter state left the reals at step {step}")));
    }
    Ok(LatentPosterior { mu, cov })
}

/// Filter a whole observation sequence. `coeffs_at(n, obs_n)` supplies the
/// coefficients used to absorb observation n+1. The returned series has one
/// posterior per observation, the first being `init`; a sequence with no
/// tail after the initial observation returns just the init.
pub fn run_filter<F>(
    mut coeffs_at: F,
    obs: &[DVector<f64>],
    init: LatentPosterior,
) -> Result<Vec<LatentPosterior>>
where
    F: FnMut(usize, &DVector<f64>) -> Result<CGCoefficients>,
{
    let mut out = Vec::with_capacity(obs.len());
    if obs.is_empty() {
        return Ok(out);
    }
    out.push(init);
    for n in 0..obs.len() - 1 {
        let coeffs = coeffs_at(n, &obs[n])?;
        let next = cg_update(&out[n], &coeffs, &obs[n + 1], n + 1)?;
        out.push(next);
    }
    Ok(out)
}
