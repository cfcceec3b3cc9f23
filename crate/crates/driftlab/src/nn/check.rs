//! Finite-difference verification of tape gradients.
//!
//! Training bugs hide in backward passes, so every primitive and every
//! end-to-end loss in this crate is checked against central differences
//! along random directions. Kept public so integration tests can run the
//! same sweep on full model losses.

use crate::error::Result;
use crate::nn::tensor::Tensor;

/// Central-difference directional derivative of `f` at `inputs` along
/// `dirs` (one direction tensor per input, same shapes).
pub fn fd_directional<F>(f: F, inputs: &[Tensor], dirs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    assert_eq!(inputs.len(), dirs.len());
    let shifted = |sign: f64| -> Vec<Tensor> {
        inputs
            .iter()
            .zip(dirs)
            .map(|(x, d)| x.zip(d, |xv, dv| xv + sign * eps * dv))
            .collect()
    };
    let plus = f(&shifted(1.0))?;
    let minus = f(&shifted(-1.0))?;
    Ok((plus - minus) / (2.0 * eps))
}

/// |a - b| / max(|a|, |b|, floor); the floor keeps near-zero derivative
/// pairs from blowing up the ratio.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_matches_known_derivative_of_a_cubic() {
        let x = Tensor::from_vec(vec![2.0]);
        let d = Tensor::from_vec(vec![1.0]);
        let fd = fd_directional(|v| Ok(v[0].data()[0].powi(3)), &[x], &[d], 1e-5).unwrap();
        assert!(relative_error(fd, 12.0) < 1e-9);
    }

    #[test]
    fn relative_error_floors_near_zero() {
        assert!(relative_error(0.0, 0.0) == 0.0);
        assert!(relative_error(1e-12, -1e-12) < 1e-3);
    }
}
