//! Low-rank plus diagonal parameterization of the latent transition matrix:
//! G2 = U diag(softplus(s_raw)) V^T + diag(delta), with U, V produced by
//! QR-orthogonalizing unconstrained d_z x r matrices. Parameter count is
//! d_z (2r + 1) + r instead of d_z^2.

use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::nn::layers::{BoundParams, ParamSet};
use crate::nn::tape::{softplus_inverse, softplus_scalar, Var};
use crate::nn::tensor::{matmul, qr_thin, transpose, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct LowRankTransition {
    pub d_z: usize,
    pub r: usize,
}

impl LowRankTransition {
    pub fn new(d_z: usize, r: usize) -> Self {
        assert!(r >= 1 && r <= d_z, "rank {r} out of 1..={d_z}");
        LowRankTransition { d_z, r }
    }

    pub fn param_count(&self) -> usize {
        self.d_z * (2 * self.r + 1) + self.r
    }

    /// Register `{prefix}.u_raw`, `{prefix}.v_raw`, `{prefix}.s_raw`,
    /// `{prefix}.delta`. Raw factors start as i.i.d. normals, singular
    /// values at softplus(s_raw) = 0.9, diagonal correction at 0.01.
    pub fn init(&self, params: &mut ParamSet, prefix: &str, rng: &mut ChaCha12Rng) {
        let norm =
            |n: usize, rng: &mut ChaCha12Rng| -> Vec<f64> {
                (0..n)
                    .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
                    .collect()
            };
        params.insert(
            &format!("{prefix}.u_raw"),
            Tensor::new(&[self.d_z, self.r], norm(self.d_z * self.r, rng)).unwrap(),
        );
        params.insert(
            &format!("{prefix}.v_raw"),
            Tensor::new(&[self.d_z, self.r], norm(self.d_z * self.r, rng)).unwrap(),
        );
        params.insert(
            &format!("{prefix}.s_raw"),
            Tensor::full(&[self.r], softplus_inverse(0.9)),
        );
        params.insert(&format!("{prefix}.delta"), Tensor::full(&[self.d_z], 0.01));
    }

    /// Assemble G2 on a tape (differentiable through QR and softplus).
    pub fn assemble_var<'t>(&self, p: &BoundParams<'t>, prefix: &str) -> Result<Var<'t>> {
        let u = p.var(&format!("{prefix}.u_raw")).qr_q()?;
        let v = p.var(&format!("{prefix}.v_raw")).qr_q()?;
        let s = p.var(&format!("{prefix}.s_raw")).softplus();
        let core = u.matmul(s.diag_embed()).matmul(v.transpose());
        Ok(core.add(p.var(&format!("{prefix}.delta")).diag_embed()))
    }

    /// Assemble G2 from plain tensors (inference path, no tape).
    pub fn assemble(&self, params: &ParamSet, prefix: &str) -> Result<Tensor> {
        let (qu, _) = qr_thin(params.get(&format!("{prefix}.u_raw"))?)?;
        let (qv, _) = qr_thin(params.get(&format!("{prefix}.v_raw"))?)?;
        let s = params.get(&format!("{prefix}.s_raw"))?.map(softplus_scalar);
        let delta = params.get(&format!("{prefix}.delta"))?;
        let mut scaled = qu.clone();
        for i in 0..self.d_z {
            for j in 0..self.r {
                scaled.data_mut()[i * self.r + j] *= s.data()[j];
            }
        }
        let mut g2 = matmul(&scaled, &transpose(&qv));
        for i in 0..self.d_z {
            g2.data_mut()[i * self.d_z + i] += delta.data()[i];
        }
        Ok(g2)
    }

    /// Max-abs residual of U^T U - I and V^T V - I after assembly.
    pub fn orthonormality_residual(&self, params: &ParamSet, prefix: &str) -> Result<f64> {
        let mut worst = 0.0f64;
        for name in ["u_raw", "v_raw"] {
            let (q, _) = qr_thin(params.get(&format!("{prefix}.{name}"))?)?;
            let gram = matmul(&transpose(&q), &q);
            for i in 0..self.r {
                for j in 0..self.r {
                    let expect = if i == j { 1.0 } else { 0.0 };
                    worst = worst.max((gram.at2(i, j) - expect).abs());
                }
            }
        }
        Ok(worst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::check::{fd_directional, relative_error};
    use crate::nn::tape::Tape;
    use crate::rng::stream_rng;
    use nalgebra::DMatrix;
    use rand::Rng;

    fn setup(d_z: usize, r: usize, seed: u64) -> (LowRankTransition, ParamSet) {
        let lr = LowRankTransition::new(d_z, r);
        let mut params = ParamSet::new();
        let mut rng = stream_rng(seed, &[0x1f]);
        lr.init(&mut params, "g2", &mut rng);
        (lr, params)
    }

    #[test]
    fn vanishing_singular_values_and_delta_give_zero() {
        let (lr, mut params) = setup(6, 3, 1);
        params.set("g2.s_raw", Tensor::full(&[3], -40.0));
        params.set("g2.delta", Tensor::zeros(&[6]));
        let g2 = lr.assemble(&params, "g2").unwrap();
        assert!(g2.max_abs() < 1e-15);
    }

    #[test]
    fn identity_factors_with_unit_scales_give_identity() {
        let (lr, mut params) = setup(4, 4, 2);
        params.set("g2.u_raw", Tensor::eye(4));
        params.set("g2.v_raw", Tensor::eye(4));
        params.set("g2.s_raw", Tensor::full(&[4], softplus_inverse(1.0)));
        params.set("g2.delta", Tensor::zeros(&[4]));
        let g2 = lr.assemble(&params, "g2").unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((g2.at2(i, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn assembled_core_has_rank_at_most_r() {
        let (lr, params) = setup(8, 3, 3);
        let g2 = lr.assemble(&params, "g2").unwrap();
        let delta = params.get("g2.delta").unwrap();
        let mut core = g2.clone();
        for i in 0..8 {
            core.data_mut()[i * 8 + i] -= delta.data()[i];
        }
        let m = DMatrix::from_row_slice(8, 8, core.data());
        let svd = m.svd(false, false);
        let mut sv: Vec<f64> = svd.singular_values.iter().cloned().collect();
        sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
        for (i, s) in sv.iter().enumerate() {
            if i >= 3 {
                assert!(*s < 1e-12, "singular value {i} = {s}");
            } else {
                assert!(*s > 0.0);
            }
        }
        assert!(lr.orthonormality_residual(&params, "g2").unwrap() < 1e-6);
    }

    #[test]
    fn parameter_count_formula() {
        let (lr, params) = setup(16, 4, 4);
        assert_eq!(lr.param_count(), 16 * 9 + 4);
        assert_eq!(params.value_count_under("g2."), lr.param_count());
        // strictly cheaper than dense for r < (d_z - 1) / 2
        assert!(lr.param_count() < 16 * 16);
    }

    #[test]
    fn tape_and_plain_assembly_agree() {
        let (lr, params) = setup(7, 2, 5);
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let on_tape = lr.assemble_var(&bound, "g2").unwrap().value();
        let plain = lr.assemble(&params, "g2").unwrap();
        assert_eq!(on_tape, plain);
    }

    #[test]
    fn assembly_gradient_matches_finite_differences() {
        let (lr, params) = setup(5, 2, 6);
        let names: Vec<String> = params.names().cloned().collect();
        let probe = Tensor::new(&[5, 5], (0..25).map(|i| ((i * 7 % 13) as f64 - 6.0) * 0.1).collect()).unwrap();

        let run = |ps: &ParamSet| -> f64 {
            let tape = Tape::new();
            let bound = ps.bind(&tape);
            let g2 = lr.assemble_var(&bound, "g2").unwrap();
            g2.mul(tape.leaf(probe.clone())).sum_all().item()
        };

        let tape = Tape::new();
        let bound = params.bind(&tape);
        let g2 = lr.assemble_var(&bound, "g2").unwrap();
        let loss = g2.mul(tape.leaf(probe.clone())).sum_all();
        let grads = bound.gradients(&tape.backward(loss));

        let mut rng = stream_rng(7, &[0x20]);
        for _ in 0..5 {
            let dirs: Vec<Tensor> = names
                .iter()
                .map(|n| {
                    let t = params.get(n).unwrap();
                    let mut d = Tensor::zeros(t.shape());
                    for v in d.data_mut() {
                        *v = rng.random_range(-1.0..1.0);
                    }
                    d
                })
                .collect();
            let analytic: f64 = names
                .iter()
                .zip(&dirs)
                .map(|(n, d)| grads[n].data().iter().zip(d.data()).map(|(g, dv)| g * dv).sum::<f64>())
                .sum();
            let inputs: Vec<Tensor> = names.iter().map(|n| params.get(n).unwrap().clone()).collect();
            let numeric = fd_directional(
                |perturbed| {
                    let mut ps = params.clone();
                    for (n, t) in names.iter().zip(perturbed) {
                        ps.set(n, t.clone());
                    }
                    Ok(run(&ps))
                },
                &inputs,
                &dirs,
                1e-5,
            )
            .unwrap();
            assert!(
                relative_error(analytic, numeric) < 1e-4,
                "analytic {analytic} vs fd {numeric}"
            );
        }
    }
}
