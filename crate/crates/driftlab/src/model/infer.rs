//! Inference on a trained surrogate: filtering tracer observations into
//! decoded flow fields, and rolling the learned dynamics forward without
//! observations.

use nalgebra::DVector;

use crate::cg::{run_filter, CGCoefficients, LatentPosterior};
use crate::error::{Error, Result};
use crate::model::surrogate::Surrogate;
use crate::nn::encode::{angular_embed_flat, angular_unembed, renormalize_embedding};
use crate::nn::tensor::Tensor;

pub struct AssimilationOutput {
    /// Latent posterior per record; the first entry is the prior.
    pub posteriors: Vec<LatentPosterior>,
    /// Decoded posterior mean fields, [1, H, W, 2] per record.
    pub fields: Vec<Tensor>,
    /// Per-layer posterior spread from the uncertainty head, per record.
    pub predicted_std: Vec<[f64; 2]>,
}

/// Filter a sequence of tracer position sets into flow field estimates.
///
/// `tracer_ids` ties each column of the position sets to a tracer from the
/// calibration split so its per-coordinate observation noise travels with
/// it under reordering; without ids the calibrated table is used in listed
/// order (exact at the training count, pooled otherwise).
pub fn assimilate(
    s: &Surrogate,
    positions: &[Vec<[f64; 2]>],
    tracer_ids: Option<&[usize]>,
    init: Option<LatentPosterior>,
) -> Result<AssimilationOutput> {
    if positions.is_empty() {
        return Err(Error::Config("no observations to assimilate".into()));
    }
    let i = positions[0].len();
    if positions.iter().any(|p| p.len() != i) {
        return Err(Error::Config("tracer count changes across records".into()));
    }
    if let Some(ids) = tracer_ids {
        if ids.len() != i {
            return Err(Error::Config(format!(
                "{} tracer ids for {i} tracked tracers",
                ids.len()
            )));
        }
    }
    let sigma1_override = match tracer_ids {
        Some(ids) => Some(DVector::from_vec(s.sigma1_for_ids(ids)?)),
        None => None,
    };

    let obs: Vec<DVector<f64>> = positions
        .iter()
        .map(|p| DVector::from_vec(angular_embed_flat(p)))
        .collect();
    let init = init.unwrap_or_else(|| LatentPosterior::spherical(s.d_z(), 0.1));
    let coeffs_at = |n: usize, _obs: &DVector<f64>| -> Result<CGCoefficients> {
        let mut c = s.eval_coefficients(&positions[n])?;
        if let Some(sig) = &sigma1_override {
            c.sigma1 = sig.clone();
        }
        Ok(c)
    };
    let posteriors = run_filter(coeffs_at, &obs, init)?;

    let fields: Vec<Tensor> = posteriors.iter().map(|p| s.decode_value(p.mu.as_slice())).collect();
    let predicted_std: Vec<[f64; 2]> =
        positions.iter().map(|p| s.uncertainty_value(p)).collect();
    Ok(AssimilationOutput { posteriors, fields, predicted_std })
}

pub struct ForecastStep {
    pub positions: Vec<[f64; 2]>,
    pub fields: Tensor,
    pub z: Vec<f64>,
}

/// Roll the learned dynamics forward from a latent state and tracer
/// positions, with no observations and no noise. Tracer embeddings are
/// projected back to the circle before decoding positions.
pub fn forecast(
    s: &Surrogate,
    start_positions: &[[f64; 2]],
    z0: &[f64],
    horizon: usize,
) -> Result<Vec<ForecastStep>> {
    if z0.len() != s.d_z() {
        return Err(Error::Config(format!(
            "latent start has {} entries, model expects {}",
            z0.len(),
            s.d_z()
        )));
    }
    let mut z = DVector::from_vec(z0.to_vec());
    let mut positions = start_positions.to_vec();
    let mut out = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let c = s.eval_coefficients(&positions)?;
        let mut u1 = (&c.f1 + &c.g1 * &z).as_slice().to_vec();
        renormalize_embedding(&mut u1);
        let mut next_positions = Vec::with_capacity(positions.len());
        for block in u1.chunks_exact(4) {
            let e = [block[0], block[1], block[2], block[3]];
            next_positions.push({
                let (x, y) = angular_unembed(&e)?;
                [x, y]
            });
        }
        z = &c.f2 + &c.g2 * &z;
        let fields = s.decode_value(z.as_slice());
        positions = next_positions;
        out.push(ForecastStep { positions: positions.clone(), fields, z: z.as_slice().to_vec() });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::SurrogateConfig;
    use crate::model::loss::filter_step_var;
    use crate::nn::encode::fourier_encode_rows;
    use crate::nn::tape::Tape;
    use crate::rng::stream_rng;
    use rand::Rng;
    use std::f64::consts::TAU;

    fn small_calibrated(seed: u64) -> Surrogate {
        let cfg = SurrogateConfig {
            z_h: 2,
            z_w: 2,
            n_c: 2,
            hidden: 8,
            rank: 2,
            k_freq: 2,
            uncertainty_hidden: 4,
            seed,
            ..SurrogateConfig::default()
        };
        let mut s = Surrogate::init(cfg, 4, 3).unwrap();
        let mut noise_rng = stream_rng(seed, &[0x99]);
        let full: Vec<f64> = (0..12).map(|_| noise_rng.random_range(0.05..0.3)).collect();
        let mut pooled = vec![0.0; 4];
        for (j, v) in full.iter().enumerate() {
            pooled[j % 4] += v * v / 3.0;
        }
        s.params.insert("const.sigma1_full", Tensor::from_vec(full));
        s.params.insert(
            "const.sigma1_pooled",
            Tensor::from_vec(pooled.iter().map(|v| v.sqrt()).collect()),
        );
        s
    }

    fn random_track(records: usize, tracers: usize, seed: u64) -> Vec<Vec<[f64; 2]>> {
        let mut rng = stream_rng(seed, &[0x7123]);
        (0..records)
            .map(|_| {
                (0..tracers)
                    .map(|_| [rng.random_range(0.0..TAU), rng.random_range(0.0..TAU)])
                    .collect()
            })
            .collect()
    }

    #[test]
    fn assimilation_produces_one_estimate_per_record() {
        let s = small_calibrated(41);
        let track = random_track(6, 3, 42);
        let out = assimilate(&s, &track, None, None).unwrap();
        assert_eq!(out.posteriors.len(), 6);
        assert_eq!(out.fields.len(), 6);
        assert_eq!(out.predicted_std.len(), 6);
        assert!(out.fields.iter().all(Tensor::all_finite));
        assert!(out.predicted_std.iter().all(|s| s[0] >= 0.0 && s[1] >= 0.0));
    }

    #[test]
    fn reordering_tracers_with_their_ids_leaves_the_posterior_unchanged() {
        let s = small_calibrated(43);
        let track = random_track(5, 3, 44);
        let perm = [2usize, 0, 1];
        let permuted: Vec<Vec<[f64; 2]>> = track
            .iter()
            .map(|ps| perm.iter().map(|&j| ps[j]).collect())
            .collect();
        let a = assimilate(&s, &track, Some(&[0, 1, 2]), None).unwrap();
        let b = assimilate(&s, &permuted, Some(&perm), None).unwrap();
        for (pa, pb) in a.posteriors.iter().zip(&b.posteriors) {
            assert!((pa.mu.clone() - pb.mu.clone()).amax() < 1e-10);
            assert!((pa.cov.clone() - pb.cov.clone()).amax() < 1e-10);
        }
    }

    #[test]
    fn plain_assimilation_matches_the_training_recursion() {
        let s = small_calibrated(45);
        let track = random_track(5, 3, 46);
        let plain = assimilate(&s, &track, None, None).unwrap();

        let d_z = s.d_z();
        let tape = Tape::new();
        let bound = s.params.bind(&tape);
        let sigma1 = s.sigma1_for(3).unwrap();
        let sigma1_sq = tape.leaf(Tensor::from_vec(sigma1.iter().map(|v| v * v).collect()));
        let sigma2_sq =
            tape.leaf(Tensor::from_vec(s.sigma2_vec().iter().map(|v| v * v).collect()));
        let (f2, g2) = s.transition_var(&bound).unwrap();
        let mut mu = tape.leaf(Tensor::zeros(&[d_z, 1]));
        let mut cov = tape.leaf({
            let mut t = Tensor::eye(d_z);
            t.scale_in_place(0.01);
            t
        });
        for n in 0..track.len() - 1 {
            let feats = tape.leaf(fourier_encode_rows(&track[n], s.cfg.k_freq));
            let (f1, g1) = s.coefficients_var(&bound, feats);
            let obs_next =
                tape.leaf(Tensor::new(&[12, 1], angular_embed_flat(&track[n + 1])).unwrap());
            let (m2, c2) =
                filter_step_var(mu, cov, f1, g1, f2, g2, sigma1_sq, sigma2_sq, obs_next).unwrap();
            mu = m2;
            cov = c2;
            let post = &plain.posteriors[n + 1];
            let mu_val = mu.value();
            for k in 0..d_z {
                assert!((mu_val.data()[k] - post.mu[k]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn forecast_advances_positions_on_the_torus() {
        let s = small_calibrated(47);
        let start = [[1.0, 2.0], [3.0, 4.0], [5.0, 0.5]];
        let z0 = vec![0.05; s.d_z()];
        let steps = forecast(&s, &start, &z0, 4).unwrap();
        assert_eq!(steps.len(), 4);
        for st in &steps {
            assert_eq!(st.positions.len(), 3);
            for p in &st.positions {
                assert!((0.0..TAU).contains(&p[0]) && (0.0..TAU).contains(&p[1]));
            }
            assert!(st.fields.all_finite());
            assert_eq!(st.z.len(), s.d_z());
        }
    }

    #[test]
    fn empty_observation_set_is_rejected() {
        let s = small_calibrated(48);
        assert!(matches!(assimilate(&s, &[], None, None), Err(Error::Config(_))));
    }
}
