//! A constructed system that is conditionally Gaussian by design: tracer
//! embeddings drift around the circle driven by a hidden linear latent
//! state, and fields are a known linear decode of that state. Because the
//! true coefficients are available in closed form, a filter with full
//! knowledge provides a reference posterior that learned models can be
//! measured against.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::cg::{run_filter, CGCoefficients, LatentPosterior};
use crate::dataset::Record;
use crate::error::Result;
use crate::model::batch::tensor_to_fields;
use crate::nn::encode::{angular_embed_flat, angular_unembed, renormalize_embedding};
use crate::nn::tensor::Tensor;
use crate::rng::stream_rng;

const SYN_TAG: u64 = 0x53_594E;

/// Known generating system: each tracer's angles advance by a linear
/// read-out of the hidden latent state. In embedding coordinates that makes
/// the observation matrix tangential to the circle at the current position,
/// so the coefficients are a nonlinear function of the observation while
/// the latent side stays constant, and projecting the next embedding back
/// to the circle only discards directions the filter never reads.
pub struct SyntheticSystem {
    pub grid: usize,
    pub tracers: usize,
    /// Latent read-out per angle slot, [2 * tracers, d_z].
    pub w: DMatrix<f64>,
    pub f2: DVector<f64>,
    pub g2: DMatrix<f64>,
    pub decoder: DMatrix<f64>,
    pub decoder_bias: DVector<f64>,
    pub sigma1: f64,
    pub sigma2: f64,
}

pub struct SyntheticTrack {
    pub fields: Vec<Tensor>,
    pub positions: Vec<Vec<[f64; 2]>>,
    pub latents: Vec<DVector<f64>>,
}

impl SyntheticSystem {
    /// Build a stable random instance: the latent transition is a rotation
    /// scaled to spectral radius 0.9 and the observation read-out is small
    /// enough that embeddings stay near the unit circle. The read-out row is
    /// shared across tracers per angle slot, so every tracer observes the
    /// latent state the same way and swapping tracers only permutes blocks.
    pub fn build(grid: usize, tracers: usize, d_z: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, &[SYN_TAG, 0]);
        let mut normal = |n: usize, m: usize, scale: f64| {
            DMatrix::from_fn(n, m, |_, _| {
                let v: f64 = rng.sample(StandardNormal);
                v * scale
            })
        };
        let w_slot = normal(2, d_z, 0.15 / (d_z as f64).sqrt());
        let w = DMatrix::from_fn(2 * tracers, d_z, |r, c| w_slot[(r % 2, c)]);
        let g2_raw = normal(d_z, d_z, 1.0);
        let g2 = g2_raw.qr().q() * 0.9;
        let f2 = normal(d_z, 1, 0.01).column(0).into_owned();
        let d_u2 = 2 * grid * grid;
        let decoder = normal(d_u2, d_z, 1.0 / (d_z as f64).sqrt());
        let decoder_bias = normal(d_u2, 1, 0.05).column(0).into_owned();
        SyntheticSystem {
            grid,
            tracers,
            w,
            f2,
            g2,
            decoder,
            decoder_bias,
            sigma1: 0.02,
            sigma2: 0.2,
        }
    }

    pub fn d_z(&self) -> usize {
        self.g2.nrows()
    }

    /// True filter coefficients at one observation. The observation matrix
    /// pushes each embedding pair along its tangent direction, scaled by the
    /// fixed latent read-out for that angle slot.
    pub fn coefficients(&self, positions: &[[f64; 2]]) -> CGCoefficients {
        let d_z = self.d_z();
        let d_obs = 4 * positions.len();
        let mut g1 = DMatrix::zeros(d_obs, d_z);
        for (i, p) in positions.iter().enumerate() {
            for (slot, angle) in p.iter().enumerate() {
                let (sin, cos) = angle.sin_cos();
                for c in 0..d_z {
                    let w = self.w[(2 * i + slot, c)];
                    g1[(4 * i + 2 * slot, c)] = -sin * w;
                    g1[(4 * i + 2 * slot + 1, c)] = cos * w;
                }
            }
        }
        CGCoefficients {
            f1: DVector::from_vec(angular_embed_flat(positions)),
            g1,
            f2: self.f2.clone(),
            g2: self.g2.clone(),
            sigma1: DVector::from_element(d_obs, self.sigma1),
            sigma2: DVector::from_element(self.d_z(), self.sigma2),
        }
    }

    pub fn decode(&self, z: &DVector<f64>) -> Tensor {
        let flat = &self.decoder * z + &self.decoder_bias;
        Tensor::new(&[1, self.grid, self.grid, 2], flat.as_slice().to_vec()).unwrap()
    }

    /// Generate a trajectory from zero latent state and seeded uniform
    /// starting positions. All noise comes from per-record keyed streams so
    /// regenerating any record is reproducible.
    pub fn generate(&self, records: usize, seed: u64) -> Result<SyntheticTrack> {
        assert!(records >= 1);
        let d_z = self.d_z();
        let mut start_rng = stream_rng(seed, &[SYN_TAG, 1]);
        let positions0: Vec<[f64; 2]> = (0..self.tracers)
            .map(|_| {
                [
                    start_rng.random_range(0.0..std::f64::consts::TAU),
                    start_rng.random_range(0.0..std::f64::consts::TAU),
                ]
            })
            .collect();

        let mut z = DVector::zeros(d_z);
        let mut positions = positions0;
        let mut track = SyntheticTrack {
            fields: vec![self.decode(&z)],
            positions: vec![positions.clone()],
            latents: vec![z.clone()],
        };
        for n in 0..records - 1 {
            let mut rng = stream_rng(seed, &[SYN_TAG, 2, n as u64]);
            let coeffs = self.coefficients(&positions);
            let mut emb = (&coeffs.f1 + &coeffs.g1 * &z).as_slice().to_vec();
            for v in &mut emb {
                let noise: f64 = rng.sample(StandardNormal);
                *v += self.sigma1 * noise;
            }
            renormalize_embedding(&mut emb);
            let mut next = Vec::with_capacity(self.tracers);
            for block in emb.chunks_exact(4) {
                let (x, y) = angular_unembed(&[block[0], block[1], block[2], block[3]])?;
                next.push([x, y]);
            }
            let noise_z = DVector::from_fn(d_z, |_, _| {
                let v: f64 = rng.sample(StandardNormal);
                v * self.sigma2
            });
            z = &self.f2 + &self.g2 * &z + noise_z;
            positions = next;
            track.fields.push(self.decode(&z));
            track.positions.push(positions.clone());
            track.latents.push(z.clone());
        }
        Ok(track)
    }

    /// Reference posterior from the filter that knows the true system.
    pub fn oracle_filter(&self, positions: &[Vec<[f64; 2]>]) -> Result<Vec<LatentPosterior>> {
        let obs: Vec<DVector<f64>> = positions
            .iter()
            .map(|p| DVector::from_vec(angular_embed_flat(p)))
            .collect();
        run_filter(
            |n, _| Ok(self.coefficients(&positions[n])),
            &obs,
            LatentPosterior::spherical(self.d_z(), 0.1),
        )
    }
}

pub fn track_to_records(track: &SyntheticTrack) -> Vec<Record> {
    track
        .fields
        .iter()
        .zip(&track.positions)
        .map(|(f, p)| Record { psi: tensor_to_fields(f), positions: p.clone() })
        .collect()
}
