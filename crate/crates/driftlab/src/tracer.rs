//! Passive drifters riding the flow.
//!
//! Positions live on the periodic square `[0, 2pi)^2` and advance by
//! Euler-Maruyama: `x <- wrap(x + v(x) dt + sigma sqrt(dt) xi)`. Each tracer
//! carries a stable id, and its noise stream is keyed by (seed, id, step), so
//! permuting the tracer order and stepping commutes bit-exactly with stepping
//! and then permuting.

use crate::error::{Error, Result};
use crate::fft::wavenumbers;
use crate::qg::{stream_tag, FlowSnapshot};
use crate::rng::stream_rng;
use ndarray::Array2;
use num_complex::Complex64;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

pub fn wrap(x: f64) -> f64 {
    let w = x.rem_euclid(TWO_PI);
    // rem_euclid can return the modulus itself when x is a tiny negative.
    if w >= TWO_PI { 0.0 } else { w }
}

/// Difference a - b taken along the shortest way around the circle,
/// in (-pi, pi].
pub fn minimal_image(a: f64, b: f64) -> f64 {
    let mut d = (a - b).rem_euclid(TWO_PI);
    if d > std::f64::consts::PI {
        d -= TWO_PI;
    }
    d
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    Bilinear,
    SpectralDirect,
}

impl Default for Interpolation {
    fn default() -> Self {
        Interpolation::Bilinear
    }
}

#[derive(Clone, Debug)]
pub struct TracerSet {
    pub positions: Vec<[f64; 2]>,
    /// Stable identities; noise attaches to the id, not the slot.
    pub ids: Vec<u32>,
    /// Transport noise std sigma in x <- x + v dt + sigma sqrt(dt) xi.
    pub sigma: f64,
    pub seed: u64,
}

impl TracerSet {
    /// Cluster of tracers around the domain center, x_i ~ N(pi, init_std^2)
    /// per coordinate, wrapped.
    pub fn init_gaussian(count: usize, init_std: f64, sigma: f64, seed: u64) -> Self {
        let mut positions = Vec::with_capacity(count);
        for i in 0..count {
            let mut rng = stream_rng(seed, &[stream_tag::TRACER_INIT, i as u64]);
            let mut draw = || <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
            let x = wrap(std::f64::consts::PI + init_std * draw());
            let y = wrap(std::f64::consts::PI + init_std * draw());
            positions.push([x, y]);
        }
        TracerSet { positions, ids: (0..count as u32).collect(), sigma, seed }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Reorder tracers; identities (and therefore noise streams) travel with
    /// their tracer.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.len());
        TracerSet {
            positions: perm.iter().map(|&i| self.positions[i]).collect(),
            ids: perm.iter().map(|&i| self.ids[i]).collect(),
            sigma: self.sigma,
            seed: self.seed,
        }
    }
}

/// Periodic bilinear interpolation of a grid field at one point.
pub fn bilinear(grid: &Array2<f64>, x: f64, y: f64) -> f64 {
    let n = grid.nrows();
    let dx = TWO_PI / n as f64;
    let fx = wrap(x) / dx;
    let fy = wrap(y) / dx;
    let ix0 = fx.floor() as usize % n;
    let iy0 = fy.floor() as usize % n;
    let tx = fx - fx.floor();
    let ty = fy - fy.floor();
    let ix1 = (ix0 + 1) % n;
    let iy1 = (iy0 + 1) % n;
    (1.0 - tx) * (1.0 - ty) * grid[[iy0, ix0]]
        + tx * (1.0 - ty) * grid[[iy0, ix1]]
        + (1.0 - tx) * ty * grid[[iy1, ix0]]
        + tx * ty * grid[[iy1, ix1]]
}

/// Evaluate the spectral sum (1/n^2) sum_k f_hat_k exp(i k . x) at one point.
fn spectral_point(f_hat: &Array2<Complex64>, x: f64, y: f64) -> f64 {
    let n = f_hat.nrows();
    let k = wavenumbers(n);
    let ex: Vec<Complex64> = k.iter().map(|&kx| Complex64::new(0.0, kx * x).exp()).collect();
    let ey: Vec<Complex64> = k.iter().map(|&ky| Complex64::new(0.0, ky * y).exp()).collect();
    let mut acc = Complex64::new(0.0, 0.0);
    for iy in 0..n {
        let mut row = Complex64::new(0.0, 0.0);
        for ix in 0..n {
            row += f_hat[[iy, ix]] * ex[ix];
        }
        acc += row * ey[iy];
    }
    acc.re / (n * n) as f64
}

/// Flow velocity at arbitrary points, in the given layer (0 = upper).
pub fn velocity_at(
    flow: &FlowSnapshot,
    positions: &[[f64; 2]],
    layer: usize,
    method: Interpolation,
) -> Result<Vec<[f64; 2]>> {
    if layer > 1 {
        return Err(Error::Config(format!("layer {layer} out of range, flow has 2 layers")));
    }
    match method {
        Interpolation::Bilinear => Ok(positions
            .iter()
            .map(|&[x, y]| [bilinear(&flow.vx[layer], x, y), bilinear(&flow.vy[layer], x, y)])
            .collect()),
        Interpolation::SpectralDirect => {
            let n = flow.n;
            let k = wavenumbers(n);
            let nyq = n / 2;
            let psi = &flow.psi_hat[layer];
            let mut vx_hat = Array2::zeros((n, n));
            let mut vy_hat = Array2::zeros((n, n));
            for iy in 0..n {
                for ix in 0..n {
                    let ikx = if ix == nyq { 0.0 } else { k[ix] };
                    let iky = if iy == nyq { 0.0 } else { k[iy] };
                    vx_hat[[iy, ix]] = psi[[iy, ix]] * Complex64::new(0.0, iky);
                    vy_hat[[iy, ix]] = psi[[iy, ix]] * Complex64::new(0.0, -ikx);
                }
            }
            Ok(positions
                .iter()
                .map(|&[x, y]| [spectral_point(&vx_hat, x, y), spectral_point(&vy_hat, x, y)])
                .collect())
        }
    }
}

/// One Euler-Maruyama step for every tracer. `step_index` keys the noise.
pub fn tracer_step(
    tracers: &mut TracerSet,
    flow: &FlowSnapshot,
    dt: f64,
    step_index: u64,
    layer: usize,
    method: Interpolation,
) -> Result<()> {
    let vel = velocity_at(flow, &tracers.positions, layer, method)?;
    let noise_amp = tracers.sigma * dt.sqrt();
    for (i, pos) in tracers.positions.iter_mut().enumerate() {
        let id = tracers.ids[i] as u64;
        let mut rng = stream_rng(tracers.seed, &[stream_tag::TRACER_STEP, id, step_index]);
        let mut draw = || <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
        let nx = noise_amp * draw();
        let ny = noise_amp * draw();
        pos[0] = wrap(pos[0] + vel[i][0] * dt + nx);
        pos[1] = wrap(pos[1] + vel[i][1] * dt + ny);
        if !pos[0].is_finite() || !pos[1].is_finite() {
            return Err(Error::Numerics(format!(
                "tracer {id} left the reals at step {step_index}"
            )));
        }
    }
    Ok(())
}

/// Noisy wrapped positions as observed at one record index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationRecord {
    pub time_index: u64,
    pub positions: Vec<[f64; 2]>,
}

pub fn observe(tracers: &TracerSet, noise_std: f64, time_index: u64, obs_seed: u64) -> ObservationRecord {
    let positions = tracers
        .positions
        .iter()
        .zip(&tracers.ids)
        .map(|(&[x, y], &id)| {
            let mut rng = stream_rng(obs_seed, &[stream_tag::TRACER_OBS, time_index, id as u64]);
            let mut draw = || <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
            [wrap(x + noise_std * draw()), wrap(y + noise_std * draw())]
        })
        .collect();
    ObservationRecord { time_index, positions }
}
