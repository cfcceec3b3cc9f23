//! Two-layer quasi-geostrophic flow on the doubly periodic square `[0, 2pi)^2`,
//! solved pseudo-spectrally.
//!
//! The prognostic variables are the spectral potential vorticities
//! `(q1_hat, q2_hat)`, where layer 2 includes the static topographic term `h`:
//!
//! ```text
//! q1 = lap(psi1) + (kd^2/2) (psi2 - psi1)
//! q2 = lap(psi2) + (kd^2/2) (psi1 - psi2) + h
//! ```
//!
//! The layers ride on a mean zonal shear `(U, -U)`, feel a beta effect, Ekman
//! drag on the lower layer, and hyperviscosity `nu lap^s` acting on the
//! dynamic part of the PV. Velocities follow `v = (dpsi/dy, -dpsi/dx)`.
//! Time stepping is RK4 with the hyperviscous decay handled by an exact
//! integrating factor `exp(-nu |k|^(2s) dt)`; quadratic terms are dealiased
//! with the 2/3 rule, so every evolved field has no energy above
//! `max(|kx|, |ky|) > floor(n/3)`.

use crate::error::{Error, Result};
use crate::fft::{apply_real_factor, dealias_mask, wavenumbers, Fft2};
use crate::rng::stream_rng;
use ndarray::Array2;
use num_complex::Complex64;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QGParams {
    /// Grid points per side; must be even and at least 8.
    pub n: usize,
    /// Deformation wavenumber, strictly positive.
    pub kd: f64,
    pub beta: f64,
    /// Mean zonal flow magnitude; layer 1 moves at +u_mean, layer 2 at -u_mean.
    pub u_mean: f64,
    /// Ekman drag coefficient on the lower layer.
    pub kappa: f64,
    /// Hyperviscosity coefficient.
    pub nu: f64,
    /// Laplacian power s in the dissipation nu lap^s.
    pub hyper_order: u32,
    /// Solver time step.
    pub dt: f64,
    /// Topography h = topo_cos_x * cos(x) + topo_cos_2y * cos(2y).
    pub topo_cos_x: f64,
    pub topo_cos_2y: f64,
    /// Std of optional additive spectral forcing per unit grid point,
    /// applied each step scaled by sqrt(dt). Zero disables.
    pub forcing_std: f64,
    /// Stream seed for the forcing noise (unused when forcing_std == 0).
    pub forcing_seed: u64,
}

impl Default for QGParams {
    /// Desk-scale regime: 32x32 grid with the reference forcing parameters
    /// and hyperviscosity rescaled so the largest retained wavenumber damps
    /// at the same rate as on the 128x128 reference grid.
    fn default() -> Self {
        QGParams {
            n: 32,
            kd: 10.0,
            beta: 22.0,
            u_mean: 1.0,
            kappa: 9.0,
            nu: hyperviscosity_matching(32, 128, 1e-12, 4),
            hyper_order: 4,
            dt: 2e-3,
            topo_cos_x: 40.0,
            topo_cos_2y: 80.0,
            forcing_std: 0.0,
            forcing_seed: 0,
        }
    }
}

impl QGParams {
    pub fn validate(&self) -> Result<()> {
        if self.n < 8 || self.n % 2 != 0 {
            return Err(Error::Config(format!("grid size n={} must be even and >= 8", self.n)));
        }
        if !(self.kd > 0.0) {
            return Err(Error::Config(format!("kd={} must be strictly positive", self.kd)));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Config(format!("dt={} must be strictly positive", self.dt)));
        }
        if self.nu < 0.0 || self.kappa < 0.0 {
            return Err(Error::Config("nu and kappa must be nonnegative".into()));
        }
        if self.hyper_order == 0 {
            return Err(Error::Config("hyper_order must be at least 1".into()));
        }
        if self.forcing_std < 0.0 {
            return Err(Error::Config("forcing_std must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Hyperviscosity that damps the largest retained mode of an `n` grid at the
/// same rate as `reference_nu` damps the largest retained mode of a
/// `reference_n` grid, for dissipation of order `s`.
pub fn hyperviscosity_matching(n: usize, reference_n: usize, reference_nu: f64, s: u32) -> f64 {
    let k2max = |m: usize| {
        let kmax = (m / 3) as f64;
        2.0 * kmax * kmax
    };
    reference_nu * (k2max(reference_n) / k2max(n)).powi(s as i32)
}

#[derive(Clone, Debug)]
pub struct QGState {
    /// Spectral PV per layer; layer 2 includes the topography spectrum.
    pub q_hat: [Array2<Complex64>; 2],
    pub time: f64,
    pub step_index: u64,
}

/// Grid-space view of one instant of the flow.
#[derive(Clone, Debug)]
pub struct FlowSnapshot {
    pub n: usize,
    pub psi: [Array2<f64>; 2],
    /// x-velocity dpsi/dy per layer.
    pub vx: [Array2<f64>; 2],
    /// y-velocity -dpsi/dx per layer.
    pub vy: [Array2<f64>; 2],
    /// Spectral stream functions, kept for off-grid velocity evaluation.
    pub psi_hat: [Array2<Complex64>; 2],
}

#[derive(Clone, Copy, Debug)]
pub struct Diagnostics {
    /// Domain-mean kinetic energy per layer, 0.5 <|v|^2>.
    pub kinetic: [f64; 2],
    /// Available potential energy (kd^2/4) <(psi1 - psi2)^2>.
    pub potential: f64,
    /// Domain-mean enstrophy per layer, 0.5 <q^2>.
    pub enstrophy: [f64; 2],
}

pub struct QGSolver {
    params: QGParams,
    fft: Fft2,
    /// ikx and iky derivative multipliers with the Nyquist mode zeroed.
    ikx: Array2<Complex64>,
    iky: Array2<Complex64>,
    k2: Array2<f64>,
    dealias: Array2<f64>,
    /// Integrating factors exp(-nu |k|^(2s) dt) for a full and half step.
    ifac_full: Array2<f64>,
    ifac_half: Array2<f64>,
    h_hat: Array2<Complex64>,
}

impl QGSolver {
    pub fn new(params: QGParams) -> Result<Self> {
        params.validate()?;
        let n = params.n;
        let fft = Fft2::new(n);
        let k = wavenumbers(n);
        let nyq = n / 2;
        let ikx = Array2::from_shape_fn((n, n), |(_, ix)| {
            if ix == nyq { Complex64::new(0.0, 0.0) } else { Complex64::new(0.0, k[ix]) }
        });
        let iky = Array2::from_shape_fn((n, n), |(iy, _)| {
            if iy == nyq { Complex64::new(0.0, 0.0) } else { Complex64::new(0.0, k[iy]) }
        });
        let k2 = Array2::from_shape_fn((n, n), |(iy, ix)| k[ix] * k[ix] + k[iy] * k[iy]);
        let dealias = dealias_mask(n);
        let s = params.hyper_order as i32;
        let ifac = |tau: f64| k2.mapv(|kk| (-params.nu * kk.powi(s) * tau).exp());
        let ifac_full = ifac(params.dt);
        let ifac_half = ifac(params.dt / 2.0);

        let dx = 2.0 * std::f64::consts::PI / n as f64;
        let h_grid = Array2::from_shape_fn((n, n), |(iy, ix)| {
            params.topo_cos_x * (ix as f64 * dx).cos() + params.topo_cos_2y * (2.0 * iy as f64 * dx).cos()
        });
        let mut h_hat = fft.forward(&h_grid);
        apply_real_factor(&mut h_hat, &dealias);

        Ok(QGSolver { params, fft, ikx, iky, k2, dealias, ifac_full, ifac_half, h_hat })
    }

    pub fn params(&self) -> &QGParams {
        &self.params
    }

    pub fn fft(&self) -> &Fft2 {
        &self.fft
    }

    pub fn topography_hat(&self) -> &Array2<Complex64> {
        &self.h_hat
    }

    /// White-noise start q1 = q2 ~ N(0, std^2) per grid point, dealiased.
    pub fn random_init(&self, std: f64, seed: u64) -> QGState {
        let n = self.params.n;
        let mut rng = stream_rng(seed, &[stream_tag::QG_INIT]);
        let noise =
            Array2::from_shape_fn((n, n), |_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng));
        let mut q_hat = self.fft.forward(&noise);
        apply_real_factor(&mut q_hat, &self.dealias);
        QGState { q_hat: [q_hat.clone(), q_hat], time: 0.0, step_index: 0 }
    }

    /// Invert the PV relation for the spectral stream functions. The mean
    /// (k = 0) modes carry the gauge psi_hat = 0.
    pub fn psi_hat_from_q_hat(&self, q_hat: &[Array2<Complex64>; 2]) -> [Array2<Complex64>; 2] {
        let n = self.params.n;
        let c = self.params.kd * self.params.kd / 2.0;
        let mut psi1 = Array2::zeros((n, n));
        let mut psi2 = Array2::zeros((n, n));
        for iy in 0..n {
            for ix in 0..n {
                let kk = self.k2[[iy, ix]];
                if kk == 0.0 {
                    continue;
                }
                let det = kk * (kk + 2.0 * c);
                let r1 = q_hat[0][[iy, ix]];
                let r2 = q_hat[1][[iy, ix]] - self.h_hat[[iy, ix]];
                psi1[[iy, ix]] = (-(kk + c) * r1 - c * r2) / det;
                psi2[[iy, ix]] = (-c * r1 - (kk + c) * r2) / det;
            }
        }
        [psi1, psi2]
    }

    /// Forward PV relation, the exact inverse of `psi_hat_from_q_hat` away
    /// from the gauge mode.
    pub fn q_hat_from_psi_hat(&self, psi_hat: &[Array2<Complex64>; 2]) -> [Array2<Complex64>; 2] {
        let c = self.params.kd * self.params.kd / 2.0;
        let q1 = ndarray::Zip::from(&psi_hat[0])
            .and(&psi_hat[1])
            .and(&self.k2)
            .map_collect(|&p1, &p2, &kk| -kk * p1 + c * (p2 - p1));
        let q2 = ndarray::Zip::from(&psi_hat[0])
            .and(&psi_hat[1])
            .and(&self.k2)
            .and(&self.h_hat)
            .map_collect(|&p1, &p2, &kk, &h| -kk * p2 + c * (p1 - p2) + h);
        [q1, q2]
    }

    pub fn spectral_derivative_x(&self, f_hat: &Array2<Complex64>) -> Array2<Complex64> {
        f_hat * &self.ikx
    }

    pub fn spectral_derivative_y(&self, f_hat: &Array2<Complex64>) -> Array2<Complex64> {
        f_hat * &self.iky
    }

    /// Dealiased spectral Jacobian J(a, b) = a_x b_y - a_y b_x via grid
    /// products of spectral derivatives.
    pub fn jacobian_hat(&self, a_hat: &Array2<Complex64>, b_hat: &Array2<Complex64>) -> Array2<Complex64> {
        let ax = self.fft.inverse(&self.spectral_derivative_x(a_hat));
        let ay = self.fft.inverse(&self.spectral_derivative_y(a_hat));
        let bx = self.fft.inverse(&self.spectral_derivative_x(b_hat));
        let by = self.fft.inverse(&self.spectral_derivative_y(b_hat));
        let j = &ax * &by - &ay * &bx;
        let mut j_hat = self.fft.forward(&j);
        apply_real_factor(&mut j_hat, &self.dealias);
        j_hat
    }

    /// Non-dissipative tendency of the full spectral PV.
    fn tendency(&self, q_hat: &[Array2<Complex64>; 2]) -> [Array2<Complex64>; 2] {
        let p = &self.params;
        let c = p.kd * p.kd / 2.0;
        let u_layer = [p.u_mean, -p.u_mean];
        let psi_hat = self.psi_hat_from_q_hat(q_hat);
        let mut out: [Array2<Complex64>; 2] = [
            Array2::zeros(q_hat[0].raw_dim()),
            Array2::zeros(q_hat[1].raw_dim()),
        ];
        for l in 0..2 {
            let other = 1 - l;
            let jac = self.jacobian_hat(&psi_hat[l], &q_hat[l]);
            let n = self.params.n;
            for iy in 0..n {
                for ix in 0..n {
                    let idx = [iy, ix];
                    let ikx = self.ikx[idx];
                    let kk = self.k2[idx];
                    let mut t = -jac[idx];
                    t -= ikx * (p.beta * psi_hat[l][idx]);
                    t -= ikx * (u_layer[l] * (-kk) * psi_hat[l][idx]);
                    t -= ikx * (c * (u_layer[l] * psi_hat[other][idx] - u_layer[other] * psi_hat[l][idx]));
                    if l == 1 {
                        t -= ikx * (u_layer[1] * self.h_hat[idx]);
                        t += p.kappa * kk * psi_hat[1][idx];
                    }
                    out[l][idx] = t;
                }
            }
        }
        out
    }

    /// Advance one RK4 step with the integrating factor applied to the
    /// dynamic PV (the static topography is excluded from hyperviscous decay).
    pub fn step(&self, state: &mut QGState) -> Result<()> {
        let dt = self.params.dt;
        let full = |f: &Array2<Complex64>, layer: usize| -> Array2<Complex64> {
            if layer == 1 { f + &self.h_hat } else { f.clone() }
        };
        let dyn0: [Array2<Complex64>; 2] = [state.q_hat[0].clone(), &state.q_hat[1] - &self.h_hat];

        let n1 = self.tendency(&state.q_hat);

        let mut stage = [Array2::zeros(dyn0[0].raw_dim()), Array2::zeros(dyn0[0].raw_dim())];
        for l in 0..2 {
            let mut a = &dyn0[l] + &(&n1[l] * Complex64::new(dt / 2.0, 0.0));
            apply_real_factor(&mut a, &self.ifac_half);
            stage[l] = full(&a, l);
        }
        let n2 = self.tendency(&stage);

        for l in 0..2 {
            let mut a = dyn0[l].clone();
            apply_real_factor(&mut a, &self.ifac_half);
            stage[l] = full(&(&a + &(&n2[l] * Complex64::new(dt / 2.0, 0.0))), l);
        }
        let n3 = self.tendency(&stage);

        for l in 0..2 {
            let mut a = dyn0[l].clone();
            apply_real_factor(&mut a, &self.ifac_full);
            let mut b = n3[l].clone();
            apply_real_factor(&mut b, &self.ifac_half);
            stage[l] = full(&(&a + &(&b * Complex64::new(dt, 0.0))), l);
        }
        let n4 = self.tendency(&stage);

        for l in 0..2 {
            let mut acc = dyn0[l].clone();
            apply_real_factor(&mut acc, &self.ifac_full);
            let mut t1 = n1[l].clone();
            apply_real_factor(&mut t1, &self.ifac_full);
            let mut t2 = &n2[l] + &n3[l];
            apply_real_factor(&mut t2, &self.ifac_half);
            let sum = &t1 + &(&t2 * Complex64::new(2.0, 0.0)) + &n4[l];
            let mut next = &acc + &(&sum * Complex64::new(dt / 6.0, 0.0));
            if self.params.forcing_std > 0.0 {
                self.add_forcing(&mut next, l, state.step_index);
            }
            state.q_hat[l] = full(&next, l);
        }

        state.time += dt;
        state.step_index += 1;

        let finite = state.q_hat.iter().all(|q| q.iter().all(|v| v.re.is_finite() && v.im.is_finite()));
        if !finite {
            return Err(Error::Numerics(format!(
                "flow solver produced non-finite PV at t = {:.6} (step {})",
                state.time, state.step_index
            )));
        }
        Ok(())
    }

    fn add_forcing(&self, q_dyn: &mut Array2<Complex64>, layer: usize, step_index: u64) {
        let n = self.params.n;
        let amp = self.params.forcing_std * self.params.dt.sqrt();
        let mut rng = stream_rng(self.params.forcing_seed, &[stream_tag::QG_FORCING, layer as u64, step_index]);
        let noise =
            Array2::from_shape_fn((n, n), |_| amp * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng));
        let mut f_hat = self.fft.forward(&noise);
        apply_real_factor(&mut f_hat, &self.dealias);
        *q_dyn += &f_hat;
    }

    pub fn snapshot(&self, state: &QGState) -> FlowSnapshot {
        let psi_hat = self.psi_hat_from_q_hat(&state.q_hat);
        let psi = [self.fft.inverse(&psi_hat[0]), self.fft.inverse(&psi_hat[1])];
        let mut vx: Vec<Array2<f64>> = Vec::with_capacity(2);
        let mut vy: Vec<Array2<f64>> = Vec::with_capacity(2);
        for l in 0..2 {
            vx.push(self.fft.inverse(&self.spectral_derivative_y(&psi_hat[l])));
            vy.push(self.fft.inverse(&(-&self.spectral_derivative_x(&psi_hat[l]))));
        }
        FlowSnapshot {
            n: self.params.n,
            psi,
            vx: [vx.remove(0), vx.remove(0)],
            vy: [vy.remove(0), vy.remove(0)],
            psi_hat,
        }
    }

    /// Energy and enstrophy by grid quadrature.
    pub fn diagnostics(&self, state: &QGState) -> Diagnostics {
        let snap = self.snapshot(state);
        let mean = |a: &Array2<f64>| a.iter().sum::<f64>() / a.len() as f64;
        let kinetic = [0, 1].map(|l| {
            0.5 * mean(&(&snap.vx[l] * &snap.vx[l] + &snap.vy[l] * &snap.vy[l]))
        });
        let dpsi = &snap.psi[0] - &snap.psi[1];
        let potential = self.params.kd * self.params.kd / 4.0 * mean(&(&dpsi * &dpsi));
        let enstrophy = [0, 1].map(|l| {
            let q = self.fft.inverse(&state.q_hat[l]);
            0.5 * mean(&(&q * &q))
        });
        Diagnostics { kinetic, potential, enstrophy }
    }
}

pub mod stream_tag {
    //! Tags that keep independent noise streams from colliding.
    pub const QG_INIT: u64 = 0x51_47_49;
    pub const QG_FORCING: u64 = 0x51_47_46;
    pub const TRACER_STEP: u64 = 0x54_52_53;
    pub const TRACER_OBS: u64 = 0x54_52_4f;
    pub const TRACER_INIT: u64 = 0x54_52_49;
    pub const FIELD_OBS: u64 = 0x46_4c_4f;
    pub const EAKF_MEMBER: u64 = 0x45_4b_4d;
}
