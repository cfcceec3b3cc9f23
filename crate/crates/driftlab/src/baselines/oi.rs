//! Optimal interpolation from tracer displacements: consecutive observed
//! positions give pseudo-velocities, their innovations against the model
//! background are spread onto the grid with a Gaussian kernel, and the
//! rotational part becomes a stream function increment. The lower layer
//! follows through a per-cell regression fitted on training fields.

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::wavenumbers;
use crate::qg::{QGParams, QGSolver, QGState};
use crate::tracer::{minimal_image, velocity_at, wrap, Interpolation};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OiConfig {
    /// Gaussian kernel length scale, in radians of domain.
    pub length_scale: f64,
    /// Assumed background velocity error std.
    pub background_std: f64,
    /// Assumed pseudo-velocity observation error std.
    pub obs_std: f64,
    /// Solver steps between consecutive observations.
    pub substeps: usize,
}

impl Default for OiConfig {
    fn default() -> Self {
        OiConfig { length_scale: 0.8, background_std: 0.3, obs_std: 0.05, substeps: 20 }
    }
}

/// Per-cell least-squares slope of the lower layer on the upper layer.
pub fn regression_slope(training: &[[Array2<f64>; 2]]) -> Result<Array2<f64>> {
    if training.len() < 2 {
        return Err(Error::Config("regression needs at least two training fields".into()));
    }
    let shape = training[0][0].raw_dim();
    let count = training.len() as f64;
    let mut mean1 = Array2::<f64>::zeros(shape);
    let mut mean2 = Array2::<f64>::zeros(shape);
    for pair in training {
        mean1 += &pair[0];
        mean2 += &pair[1];
    }
    mean1.mapv_inplace(|v| v / count);
    mean2.mapv_inplace(|v| v / count);
    let mut cov = Array2::<f64>::zeros(shape);
    let mut var = Array2::<f64>::zeros(shape);
    for pair in training {
        let d1 = &pair[0] - &mean1;
        cov += &(&d1 * &(&pair[1] - &mean2));
        var += &(&d1 * &d1);
    }
    Ok(ndarray::Zip::from(&cov).and(&var).map_collect(|&c, &v| c / v.max(1e-12)))
}

pub struct OiFilter {
    solver: QGSolver,
    cfg: OiConfig,
    state: QGState,
    slope: Array2<f64>,
    prev_obs: Option<Vec<[f64; 2]>>,
}

impl OiFilter {
    pub fn new(params: QGParams, cfg: OiConfig, init: QGState, slope: Array2<f64>) -> Result<Self> {
        if cfg.substeps == 0 {
            return Err(Error::Config("need at least one solver step between updates".into()));
        }
        if cfg.length_scale <= 0.0 || cfg.background_std <= 0.0 || cfg.obs_std <= 0.0 {
            return Err(Error::Config("kernel and error scales must be positive".into()));
        }
        let solver = QGSolver::new(params)?;
        if slope.nrows() != solver.params().n {
            return Err(Error::Config("regression grid does not match the solver grid".into()));
        }
        Ok(OiFilter { solver, cfg, state: init, slope, prev_obs: None })
    }

    pub fn fields(&self) -> [Array2<f64>; 2] {
        self.solver.snapshot(&self.state).psi
    }

    fn kernel(&self, a: [f64; 2], b: [f64; 2]) -> f64 {
        let dx = minimal_image(a[0], b[0]);
        let dy = minimal_image(a[1], b[1]);
        let l2 = self.cfg.length_scale * self.cfg.length_scale;
        (-(dx * dx + dy * dy) / (2.0 * l2)).exp()
    }

    /// Spread velocity innovations at the given positions onto grid
    /// increments for both components.
    pub fn velocity_increment(
        &self,
        positions: &[[f64; 2]],
        innovation_u: &[f64],
        innovation_v: &[f64],
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let m = positions.len();
        if innovation_u.len() != m || innovation_v.len() != m {
            return Err(Error::Config("innovation counts do not match positions".into()));
        }
        let b_var = self.cfg.background_std * self.cfg.background_std;
        let o_var = self.cfg.obs_std * self.cfg.obs_std;
        let mut gram = DMatrix::zeros(m, m);
        for j in 0..m {
            for l in 0..m {
                gram[(j, l)] = b_var * self.kernel(positions[j], positions[l]);
            }
            gram[(j, j)] += o_var;
        }
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::Numerics("observation kernel matrix is not positive definite".into()))?;
        let alpha_u = chol.solve(&DVector::from_column_slice(innovation_u));
        let alpha_v = chol.solve(&DVector::from_column_slice(innovation_v));

        let n = self.solver.params().n;
        let cell = std::f64::consts::TAU / n as f64;
        let mut du = Array2::zeros((n, n));
        let mut dv = Array2::zeros((n, n));
        for iy in 0..n {
            for ix in 0..n {
                let at = [ix as f64 * cell, iy as f64 * cell];
                let mut su = 0.0;
                let mut sv = 0.0;
                for (j, p) in positions.iter().enumerate() {
                    let k = b_var * self.kernel(at, *p);
                    su += k * alpha_u[j];
                    sv += k * alpha_v[j];
                }
                du[[iy, ix]] = su;
                dv[[iy, ix]] = sv;
            }
        }
        Ok((du, dv))
    }

    /// Stream function whose rotational flow matches the given velocity
    /// increments: solves lap(psi) = curl(v) spectrally, gauge fixed to
    /// zero mean.
    pub fn streamfunction_from_increments(
        &self,
        du: &Array2<f64>,
        dv: &Array2<f64>,
    ) -> Array2<f64> {
        let fft = self.solver.fft();
        let curl_hat = self.solver.spectral_derivative_x(&fft.forward(dv))
            - self.solver.spectral_derivative_y(&fft.forward(du));
        let n = self.solver.params().n;
        let k = wavenumbers(n);
        let mut psi_hat = curl_hat;
        for iy in 0..n {
            for ix in 0..n {
                let k2 = k[ix] * k[ix] + k[iy] * k[iy];
                psi_hat[[iy, ix]] = if k2 == 0.0 { 0.0.into() } else { -psi_hat[[iy, ix]] / k2 };
            }
        }
        fft.inverse(&psi_hat)
    }

    /// One cycle: propagate to the observation time, derive pseudo-velocity
    /// innovations from the displacement since the previous observation, and
    /// apply the interpolated increment. The first observation only anchors
    /// the displacement chain.
    pub fn assimilate_step(&mut self, observed: &[[f64; 2]]) -> Result<()> {
        for _ in 0..self.cfg.substeps {
            self.solver.step(&mut self.state)?;
        }
        let Some(prev) = self.prev_obs.replace(observed.to_vec()) else {
            return Ok(());
        };
        if prev.len() != observed.len() {
            return Err(Error::Config("tracer count changed between observations".into()));
        }
        let dt_obs = self.cfg.substeps as f64 * self.solver.params().dt;
        let snap = self.solver.snapshot(&self.state);

        let mut midpoints = Vec::with_capacity(observed.len());
        let mut pseudo = Vec::with_capacity(observed.len());
        for (p, c) in prev.iter().zip(observed) {
            let dx = minimal_image(c[0], p[0]);
            let dy = minimal_image(c[1], p[1]);
            pseudo.push([dx / dt_obs, dy / dt_obs]);
            midpoints.push([wrap(p[0] + 0.5 * dx), wrap(p[1] + 0.5 * dy)]);
        }
        let background = velocity_at(&snap, &midpoints, 0, Interpolation::Bilinear)?;
        let innovation_u: Vec<f64> =
            pseudo.iter().zip(&background).map(|(o, b)| o[0] - b[0]).collect();
        let innovation_v: Vec<f64> =
            pseudo.iter().zip(&background).map(|(o, b)| o[1] - b[1]).collect();

        let (du, dv) = self.velocity_increment(&midpoints, &innovation_u, &innovation_v)?;
        let dpsi1 = self.streamfunction_from_increments(&du, &dv);
        let psi1 = &snap.psi[0] + &dpsi1;
        let psi2 = &snap.psi[1] + &(&self.slope * &dpsi1);
        let fft = self.solver.fft();
        self.state.q_hat = self.solver.q_hat_from_psi_hat(&[fft.forward(&psi1), fft.forward(&psi2)]);
        Ok(())
    }
}
