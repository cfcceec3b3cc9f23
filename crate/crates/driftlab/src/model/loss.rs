//! The composite training objective: autoencoder reconstruction, multi-step
//! latent and observation forecasts, and an assimilation term that runs the
//! conditional Gaussian filter on the tape so gradients flow through the
//! whole recursion.

use crate::error::{Error, Result};
use crate::model::batch::Window;
use crate::model::surrogate::Surrogate;
use crate::nn::encode::{angular_embed_flat, angular_unembed_var, fourier_encode_rows, fourier_encode_var};
use crate::nn::layers::BoundParams;
use crate::nn::tape::{Tape, Var};
use crate::nn::tensor::Tensor;

pub struct LossVars<'t> {
    pub total: Var<'t>,
    pub ae: Var<'t>,
    pub u: Var<'t>,
    pub z: Var<'t>,
    pub da: Option<Var<'t>>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub total: f64,
    pub ae: f64,
    pub u: f64,
    pub z: f64,
    pub da: f64,
}

impl<'t> LossVars<'t> {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            total: self.total.item(),
            ae: self.ae.item(),
            u: self.u.item(),
            z: self.z.item(),
            da: self.da.map_or(0.0, |v| v.item()),
        }
    }
}

fn mse<'t>(a: Var<'t>, b: Var<'t>) -> Var<'t> {
    let d = a.sub(b);
    d.mul(d).mean_all()
}

/// One conditional Gaussian filter update on the tape. Mirrors the plain
/// filter arithmetic; the posterior covariance is symmetrized but not
/// eigenvalue-floored, since the floor is a round-off guard rather than a
/// differentiable operation.
#[allow(clippy::too_many_arguments)]
pub fn filter_step_var<'t>(
    mu: Var<'t>,
    r: Var<'t>,
    f1: Var<'t>,
    g1: Var<'t>,
    f2: Var<'t>,
    g2: Var<'t>,
    sigma1_sq: Var<'t>,
    sigma2_sq: Var<'t>,
    obs_next: Var<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let g1r = g1.matmul(r);
    let s = g1r.matmul(g1.transpose()).add_diag(sigma1_sq);
    let b = g1r.matmul(g2.transpose());
    let gain = s.solve_spd(b)?.transpose();
    let innovation = obs_next.sub(f1).sub(g1.matmul(mu));
    let mu_next = f2.add(g2.matmul(mu)).add(gain.matmul(innovation));
    let r_next = g2
        .matmul(r)
        .matmul(g2.transpose())
        .add_diag(sigma2_sq)
        .sub(gain.matmul(b));
    let r_sym = r_next.add(r_next.transpose()).scale(0.5);
    Ok((mu_next, r_sym))
}

/// Evaluate the full objective on one window. The reconstruction and
/// forecast terms use the first `n_s + 1` records; when `da_noise` carries
/// calibrated observation noise stds (length 4 per tracer) the filter runs
/// across the whole window and decoded posterior means after the burn-in are
/// scored against the fields.
pub fn composite_loss_var<'t>(
    s: &Surrogate,
    tape: &'t Tape,
    p: &BoundParams<'t>,
    window: &Window<'_>,
    da_noise: Option<&[f64]>,
) -> Result<LossVars<'t>> {
    let cfg = &s.cfg;
    let len = window.fields.len();
    if len != window.positions.len() {
        return Err(Error::Config("window fields and positions disagree in length".into()));
    }
    if len < cfg.n_s + 1 {
        return Err(Error::Config(format!(
            "window of {len} records cannot support {} forecast steps",
            cfg.n_s
        )));
    }
    let i = window.positions[0].len();
    if window.positions.iter().any(|ps| ps.len() != i) {
        return Err(Error::Config("tracer count changes inside the window".into()));
    }
    let d_z = s.d_z();

    let mut field_leaves: Vec<Option<Var<'t>>> = vec![None; len];
    let mut field_leaf = |r: usize| -> Var<'t> {
        *field_leaves[r].get_or_insert_with(|| tape.leaf(window.fields[r].clone()))
    };

    // reconstruction over the forecast stub of the window
    let mut encoded: Vec<Var<'t>> = Vec::with_capacity(cfg.n_s + 1);
    let mut ae_acc: Option<Var<'t>> = None;
    for rec in 0..=cfg.n_s {
        let f = field_leaf(rec);
        let z = s.encode_var(p, f);
        let term = mse(s.decode_var(p, z), f);
        ae_acc = Some(match ae_acc {
            Some(acc) => acc.add(term),
            None => term,
        });
        encoded.push(z);
    }
    let ae = ae_acc.unwrap().scale(1.0 / (cfg.n_s + 1) as f64);

    // multi-step rollout from the window head
    let (f2, g2) = s.transition_var(p)?;
    let mut z_prev = encoded[0].reshape(&[d_z, 1]);
    let mut feats = tape.leaf(fourier_encode_rows(&window.positions[0], cfg.k_freq));
    let mut u_acc: Option<Var<'t>> = None;
    let mut z_acc: Option<Var<'t>> = None;
    for step in 1..=cfg.n_s {
        let (f1, g1) = s.coefficients_var(p, feats);
        let u1_pred = f1.add(g1.matmul(z_prev));
        let z_pred = f2.add(g2.matmul(z_prev));
        let target_u = tape.leaf(
            Tensor::new(&[4 * i, 1], angular_embed_flat(&window.positions[step])).unwrap(),
        );
        let u_term = mse(u1_pred, target_u);
        let z_term = mse(z_pred.reshape(&[d_z]), encoded[step]);
        u_acc = Some(match u_acc {
            Some(acc) => acc.add(u_term),
            None => u_term,
        });
        z_acc = Some(match z_acc {
            Some(acc) => acc.add(z_term),
            None => z_term,
        });
        if step < cfg.n_s {
            // continue the chain through the predicted tracer positions;
            // atan2 ignores the embedding norm so no renormalization is
            // needed before re-encoding
            let u1_mat = u1_pred.reshape(&[i, 4]);
            let (x, y) = angular_unembed_var(u1_mat);
            feats = fourier_encode_var(x, y, cfg.k_freq);
            z_prev = z_pred;
        }
    }
    let scale_steps = 1.0 / cfg.n_s as f64;
    let u = u_acc.unwrap().scale(scale_steps);
    let z = z_acc.unwrap().scale(scale_steps);

    // assimilation term: run the filter across the window, score decoded
    // posterior means after the burn-in
    let da = if let Some(noise) = da_noise {
        if noise.len() != 4 * i {
            return Err(Error::Config(format!(
                "observation noise has {} entries for {i} tracers",
                noise.len()
            )));
        }
        if len < cfg.n_b + 2 {
            return Err(Error::Config(format!(
                "window of {len} records leaves nothing after a burn-in of {}",
                cfg.n_b
            )));
        }
        let sigma1_sq = tape.leaf(Tensor::from_vec(noise.iter().map(|v| v * v).collect()));
        let sigma2_sq =
            tape.leaf(Tensor::from_vec(s.sigma2_vec().iter().map(|v| v * v).collect()));
        let mut mu = tape.leaf(Tensor::zeros(&[d_z, 1]));
        let mut r_cov = tape.leaf({
            let mut t = Tensor::eye(d_z);
            t.scale_in_place(0.01);
            t
        });
        let mut da_acc: Option<Var<'t>> = None;
        let mut scored = 0usize;
        for n in 0..len - 1 {
            let feats_n = tape.leaf(fourier_encode_rows(&window.positions[n], cfg.k_freq));
            let (f1, g1) = s.coefficients_var(p, feats_n);
            let obs_next = tape.leaf(
                Tensor::new(&[4 * i, 1], angular_embed_flat(&window.positions[n + 1])).unwrap(),
            );
            let (mu_next, r_next) =
                filter_step_var(mu, r_cov, f1, g1, f2, g2, sigma1_sq, sigma2_sq, obs_next)?;
            mu = mu_next;
            r_cov = r_next;
            if n + 1 > cfg.n_b {
                let dec = s.decode_var(p, mu.reshape(&[d_z]));
                let term = mse(dec, field_leaf(n + 1));
                da_acc = Some(match da_acc {
                    Some(acc) => acc.add(term),
                    None => term,
                });
                scored += 1;
            }
        }
        Some(da_acc.unwrap().scale(1.0 / scored as f64))
    } else {
        None
    };

    let mut total = ae
        .scale(cfg.lambda_ae)
        .add(u.scale(cfg.lambda_u))
        .add(z.scale(cfg.lambda_z));
    if let Some(da_term) = da {
        total = total.add(da_term.scale(cfg.lambda_da));
    }
    Ok(LossVars { total, ae, u, z, da })
}
