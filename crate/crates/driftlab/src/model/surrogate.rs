//! The latent surrogate: an autoencoder between flow fields and a latent
//! vector, shared per-tracer coefficient networks, and a (low-rank or dense)
//! latent transition. One parameter set serves both the differentiable
//! training path and plain inference; inference evaluates the same ops on a
//! scratch tape so the two paths cannot drift apart.

use nalgebra::{DMatrix, DVector};
use serde_json::json;

use crate::cg::CGCoefficients;
use crate::error::{Error, Result};
use crate::model::config::{AeKind, SurrogateConfig};
use crate::nn::encode::{fourier_encode_rows, fourier_len};
use crate::nn::layers::{
    conv, conv_transpose, init_conv, init_linear, init_mlp, linear, mlp, BoundParams, ParamSet,
};
use crate::nn::lowrank::LowRankTransition;
use crate::nn::tape::{Tape, Var};
use crate::nn::tensor::Tensor;
use crate::nn::weights::ModelWeights;
use crate::rng::stream_rng;

const INIT_TAG: u64 = 0x5355_5247; // surrogate weight init stream

/// Parameter-name prefix for frozen leaves (normalization constants and
/// calibrated noise); the trainers skip gradients under it.
pub const FROZEN_PREFIX: &str = "const.";

#[derive(Clone, Debug)]
pub struct Surrogate {
    pub cfg: SurrogateConfig,
    pub data_grid: usize,
    /// Tracer count the model was calibrated with; other counts fall back to
    /// the pooled noise calibration.
    pub i_train: usize,
    pub params: ParamSet,
}

impl Surrogate {
    pub fn init(cfg: SurrogateConfig, data_grid: usize, i_train: usize) -> Result<Self> {
        cfg.validate(data_grid)?;
        let mut rng = stream_rng(cfg.seed, &[INIT_TAG]);
        let mut params = ParamSet::new();
        let d_z = cfg.d_z();
        let cc = cfg.conv_channels;

        params.insert("const.norm_mean", Tensor::zeros(&[2]));
        params.insert("const.norm_std", Tensor::full(&[2], 1.0));

        match cfg.ae_kind {
            AeKind::Conv => {
                let blocks = cfg.conv_blocks(data_grid)?;
                init_conv(&mut params, "enc.in", [3, 3, 2, cc], 18, cc, &mut rng);
                for b in 0..blocks {
                    init_conv(&mut params, &format!("enc.down{b}"), [3, 3, cc, cc], 9 * cc, cc, &mut rng);
                }
                init_conv(&mut params, "enc.out", [3, 3, cc, cfg.n_c], 9 * cc, cfg.n_c, &mut rng);
                init_conv(&mut params, "dec.in", [3, 3, cfg.n_c, cc], 9 * cfg.n_c, cc, &mut rng);
                for b in 0..blocks {
                    // transposed kernels are [kh, kw, c_out, c_in]
                    init_conv(&mut params, &format!("dec.up{b}"), [3, 3, cc, cc], 9 * cc, cc, &mut rng);
                }
                init_conv(&mut params, "dec.out", [3, 3, cc, 2], 9 * cc, 2, &mut rng);
            }
            AeKind::Linear => {
                let d_u2 = data_grid * data_grid * 2;
                init_linear(&mut params, "enc.lin", d_u2, d_z, &mut rng);
                init_linear(&mut params, "dec.lin", d_z, d_u2, &mut rng);
            }
        }

        let d_feat = fourier_len(cfg.k_freq);
        init_mlp(&mut params, "f", &[d_feat, cfg.hidden, cfg.hidden, 4], &mut rng);
        init_mlp(&mut params, "g", &[d_feat, cfg.hidden, cfg.hidden, 4 * d_z], &mut rng);
        params.insert("f2", Tensor::zeros(&[d_z]));
        if cfg.rank > 0 {
            LowRankTransition::new(d_z, cfg.rank).init(&mut params, "g2", &mut rng);
        } else {
            // dense transition starting near a mild contraction
            let mut g2 = Tensor::eye(d_z);
            g2.scale_in_place(0.9);
            let bound = 0.01 / (d_z as f64).sqrt();
            for v in g2.data_mut() {
                use rand::Rng;
                *v += rng.random_range(-bound..bound);
            }
            params.insert("g2.dense", g2);
        }

        let uh = cfg.uncertainty_hidden;
        init_mlp(&mut params, "unc.phi", &[4, uh, uh], &mut rng);
        init_mlp(&mut params, "unc.rho", &[uh, uh, 2], &mut rng);

        Ok(Surrogate { cfg, data_grid, i_train, params })
    }

    pub fn d_z(&self) -> usize {
        self.cfg.d_z()
    }

    /// Per-layer affine normalization constants, estimated once from the
    /// training split and then frozen.
    pub fn set_normalization(&mut self, mean: [f64; 2], std: [f64; 2]) {
        assert!(std[0] > 0.0 && std[1] > 0.0);
        self.params.set("const.norm_mean", Tensor::from_vec(mean.to_vec()));
        self.params.set("const.norm_std", Tensor::from_vec(std.to_vec()));
    }

    fn normalize_var<'t>(&self, p: &BoundParams<'t>, u2: Var<'t>) -> Var<'t> {
        let sh = u2.shape();
        let (h, w) = (sh[1], sh[2]);
        let flat = u2.reshape(&[h * w, 2]);
        let inv_std = p.var("const.norm_std").recip();
        let centered = flat.add_bias(p.var("const.norm_mean").neg());
        centered.matmul(inv_std.diag_embed()).reshape(&[1, h, w, 2])
    }

    fn denormalize_var<'t>(&self, p: &BoundParams<'t>, u2: Var<'t>) -> Var<'t> {
        let sh = u2.shape();
        let (h, w) = (sh[1], sh[2]);
        let flat = u2.reshape(&[h * w, 2]);
        flat.matmul(p.var("const.norm_std").diag_embed())
            .add_bias(p.var("const.norm_mean"))
            .reshape(&[1, h, w, 2])
    }

    /// Fields [1, H, W, 2] to latent [d_z].
    pub fn encode_var<'t>(&self, p: &BoundParams<'t>, u2: Var<'t>) -> Var<'t> {
        let sh = u2.shape();
        assert_eq!(
            (sh[0], sh[1], sh[2], sh[3]),
            (1, self.data_grid, self.data_grid, 2),
            "encoder input shape {sh:?}"
        );
        let x = self.normalize_var(p, u2);
        match self.cfg.ae_kind {
            AeKind::Conv => {
                let blocks = self.cfg.conv_blocks(self.data_grid).unwrap();
                let mut h = conv(x, p, "enc.in", 1).relu();
                for b in 0..blocks {
                    h = conv(h, p, &format!("enc.down{b}"), 2).relu();
                }
                conv(h, p, "enc.out", 1).reshape(&[self.d_z()])
            }
            AeKind::Linear => {
                let d_u2 = self.data_grid * self.data_grid * 2;
                linear(x.reshape(&[1, d_u2]), p, "enc.lin").reshape(&[self.d_z()])
            }
        }
    }

    /// Latent [d_z] to fields [1, H, W, 2].
    pub fn decode_var<'t>(&self, p: &BoundParams<'t>, z: Var<'t>) -> Var<'t> {
        assert_eq!(z.shape(), vec![self.d_z()], "decoder input shape");
        let out = match self.cfg.ae_kind {
            AeKind::Conv => {
                let blocks = self.cfg.conv_blocks(self.data_grid).unwrap();
                let mut h = z.reshape(&[1, self.cfg.z_h, self.cfg.z_w, self.cfg.n_c]);
                h = conv(h, p, "dec.in", 1).relu();
                for b in 0..blocks {
                    h = conv_transpose(h, p, &format!("dec.up{b}"), 2).relu();
                }
                conv(h, p, "dec.out", 1)
            }
            AeKind::Linear => linear(z.reshape(&[1, self.d_z()]), p, "dec.lin")
                .reshape(&[1, self.data_grid, self.data_grid, 2]),
        };
        self.denormalize_var(p, out)
    }

    /// Per-tracer nets on encoded positions [I, 2+4K]: observation-side
    /// coefficients (F1 [4I, 1], G1 [4I, d_z]).
    pub fn coefficients_var<'t>(&self, p: &BoundParams<'t>, feats: Var<'t>) -> (Var<'t>, Var<'t>) {
        let i = feats.shape()[0];
        let f1 = mlp(feats, p, "f", 3).reshape(&[4 * i, 1]);
        let g1 = mlp(feats, p, "g", 3).reshape(&[4 * i, self.d_z()]);
        (f1, g1)
    }

    /// Latent-side coefficients (F2 [d_z, 1], G2 [d_z, d_z]); constant with
    /// respect to observations.
    pub fn transition_var<'t>(&self, p: &BoundParams<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let d_z = self.d_z();
        let f2 = p.var("f2").reshape(&[d_z, 1]);
        let g2 = if self.cfg.rank > 0 {
            LowRankTransition::new(d_z, self.cfg.rank).assemble_var(p, "g2")?
        } else {
            p.var("g2.dense")
        };
        Ok((f2, g2))
    }

    /// Observation noise stds for a given tracer count. The exact
    /// per-coordinate calibration applies at the training tracer count;
    /// other counts tile the pooled per-slot calibration.
    pub fn sigma1_for(&self, tracer_count: usize) -> Result<Vec<f64>> {
        if tracer_count == self.i_train {
            if let Ok(full) = self.params.get("const.sigma1_full") {
                return Ok(full.data().to_vec());
            }
        }
        if let Ok(pooled) = self.params.get("const.sigma1_pooled") {
            let p = pooled.data();
            let mut out = Vec::with_capacity(4 * tracer_count);
            for _ in 0..tracer_count {
                out.extend_from_slice(p);
            }
            return Ok(out);
        }
        Err(Error::Config(
            "observation noise is uncalibrated: run stage-1 calibration first".into(),
        ))
    }

    /// Observation noise stds for a specific tracer subset, gathered from the
    /// per-coordinate calibration when the ids fit inside it.
    pub fn sigma1_for_ids(&self, ids: &[usize]) -> Result<Vec<f64>> {
        if let Ok(full) = self.params.get("const.sigma1_full") {
            let data = full.data();
            if ids.iter().all(|&i| 4 * i + 3 < data.len()) {
                let mut out = Vec::with_capacity(4 * ids.len());
                for &i in ids {
                    out.extend_from_slice(&data[4 * i..4 * i + 4]);
                }
                return Ok(out);
            }
        }
        self.sigma1_for(ids.len())
    }

    pub fn sigma2_vec(&self) -> Vec<f64> {
        vec![self.cfg.sigma2; self.d_z()]
    }

    /// Filter coefficients at one observation, for the plain filtering path.
    pub fn eval_coefficients(&self, positions: &[[f64; 2]]) -> Result<CGCoefficients> {
        let i = positions.len();
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let feats = tape.leaf(fourier_encode_rows(positions, self.cfg.k_freq));
        let (f1, g1) = self.coefficients_var(&bound, feats);
        let (f2, g2) = self.transition_var(&bound)?;
        let d_z = self.d_z();
        Ok(CGCoefficients {
            f1: DVector::from_vec(f1.value().into_data()),
            g1: DMatrix::from_row_slice(4 * i, d_z, g1.value().data()),
            f2: DVector::from_vec(f2.value().into_data()),
            g2: DMatrix::from_row_slice(d_z, d_z, g2.value().data()),
            sigma1: DVector::from_vec(self.sigma1_for(i)?),
            sigma2: DVector::from_vec(self.sigma2_vec()),
        })
    }

    /// Plain encode: fields tensor [1, H, W, 2] to a latent vector.
    pub fn encode_value(&self, u2: &Tensor) -> Vec<f64> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let x = tape.leaf(u2.clone());
        self.encode_var(&bound, x).value().into_data()
    }

    /// Plain decode: latent slice to fields tensor [1, H, W, 2].
    pub fn decode_value(&self, z: &[f64]) -> Tensor {
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let zv = tape.leaf(Tensor::from_vec(z.to_vec()));
        self.decode_var(&bound, zv).value()
    }

    /// Predicted per-layer posterior stds from the uncertainty head for one
    /// observation (any tracer count).
    pub fn uncertainty_value(&self, positions: &[[f64; 2]]) -> [f64; 2] {
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let emb = crate::nn::encode::angular_embed_flat(positions);
        let x = tape.leaf(Tensor::new(&[positions.len(), 4], emb).unwrap());
        let out = self.uncertainty_var(&bound, x).value();
        [out.data()[0], out.data()[1]]
    }

    /// Uncertainty head on the tape: per-tracer features, mean-pooled so the
    /// same weights serve any tracer count, softplus output [1, 2].
    pub fn uncertainty_var<'t>(&self, p: &BoundParams<'t>, embedded: Var<'t>) -> Var<'t> {
        let uh = self.cfg.uncertainty_hidden;
        let per_tracer = mlp(embedded, p, "unc.phi", 2).tanh();
        let pooled = per_tracer.mean_rows().reshape(&[1, uh]);
        mlp(pooled, p, "unc.rho", 2).softplus()
    }

    pub fn to_weights(&self) -> ModelWeights {
        let meta = json!({
            "kind": "surrogate",
            "data_grid": self.data_grid,
            "i_train": self.i_train,
            "config": serde_json::to_value(&self.cfg).unwrap(),
        });
        ModelWeights::new(meta, self.params.clone())
    }

    pub fn from_weights(w: &ModelWeights) -> Result<Self> {
        let kind = w.meta.get("kind").and_then(|v| v.as_str()).unwrap_or("");
        if kind != "surrogate" {
            return Err(Error::Format(format!("checkpoint kind {kind:?}, expected surrogate")));
        }
        let cfg: SurrogateConfig = serde_json::from_value(
            w.meta.get("config").cloned().ok_or_else(|| Error::Format("checkpoint missing config".into()))?,
        )
        .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        let data_grid = w.meta_usize("data_grid")?;
        let i_train = w.meta_usize("i_train")?;
        cfg.validate(data_grid)?;
        Ok(Surrogate { cfg, data_grid, i_train, params: w.params.clone() })
    }
}
