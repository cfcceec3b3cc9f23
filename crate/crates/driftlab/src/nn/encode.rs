//! Position encodings for tracer coordinates on the 2-pi torus.
//!
//! Two encodings appear throughout the model: a 4-dim angular embedding
//! (cos x, sin x, cos y, sin y) that makes periodic positions continuous for
//! the surrogate state, and a Fourier feature vector of length 2+4K that
//! feeds the coefficient networks. Plain functions work on f64 pairs for
//! data preparation; the `_var` builders record the identical computation on
//! a tape, and tests pin the two paths to each other exactly.

use std::f64::consts::{PI, TAU};

use crate::error::{Error, Result};
use crate::nn::tape::{concat_cols, Var};
use crate::nn::tensor::Tensor;

/// Feature layout: [x, y, then per frequency k < K:
/// sin(2^k pi x), cos(2^k pi x), sin(2^k pi y), cos(2^k pi y)].
pub fn fourier_encode(x: f64, y: f64, k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(fourier_len(k));
    out.push(x);
    out.push(y);
    for j in 0..k {
        let f = (1u64 << j) as f64 * PI;
        out.push((f * x).sin());
        out.push((f * x).cos());
        out.push((f * y).sin());
        out.push((f * y).cos());
    }
    out
}

pub fn fourier_len(k: usize) -> usize {
    2 + 4 * k
}

/// Encode a whole tracer set into an [I, 2+4K] matrix.
pub fn fourier_encode_rows(positions: &[[f64; 2]], k: usize) -> Tensor {
    let cols = fourier_len(k);
    let mut data = Vec::with_capacity(positions.len() * cols);
    for p in positions {
        data.extend(fourier_encode(p[0], p[1], k));
    }
    Tensor::new(&[positions.len(), cols], data).unwrap()
}

/// (cos x, sin x, cos y, sin y).
pub fn angular_embed(x: f64, y: f64) -> [f64; 4] {
    [x.cos(), x.sin(), y.cos(), y.sin()]
}

/// Embed a tracer set into a flat [4 I] vector, tracer blocks contiguous.
pub fn angular_embed_flat(positions: &[[f64; 2]]) -> Vec<f64> {
    let mut out = Vec::with_capacity(4 * positions.len());
    for p in positions {
        out.extend(angular_embed(p[0], p[1]));
    }
    out
}

/// Invert the angular embedding by two-argument arctangent, normalizing
/// angles to [0, 2pi). Rejects pairs that have drifted off the unit circle.
pub fn angular_unembed(e: &[f64; 4]) -> Result<(f64, f64)> {
    for pair in [[e[0], e[1]], [e[2], e[3]]] {
        let norm = (pair[0] * pair[0] + pair[1] * pair[1]).sqrt();
        if (norm - 1.0).abs() > 1e-3 {
            return Err(Error::Numerics(format!(
                "angular unembedding off the unit circle (norm {norm:.6})"
            )));
        }
    }
    Ok((e[1].atan2(e[0]).rem_euclid(TAU), e[3].atan2(e[2]).rem_euclid(TAU)))
}

/// Rescale (cos, sin) pairs of an embedded vector back onto the unit circle.
pub fn renormalize_embedding(e: &mut [f64]) {
    assert_eq!(e.len() % 2, 0);
    for pair in e.chunks_mut(2) {
        let norm = (pair[0] * pair[0] + pair[1] * pair[1]).sqrt();
        if norm > 0.0 {
            pair[0] /= norm;
            pair[1] /= norm;
        }
    }
}

/// Tape twin of [`fourier_encode_rows`]: x, y are [I, 1] coordinate columns.
pub fn fourier_encode_var<'t>(x: Var<'t>, y: Var<'t>, k: usize) -> Var<'t> {
    let mut parts = vec![x, y];
    for j in 0..k {
        let f = (1u64 << j) as f64 * PI;
        let fx = x.scale(f);
        let fy = y.scale(f);
        parts.push(fx.sin());
        parts.push(fx.cos());
        parts.push(fy.sin());
        parts.push(fy.cos());
    }
    concat_cols(&parts)
}

/// Tape twin of [`angular_embed`] over [I, 1] coordinate columns: [I, 4].
pub fn angular_embed_var<'t>(x: Var<'t>, y: Var<'t>) -> Var<'t> {
    concat_cols(&[x.cos(), x.sin(), y.cos(), y.sin()])
}

/// Invert an [I, 4] embedding on the tape: ([I,1] x, [I,1] y) in [0, 2pi).
pub fn angular_unembed_var<'t>(e: Var<'t>) -> (Var<'t>, Var<'t>) {
    let x = e.col(1).atan2(e.col(0)).wrap_angle();
    let y = e.col(3).atan2(e.col(2)).wrap_angle();
    (x, y)
}

/// Renormalize the (cos, sin) pairs of an [I, 4] embedding on the tape.
pub fn renormalize_embedding_var<'t>(e: Var<'t>) -> Var<'t> {
    let mut cols = Vec::with_capacity(4);
    for pair in [(0usize, 1usize), (2, 3)] {
        let c = e.col(pair.0);
        let s = e.col(pair.1);
        let norm = c.mul(c).add(s.mul(s)).sqrt();
        cols.push(c.div(norm));
        cols.push(s.div(norm));
    }
    concat_cols(&cols)
}
