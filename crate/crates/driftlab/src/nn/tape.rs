//! Reverse-mode automatic differentiation on a per-step tape.
//!
//! A [`Tape`] is an append-only arena of nodes; a [`Var`] is a copyable
//! handle into one tape. Each op records its parents and a closure that maps
//! the output cotangent to parent cotangents. [`Tape::backward`] walks the
//! arena once in reverse, so gradients are exact for the recorded
//! computation and deterministic (no parallelism inside ops).
//!
//! Shape errors are programming errors and panic, matching the panics of the
//! underlying tensor ops; only genuinely data-dependent failures (rank
//! deficiency in QR, non-PD matrices in the symmetric solve) return errors.

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::nn::tensor::{
    cholesky, cholesky_solve, matmul as t_matmul, qr_thin, solve_upper_triangular, transpose as t_transpose,
    Tensor,
};

type BackFn = Box<dyn Fn(&Tensor, &[&Tensor]) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    back: Option<BackFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Gradients of one backward pass, indexed by the same ids as the tape.
pub struct Grads {
    by_id: Vec<Tensor>,
}

impl Grads {
    pub fn of(&self, v: Var<'_>) -> &Tensor {
        &self.by_id[v.id]
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, parents: Vec<usize>, back: Option<BackFn>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, parents, back });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Record an input. Every leaf participates in gradients; callers simply
    /// ignore the gradients of non-parameter leaves.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, vec![], None)
    }

    /// Reverse sweep from a scalar loss. Returns one cotangent per node;
    /// untouched nodes get zeros of their own shape.
    pub fn backward(&self, loss: Var<'_>) -> Grads {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.id].value.len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Tensor> =
            nodes.iter().map(|n| Tensor::zeros(n.value.shape())).collect();
        let mut touched = vec![false; nodes.len()];
        grads[loss.id] = Tensor::new(nodes[loss.id].value.shape(), vec![1.0]).unwrap();
        touched[loss.id] = true;
        for id in (0..=loss.id).rev() {
            if !touched[id] {
                continue;
            }
            let node = &nodes[id];
            let Some(back) = &node.back else { continue };
            let gout = grads[id].clone();
            let pvals: Vec<&Tensor> = node.parents.iter().map(|&p| &nodes[p].value).collect();
            let pgrads = back(&gout, &pvals);
            debug_assert_eq!(pgrads.len(), node.parents.len());
            for (&p, g) in node.parents.iter().zip(pgrads) {
                grads[p].add_assign(&g);
                touched[p] = true;
            }
        }
        Grads { by_id: grads }
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    fn unary(
        &self,
        value: Tensor,
        back: impl Fn(&Tensor, &[&Tensor]) -> Vec<Tensor> + 'static,
    ) -> Var<'t> {
        self.tape.push(value, vec![self.id], Some(Box::new(back)))
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    fn binary(
        &self,
        other: Var<'t>,
        value: Tensor,
        back: impl Fn(&Tensor, &[&Tensor]) -> Vec<Tensor> + 'static,
    ) -> Var<'t> {
        self.same_tape(&other);
        self.tape.push(value, vec![self.id, other.id], Some(Box::new(back)))
    }

    fn map_unary(
        &self,
        f: impl Fn(f64) -> f64,
        dfdx: impl Fn(f64) -> f64 + 'static,
    ) -> Var<'t> {
        let y = self.value().map(f);
        self.unary(y, move |g, p| vec![g.zip(p[0], |gv, xv| gv * dfdx(xv))])
    }

    pub fn neg(&self) -> Var<'t> {
        self.map_unary(|x| -x, |_| -1.0)
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.map_unary(move |x| c * x, move |_| c)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.map_unary(move |x| x + c, |_| 1.0)
    }

    pub fn tanh(&self) -> Var<'t> {
        let y = self.value().map(f64::tanh);
        let yc = y.clone();
        self.unary(y, move |g, _| vec![g.zip(&yc, |gv, yv| gv * (1.0 - yv * yv))])
    }

    pub fn relu(&self) -> Var<'t> {
        self.map_unary(|x| x.max(0.0), |x| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn softplus(&self) -> Var<'t> {
        self.map_unary(softplus_scalar, |x| sigmoid_scalar(x))
    }

    pub fn sin(&self) -> Var<'t> {
        self.map_unary(f64::sin, f64::cos)
    }

    pub fn cos(&self) -> Var<'t> {
        self.map_unary(f64::cos, |x| -x.sin())
    }

    pub fn recip(&self) -> Var<'t> {
        self.map_unary(|x| 1.0 / x, |x| -1.0 / (x * x))
    }

    /// Reduce angles to [0, 2pi). Piecewise a shift, so the cotangent passes
    /// through unchanged; the jump set has measure zero.
    pub fn wrap_angle(&self) -> Var<'t> {
        let tau = std::f64::consts::TAU;
        self.map_unary(move |x| x.rem_euclid(tau), |_| 1.0)
    }

    pub fn sqrt(&self) -> Var<'t> {
        let y = self.value().map(f64::sqrt);
        let yc = y.clone();
        self.unary(y, move |g, _| vec![g.zip(&yc, |gv, yv| gv / (2.0 * yv))])
    }

    pub fn add(&self, other: Var<'t>) -> Var<'t> {
        let y = self.value().zip(&other.value(), |a, b| a + b);
        self.binary(other, y, |g, _| vec![g.clone(), g.clone()])
    }

    pub fn sub(&self, other: Var<'t>) -> Var<'t> {
        let y = self.value().zip(&other.value(), |a, b| a - b);
        self.binary(other, y, |g, _| vec![g.clone(), g.map(|v| -v)])
    }

    pub fn mul(&self, other: Var<'t>) -> Var<'t> {
        let y = self.value().zip(&other.value(), |a, b| a * b);
        self.binary(other, y, |g, p| {
            vec![g.zip(p[1], |gv, bv| gv * bv), g.zip(p[0], |gv, av| gv * av)]
        })
    }

    pub fn div(&self, other: Var<'t>) -> Var<'t> {
        let y = self.value().zip(&other.value(), |a, b| a / b);
        self.binary(other, y, |g, p| {
            let ga = g.zip(p[1], |gv, bv| gv / bv);
            let mut gb = g.zip(p[0], |gv, av| gv * av);
            gb = gb.zip(p[1], |v, bv| -v / (bv * bv));
            vec![ga, gb]
        })
    }

    /// Elementwise two-argument arctangent; `self` is the sine-like part.
    pub fn atan2(&self, x: Var<'t>) -> Var<'t> {
        let y = self.value().zip(&x.value(), f64::atan2);
        self.binary(x, y, |g, p| {
            // r2 = x^2 + y^2; d/dy = x / r2, d/dx = -y / r2.
            let mut out_y = g.clone();
            let mut out_x = g.clone();
            for i in 0..g.len() {
                let yv = p[0].data()[i];
                let xv = p[1].data()[i];
                let r2 = xv * xv + yv * yv;
                out_y.data_mut()[i] = g.data()[i] * xv / r2;
                out_x.data_mut()[i] = -g.data()[i] * yv / r2;
            }
            vec![out_y, out_x]
        })
    }

    pub fn matmul(&self, other: Var<'t>) -> Var<'t> {
        let y = t_matmul(&self.value(), &other.value());
        self.binary(other, y, |g, p| {
            vec![t_matmul(g, &t_transpose(p[1])), t_matmul(&t_transpose(p[0]), g)]
        })
    }

    pub fn transpose(&self) -> Var<'t> {
        let y = t_transpose(&self.value());
        self.unary(y, |g, _| vec![t_transpose(g)])
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'t> {
        let y = self.value().reshaped(shape).expect("reshape count mismatch");
        self.unary(y, |g, p| vec![g.reshaped(p[0].shape()).unwrap()])
    }

    /// Column `j` of a matrix as an [m, 1] tensor.
    pub fn col(&self, j: usize) -> Var<'t> {
        let v = self.value();
        let (m, n) = (v.rows(), v.cols());
        assert!(j < n, "column {j} out of {n}");
        let data: Vec<f64> = (0..m).map(|i| v.at2(i, j)).collect();
        let y = Tensor::new(&[m, 1], data).unwrap();
        self.unary(y, move |g, p| {
            let mut gx = Tensor::zeros(p[0].shape());
            let n = p[0].cols();
            for i in 0..g.rows() {
                gx.data_mut()[i * n + j] = g.data()[i];
            }
            vec![gx]
        })
    }

    /// Mean over the row axis: [m, n] -> [n].
    pub fn mean_rows(&self) -> Var<'t> {
        let v = self.value();
        let (m, n) = (v.rows(), v.cols());
        let mut data = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                data[j] += v.at2(i, j);
            }
        }
        for d in &mut data {
            *d /= m as f64;
        }
        let y = Tensor::new(&[n], data).unwrap();
        self.unary(y, move |g, p| {
            let (m, n) = (p[0].rows(), p[0].cols());
            let mut gx = Tensor::zeros(&[m, n]);
            for i in 0..m {
                for j in 0..n {
                    gx.data_mut()[i * n + j] = g.data()[j] / m as f64;
                }
            }
            vec![gx]
        })
    }

    pub fn sum_all(&self) -> Var<'t> {
        let s: f64 = self.value().data().iter().sum();
        self.unary(Tensor::scalar(s), |g, p| vec![Tensor::full(p[0].shape(), g.item())])
    }

    pub fn mean_all(&self) -> Var<'t> {
        let v = self.value();
        let n = v.len() as f64;
        let s: f64 = v.data().iter().sum();
        self.unary(Tensor::scalar(s / n), move |g, p| {
            vec![Tensor::full(p[0].shape(), g.item() / p[0].len() as f64)]
        })
    }

    /// Matrix plus a broadcast row vector: [m, n] + [n].
    pub fn add_bias(&self, bias: Var<'t>) -> Var<'t> {
        let m = self.value();
        let b = b_check(&m, &bias.value());
        let (rows, n) = (m.rows(), m.cols());
        let mut y = m.clone();
        for i in 0..rows {
            for j in 0..n {
                y.data_mut()[i * n + j] += b.data()[j];
            }
        }
        self.binary(bias, y, |g, p| {
            let (rows, n) = (p[0].rows(), p[0].cols());
            let mut gb = Tensor::zeros(&[n]);
            for i in 0..rows {
                for j in 0..n {
                    gb.data_mut()[j] += g.at2(i, j);
                }
            }
            vec![g.clone(), gb]
        })
    }

    /// Square matrix plus a vector placed on its diagonal.
    pub fn add_diag(&self, diag: Var<'t>) -> Var<'t> {
        let m = self.value();
        let n = m.rows();
        assert_eq!(m.cols(), n, "add_diag wants a square matrix");
        assert_eq!(diag.value().len(), n, "add_diag length mismatch");
        let mut y = m.clone();
        for i in 0..n {
            y.data_mut()[i * n + i] += diag.value().data()[i];
        }
        self.binary(diag, y, |g, p| {
            let n = p[0].rows();
            let gd = Tensor::new(&[n], (0..n).map(|i| g.at2(i, i)).collect()).unwrap();
            vec![g.clone(), gd]
        })
    }

    /// Vector [n] to a diagonal matrix [n, n].
    pub fn diag_embed(&self) -> Var<'t> {
        let v = self.value();
        let n = v.len();
        let mut y = Tensor::zeros(&[n, n]);
        for i in 0..n {
            y.data_mut()[i * n + i] = v.data()[i];
        }
        self.unary(y, move |g, p| {
            let n = p[0].len();
            vec![Tensor::new(&[n], (0..n).map(|i| g.at2(i, i)).collect()).unwrap()]
        })
    }

    /// Circular 2-D convolution, NHWC input, [kh, kw, c_in, c_out] kernel.
    pub fn conv2d(&self, kernel: Var<'t>, stride: usize) -> Var<'t> {
        let x = self.value();
        let k = kernel.value();
        let y = conv2d_forward(&x, &k, stride);
        self.binary(kernel, y, move |g, p| {
            let (gx, gk) = conv2d_backward(p[0], p[1], g, stride);
            vec![gx, gk]
        })
    }

    /// Transposed circular convolution (upsampling by `stride`), NHWC input,
    /// [kh, kw, c_out, c_in] kernel.
    pub fn conv2d_transpose(&self, kernel: Var<'t>, stride: usize) -> Var<'t> {
        let x = self.value();
        let k = kernel.value();
        let y = conv2d_transpose_forward(&x, &k, stride);
        self.binary(kernel, y, move |g, p| {
            let (gx, gk) = conv2d_transpose_backward(p[0], p[1], g, stride);
            vec![gx, gk]
        })
    }

    /// Q factor of the thin QR of an [m, n] matrix (m >= n), diagonal of R
    /// fixed nonnegative. Errors on collinear columns.
    pub fn qr_q(&self) -> Result<Var<'t>> {
        let a = self.value();
        let (q, r) = qr_thin(&a)?;
        let r_cap = r.clone();
        Ok(self.unary(q.clone(), move |gq, _| {
            vec![qr_q_backward(&q, &r_cap, gq)]
        }))
    }

    /// X = S^{-1} B for symmetric positive-definite S. Errors if the
    /// factorization fails.
    pub fn solve_spd(&self, b: Var<'t>) -> Result<Var<'t>> {
        let s = self.value();
        let l = cholesky(&s).map_err(|e| match e {
            Error::Numerics(m) => Error::Numerics(format!("symmetric solve: {m}")),
            other => other,
        })?;
        let y = cholesky_solve(&l, &b.value());
        let (l_cap, y_cap) = (l, y.clone());
        Ok(self.binary(b, y, move |gy, _| {
            // B_bar = S^{-1} gy; S_bar = -B_bar Y^T.
            let gb = cholesky_solve(&l_cap, gy);
            let mut gs = t_matmul(&gb, &t_transpose(&y_cap));
            gs.scale_in_place(-1.0);
            vec![gs, gb]
        }))
    }
}

/// Concatenate matrices with equal row counts along the column axis.
pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty());
    let tape = parts[0].tape;
    let vals: Vec<Tensor> = parts.iter().map(|p| p.value()).collect();
    let m = vals[0].rows();
    let widths: Vec<usize> = vals
        .iter()
        .map(|v| {
            assert_eq!(v.rows(), m, "concat_cols row mismatch");
            v.cols()
        })
        .collect();
    let total: usize = widths.iter().sum();
    let mut y = Tensor::zeros(&[m, total]);
    let mut off = 0;
    for v in &vals {
        let w = v.cols();
        for i in 0..m {
            for j in 0..w {
                y.data_mut()[i * total + off + j] = v.at2(i, j);
            }
        }
        off += w;
    }
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let widths_cap = widths.clone();
    tape.push(
        y,
        ids,
        Some(Box::new(move |g, p| {
            let m = p[0].rows();
            let total: usize = widths_cap.iter().sum();
            let mut out = Vec::with_capacity(widths_cap.len());
            let mut off = 0;
            for &w in &widths_cap {
                let mut gp = Tensor::zeros(&[m, w]);
                for i in 0..m {
                    for j in 0..w {
                        gp.data_mut()[i * w + j] = g.data()[i * total + off + j];
                    }
                }
                out.push(gp);
                off += w;
            }
            out
        })),
    )
}

pub fn softplus_scalar(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of the scalar softplus, for initializing raw parameters.
pub fn softplus_inverse(y: f64) -> f64 {
    assert!(y > 0.0);
    y.exp_m1().ln()
}

fn b_check(m: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(b.len(), m.cols(), "bias length {} vs {} columns", b.len(), m.cols());
    b.clone()
}

fn conv_dims(x: &Tensor, k: &Tensor, stride: usize) -> (usize, usize, usize, usize, usize, usize, usize) {
    let sh = x.shape();
    assert_eq!(sh.len(), 4, "conv input must be NHWC, got {sh:?}");
    let (nb, h, w, cin) = (sh[0], sh[1], sh[2], sh[3]);
    let ks = k.shape();
    assert_eq!(ks.len(), 4, "conv kernel must be 4-D, got {ks:?}");
    let (kh, kw) = (ks[0], ks[1]);
    assert!(kh % 2 == 1 && kw % 2 == 1, "kernel sides must be odd");
    assert!(stride >= 1 && h % stride == 0 && w % stride == 0, "stride must divide the grid");
    (nb, h, w, cin, kh, kw, stride)
}

/// Plain (no-tape) circular convolution; the op method records this.
pub fn conv2d_forward(x: &Tensor, k: &Tensor, stride: usize) -> Tensor {
    let (nb, h, w, cin, kh, kw, s) = conv_dims(x, k, stride);
    let ks = k.shape();
    assert_eq!(ks[2], cin, "kernel c_in {} vs input {}", ks[2], cin);
    let cout = ks[3];
    let (oh, ow) = (h / s, w / s);
    let (ph, pw) = (kh / 2, kw / 2);
    let mut y = Tensor::zeros(&[nb, oh, ow, cout]);
    let xd = x.data();
    let kd = k.data();
    let yd = y.data_mut();
    for n in 0..nb {
        for oy in 0..oh {
            for ox in 0..ow {
                let ybase = ((n * oh + oy) * ow + ox) * cout;
                for dy in 0..kh {
                    let iy = (oy * s + dy + h - ph) % h;
                    for dx in 0..kw {
                        let ix = (ox * s + dx + w - pw) % w;
                        let xbase = ((n * h + iy) * w + ix) * cin;
                        let kbase = (dy * kw + dx) * cin * cout;
                        for ci in 0..cin {
                            let xv = xd[xbase + ci];
                            if xv == 0.0 {
                                continue;
                            }
                            let krow = &kd[kbase + ci * cout..kbase + (ci + 1) * cout];
                            for (co, &kv) in krow.iter().enumerate() {
                                yd[ybase + co] += xv * kv;
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

fn conv2d_backward(x: &Tensor, k: &Tensor, gy: &Tensor, stride: usize) -> (Tensor, Tensor) {
    let (nb, h, w, cin, kh, kw, s) = conv_dims(x, k, stride);
    let cout = k.shape()[3];
    let (oh, ow) = (h / s, w / s);
    let (ph, pw) = (kh / 2, kw / 2);
    let mut gx = Tensor::zeros(x.shape());
    let mut gk = Tensor::zeros(k.shape());
    let xd = x.data();
    let kd = k.data();
    let gyd = gy.data();
    for n in 0..nb {
        for oy in 0..oh {
            for ox in 0..ow {
                let ybase = ((n * oh + oy) * ow + ox) * cout;
                for dy in 0..kh {
                    let iy = (oy * s + dy + h - ph) % h;
                    for dx in 0..kw {
                        let ix = (ox * s + dx + w - pw) % w;
                        let xbase = ((n * h + iy) * w + ix) * cin;
                        let kbase = (dy * kw + dx) * cin * cout;
                        for ci in 0..cin {
                            let xv = xd[xbase + ci];
                            let mut acc = 0.0;
                            for co in 0..cout {
                                let gv = gyd[ybase + co];
                                acc += gv * kd[kbase + ci * cout + co];
                                gk.data_mut()[kbase + ci * cout + co] += gv * xv;
                            }
                            gx.data_mut()[xbase + ci] += acc;
                        }
                    }
                }
            }
        }
    }
    (gx, gk)
}

/// Plain (no-tape) transposed circular convolution.
pub fn conv2d_transpose_forward(x: &Tensor, k: &Tensor, stride: usize) -> Tensor {
    let sh = x.shape();
    assert_eq!(sh.len(), 4, "conv input must be NHWC, got {sh:?}");
    let (nb, h, w, cin) = (sh[0], sh[1], sh[2], sh[3]);
    let ks = k.shape();
    let (kh, kw, cout) = (ks[0], ks[1], ks[2]);
    assert_eq!(ks[3], cin, "kernel c_in {} vs input {}", ks[3], cin);
    assert!(kh % 2 == 1 && kw % 2 == 1, "kernel sides must be odd");
    let (oh, ow) = (h * stride, w * stride);
    let (ph, pw) = (kh / 2, kw / 2);
    let mut y = Tensor::zeros(&[nb, oh, ow, cout]);
    let xd = x.data();
    let kd = k.data();
    let yd = y.data_mut();
    for n in 0..nb {
        for iy in 0..h {
            for ix in 0..w {
                let xbase = ((n * h + iy) * w + ix) * cin;
                for dy in 0..kh {
                    let ty = (iy * stride + dy + oh - ph) % oh;
                    for dx in 0..kw {
                        let tx = (ix * stride + dx + ow - pw) % ow;
                        let ybase = ((n * oh + ty) * ow + tx) * cout;
                        let kbase = (dy * kw + dx) * cout * cin;
                        for co in 0..cout {
                            let krow = &kd[kbase + co * cin..kbase + (co + 1) * cin];
                            let mut acc = 0.0;
                            for (ci, &kv) in krow.iter().enumerate() {
                                acc += xd[xbase + ci] * kv;
                            }
                            yd[ybase + co] += acc;
                        }
                    }
                }
            }
        }
    }
    y
}

fn conv2d_transpose_backward(x: &Tensor, k: &Tensor, gy: &Tensor, stride: usize) -> (Tensor, Tensor) {
    let sh = x.shape();
    let (nb, h, w, cin) = (sh[0], sh[1], sh[2], sh[3]);
    let ks = k.shape();
    let (kh, kw, cout) = (ks[0], ks[1], ks[2]);
    let (oh, ow) = (h * stride, w * stride);
    let (ph, pw) = (kh / 2, kw / 2);
    let mut gx = Tensor::zeros(x.shape());
    let mut gk = Tensor::zeros(k.shape());
    let xd = x.data();
    let kd = k.data();
    let gyd = gy.data();
    for n in 0..nb {
        for iy in 0..h {
            for ix in 0..w {
                let xbase = ((n * h + iy) * w + ix) * cin;
                for dy in 0..kh {
                    let ty = (iy * stride + dy + oh - ph) % oh;
                    for dx in 0..kw {
                        let tx = (ix * stride + dx + ow - pw) % ow;
                        let ybase = ((n * oh + ty) * ow + tx) * cout;
                        let kbase = (dy * kw + dx) * cout * cin;
                        for co in 0..cout {
                            let gv = gyd[ybase + co];
                            for ci in 0..cin {
                                gx.data_mut()[xbase + ci] += gv * kd[kbase + co * cin + ci];
                                gk.data_mut()[kbase + co * cin + ci] += gv * xd[xbase + ci];
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gk)
}

/// Cotangent of A for Q = qr(A).Q with R discarded:
/// A_bar = Q tril(Q^T Q_bar - Q_bar^T Q, -1) R^{-T} + (I - Q Q^T) Q_bar R^{-T}.
fn qr_q_backward(q: &Tensor, r: &Tensor, gq: &Tensor) -> Tensor {
    let m = q.rows();
    let n = q.cols();
    let qtg = t_matmul(&t_transpose(q), gq);
    let mut skew = qtg.clone();
    // tril(M - M^T, -1)
    for i in 0..n {
        for j in 0..n {
            let v = if i > j { qtg.at2(i, j) - qtg.at2(j, i) } else { 0.0 };
            skew.data_mut()[i * n + j] = v;
        }
    }
    // X R^T = W  <=>  R X^T = W^T
    let x1 = t_transpose(&solve_upper_triangular(r, &t_transpose(&skew)).expect("R invertible"));
    let term1 = t_matmul(q, &x1);
    // (I - Q Q^T) Q_bar
    let proj = t_matmul(q, &qtg);
    let mut residual = gq.clone();
    for i in 0..m * n {
        residual.data_mut()[i] -= proj.data()[i];
    }
    let term2 = t_transpose(&solve_upper_triangular(r, &t_transpose(&residual)).expect("R invertible"));
    let mut out = term1;
    out.add_assign(&term2);
    out
}
