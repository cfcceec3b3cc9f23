//! Dense row-major float64 tensors, up to four axes.
//!
//! This is deliberately small: enough shape algebra for the networks in this
//! crate, nothing generic. All math that needs gradients lives on the tape
//! (see [`crate::nn::tape`]); the free functions here are the shared
//! numerical cores used by both forward and backward passes.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let count: usize = shape.iter().product();
        if shape.len() > 4 {
            return Err(Error::Config(format!("tensor rank {} exceeds 4", shape.len())));
        }
        if count != data.len() {
            return Err(Error::Config(format!(
                "shape {:?} wants {} values, got {}",
                shape,
                count,
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Scalar extraction; panics on non-singleton tensors.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() on shape {:?}", self.shape);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on shape {:?}", self.shape);
        self.shape[1]
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    /// Same data, new shape; element count must match.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "zip shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Tensor { shape: self.shape.clone(), data }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_in_place(&mut self, c: f64) {
        for v in &mut self.data {
            *v *= c;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// C = A B for row-major 2-D tensors, plain ikj loops.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, ka) = (a.rows(), a.cols());
    let (kb, n) = (b.rows(), b.cols());
    assert_eq!(ka, kb, "matmul inner dims {ka} vs {kb}");
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let arow = &ad[i * ka..(i + 1) * ka];
        let orow = &mut out[i * n..(i + 1) * n];
        for (k, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &bd[k * n..(k + 1) * n];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    Tensor { shape: vec![m, n], data: out }
}

pub fn transpose(a: &Tensor) -> Tensor {
    let (m, n) = (a.rows(), a.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Tensor { shape: vec![n, m], data: out }
}

/// Solve the upper-triangular system R X = B in place of a fresh copy.
pub fn solve_upper_triangular(r: &Tensor, b: &Tensor) -> Result<Tensor> {
    let n = r.rows();
    assert_eq!(r.cols(), n);
    assert_eq!(b.rows(), n);
    let cols = b.cols();
    let mut x = b.clone();
    for i in (0..n).rev() {
        let rii = r.at2(i, i);
        if rii.abs() < 1e-300 {
            return Err(Error::Numerics(format!("triangular solve hit zero pivot at {i}")));
        }
        for c in 0..cols {
            let mut acc = x.at2(i, c);
            for j in i + 1..n {
                acc -= r.at2(i, j) * x.at2(j, c);
            }
            x.data_mut()[i * cols + c] = acc / rii;
        }
    }
    Ok(x)
}

/// Cholesky factor L (lower) of a symmetric positive-definite matrix.
pub fn cholesky(s: &Tensor) -> Result<Tensor> {
    let n = s.rows();
    assert_eq!(s.cols(), n);
    let mut l = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..=i {
            let mut acc = s.at2(i, j);
            for k in 0..j {
                acc -= l.at2(i, k) * l.at2(j, k);
            }
            if i == j {
                if acc <= 0.0 {
                    return Err(Error::Numerics(format!(
                        "matrix not positive definite at pivot {i} ({acc:.3e})"
                    )));
                }
                l.data_mut()[i * n + j] = acc.sqrt();
            } else {
                l.data_mut()[i * n + j] = acc / l.at2(j, j);
            }
        }
    }
    Ok(l)
}

/// Solve S X = B given the Cholesky factor L of S.
pub fn cholesky_solve(l: &Tensor, b: &Tensor) -> Tensor {
    let n = l.rows();
    let cols = b.cols();
    let mut y = b.clone();
    // forward: L Y = B
    for i in 0..n {
        for c in 0..cols {
            let mut acc = y.at2(i, c);
            for k in 0..i {
                acc -= l.at2(i, k) * y.at2(k, c);
            }
            y.data_mut()[i * cols + c] = acc / l.at2(i, i);
        }
    }
    // backward: L^T X = Y
    for i in (0..n).rev() {
        for c in 0..cols {
            let mut acc = y.at2(i, c);
            for k in i + 1..n {
                acc -= l.at2(k, i) * y.at2(k, c);
            }
            y.data_mut()[i * cols + c] = acc / l.at2(i, i);
        }
    }
    y
}

/// Thin QR of an m x n matrix (m >= n) by Householder reflections, with the
/// sign convention that the diagonal of R is nonnegative. Returns (Q, R).
pub fn qr_thin(a: &Tensor) -> Result<(Tensor, Tensor)> {
    let (m, n) = (a.rows(), a.cols());
    if m < n {
        return Err(Error::Config(format!("thin QR needs rows >= cols, got {m}x{n}")));
    }
    let mut r = a.clone();
    let mut vs: Vec<Vec<f64>> = Vec::with_capacity(n);
    let scale = a.max_abs().max(1.0);
    for k in 0..n {
        // Householder vector for column k below the diagonal.
        let mut v = vec![0.0; m - k];
        let mut norm2 = 0.0;
        for i in k..m {
            let x = r.at2(i, k);
            v[i - k] = x;
            norm2 += x * x;
        }
        let norm = norm2.sqrt();
        if norm < 1e-12 * scale {
            return Err(Error::Numerics(format!(
                "rank-deficient matrix in QR (column {k} collinear with earlier columns)"
            )));
        }
        let alpha = if v[0] >= 0.0 { -norm } else { norm };
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 > 0.0 {
            // Apply H = I - 2 v v^T / |v|^2 to the trailing block of R.
            for j in k..n {
                let mut dot = 0.0;
                for i in k..m {
                    dot += v[i - k] * r.at2(i, j);
                }
                let f = 2.0 * dot / vnorm2;
                for i in k..m {
                    let val = r.at2(i, j) - f * v[i - k];
                    r.data_mut()[i * n + j] = val;
                }
            }
        }
        vs.push(v);
    }
    // Accumulate Q = H_0 H_1 ... H_{n-1} applied to the first n columns of I.
    let mut q = Tensor::zeros(&[m, n]);
    for j in 0..n {
        q.data_mut()[j * n + j] = 1.0;
    }
    for k in (0..n).rev() {
        let v = &vs[k];
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        for j in 0..n {
            let mut dot = 0.0;
            for i in k..m {
                dot += v[i - k] * q.at2(i, j);
            }
            let f = 2.0 * dot / vnorm2;
            for i in k..m {
                let val = q.at2(i, j) - f * v[i - k];
                q.data_mut()[i * n + j] = val;
            }
        }
    }
    // Fix signs so diag(R) >= 0.
    for k in 0..n {
        if r.at2(k, k) < 0.0 {
            for j in k..n {
                r.data_mut()[k * n + j] = -r.at2(k, j);
            }
            for i in 0..m {
                q.data_mut()[i * n + k] = -q.at2(i, k);
            }
        }
        // Zero the subdiagonal storage left by the reflections.
        for i in k + 1..n {
            r.data_mut()[i * n + k] = 0.0;
        }
    }
    let r_square = Tensor::new(&[n, n], (0..n * n).map(|i| r.data()[i]).collect())?;
    Ok((q, r_square))
}
