//! Two-dimensional FFT helpers on square grids, built on rustfft's 1-D plans.
//!
//! Grid fields are real `Array2<f64>` indexed `[iy, ix]` on the periodic
//! square `[0, 2pi)^2`. Spectral fields are full complex `Array2<Complex64>`
//! indexed `[iky, ikx]` where index `j` carries integer wavenumber `j` for
//! `j <= n/2` and `j - n` above. The forward transform is unnormalized; the
//! inverse divides by `n^2`.

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

pub struct Fft2 {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    pub fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Fft2 {
            n,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    fn transform_rows(&self, a: &mut Array2<Complex64>, forward: bool) {
        let plan = if forward { &self.fwd } else { &self.inv };
        for mut row in a.rows_mut() {
            let slice = row.as_slice_mut().expect("rows of a standard-layout array are contiguous");
            plan.process(slice);
        }
    }

    fn transform_2d(&self, a: &mut Array2<Complex64>, forward: bool) {
        self.transform_rows(a, forward);
        let mut t = a.t().as_standard_layout().into_owned();
        self.transform_rows(&mut t, forward);
        *a = t.t().as_standard_layout().into_owned();
    }

    /// Real grid field to spectral coefficients.
    pub fn forward(&self, grid: &Array2<f64>) -> Array2<Complex64> {
        let mut a = grid.mapv(|v| Complex64::new(v, 0.0));
        self.transform_2d(&mut a, true);
        a
    }

    /// Spectral coefficients to a real grid field (real part of the inverse
    /// transform, scaled by 1/n^2). For conjugate-symmetric input the
    /// discarded imaginary part is round-off; `imag_residue` measures it.
    pub fn inverse(&self, spec: &Array2<Complex64>) -> Array2<f64> {
        let mut a = spec.clone();
        self.transform_2d(&mut a, false);
        let scale = 1.0 / (self.n * self.n) as f64;
        a.mapv(|v| v.re * scale)
    }

    /// Largest |imaginary part| of the inverse transform, for reality checks.
    pub fn imag_residue(&self, spec: &Array2<Complex64>) -> f64 {
        let mut a = spec.clone();
        self.transform_2d(&mut a, false);
        let scale = 1.0 / (self.n * self.n) as f64;
        a.iter().map(|v| (v.im * scale).abs()).fold(0.0, f64::max)
    }
}

/// Integer wavenumbers in FFT storage order: 0, 1, ..., n/2, -(n/2-1), ..., -1.
pub fn wavenumbers(n: usize) -> Vec<f64> {
    (0..n)
        .map(|j| if j <= n / 2 { j as f64 } else { j as f64 - n as f64 })
        .collect()
}

/// 2/3-rule mask: 1 where max(|kx|, |ky|) <= floor(n/3), else 0.
pub fn dealias_mask(n: usize) -> Array2<f64> {
    let k = wavenumbers(n);
    let cut = (n / 3) as f64;
    Array2::from_shape_fn((n, n), |(iy, ix)| {
        if k[ix].abs() <= cut && k[iy].abs() <= cut {
            1.0
        } else {
            0.0
        }
    })
}

/// Pointwise multiply a spectral field by a real mask or factor array.
pub fn apply_real_factor(spec: &mut Array2<Complex64>, factor: &Array2<f64>) {
    ndarray::Zip::from(spec).and(factor).for_each(|s, &f| *s *= f);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_of(n: usize, f: impl Fn(f64, f64) -> f64) -> Array2<f64> {
        let dx = 2.0 * std::f64::consts::PI / n as f64;
        Array2::from_shape_fn((n, n), |(iy, ix)| f(ix as f64 * dx, iy as f64 * dx))
    }

    #[test]
    fn roundtrip_is_identity() {
        let n = 32;
        let fft = Fft2::new(n);
        let g = grid_of(n, |x, y| (x.sin() + (2.0 * y).cos()) * 1.7 + 0.3);
        let back = fft.inverse(&fft.forward(&g));
        for (a, b) in g.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-12, "roundtrip mismatch: {a} vs {b}");
        }
    }

    #[test]
    fn single_mode_lands_on_expected_coefficient() {
        let n = 16;
        let fft = Fft2::new(n);
        // cos(3x) has coefficients n^2/2 at (kx, ky) = (+-3, 0).
        let g = grid_of(n, |x, _| (3.0 * x).cos());
        let s = fft.forward(&g);
        let expect = (n * n) as f64 / 2.0;
        assert!((s[[0, 3]].re - expect).abs() < 1e-9);
        assert!((s[[0, n - 3]].re - expect).abs() < 1e-9);
        let energy_elsewhere: f64 = s
            .indexed_iter()
            .filter(|((iy, ix), _)| !(*iy == 0 && (*ix == 3 || *ix == n - 3)))
            .map(|(_, v)| v.norm())
            .sum();
        assert!(energy_elsewhere < 1e-8);
    }

    #[test]
    fn real_input_gives_tiny_imag_residue() {
        let n = 24;
        let fft = Fft2::new(n);
        let g = grid_of(n, |x, y| (x + 0.5).sin() * (2.0 * y).cos());
        let s = fft.forward(&g);
        assert!(fft.imag_residue(&s) < 1e-12);
    }

    #[test]
    fn wavenumber_order_matches_fft_layout() {
        assert_eq!(wavenumbers(8), vec![0.0, 1.0, 2.0, 3.0, 4.0, -3.0, -2.0, -1.0]);
    }

    #[test]
    fn dealias_mask_cuts_above_third() {
        let n = 32; // floor(32/3) = 10
        let m = dealias_mask(n);
        let k = wavenumbers(n);
        for ((iy, ix), v) in m.indexed_iter() {
            let keep = k[ix].abs() <= 10.0 && k[iy].abs() <= 10.0;
            assert_eq!(*v, if keep { 1.0 } else { 0.0 });
        }
    }
}
