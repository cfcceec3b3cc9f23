//! First-order adaptive-moment optimizer over named parameters.

use std::collections::BTreeMap;

use crate::nn::layers::ParamSet;
use crate::nn::tensor::Tensor;

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// Apply one update. Parameters without a gradient entry are left alone,
    /// so frozen leaves (normalization constants, calibrated noise) can live
    /// in the same set.
    pub fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Tensor>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let names: Vec<String> = grads.keys().cloned().collect();
        for name in names {
            let g = &grads[&name];
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for (mi, gi) in m.data_mut().iter_mut().zip(g.data()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
            }
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
            }
            let p = params.get_mut(&name).expect("gradient for unknown parameter");
            let (m, v) = (&self.m[&name], &self.v[&name]);
            for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                *pi -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tape::Tape;

    #[test]
    fn minimizes_a_quadratic_bowl() {
        let mut params = ParamSet::new();
        params.insert("x", Tensor::from_vec(vec![3.0, -2.0, 5.0]));
        let target = [1.0, 0.5, -4.0];
        let mut opt = Adam::new(0.05);
        for _ in 0..2000 {
            let tape = Tape::new();
            let bound = params.bind(&tape);
            let x = bound.var("x");
            let t = tape.leaf(Tensor::from_vec(target.to_vec()));
            let loss = x.sub(t).mul(x.sub(t)).sum_all();
            let grads = bound.gradients(&tape.backward(loss));
            opt.step(&mut params, &grads);
        }
        for (got, want) in params.get("x").unwrap().data().iter().zip(target) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn first_step_size_is_lr_per_coordinate() {
        // With fresh moments the bias-corrected update is lr * sign(g).
        let mut params = ParamSet::new();
        params.insert("x", Tensor::from_vec(vec![1.0, -1.0]));
        let mut grads = BTreeMap::new();
        grads.insert("x".to_string(), Tensor::from_vec(vec![0.3, -7.0]));
        let mut opt = Adam::new(1e-3);
        opt.step(&mut params, &grads);
        let x = params.get("x").unwrap();
        assert!((x.data()[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((x.data()[1] - (-1.0 + 1e-3)).abs() < 1e-9);
    }
}
