//! Named parameter sets and the few layer shapes the models need.
//!
//! Parameters live in a [`ParamSet`] (name -> tensor, sorted); each training
//! step binds them onto a fresh tape with [`ParamSet::bind`], applies layers
//! through the bound handles, and reads gradients back out by name. Keeping
//! the binding explicit makes every step's graph self-contained.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::nn::tape::{Grads, Tape, Var};
use crate::nn::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    map: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        assert!(
            self.map.insert(name.to_string(), value).is_none(),
            "parameter {name} registered twice"
        );
    }

    pub fn set(&mut self, name: &str, value: Tensor) {
        self.map.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::Format(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn value_count(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(Tensor::all_finite)
    }

    /// Count of values whose names start with `prefix`.
    pub fn value_count_under(&self, prefix: &str) -> usize {
        self.map
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundParams<'t> {
        let vars = self.map.iter().map(|(k, v)| (k.clone(), tape.leaf(v.clone()))).collect();
        BoundParams { vars }
    }
}

pub struct BoundParams<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> BoundParams<'t> {
    pub fn var(&self, name: &str) -> Var<'t> {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    /// Collect gradients for every bound parameter, keyed by name.
    pub fn gradients(&self, grads: &Grads) -> BTreeMap<String, Tensor> {
        self.vars.iter().map(|(k, v)| (k.clone(), grads.of(*v).clone())).collect()
    }
}

fn uniform_tensor(shape: &[usize], bound: f64, rng: &mut ChaCha12Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-bound..bound)).collect()).unwrap()
}

/// Dense layer parameters `{name}.w` [d_in, d_out] and `{name}.b` [d_out],
/// both initialized uniformly at +-1/sqrt(d_in).
pub fn init_linear(params: &mut ParamSet, name: &str, d_in: usize, d_out: usize, rng: &mut ChaCha12Rng) {
    let bound = 1.0 / (d_in as f64).sqrt();
    params.insert(&format!("{name}.w"), uniform_tensor(&[d_in, d_out], bound, rng));
    params.insert(&format!("{name}.b"), uniform_tensor(&[d_out], bound, rng));
}

pub fn linear<'t>(x: Var<'t>, p: &BoundParams<'t>, name: &str) -> Var<'t> {
    x.matmul(p.var(&format!("{name}.w"))).add_bias(p.var(&format!("{name}.b")))
}

/// Convolution parameters `{name}.k` and channel bias `{name}.b`. The kernel
/// layout matches [`Var::conv2d`] ([kh,kw,c_in,c_out]) or
/// [`Var::conv2d_transpose`] ([kh,kw,c_out,c_in]) depending on use;
/// `fan_in` decides the init scale either way.
pub fn init_conv(
    params: &mut ParamSet,
    name: &str,
    shape: [usize; 4],
    fan_in: usize,
    bias_len: usize,
    rng: &mut ChaCha12Rng,
) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    params.insert(&format!("{name}.k"), uniform_tensor(&shape, bound, rng));
    params.insert(&format!("{name}.b"), uniform_tensor(&[bias_len], bound, rng));
}

fn add_channel_bias<'t>(y: Var<'t>, bias: Var<'t>) -> Var<'t> {
    let sh = y.shape();
    let (n, h, w, c) = (sh[0], sh[1], sh[2], sh[3]);
    y.reshape(&[n * h * w, c]).add_bias(bias).reshape(&[n, h, w, c])
}

pub fn conv<'t>(x: Var<'t>, p: &BoundParams<'t>, name: &str, stride: usize) -> Var<'t> {
    add_channel_bias(x.conv2d(p.var(&format!("{name}.k")), stride), p.var(&format!("{name}.b")))
}

pub fn conv_transpose<'t>(x: Var<'t>, p: &BoundParams<'t>, name: &str, stride: usize) -> Var<'t> {
    add_channel_bias(
        x.conv2d_transpose(p.var(&format!("{name}.k")), stride),
        p.var(&format!("{name}.b")),
    )
}

/// Register a tanh MLP `{name}.0 .. {name}.{L-1}` over the given layer sizes.
pub fn init_mlp(params: &mut ParamSet, name: &str, sizes: &[usize], rng: &mut ChaCha12Rng) {
    assert!(sizes.len() >= 2, "mlp needs at least input and output sizes");
    for i in 0..sizes.len() - 1 {
        init_linear(params, &format!("{name}.{i}"), sizes[i], sizes[i + 1], rng);
    }
}

/// Apply the MLP registered by [`init_mlp`]: tanh between layers, linear head.
pub fn mlp<'t>(mut x: Var<'t>, p: &BoundParams<'t>, name: &str, layer_count: usize) -> Var<'t> {
    for i in 0..layer_count {
        x = linear(x, p, &format!("{name}.{i}"));
        if i + 1 < layer_count {
            x = x.tanh();
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::check::{fd_directional, relative_error};
    use crate::rng::stream_rng;

    #[test]
    fn bound_parameters_receive_gradients_by_name() {
        let mut params = ParamSet::new();
        let mut rng = stream_rng(1, &[0x11]);
        init_linear(&mut params, "head", 3, 2, &mut rng);
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let x = tape.leaf(Tensor::new(&[4, 3], (0..12).map(|i| i as f64 * 0.1).collect()).unwrap());
        let loss = linear(x, &bound, "head").mul(linear(x, &bound, "head")).mean_all();
        let grads = bound.gradients(&tape.backward(loss));
        assert_eq!(grads.len(), 2);
        assert!(grads["head.w"].max_abs() > 0.0);
        assert!(grads["head.b"].max_abs() > 0.0);
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let mut params = ParamSet::new();
        let mut rng = stream_rng(2, &[0x12]);
        init_mlp(&mut params, "f", &[4, 8, 3], &mut rng);
        let x_in = Tensor::new(&[2, 4], (0..8).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();

        let run = |ps: &ParamSet| -> f64 {
            let tape = Tape::new();
            let bound = ps.bind(&tape);
            let x = tape.leaf(x_in.clone());
            mlp(x, &bound, "f", 2).mul(mlp(x, &bound, "f", 2)).sum_all().item()
        };

        let tape = Tape::new();
        let bound = params.bind(&tape);
        let x = tape.leaf(x_in.clone());
        let loss = mlp(x, &bound, "f", 2).mul(mlp(x, &bound, "f", 2)).sum_all();
        let grads = bound.gradients(&tape.backward(loss));

        let mut dir_rng = stream_rng(3, &[0x13]);
        let names: Vec<String> = params.names().cloned().collect();
        for _ in 0..3 {
            let dirs: BTreeMap<String, Tensor> = names
                .iter()
                .map(|n| {
                    let t = params.get(n).unwrap();
                    let mut d = Tensor::zeros(t.shape());
                    for v in d.data_mut() {
                        *v = dir_rng.random_range(-1.0..1.0);
                    }
                    (n.clone(), d)
                })
                .collect();
            let analytic: f64 = names
                .iter()
                .map(|n| {
                    grads[n].data().iter().zip(dirs[n].data()).map(|(g, d)| g * d).sum::<f64>()
                })
                .sum();
            let flat_inputs: Vec<Tensor> = names.iter().map(|n| params.get(n).unwrap().clone()).collect();
            let flat_dirs: Vec<Tensor> = names.iter().map(|n| dirs[n].clone()).collect();
            let numeric = fd_directional(
                |perturbed| {
                    let mut ps = params.clone();
                    for (n, t) in names.iter().zip(perturbed) {
                        ps.set(n, t.clone());
                    }
                    Ok(run(&ps))
                },
                &flat_inputs,
                &flat_dirs,
                1e-5,
            )
            .unwrap();
            assert!(relative_error(analytic, numeric) < 1e-6);
        }
    }

    #[test]
    fn conv_layer_bias_broadcasts_over_space() {
        let mut params = ParamSet::new();
        let mut rng = stream_rng(4, &[0x14]);
        init_conv(&mut params, "c", [3, 3, 1, 2], 9, 2, &mut rng);
        // zero kernel isolates the bias path
        params.set("c.k", Tensor::zeros(&[3, 3, 1, 2]));
        params.set("c.b", Tensor::new(&[2], vec![0.5, -1.5]).unwrap());
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let x = tape.leaf(Tensor::full(&[1, 4, 4, 1], 7.0));
        let y = conv(x, &bound, "c", 1).value();
        for px in 0..16 {
            assert_eq!(y.data()[px * 2], 0.5);
            assert_eq!(y.data()[px * 2 + 1], -1.5);
        }
    }

    #[test]
    fn duplicate_registration_panics() {
        let mut params = ParamSet::new();
        params.insert("a", Tensor::scalar(1.0));
        let caught = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            params.insert("a", Tensor::scalar(2.0));
        }));
        assert!(caught.is_err());
    }
}
