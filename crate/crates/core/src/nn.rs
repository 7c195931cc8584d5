//! Small multilayer perceptrons with a hand-written backward pass.
//!
//! Batches are row-major `(batch, features)` matrices. Weights are stored
//! `(in, out)` so a layer is `x.dot(w) + b`.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use crate::{Error, Result};

/// Anything that exposes its parameters (or gradients) as flat slices in a
/// fixed order.
pub trait ParamSet {
    fn slices(&self) -> Vec<&[f64]>;
    fn slices_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    fn to_flat(&self) -> Vec<f64> {
        self.slices().concat()
    }

    fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        let expected = self.num_params();
        if flat.len() != expected {
            return Err(Error::Arity { expected, got: flat.len() });
        }
        let mut offset = 0;
        for s in self.slices_mut() {
            s.copy_from_slice(&flat[offset..offset + s.len()]);
            offset += s.len();
        }
        Ok(())
    }

    fn all_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self { weight: Array2::zeros((n_in, n_out)), bias: Array1::zeros(n_out) }
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization.
    pub fn init<R: Rng + ?Sized>(n_in: usize, n_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (n_in as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((n_in, n_out), || rng.random_range(-bound..bound));
        let bias = Array1::from_shape_simple_fn(n_out, || rng.random_range(-bound..bound));
        Self { weight, bias }
    }

    pub fn n_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn n_out(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    /// Returns parameter gradients and the gradient with respect to `x`.
    pub fn backward(&self, x: &Array2<f64>, grad_out: &Array2<f64>) -> (LinearGrad, Array2<f64>) {
        // x^T g comes back column-major; parameters are kept row-major.
        let weight = x.t().dot(grad_out).as_standard_layout().into_owned();
        let grad = LinearGrad { weight, bias: grad_out.sum_axis(Axis(0)) };
        (grad, grad_out.dot(&self.weight.t()))
    }
}

impl ParamSet for Linear {
    fn slices(&self) -> Vec<&[f64]> {
        vec![self.weight.as_slice().unwrap(), self.bias.as_slice().unwrap()]
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.weight.as_slice_mut().unwrap(), self.bias.as_slice_mut().unwrap()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrad {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl ParamSet for LinearGrad {
    fn slices(&self) -> Vec<&[f64]> {
        vec![self.weight.as_slice().unwrap(), self.bias.as_slice().unwrap()]
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.weight.as_slice_mut().unwrap(), self.bias.as_slice_mut().unwrap()]
    }
}

/// Affine layers with rectified-linear activations between them. The last
/// layer is affine only unless `activate_output` is set.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activate_output: bool,
}

/// Intermediate values kept by [`Mlp::forward_batch`] for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrad {
    pub layers: Vec<LinearGrad>,
}

fn relu_inplace(x: &mut Array2<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

impl Mlp {
    /// `sizes` lists every layer width including input and output.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], activate_output: bool, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let layers = sizes.windows(2).map(|w| Linear::init(w[0], w[1], rng)).collect();
        Self { layers, activate_output }
    }

    pub fn zeros(sizes: &[usize], activate_output: bool) -> Self {
        let layers = sizes.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect();
        Self { layers, activate_output }
    }

    pub fn from_layers(layers: Vec<Linear>, activate_output: bool) -> Result<Self> {
        for pair in layers.windows(2) {
            if pair[0].n_out() != pair[1].n_in() {
                return Err(Error::Arity { expected: pair[0].n_out(), got: pair[1].n_in() });
            }
        }
        Ok(Self { layers, activate_output })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].n_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().n_out()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(Linear::n_out));
        s
    }

    fn activated(&self, layer: usize) -> bool {
        layer + 1 < self.layers.len() || self.activate_output
    }

    /// Single-input forward pass.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(Error::Arity { expected: self.input_dim(), got: input.len() });
        }
        let x = Array2::from_shape_vec((1, input.len()), input.to_vec()).expect("row vector");
        Ok(self.infer_batch(&x).into_raw_vec_and_offset().0)
    }

    pub fn infer_batch(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h);
            if self.activated(i) {
                relu_inplace(&mut h);
            }
        }
        h
    }

    pub fn forward_batch(&self, x: &Array2<f64>) -> (Array2<f64>, MlpCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h);
            inputs.push(h);
            h = z.clone();
            if self.activated(i) {
                relu_inplace(&mut h);
            }
            pre.push(z);
        }
        (h, MlpCache { inputs, pre })
    }

    pub fn backward(&self, cache: &MlpCache, grad_out: &Array2<f64>) -> (MlpGrad, Array2<f64>) {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = grad_out.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if self.activated(i) {
                g.zip_mut_with(&cache.pre[i], |gv, &z| {
                    if z <= 0.0 {
                        *gv = 0.0;
                    }
                });
            }
            let (lg, gin) = layer.backward(&cache.inputs[i], &g);
            grads.push(lg);
            g = gin;
        }
        grads.reverse();
        (MlpGrad { layers: grads }, g)
    }

    /// `(name, shape)` of every parameter slice, in [`ParamSet`] order.
    pub fn manifest(&self, prefix: &str) -> Vec<(String, Vec<usize>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (format!("{prefix}.{i}.weight"), vec![l.n_in(), l.n_out()]),
                    (format!("{prefix}.{i}.bias"), vec![l.n_out()]),
                ]
            })
            .collect()
    }
}

impl ParamSet for Mlp {
    fn slices(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| l.slices()).collect()
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(|l| l.slices_mut()).collect()
    }
}

impl ParamSet for MlpGrad {
    fn slices(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| l.slices()).collect()
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(|l| l.slices_mut()).collect()
    }
}

/// Adaptive moment estimation over a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, n_params: usize) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: vec![0.0; n_params], v: vec![0.0; n_params] }
    }

    /// One descent step along `grads`.
    pub fn step<P: ParamSet + ?Sized, G: ParamSet + ?Sized>(&mut self, params: &mut P, grads: &G) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut k = 0;
        for (p, g) in params.slices_mut().into_iter().zip(grads.slices()) {
            for (pv, &gv) in p.iter_mut().zip(g) {
                self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * gv;
                self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * gv * gv;
                *pv -= self.lr * (self.m[k] / bc1) / ((self.v[k] / bc2).sqrt() + self.eps);
                k += 1;
            }
        }
    }
}

/// `target <- tau * source + (1 - tau) * target`, elementwise.
pub fn polyak_update<P: ParamSet + ?Sized>(target: &mut P, source: &P, tau: f64) {
    for (t, s) in target.slices_mut().into_iter().zip(source.slices()) {
        for (tv, &sv) in t.iter_mut().zip(s) {
            *tv = tau * sv + (1.0 - tau) * *tv;
        }
    }
}

/// A named parameter array with its shape, used for checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Step used by [`grad_check`] for central differences.
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Compares an analytic gradient with central differences.
///
/// `f` returns the loss and its analytic gradient at the given parameters.
/// The result is `max_i |g_i - fd_i| / max(1, |fd_i|)`.
pub fn grad_check<F>(mut f: F, params: &[f64]) -> f64
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = f(params);
    assert_eq!(analytic.len(), params.len(), "gradient length must match parameters");
    let mut probe = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        probe[i] = params[i] + GRAD_CHECK_STEP;
        let up = f(&probe).0;
        probe[i] = params[i] - GRAD_CHECK_STEP;
        let down = f(&probe).0;
        probe[i] = params[i];
        let fd = (up - down) / (2.0 * GRAD_CHECK_STEP);
        worst = worst.max((analytic[i] - fd).abs() / fd.abs().max(1.0));
    }
    worst
}
