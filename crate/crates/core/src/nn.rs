//! Small dense-network toolkit: activations, initialisation, parameter
//! blocks, and an Adam optimiser over them.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    pub fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }

    /// Gain used for fan-in scaled uniform initialisation.
    pub fn init_gain(self) -> f64 {
        match self {
            Activation::Relu => std::f64::consts::SQRT_2,
            Activation::Tanh => 5.0 / 3.0,
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax with max subtraction.
pub fn softmax_in_place(values: &mut [f64]) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in values.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax(values: &[f64]) -> Vec<f64> {
    let mut out = values.to_vec();
    softmax_in_place(&mut out);
    out
}

/// Uniform in `[-b, b]` with `b = gain * sqrt(3 / fan_in)`.
pub fn kaiming_uniform(rows: usize, cols: usize, gain: f64, rng: &mut impl Rng) -> Array2<f64> {
    let bound = gain * (3.0 / cols.max(1) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..=bound))
}

pub fn uniform_bias(len: usize, fan_in: usize, rng: &mut impl Rng) -> Array1<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Array1::from_shape_fn(len, |_| rng.random_range(-bound..=bound))
}

/// Named flat views over every trainable array of a parameter set.
///
/// `blocks` and `blocks_mut` must list the same blocks in the same order.
pub trait Params {
    fn blocks(&self) -> Vec<(String, &[f64])>;
    fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])>;

    fn n_params(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    fn fill(&mut self, value: f64) {
        for (_, b) in self.blocks_mut() {
            b.fill(value);
        }
    }

    /// Fails with the name of the first block holding a NaN or infinity.
    fn check_finite(&self) -> Result<()> {
        for (name, b) in self.blocks() {
            if b.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(name));
            }
        }
        Ok(())
    }

    fn sq_norm(&self) -> f64 {
        self.blocks().iter().flat_map(|(_, b)| b.iter()).map(|x| x * x).sum()
    }

    fn scale(&mut self, factor: f64) {
        for (_, b) in self.blocks_mut() {
            b.iter_mut().for_each(|x| *x *= factor);
        }
    }

    /// Flattened copy in block order.
    fn to_flat(&self) -> Vec<f64> {
        self.blocks().iter().flat_map(|(_, b)| b.iter().copied()).collect()
    }
}

/// Flat view helper for standard-layout arrays.
pub(crate) fn flat<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> &[f64] {
    a.as_slice().expect("parameter arrays are standard layout")
}

pub(crate) fn flat_mut<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
    a.as_slice_mut().expect("parameter arrays are standard layout")
}

/// Rescale `grads` so their global L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_grad_norm<P: Params>(grads: &mut P, max_norm: f64) -> f64 {
    let norm = grads.sq_norm().sqrt();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are created on the first step
/// and must keep the shape of the parameters they were created for.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Adam {
        Adam {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn with_lr(lr: f64) -> Adam {
        Adam::new(AdamConfig {
            lr,
            ..Default::default()
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// `grads` must list blocks of the same sizes in the same order as `params`.
    pub fn step<P: Params, G: Params>(&mut self, params: &mut P, grads: &G) {
        let grads = grads.blocks();
        let mut blocks = params.blocks_mut();
        if self.m.is_empty() {
            self.m = blocks.iter().map(|(_, b)| vec![0.0; b.len()]).collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), blocks.len(), "optimizer state does not match parameters");
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (k, ((_, p), (_, g))) in blocks.iter_mut().zip(&grads).enumerate() {
            assert_eq!(p.len(), g.len(), "gradient block size differs from parameter block");
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for j in 0..p.len() {
                let gj = g[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}
