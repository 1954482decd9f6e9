//! Six-layer fully connected projection network with hand-written backpropagation.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ProjectionError;
use crate::scalar::Scalar;

/// Number of hidden layers; with the output layer the network has six.
pub const HIDDEN_LAYERS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation.
    #[inline]
    fn derivative<T: Scalar>(self, pre: T) -> T {
        match self {
            Activation::Relu => {
                if pre > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                T::one() - t * t
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256, 128, 64, 32],
            activation: Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    /// `out x in`
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T = f64> {
    pub layers: Vec<Dense<T>>,
    pub activation: Activation,
    pub seed: u64,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    /// Input of every layer (`inputs[0]` is the batch itself).
    inputs: Vec<Array2<T>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Array2<T>>,
}

impl<T: Scalar> ForwardCache<T> {
    /// Sign pattern of the hidden pre-activations; used to detect kinks in gradient checks.
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.pre
            .iter()
            .flat_map(|p| p.iter().map(|&x| x > T::zero()))
            .collect()
    }
}

/// Parameter gradients, shaped like the network's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<Dense<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(net: &Network<T>) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| Dense {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                })
                .collect(),
        }
    }

    /// All entries in the same order as [`Network::parameters`].
    pub fn flatten(&self) -> Vec<T> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|x| x.is_finite()))
    }
}

pub fn init_network<T: Scalar>(input_dim: usize, config: &NetworkConfig, seed: u64) -> Result<Network<T>, ProjectionError> {
    if input_dim == 0 {
        return Err(ProjectionError::BadConfig("input dimension must be at least 1".into()));
    }
    if config.hidden.len() != HIDDEN_LAYERS {
        return Err(ProjectionError::BadConfig(format!(
            "expected {HIDDEN_LAYERS} hidden widths, got {}",
            config.hidden.len()
        )));
    }
    if config.hidden.contains(&0) {
        return Err(ProjectionError::BadConfig("hidden widths must be positive".into()));
    }
    let gain = match config.activation {
        Activation::Relu => 2f64.sqrt(),
        Activation::Tanh => 1.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut widths = vec![input_dim];
    widths.extend(&config.hidden);
    widths.push(2);
    let layers = widths
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = gain * (3.0 / fan_in as f64).sqrt();
            let bias_bound = 1.0 / (fan_in as f64).sqrt();
            let weight = Array2::from_shape_simple_fn((fan_out, fan_in), || T::lit(rng.random_range(-bound..bound)));
            let bias = Array1::from_shape_simple_fn(fan_out, || T::lit(rng.random_range(-bias_bound..bias_bound)));
            Dense { weight, bias }
        })
        .collect();
    Ok(Network {
        layers,
        activation: config.activation,
        seed,
    })
}

impl<T: Scalar> Network<T> {
    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Mutable references to every parameter, layer by layer, weights before biases.
    pub fn parameters(&mut self) -> impl Iterator<Item = &mut T> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|x| x.is_finite()))
    }

    /// Rows of `x` are points; returns `n x 2`.
    pub fn forward(&self, x: ArrayView2<T>) -> Array2<T> {
        let last = self.layers.len() - 1;
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weight.t());
            z += &layer.bias;
            if i < last {
                z.mapv_inplace(|v| self.activation.apply(v));
            }
            h = z;
        }
        h
    }

    pub fn forward_cached(&self, x: ArrayView2<T>) -> (Array2<T>, ForwardCache<T>) {
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weight.t());
            z += &layer.bias;
            inputs.push(h);
            if i < last {
                let a = z.mapv(|v| self.activation.apply(v));
                pre.push(z);
                h = a;
            } else {
                h = z;
            }
        }
        (h, ForwardCache { inputs, pre })
    }

    /// Backpropagates `grad_out` (`n x 2`, dLoss/dOutput) into parameter gradients.
    pub fn backward(&self, cache: &ForwardCache<T>, grad_out: ArrayView2<T>) -> Gradients<T> {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = grad_out.to_owned();
        for i in (0..self.layers.len()).rev() {
            let input = &cache.inputs[i];
            let weight_grad = delta.t().dot(input);
            let bias_grad = delta.sum_axis(Axis(0));
            grads.push(Dense {
                weight: weight_grad,
                bias: bias_grad,
            });
            if i > 0 {
                let mut upstream = delta.dot(&self.layers[i].weight);
                let act = self.activation;
                upstream.zip_mut_with(&cache.pre[i - 1], |g, &p| *g *= act.derivative(p));
                delta = upstream;
            }
        }
        grads.reverse();
        Gradients { layers: grads }
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    weight: l.weight.mapv(|x| U::lit(x.as_f64())),
                    bias: l.bias.mapv(|x| U::lit(x.as_f64())),
                })
                .collect(),
            activation: self.activation,
            seed: self.seed,
        }
    }
}

/// First-order optimizer with per-parameter adaptive step sizes (bias-corrected moments).
#[derive(Debug, Clone)]
pub struct Adam<T> {
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    step: i32,
    m: Vec<Dense<T>>,
    v: Vec<Dense<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(net: &Network<T>, lr: f64) -> Self {
        let zeros = Gradients::zeros_like(net).layers;
        Self {
            lr: T::lit(lr),
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, net: &mut Network<T>, grads: &Gradients<T>) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = T::one() - b1.powi(self.step);
        let c2 = T::one() - b2.powi(self.step);
        let (lr, eps) = (self.lr, self.eps);
        for (((layer, g), m), v) in net.layers.iter_mut().zip(&grads.layers).zip(&mut self.m).zip(&mut self.v) {
            let update = |p: &mut Array2<T>, g: &Array2<T>, m: &mut Array2<T>, v: &mut Array2<T>| {
                ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                    *m = b1 * *m + (T::one() - b1) * g;
                    *v = b2 * *v + (T::one() - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
            };
            update(&mut layer.weight, &g.weight, &mut m.weight, &mut v.weight);
            ndarray::Zip::from(&mut layer.bias)
                .and(&g.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (T::one() - b1) * g;
                    *v = b2 * *v + (T::one() - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}
