//! Dense multi-layer perceptrons with exact reverse-mode gradients.
//!
//! Networks are evaluated on row-major batches: an input of shape
//! `(batch, in_dim)` produces an output of shape `(batch, out_dim)`. The
//! single-vector entry points are thin wrappers over a batch of one.

mod adamw;
pub mod checkpoint;

pub use adamw::{adamw_step, AdamWConfig, AdamWState};

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{self, DspRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Relu => z.mapv(|v| v.max(0.0)),
            Activation::Identity => z.clone(),
        }
    }
}

/// One affine map followed by an elementwise activation. `weight` is
/// `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weight: Array2<f64>, bias: Array1<f64>, activation: Activation) -> Result<Self> {
        if weight.nrows() != bias.len() {
            return Err(Error::Shape(format!(
                "weight has {} rows but bias has {} entries",
                weight.nrows(),
                bias.len()
            )));
        }
        Ok(Self {
            weight: weight.as_standard_layout().into_owned(),
            bias,
            activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<DenseLayer>,
}

/// Values recorded by a forward pass and consumed by the matching backward
/// pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer; `inputs[0]` is the network input.
    pub inputs: Vec<Array2<f64>>,
    /// Affine outputs before the activation, one per layer.
    pub pre_activations: Vec<Array2<f64>>,
}

impl MlpParams {
    /// Validates the layer chain: consecutive dimensions agree and the last
    /// layer is linear.
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("a network needs at least one layer".into()));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Shape(format!(
                    "layer {k} outputs {} values but layer {} expects {}",
                    pair[0].out_dim(),
                    k + 1,
                    pair[1].in_dim()
                )));
            }
        }
        if layers.last().map(|l| l.activation) != Some(Activation::Identity) {
            return Err(Error::Config("the final layer must be linear".into()));
        }
        Ok(Self { layers })
    }

    /// Builds a ReLU network with a linear output layer. Weights are drawn
    /// uniformly from `±1/sqrt(fan_in)`, biases start at zero.
    pub fn init(layer_dims: &[usize], seed: u64) -> Result<Self> {
        let mut rng = rng::stream(seed, rng::tag::INIT, 0);
        Self::init_with_rng(layer_dims, &mut rng)
    }

    pub fn init_with_rng(layer_dims: &[usize], rng: &mut DspRng) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::Config(format!(
                "need at least an input and an output dimension, got {layer_dims:?}"
            )));
        }
        if layer_dims.contains(&0) {
            return Err(Error::Config(format!(
                "layer dimensions must be positive, got {layer_dims:?}"
            )));
        }
        let n_layers = layer_dims.len() - 1;
        let layers = layer_dims
            .windows(2)
            .enumerate()
            .map(|(k, dims)| {
                let (fan_in, fan_out) = (dims[0], dims[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weight = Array2::from_shape_simple_fn((fan_out, fan_in), || rng.random_range(-bound..=bound));
                let activation = if k + 1 == n_layers {
                    Activation::Identity
                } else {
                    Activation::Relu
                };
                DenseLayer {
                    weight,
                    bias: Array1::zeros(fan_out),
                    activation,
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// `[in, hidden.., out]`
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.in_dim()];
        dims.extend(self.layers.iter().map(DenseLayer::out_dim));
        dims
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn forward(&self, input: &Array2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        if input.ncols() != self.in_dim() {
            return Err(Error::Shape(format!(
                "network expects inputs of width {}, got {}",
                self.in_dim(),
                input.ncols()
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut x = input.to_owned();
        for layer in &self.layers {
            let z = x.dot(&layer.weight.t()) + &layer.bias;
            let a = layer.activation.apply(&z);
            inputs.push(x);
            pre_activations.push(z);
            x = a;
        }
        Ok((
            x,
            ForwardCache {
                inputs,
                pre_activations,
            },
        ))
    }

    /// Forward pass without keeping intermediate values.
    pub fn predict(&self, input: &Array2<f64>) -> Result<Array2<f64>> {
        if input.ncols() != self.in_dim() {
            return Err(Error::Shape(format!(
                "network expects inputs of width {}, got {}",
                self.in_dim(),
                input.ncols()
            )));
        }
        let mut x = input.to_owned();
        for layer in &self.layers {
            let z = x.dot(&layer.weight.t()) + &layer.bias;
            x = match layer.activation {
                Activation::Relu => z.mapv_into(|v| v.max(0.0)),
                Activation::Identity => z,
            };
        }
        Ok(x)
    }

    pub fn forward_one(&self, input: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        let x =
            Array2::from_shape_vec((1, input.len()), input.to_vec()).expect("a single row always has a valid shape");
        let (y, cache) = self.forward(&x)?;
        Ok((y.into_raw_vec_and_offset().0, cache))
    }

    /// Gradients of `sum(output ⊙ upstream)` with respect to every parameter
    /// and to the input, summed over the batch.
    pub fn backward(&self, cache: &ForwardCache, upstream: &Array2<f64>) -> Result<(MlpParams, Array2<f64>)> {
        if cache.inputs.len() != self.layers.len() || cache.pre_activations.len() != self.layers.len() {
            return Err(Error::Shape(format!(
                "cache holds {} layers but the network has {}",
                cache.inputs.len(),
                self.layers.len()
            )));
        }
        for (k, (layer, x)) in self.layers.iter().zip(&cache.inputs).enumerate() {
            if x.ncols() != layer.in_dim() || cache.pre_activations[k].ncols() != layer.out_dim() {
                return Err(Error::Shape(format!(
                    "cache entry {k} does not match layer {} -> {}",
                    layer.in_dim(),
                    layer.out_dim()
                )));
            }
        }
        let batch = cache.inputs[0].nrows();
        if upstream.dim() != (batch, self.out_dim()) {
            return Err(Error::Shape(format!(
                "upstream gradient has shape {:?}, expected ({batch}, {})",
                upstream.dim(),
                self.out_dim()
            )));
        }

        let mut grads: Vec<DenseLayer> = Vec::with_capacity(self.layers.len());
        let mut g = upstream.to_owned();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            if layer.activation == Activation::Relu {
                ndarray::Zip::from(&mut g)
                    .and(&cache.pre_activations[k])
                    .for_each(|g, &z| {
                        if z <= 0.0 {
                            *g = 0.0;
                        }
                    });
            }
            let d_weight = g.t().dot(&cache.inputs[k]).as_standard_layout().into_owned();
            let d_bias = g.sum_axis(Axis(0));
            g = g.dot(&layer.weight);
            grads.push(DenseLayer {
                weight: d_weight,
                bias: d_bias,
                activation: layer.activation,
            });
        }
        grads.reverse();
        Ok((MlpParams { layers: grads }, g))
    }

    pub fn backward_one(&self, cache: &ForwardCache, upstream: &[f64]) -> Result<(MlpParams, Vec<f64>)> {
        let g = Array2::from_shape_vec((1, upstream.len()), upstream.to_vec())
            .expect("a single row always has a valid shape");
        let (grads, input_grad) = self.backward(cache, &g)?;
        Ok((grads, input_grad.into_raw_vec_and_offset().0))
    }
}

/// A collection of parameter tensors that can be visited as flat slices in a
/// fixed order. Gradients and optimizer moments share the parameter type.
pub trait Tensors: Sized {
    fn slices(&self) -> Vec<&[f64]>;
    fn slices_mut(&mut self) -> Vec<&mut [f64]>;
    fn zeros_like(&self) -> Self;

    fn shapes_match(&self, other: &Self) -> bool {
        let a = self.slices();
        let b = other.slices();
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.len() == y.len())
    }

    fn max_abs_diff(&self, other: &Self) -> f64 {
        self.slices()
            .iter()
            .zip(other.slices())
            .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }
}

pub(crate) fn array_slice(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("parameter matrices are stored in standard layout")
}

pub(crate) fn array_slice_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut()
        .expect("parameter matrices are stored in standard layout")
}

impl Tensors for MlpParams {
    fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [array_slice(&l.weight), l.bias.as_slice().expect("contiguous bias")])
            .collect()
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    array_slice_mut(&mut l.weight),
                    l.bias.as_slice_mut().expect("contiguous bias"),
                ]
            })
            .collect()
    }

    fn zeros_like(&self) -> Self {
        MlpParams {
            layers: self
                .layers
                .iter()
                .map(|l| DenseLayer {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.len()),
                    activation: l.activation,
                })
                .collect(),
        }
    }
}
