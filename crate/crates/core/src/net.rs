//! Feed-forward embedding network with a bias-free softmax classifier head.
//!
//! Layout: `x -> [Linear -> LeakyReLU] * hidden.len() -> Linear -> z -> C z -> softmax`.
//! The embedding layer has no activation; `C` is the `m x d_embed` classifier.
//! Forward and backward are written out by hand over [`Matrix`] batches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{softmax_rows, Matrix};
use crate::types::Sample;

fn default_slope() -> f64 {
    0.01
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub d_in: usize,
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub d_embed: usize,
    pub m: usize,
    /// Negative-side slope of the leaky ReLU.
    #[serde(default = "default_slope")]
    pub leaky_slope: f64,
    /// Reserved; dropout is not implemented and must stay `0.0`.
    #[serde(default)]
    pub dropout: f64,
}

impl NetConfig {
    pub fn new(d_in: usize, hidden: Vec<usize>, d_embed: usize, m: usize) -> Self {
        Self { d_in, hidden, d_embed, m, leaky_slope: default_slope(), dropout: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_embed == 0 || self.m == 0 || self.hidden.contains(&0) {
            return Err(Error::Config(format!("network dimensions must be >= 1: {self:?}")));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config(format!(
                "leaky_slope must lie in (0, 1), got {}",
                self.leaky_slope
            )));
        }
        if self.dropout != 0.0 {
            return Err(Error::Config("dropout is not supported".into()));
        }
        Ok(())
    }

    /// `(fan_out, fan_in)` of every linear layer, embedding layer last.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.d_in];
        dims.extend(&self.hidden);
        dims.push(self.d_embed);
        dims.windows(2).map(|w| (w[1], w[0])).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `fan_out x fan_in`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Network weights. Also used as the container for gradients and momentum buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub layers: Vec<Dense>,
    pub classifier: Matrix,
    pub leaky_slope: f64,
}

impl Params {
    pub fn zeros(config: &NetConfig) -> Self {
        let layers = config
            .layer_shapes()
            .into_iter()
            .map(|(out, inp)| Dense { weight: Matrix::zeros(out, inp), bias: vec![0.0; out] })
            .collect();
        Self {
            layers,
            classifier: Matrix::zeros(config.m, config.d_embed),
            leaky_slope: config.leaky_slope,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    weight: Matrix::zeros(l.weight.rows(), l.weight.cols()),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
            classifier: Matrix::zeros(self.classifier.rows(), self.classifier.cols()),
            leaky_slope: self.leaky_slope,
        }
    }

    /// Tensor names in storage order.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(2 * self.layers.len() + 1);
        for i in 0..self.layers.len() {
            names.push(format!("layers.{i}.weight"));
            names.push(format!("layers.{i}.bias"));
        }
        names.push("classifier.weight".into());
        names
    }

    /// Tensor dimensions in storage order.
    pub fn tensor_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        for l in &self.layers {
            shapes.push(vec![l.weight.rows(), l.weight.cols()]);
            shapes.push(vec![l.bias.len()]);
        }
        shapes.push(vec![self.classifier.rows(), self.classifier.cols()]);
        shapes
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.layers {
            out.push(l.weight.as_slice());
            out.push(&l.bias);
        }
        out.push(self.classifier.as_slice());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.layers {
            out.push(l.weight.as_mut_slice());
            out.push(&mut l.bias);
        }
        out.push(self.classifier.as_mut_slice());
        out
    }

    /// Learning-rate group of each tensor: the layer index, with the classifier last.
    pub fn tensor_groups(&self) -> Vec<usize> {
        let mut g: Vec<usize> = (0..self.layers.len()).flat_map(|i| [i, i]).collect();
        g.push(self.layers.len());
        g
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn add_scaled(&mut self, alpha: f64, other: &Params) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += alpha * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors().iter().flat_map(|t| t.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn same_shape(&self, other: &Params) -> bool {
        self.tensor_shapes() == other.tensor_shapes()
    }
}

/// He-scaled normal init: weights ~ N(0, 2 / fan_in), biases zero.
pub fn init_params(config: &NetConfig, seed: u64) -> Result<Params> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Params::zeros(config);
    let mut fill = |m: &mut Matrix| {
        let std = (2.0 / m.cols() as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        for v in m.as_mut_slice() {
            *v = normal.sample(&mut rng);
        }
    };
    for layer in &mut params.layers {
        fill(&mut layer.weight);
    }
    fill(&mut params.classifier);
    Ok(params)
}

/// Activations cached by [`forward`] for [`backward`].
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `activations[0]` is the input; `activations[l + 1]` is the output of layer `l`.
    pub activations: Vec<Matrix>,
    pub pre_activations: Vec<Matrix>,
    pub slope: f64,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Embeddings, `batch x d_embed`.
    pub embeddings: Matrix,
    pub logits: Matrix,
    /// Softmax of `logits`, `batch x m`.
    pub probs: Matrix,
    pub trace: ForwardTrace,
}

#[inline]
fn leaky(v: f64, slope: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        slope * v
    }
}

fn linear(input: &Matrix, layer: &Dense) -> Matrix {
    let mut out = input.matmul_t(&layer.weight);
    for r in 0..out.rows() {
        for (o, b) in out.row_mut(r).iter_mut().zip(&layer.bias) {
            *o += b;
        }
    }
    out
}

pub fn batch_matrix(samples: &[Sample]) -> Result<Matrix> {
    let d = samples.first().map(|s| s.x.len()).unwrap_or(0);
    Matrix::from_rows(samples.iter().map(|s| s.x.as_slice()), d)
}

pub fn forward(params: &Params, input: &Matrix) -> Result<ForwardOutput> {
    let slope = params.leaky_slope;
    if input.rows() == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    let expected = params.layers[0].weight.cols();
    if input.cols() != expected {
        return Err(Error::Shape(format!(
            "input dimension {} does not match network input {expected}",
            input.cols()
        )));
    }
    if !input.all_finite() {
        return Err(Error::NonFinite("network input".into()));
    }
    let n_layers = params.layers.len();
    let mut activations = vec![input.clone()];
    let mut pre_activations = Vec::with_capacity(n_layers);
    for (l, layer) in params.layers.iter().enumerate() {
        let pre = linear(activations.last().expect("non-empty"), layer);
        let act = if l + 1 < n_layers {
            let mut a = pre.clone();
            a.as_mut_slice().iter_mut().for_each(|v| *v = leaky(*v, slope));
            a
        } else {
            pre.clone()
        };
        pre_activations.push(pre);
        activations.push(act);
    }
    let embeddings = activations.last().expect("non-empty").clone();
    let logits = embeddings.matmul_t(&params.classifier);
    let probs = softmax_rows(&logits);
    Ok(ForwardOutput {
        embeddings,
        logits,
        probs,
        trace: ForwardTrace { activations, pre_activations, slope },
    })
}

/// Reverse pass. `grad_embeddings` and `grad_logits` are upstream gradients
/// with respect to `z` and to the classifier logits; either may be zero.
pub fn backward(
    params: &Params,
    trace: &ForwardTrace,
    grad_embeddings: &Matrix,
    grad_logits: &Matrix,
) -> Result<Params> {
    let n = trace.activations[0].rows();
    let z = trace.activations.last().expect("non-empty");
    if grad_embeddings.shape() != z.shape() {
        return Err(Error::Shape(format!(
            "embedding gradient {:?} vs embeddings {:?}",
            grad_embeddings.shape(),
            z.shape()
        )));
    }
    if grad_logits.shape() != (n, params.classifier.rows()) {
        return Err(Error::Shape(format!(
            "logit gradient {:?} vs expected ({n}, {})",
            grad_logits.shape(),
            params.classifier.rows()
        )));
    }
    if trace.pre_activations.len() != params.layers.len() {
        return Err(Error::Shape("trace does not match parameter depth".into()));
    }

    let mut grads = params.zeros_like();
    grads.classifier = grad_logits.t_matmul(z);

    let mut delta = grad_logits.matmul(&params.classifier);
    delta.add_scaled(1.0, grad_embeddings);

    for l in (0..params.layers.len()).rev() {
        let input = &trace.activations[l];
        grads.layers[l].weight = delta.t_matmul(input);
        let bias = &mut grads.layers[l].bias;
        for r in 0..delta.rows() {
            for (b, d) in bias.iter_mut().zip(delta.row(r)) {
                *b += d;
            }
        }
        if l > 0 {
            let mut prev = delta.matmul(&params.layers[l].weight);
            let pre = &trace.pre_activations[l - 1];
            for (g, p) in prev.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                if *p <= 0.0 {
                    *g *= trace.slope;
                }
            }
            delta = prev;
        }
    }
    Ok(grads)
}

/// Sign pattern of every hidden pre-activation. Used to recognise
/// finite-difference probes that cross a leaky-ReLU kink.
pub fn activation_pattern(trace: &ForwardTrace) -> Vec<bool> {
    let hidden = trace.pre_activations.len().saturating_sub(1);
    trace.pre_activations[..hidden]
        .iter()
        .flat_map(|m| m.as_slice().iter().map(|v| *v > 0.0))
        .collect()
}

/// SGD with momentum. Weight decay is coupled: `v <- mu v + g + wd w; w <- w - lr v`.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub velocity: Params,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Per-group learning-rate multipliers, one per layer plus one for the classifier.
    pub lr_multipliers: Vec<f64>,
}

impl OptimizerState {
    pub fn new(params: &Params, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            velocity: params.zeros_like(),
            lr,
            momentum,
            weight_decay,
            lr_multipliers: vec![1.0; params.layers.len() + 1],
        }
    }
}

pub fn sgd_step(params: &mut Params, grads: &Params, state: &mut OptimizerState) -> Result<()> {
    if !params.same_shape(grads) || !params.same_shape(&state.velocity) {
        return Err(Error::Shape("parameter, gradient and momentum shapes differ".into()));
    }
    if state.lr_multipliers.len() != params.layers.len() + 1 {
        return Err(Error::Shape(format!(
            "{} learning-rate multipliers for {} groups",
            state.lr_multipliers.len(),
            params.layers.len() + 1
        )));
    }
    let groups = params.tensor_groups();
    let (lr, mu, wd) = (state.lr, state.momentum, state.weight_decay);
    for (((w, g), v), group) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.velocity.tensors_mut())
        .zip(groups)
    {
        let step = lr * state.lr_multipliers[group];
        for ((wi, gi), vi) in w.iter_mut().zip(g).zip(v.iter_mut()) {
            *vi = mu * *vi + gi + wd * *wi;
            *wi -= step * *vi;
        }
    }
    Ok(())
}
