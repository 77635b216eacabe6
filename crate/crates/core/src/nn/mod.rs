//! Small dense networks with hand-written reverse-mode gradients.
//!
//! Layers are stored row-major (`weights[o * inputs + i]`). Hidden layers use
//! a rectifier; the output layer applies one of [`OutputActivation`].

mod adam;
mod checkpoint;
mod dist;

pub use adam::AdamState;
pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION,
};
pub use dist::{
    categorical_entropy, categorical_log_prob, categorical_probs, gaussian_entropy,
    gaussian_log_prob,
};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::RngStream;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("expected input of length {expected}, got {got}")]
    InputLength { expected: usize, got: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputActivation {
    Tanh,
    Linear,
    /// Normalized exponential over the output vector.
    Softmax,
}

impl OutputActivation {
    pub(crate) fn tag(self) -> u8 {
        match self {
            OutputActivation::Tanh => 0,
            OutputActivation::Linear => 1,
            OutputActivation::Softmax => 2,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(OutputActivation::Tanh),
            1 => Some(OutputActivation::Linear),
            2 => Some(OutputActivation::Softmax),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    fn affine(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.weights
                .chunks_exact(self.inputs)
                .zip(&self.biases)
                .map(|(row, b)| row.iter().zip(x).fold(*b, |acc, (w, xi)| acc + w * xi)),
        );
    }
}

/// Weights, biases and (for Gaussian actors) a state-independent log standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layer_sizes: Vec<usize>,
    pub layers: Vec<Layer>,
    pub output_activation: OutputActivation,
    pub log_std: Option<Vec<f64>>,
}

/// Intermediate values of one forward pass, needed by the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `inputs[l]` is the input to layer `l` (post-activation of layer `l - 1`).
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of every layer.
    pre: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

impl ForwardCache {
    /// Pre-activation of the output layer (logits for a softmax head).
    pub fn logits(&self) -> &[f64] {
        self.pre.last().expect("at least one layer")
    }
}

/// Accumulated gradients, shape-congruent with an [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
    pub log_std: Option<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| Layer::zeros(l.inputs, l.outputs))
                .collect(),
            log_std: params.log_std.as_ref().map(|s| vec![0.0; s.len()]),
        }
    }

    pub fn clear(&mut self) {
        for s in self.slices_mut() {
            s.fill(0.0);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|g| *g *= factor);
        }
    }

    pub fn norm(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.slices()
            .iter()
            .all(|s| s.iter().all(|g| g.is_finite()))
    }

    pub fn flat(&self) -> Vec<f64> {
        self.slices().concat()
    }

    /// Slices in canonical order: per layer weights then biases, then log-std.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(2 * self.layers.len() + 1);
        for l in &self.layers {
            out.push(&l.weights);
            out.push(&l.biases);
        }
        if let Some(s) = &self.log_std {
            out.push(s);
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(2 * self.layers.len() + 1);
        for l in &mut self.layers {
            out.push(&mut l.weights);
            out.push(&mut l.biases);
        }
        if let Some(s) = &mut self.log_std {
            out.push(s);
        }
        out
    }
}

/// Row-orthonormal (or column-orthonormal when `rows > cols`) matrix scaled by `gain`.
fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut RngStream) -> Vec<f64> {
    let (n, len) = if rows <= cols {
        (rows, cols)
    } else {
        (cols, rows)
    };
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v: Vec<f64> = (0..len).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    let mut w = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            w[r * cols + c] = gain
                * if rows <= cols {
                    basis[r][c]
                } else {
                    basis[c][r]
                };
        }
    }
    w
}

impl MlpParams {
    /// All-zero network.
    pub fn zeros(
        layer_sizes: &[usize],
        output_activation: OutputActivation,
        log_std: bool,
    ) -> Self {
        assert!(layer_sizes.len() >= 2, "need input and output sizes");
        let layers = layer_sizes
            .windows(2)
            .map(|w| Layer::zeros(w[0], w[1]))
            .collect();
        Self {
            layer_sizes: layer_sizes.to_vec(),
            layers,
            output_activation,
            log_std: log_std.then(|| vec![0.0; *layer_sizes.last().unwrap()]),
        }
    }

    /// Orthogonal initialization: gain `sqrt(2)` on hidden layers, `output_gain`
    /// on the last one, zero biases, zero log-std.
    pub fn init(
        layer_sizes: &[usize],
        output_activation: OutputActivation,
        log_std: bool,
        output_gain: f64,
        rng: &mut RngStream,
    ) -> Self {
        let mut params = Self::zeros(layer_sizes, output_activation, log_std);
        let last = params.layers.len() - 1;
        for (l, layer) in params.layers.iter_mut().enumerate() {
            let gain = if l == last { output_gain } else { 2f64.sqrt() };
            layer.weights = orthogonal(layer.outputs, layer.inputs, gain, rng);
        }
        params
    }

    pub fn input_len(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_len(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.slices()
            .iter()
            .all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// Same canonical order as [`Gradients::slices`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(2 * self.layers.len() + 1);
        for l in &self.layers {
            out.push(&l.weights);
            out.push(&l.biases);
        }
        if let Some(s) = &self.log_std {
            out.push(s);
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(2 * self.layers.len() + 1);
        for l in &mut self.layers {
            out.push(&mut l.weights);
            out.push(&mut l.biases);
        }
        if let Some(s) = &mut self.log_std {
            out.push(s);
        }
        out
    }

    pub fn flat(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<(), NnError> {
        if values.len() != self.num_params() {
            return Err(NnError::Shape(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                values.len()
            )));
        }
        let mut offset = 0;
        for s in self.slices_mut() {
            let n = s.len();
            s.copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, NnError> {
        Ok(self.forward_cached(input)?.output)
    }

    pub fn forward_cached(&self, input: &[f64]) -> Result<ForwardCache, NnError> {
        if input.len() != self.input_len() {
            return Err(NnError::InputLength {
                expected: self.input_len(),
                got: input.len(),
            });
        }
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n);
        let mut x = input.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::with_capacity(layer.outputs);
            layer.affine(&x, &mut z);
            let a = if l + 1 < n {
                z.iter().map(|v| v.max(0.0)).collect()
            } else {
                match self.output_activation {
                    OutputActivation::Tanh => z.iter().map(|v| v.tanh()).collect(),
                    OutputActivation::Linear => z.clone(),
                    OutputActivation::Softmax => categorical_probs(&z),
                }
            };
            inputs.push(std::mem::replace(&mut x, a));
            pre.push(z);
        }
        Ok(ForwardCache {
            inputs,
            pre,
            output: x,
        })
    }

    /// Gradients of a scalar loss whose derivative with respect to the network
    /// output is `upstream`, for a single input.
    pub fn backward(&self, input: &[f64], upstream: &[f64]) -> Result<Gradients, NnError> {
        let cache = self.forward_cached(input)?;
        let mut grads = Gradients::zeros_like(self);
        self.accumulate_backward(&cache, upstream, &mut grads)?;
        Ok(grads)
    }

    /// Adds the gradient contribution of one sample given `dL/d output`.
    pub fn accumulate_backward(
        &self,
        cache: &ForwardCache,
        upstream: &[f64],
        grads: &mut Gradients,
    ) -> Result<(), NnError> {
        if upstream.len() != self.output_len() {
            return Err(NnError::Shape(format!(
                "upstream gradient has length {}, output has {}",
                upstream.len(),
                self.output_len()
            )));
        }
        let out = &cache.output;
        let delta: Vec<f64> = match self.output_activation {
            OutputActivation::Tanh => upstream
                .iter()
                .zip(out)
                .map(|(g, y)| g * (1.0 - y * y))
                .collect(),
            OutputActivation::Linear => upstream.to_vec(),
            OutputActivation::Softmax => {
                let dot: f64 = upstream.iter().zip(out).map(|(g, p)| g * p).sum();
                upstream
                    .iter()
                    .zip(out)
                    .map(|(g, p)| p * (g - dot))
                    .collect()
            }
        };
        self.accumulate_backward_pre(cache, delta, grads)
    }

    /// Adds the gradient contribution of one sample given `dL/d pre-activation`
    /// of the output layer (e.g. with respect to the logits of a softmax head).
    pub fn accumulate_backward_pre(
        &self,
        cache: &ForwardCache,
        mut delta: Vec<f64>,
        grads: &mut Gradients,
    ) -> Result<(), NnError> {
        if delta.len() != self.output_len() || grads.layers.len() != self.layers.len() {
            return Err(NnError::Shape(
                "gradient buffers do not match the network".into(),
            ));
        }
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let x = &cache.inputs[l];
            let g = &mut grads.layers[l];
            for (o, &d) in delta.iter().enumerate() {
                g.biases[o] += d;
                if d != 0.0 {
                    let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    row.iter_mut().zip(x).for_each(|(w, xi)| *w += d * xi);
                }
            }
            if l == 0 {
                break;
            }
            let mut prev = vec![0.0; layer.inputs];
            for (o, &d) in delta.iter().enumerate() {
                if d != 0.0 {
                    let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    prev.iter_mut().zip(row).for_each(|(p, w)| *p += d * w);
                }
            }
            // Rectifier derivative of the previous layer.
            for (p, z) in prev.iter_mut().zip(&cache.pre[l - 1]) {
                if *z <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
        Ok(())
    }
}
