//! Small dense networks with hand-written reverse-mode gradients and Adam.
//!
//! Every network in the toolkit (actor, value critic, risk critic) is an
//! [`Mlp`]: fully connected layers with ReLU between them and either a linear
//! or a softmax head. Parameters live in one flat [`ParamVector`] so gradients,
//! optimizer moments and snapshots share a single layout:
//! for each layer, the `out x in` weight matrix in row-major order followed by
//! the `out` biases.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{check_dim, Error, Result};

/// Output head of an [`Mlp`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Linear,
    Softmax,
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Head::Linear => f.write_str("linear"),
            Head::Softmax => f.write_str("softmax"),
        }
    }
}

impl FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Head::Linear),
            "softmax" => Ok(Head::Softmax),
            other => Err(Error::Parse(format!("unknown head `{other}`"))),
        }
    }
}

/// Flat parameter (or gradient) storage with per-layer `(in, out)` shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    shapes: Vec<(usize, usize)>,
}

impl ParamVector {
    /// All-zero vector for the layer sizes `[in, hidden.., out]`.
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!(
                "layer sizes must list at least two positive entries, got {sizes:?}"
            )));
        }
        let shapes: Vec<(usize, usize)> = sizes.windows(2).map(|w| (w[0], w[1])).collect();
        let len = shapes.iter().map(|&(i, o)| (i + 1) * o).sum();
        Ok(Self { values: vec![0.0; len], shapes })
    }

    /// Zero vector with the same layout as `self`.
    pub fn zeros_like(&self) -> Self {
        Self { values: vec![0.0; self.values.len()], shapes: self.shapes.clone() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn shapes(&self) -> &[(usize, usize)] {
        &self.shapes
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Offset of layer `layer`'s weight block; its biases follow `in * out` later.
    pub fn layer_offset(&self, layer: usize) -> usize {
        self.shapes[..layer].iter().map(|&(i, o)| (i + 1) * o).sum()
    }

    pub fn fill(&mut self, value: f64) {
        self.values.iter_mut().for_each(|v| *v = value);
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &ParamVector) {
        debug_assert_eq!(self.values.len(), other.values.len());
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.values.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Rescales so the Euclidean norm is at most `max_norm`; returns the pre-clip norm.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.norm();
        if norm > max_norm && norm.is_finite() {
            self.scale(max_norm / norm);
        }
        norm
    }
}

/// Activations recorded by a forward pass, consumed by the backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Input to each layer (post-ReLU for hidden layers).
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each layer; the last entry holds the logits.
    pre: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    pub fn logits(&self) -> &[f64] {
        self.pre.last().expect("trace of a network with layers")
    }
}

/// Multi-layer perceptron with ReLU hidden layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    head: Head,
    params: ParamVector,
}

impl Mlp {
    /// Network with every weight and bias set to zero.
    pub fn zeros(sizes: &[usize], head: Head) -> Result<Self> {
        Ok(Self { sizes: sizes.to_vec(), head, params: ParamVector::zeros(sizes)? })
    }

    /// Weights and biases drawn uniformly from `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], head: Head, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(sizes, head)?;
        let shapes = net.params.shapes.clone();
        let mut offset = 0;
        for (fan_in, fan_out) in shapes {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n = (fan_in + 1) * fan_out;
            for v in &mut net.params.values[offset..offset + n] {
                *v = rng.random_range(-bound..=bound);
            }
            offset += n;
        }
        Ok(net)
    }

    pub fn from_params(sizes: &[usize], head: Head, params: ParamVector) -> Result<Self> {
        let expected = ParamVector::zeros(sizes)?;
        if expected.shapes != params.shapes {
            return Err(Error::Config(format!(
                "parameter shapes {:?} do not match layer sizes {sizes:?}",
                params.shapes
            )));
        }
        Ok(Self { sizes: sizes.to_vec(), head, params })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("non-empty sizes")
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(input)?.output)
    }

    /// Scalar output of a single-output network.
    pub fn scalar(&self, input: &[f64]) -> Result<f64> {
        check_dim(1, self.output_dim())?;
        Ok(self.forward(input)?[0])
    }

    pub fn forward_trace(&self, input: &[f64]) -> Result<Trace> {
        check_dim(self.input_dim(), input.len())?;
        let n_layers = self.params.shapes.len();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut pre = Vec::with_capacity(n_layers);
        let mut current = input.to_vec();
        for (layer, &(fan_in, fan_out)) in self.params.shapes.iter().enumerate() {
            let offset = self.params.layer_offset(layer);
            let weights = &self.params.values[offset..offset + fan_in * fan_out];
            let bias = &self.params.values[offset + fan_in * fan_out..offset + (fan_in + 1) * fan_out];
            let z: Vec<f64> = (0..fan_out)
                .map(|o| {
                    let row = &weights[o * fan_in..(o + 1) * fan_in];
                    row.iter().zip(&current).map(|(w, x)| w * x).sum::<f64>() + bias[o]
                })
                .collect();
            let next = if layer + 1 < n_layers { z.iter().map(|&v| v.max(0.0)).collect() } else { Vec::new() };
            inputs.push(current);
            pre.push(z);
            current = next;
        }
        let logits = pre.last().expect("at least one layer");
        let output = match self.head {
            Head::Linear => logits.clone(),
            Head::Softmax => softmax(logits),
        };
        Ok(Trace { inputs, pre, output })
    }

    /// Gradient of `output . output_grad` with respect to the parameters.
    pub fn backward(&self, input: &[f64], output_grad: &[f64]) -> Result<ParamVector> {
        let trace = self.forward_trace(input)?;
        let mut grad = self.params.zeros_like();
        self.accumulate_output_grad(&trace, output_grad, 1.0, &mut grad)?;
        Ok(grad)
    }

    /// Adds `scale * d(output . output_grad)/d params` into `grad`.
    pub fn accumulate_output_grad(
        &self,
        trace: &Trace,
        output_grad: &[f64],
        scale: f64,
        grad: &mut ParamVector,
    ) -> Result<()> {
        check_dim(self.output_dim(), output_grad.len())?;
        let logit_grad = match self.head {
            Head::Linear => output_grad.to_vec(),
            Head::Softmax => {
                let p = &trace.output;
                let inner: f64 = p.iter().zip(output_grad).map(|(a, b)| a * b).sum();
                p.iter().zip(output_grad).map(|(pi, gi)| pi * (gi - inner)).collect()
            }
        };
        self.accumulate_logit_grad(trace, &logit_grad, scale, grad)
    }

    /// Adds `scale * d(logits . logit_grad)/d params` into `grad`.
    pub fn accumulate_logit_grad(
        &self,
        trace: &Trace,
        logit_grad: &[f64],
        scale: f64,
        grad: &mut ParamVector,
    ) -> Result<()> {
        check_dim(self.output_dim(), logit_grad.len())?;
        check_dim(self.params.len(), grad.len())?;
        let mut delta: Vec<f64> = logit_grad.iter().map(|g| g * scale).collect();
        for layer in (0..self.params.shapes.len()).rev() {
            let (fan_in, fan_out) = self.params.shapes[layer];
            let offset = self.params.layer_offset(layer);
            let x = &trace.inputs[layer];
            {
                let g = &mut grad.values[offset..offset + (fan_in + 1) * fan_out];
                for o in 0..fan_out {
                    let d = delta[o];
                    if d != 0.0 {
                        for (gw, xi) in g[o * fan_in..(o + 1) * fan_in].iter_mut().zip(x) {
                            *gw += d * xi;
                        }
                    }
                    g[fan_in * fan_out + o] += d;
                }
            }
            if layer == 0 {
                break;
            }
            let weights = &self.params.values[offset..offset + fan_in * fan_out];
            let below = &trace.pre[layer - 1];
            let mut next = vec![0.0; fan_in];
            for o in 0..fan_out {
                let d = delta[o];
                if d != 0.0 {
                    for (n, w) in next.iter_mut().zip(&weights[o * fan_in..(o + 1) * fan_in]) {
                        *n += d * w;
                    }
                }
            }
            for (n, z) in next.iter_mut().zip(below) {
                if *z <= 0.0 {
                    *n = 0.0;
                }
            }
            delta = next;
        }
        Ok(())
    }

    /// Versioned text snapshot: a header, the layer sizes, then one value per line.
    pub fn to_snapshot(&self) -> String {
        let mut out = String::from("arcvc-mlp v1\n");
        out.push_str(&format!("head {}\n", self.head));
        let sizes: Vec<String> = self.sizes.iter().map(|s| s.to_string()).collect();
        out.push_str(&format!("sizes {}\n", sizes.join(" ")));
        for v in &self.params.values {
            out.push_str(&format!("{v}\n"));
        }
        out
    }

    pub fn from_snapshot(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("arcvc-mlp v1") {
            return Err(Error::Parse("missing `arcvc-mlp v1` header".into()));
        }
        let head = lines
            .next()
            .and_then(|l| l.strip_prefix("head "))
            .ok_or_else(|| Error::Parse("missing head line".into()))?
            .parse::<Head>()?;
        let sizes = lines
            .next()
            .and_then(|l| l.strip_prefix("sizes "))
            .ok_or_else(|| Error::Parse("missing sizes line".into()))?
            .split_whitespace()
            .map(|s| s.parse::<usize>().map_err(|e| Error::Parse(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let mut params = ParamVector::zeros(&sizes)?;
        let values = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.trim().parse::<f64>().map_err(|e| Error::Parse(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        check_dim(params.len(), values.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse("snapshot contains non-finite values".into()));
        }
        params.values = values;
        Self::from_params(&sizes, head, params)
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Hyperparameters of [`Adam`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// Bias-corrected Adam. [`Adam::step`] descends along the given gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self { config, m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamVector, grad: &ParamVector) -> Result<()> {
        check_dim(self.m.len(), params.len())?;
        check_dim(self.m.len(), grad.len())?;
        if !grad.is_finite() {
            return Err(Error::Training("non-finite gradient passed to Adam".into()));
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (((p, g), m), v) in
            params.values.iter_mut().zip(&grad.values).zip(&mut self.m).zip(&mut self.v)
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}
