//! Feedforward networks with cached forward passes and reverse-mode gradients.
//!
//! A [`FeedForwardNet`] can start backpropagation from a loss
//! ([`FeedForwardNet::backward_from_loss`]) or from an arbitrary gradient
//! injected at its output ([`FeedForwardNet::backward_from_gradient`]). The
//! second entry point is where an estimated `dL/dY_a` enters the read-in
//! network: the parameter gradients are then `dL/dY_a * dY_a/dtheta_a`, with the
//! second factor taken from the cached graph exactly.
//!
//! Parameter gradients accumulate across backward calls until
//! [`FeedForwardNet::zero_grads`].
//!
//! # Weight files
//!
//! ```text
//! bond-weights 1
//! layers <L>
//! <out> <in> <relu|tanh|identity>      (one line per layer)
//! <value>                              (one per line: each layer's weights
//!                                       row-major, then its bias)
//! ```
//!
//! Values are written with the shortest representation that round-trips, so
//! a reloaded network is bit-identical.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, t: &mut Tensor2) {
        match self {
            Activation::Relu => t.map_inplace(|v| v.max(0.0)),
            Activation::Tanh => t.map_inplace(f64::tanh),
            Activation::Identity => {}
        }
    }

    /// Multiplies `grad` in place by the activation derivative, written in
    /// terms of the activation's output.
    fn backprop(self, output: &Tensor2, grad: &mut Tensor2) {
        match self {
            Activation::Relu => {
                for (g, &o) in grad.data_mut().iter_mut().zip(output.data()) {
                    if o <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            Activation::Tanh => {
                for (g, &o) in grad.data_mut().iter_mut().zip(output.data()) {
                    *g *= 1.0 - o * o;
                }
            }
            Activation::Identity => {}
        }
    }

    fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Init {
    KaimingUniform,
    XavierUniform,
}

impl Init {
    /// Kaiming for ReLU stacks, Xavier otherwise.
    pub fn default_for(activation: Activation) -> Self {
        match activation {
            Activation::Relu => Init::KaimingUniform,
            _ => Init::XavierUniform,
        }
    }

    fn bound(self, fan_in: usize, fan_out: usize) -> f64 {
        match self {
            Init::KaimingUniform => (6.0 / fan_in as f64).sqrt(),
            Init::XavierUniform => (6.0 / (fan_in + fan_out) as f64).sqrt(),
        }
    }
}

/// Shape and activations of a dense stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<Init>,
}

impl NetSpec {
    pub fn new(input: usize, hidden: &[usize], output: usize, hidden_activation: Activation) -> Self {
        Self {
            input,
            hidden: hidden.to_vec(),
            output,
            hidden_activation,
            output_activation: Activation::Identity,
            init: None,
        }
    }

    pub fn with_output_activation(mut self, activation: Activation) -> Self {
        self.output_activation = activation;
        self
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input);
        w.extend_from_slice(&self.hidden);
        w.push(self.output);
        w
    }

    pub fn parameter_count(&self) -> usize {
        self.widths().windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    weights: Tensor2,
    bias: Vec<f64>,
    grad_weights: Tensor2,
    grad_bias: Vec<f64>,
    cached_input: Option<Tensor2>,
}

impl LinearLayer {
    pub fn new(weights: Tensor2, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(Error::shape(
                "LinearLayer::new",
                format!("bias has {} entries for {} outputs", bias.len(), weights.rows()),
            ));
        }
        Ok(Self {
            grad_weights: Tensor2::zeros(weights.rows(), weights.cols()),
            grad_bias: vec![0.0; bias.len()],
            weights,
            bias,
            cached_input: None,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn weights(&self) -> &Tensor2 {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn grad_weights(&self) -> &Tensor2 {
        &self.grad_weights
    }

    pub fn grad_bias(&self) -> &[f64] {
        &self.grad_bias
    }

    fn affine(&self, x: &Tensor2) -> Result<Tensor2> {
        let mut out = x.matmul_transb(&self.weights)?;
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(&self.bias) {
                *o += b;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct DenseLayer {
    linear: LinearLayer,
    activation: Activation,
    cached_output: Option<Tensor2>,
}

/// Mutable view of one parameter block and its gradient.
pub struct ParamGroup<'a> {
    pub values: &'a mut [f64],
    pub grads: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForwardNet {
    layers: Vec<DenseLayer>,
}

impl FeedForwardNet {
    pub fn new(spec: &NetSpec, rng: &mut Rng) -> Result<Self> {
        if spec.input == 0 || spec.output == 0 || spec.hidden.contains(&0) {
            return Err(Error::Parameter(format!("zero-width layer in {:?}", spec.widths())));
        }
        let init = spec.init.unwrap_or_else(|| Init::default_for(spec.hidden_activation));
        let widths = spec.widths();
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, pair)| {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                let bound = init.bound(fan_in, fan_out);
                let data = (0..fan_in * fan_out).map(|_| rng.uniform(-bound, bound)).collect();
                let weights = Tensor2::from_vec_unchecked(fan_out, fan_in, data);
                let activation = if i == last {
                    spec.output_activation
                } else {
                    spec.hidden_activation
                };
                Ok((weights, vec![0.0; fan_out], activation))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(layers)
    }

    /// Assembles a net from explicit `(weights out x in, bias, activation)` triples.
    pub fn from_layers(layers: Vec<(Tensor2, Vec<f64>, Activation)>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Parameter("network needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].0.rows() != pair[1].0.cols() {
                return Err(Error::shape(
                    "FeedForwardNet::from_layers",
                    format!(
                        "layer {i} outputs {} but layer {} expects {}",
                        pair[0].0.rows(),
                        i + 1,
                        pair[1].0.cols()
                    ),
                ));
            }
        }
        let layers = layers
            .into_iter()
            .map(|(w, b, activation)| {
                Ok(DenseLayer {
                    linear: LinearLayer::new(w, b)?,
                    activation,
                    cached_output: None,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].linear.in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].linear.out_dim()
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, i: usize) -> &LinearLayer {
        &self.layers[i].linear
    }

    pub fn activation(&self, i: usize) -> Activation {
        self.layers[i].activation
    }

    pub fn activations(&self) -> impl Iterator<Item = Activation> + '_ {
        self.layers.iter().map(|l| l.activation)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.linear.weights.len() + l.linear.bias.len())
            .sum()
    }

    fn check_input(&self, x: &Tensor2, op: &'static str) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape(
                op,
                format!("input has {} columns, network expects {}", x.cols(), self.input_dim()),
            ));
        }
        Ok(())
    }

    /// Forward pass that records every layer's input and output for a later
    /// backward call. A second forward overwrites the previous cache.
    pub fn forward(&mut self, x: &Tensor2) -> Result<Tensor2> {
        self.check_input(x, "forward")?;
        let mut h = x.clone();
        for layer in &mut self.layers {
            let mut out = layer.linear.affine(&h)?;
            layer.activation.apply(&mut out);
            layer.linear.cached_input = Some(h);
            layer.cached_output = Some(out.clone());
            h = out;
        }
        Ok(h)
    }

    /// Forward pass without touching the cache.
    pub fn predict(&self, x: &Tensor2) -> Result<Tensor2> {
        self.check_input(x, "predict")?;
        let mut h = x.clone();
        for layer in &self.layers {
            let mut out = layer.linear.affine(&h)?;
            layer.activation.apply(&mut out);
            h = out;
        }
        Ok(h)
    }

    /// [`predict`](Self::predict) plus which ReLU units were active, layer by
    /// layer. Finite differences are only meaningful while this pattern holds.
    pub fn predict_with_pattern(&self, x: &Tensor2) -> Result<(Tensor2, Vec<bool>)> {
        self.check_input(x, "predict_with_pattern")?;
        let mut pattern = Vec::new();
        let mut h = x.clone();
        for layer in &self.layers {
            let mut out = layer.linear.affine(&h)?;
            if layer.activation == Activation::Relu {
                pattern.extend(out.data().iter().map(|&z| z > 0.0));
            }
            layer.activation.apply(&mut out);
            h = out;
        }
        Ok((h, pattern))
    }

    /// `(weights, bias, activation)` per layer, as accepted by [`from_layers`](Self::from_layers).
    pub fn to_layers(&self) -> Vec<(Tensor2, Vec<f64>, Activation)> {
        self.layers
            .iter()
            .map(|l| (l.linear.weights.clone(), l.linear.bias.clone(), l.activation))
            .collect()
    }

    pub fn has_cache(&self) -> bool {
        self.layers.iter().all(|l| l.cached_output.is_some())
    }

    /// Output cached by the last [`forward`](Self::forward).
    pub fn cached_output(&self) -> Option<&Tensor2> {
        self.layers.last().and_then(|l| l.cached_output.as_ref())
    }

    /// Backprop of `loss(output, y_true)` with the loss mean-reduced over the
    /// batch. Returns `dL/d(input)`.
    pub fn backward_from_loss(&mut self, loss: &LossFn, y_true: &Tensor2) -> Result<Tensor2> {
        let output = self
            .cached_output()
            .ok_or(Error::State("backward called without a cached forward pass"))?;
        let upstream = loss.gradient(output, y_true)?;
        self.backward_from_gradient(&upstream)
    }

    /// Chains `upstream = dL/d(output)` through the cached graph, accumulating
    /// parameter gradients. Returns `dL/d(input)`.
    pub fn backward_from_gradient(&mut self, upstream: &Tensor2) -> Result<Tensor2> {
        if !self.has_cache() {
            return Err(Error::State("backward called without a cached forward pass"));
        }
        let out_shape = self.cached_output().map(Tensor2::shape).unwrap_or_default();
        if upstream.shape() != out_shape {
            return Err(Error::shape(
                "backward_from_gradient",
                format!("upstream {:?} vs output {:?}", upstream.shape(), out_shape),
            ));
        }
        let mut grad = upstream.clone();
        for layer in self.layers.iter_mut().rev() {
            let output = layer.cached_output.as_ref().expect("cache checked above");
            layer.activation.backprop(output, &mut grad);
            let input = layer.linear.cached_input.as_ref().expect("cache checked above");
            let gw = grad.matmul_transa(input)?;
            layer.linear.grad_weights.add_assign(&gw)?;
            for (gb, g) in layer.linear.grad_bias.iter_mut().zip(grad.column_sums()) {
                *gb += g;
            }
            grad = grad.matmul(&layer.linear.weights)?;
        }
        Ok(grad)
    }

    /// Vector-Jacobian product at the input, `upstream^T * d(output)/d(x)`,
    /// computed on a private forward pass. Parameters, gradients and the cache
    /// are untouched.
    pub fn input_gradient(&self, x: &Tensor2, upstream: &Tensor2) -> Result<Tensor2> {
        self.check_input(x, "input_gradient")?;
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let mut out = layer.linear.affine(&h)?;
            layer.activation.apply(&mut out);
            outputs.push(out.clone());
            h = out;
        }
        if upstream.shape() != h.shape() {
            return Err(Error::shape(
                "input_gradient",
                format!("upstream {:?} vs output {:?}", upstream.shape(), h.shape()),
            ));
        }
        let mut grad = upstream.clone();
        for (layer, out) in self.layers.iter().zip(&outputs).rev() {
            layer.activation.backprop(out, &mut grad);
            grad = grad.matmul(&layer.linear.weights)?;
        }
        Ok(grad)
    }

    pub fn zero_grads(&mut self) {
        for layer in &mut self.layers {
            layer.linear.grad_weights.map_inplace(|_| 0.0);
            layer.linear.grad_bias.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn detach_cache(&mut self) {
        for layer in &mut self.layers {
            layer.linear.cached_input = None;
            layer.cached_output = None;
        }
    }

    pub fn param_groups(&mut self) -> Vec<ParamGroup<'_>> {
        let mut groups = Vec::with_capacity(self.layers.len() * 2);
        for layer in &mut self.layers {
            let l = &mut layer.linear;
            groups.push(ParamGroup {
                values: l.weights.data_mut(),
                grads: l.grad_weights.data(),
            });
            groups.push(ParamGroup {
                values: &mut l.bias,
                grads: &l.grad_bias,
            });
        }
        groups
    }

    /// All parameters in layer order (weights row-major, then bias).
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for layer in &self.layers {
            out.extend_from_slice(layer.linear.weights.data());
            out.extend_from_slice(&layer.linear.bias);
        }
        out
    }

    pub fn grads_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for layer in &self.layers {
            out.extend_from_slice(layer.linear.grad_weights.data());
            out.extend_from_slice(&layer.linear.grad_bias);
        }
        out
    }

    pub fn set_params_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.parameter_count() {
            return Err(Error::shape(
                "set_params_flat",
                format!("{} values for {} parameters", values.len(), self.parameter_count()),
            ));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            let w = layer.linear.weights.data_mut();
            w.copy_from_slice(&values[offset..offset + w.len()]);
            offset += w.len();
            let b = &mut layer.linear.bias;
            let n = b.len();
            b.copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Mutable access to one parameter in [`params_flat`](Self::params_flat) order.
    pub fn param_mut(&mut self, index: usize) -> Option<&mut f64> {
        let mut i = index;
        for layer in &mut self.layers {
            let w = layer.linear.weights.data_mut();
            if i < w.len() {
                return Some(&mut w[i]);
            }
            i -= w.len();
            if i < layer.linear.bias.len() {
                return Some(&mut layer.linear.bias[i]);
            }
            i -= layer.linear.bias.len();
        }
        None
    }

    /// SHA-256 over the parameter bit patterns.
    pub fn digest(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for v in self.params_flat() {
            hasher.update(v.to_bits().to_le_bytes());
        }
        hasher.finalize().into()
    }

    pub fn write_weights(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "bond-weights 1")?;
        writeln!(w, "layers {}", self.layers.len())?;
        for layer in &self.layers {
            writeln!(
                w,
                "{} {} {}",
                layer.linear.out_dim(),
                layer.linear.in_dim(),
                layer.activation.name()
            )?;
        }
        for v in self.params_flat() {
            writeln!(w, "{v:?}")?;
        }
        Ok(())
    }

    pub fn read_weights(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let mut next = |what: &str| -> Result<(u64, String)> {
            match lines.next() {
                Some((i, Ok(l))) => Ok((i as u64 + 1, l)),
                Some((_, Err(e))) => Err(e.into()),
                None => Err(Error::Parse {
                    path: "<weights>".into(),
                    line: 0,
                    message: format!("unexpected end of file, expected {what}"),
                }),
            }
        };
        let parse_err = |line: u64, message: String| Error::Parse {
            path: "<weights>".into(),
            line,
            message,
        };
        let (ln, header) = next("header")?;
        if header.trim() != "bond-weights 1" {
            return Err(parse_err(ln, format!("bad header {header:?}")));
        }
        let (ln, count) = next("layer count")?;
        let n_layers: usize = count
            .trim()
            .strip_prefix("layers ")
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| parse_err(ln, format!("bad layer count {count:?}")))?;
        let mut shapes = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let (ln, line) = next("layer shape")?;
            let parts: Vec<&str> = line.split_whitespace().collect();
            let parsed = match parts.as_slice() {
                [o, i, a] => o
                    .parse::<usize>()
                    .ok()
                    .zip(i.parse::<usize>().ok())
                    .zip(Activation::parse(a)),
                _ => None,
            };
            let ((out, inp), act) = parsed.ok_or_else(|| parse_err(ln, format!("bad layer line {line:?}")))?;
            shapes.push((out, inp, act));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for (out, inp, act) in shapes {
            let mut read_values = |n: usize| -> Result<Vec<f64>> {
                (0..n)
                    .map(|_| {
                        let (ln, line) = next("value")?;
                        line.trim()
                            .parse::<f64>()
                            .map_err(|e| parse_err(ln, format!("{e}: {line:?}")))
                    })
                    .collect()
            };
            let w = Tensor2::new(out, inp, read_values(out * inp)?)?;
            let b = read_values(out)?;
            layers.push((w, b, act));
        }
        Self::from_layers(layers)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Huber,
    CrossEntropy,
}

/// Batch-mean loss. For Huber the mean runs over every element; for
/// cross-entropy over samples, with targets given either as a class-index
/// column or as per-class probabilities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossFn {
    pub kind: LossKind,
    pub huber_delta: f64,
}

impl LossFn {
    pub fn huber(delta: f64) -> Result<Self> {
        if !(delta > 0.0) {
            return Err(Error::Parameter(format!("huber delta must be > 0, got {delta}")));
        }
        Ok(Self {
            kind: LossKind::Huber,
            huber_delta: delta,
        })
    }

    pub fn cross_entropy() -> Self {
        Self {
            kind: LossKind::CrossEntropy,
            huber_delta: 1.0,
        }
    }

    fn targets_as_probs(pred: &Tensor2, target: &Tensor2) -> Result<Tensor2> {
        let classes = pred.cols();
        if target.rows() != pred.rows() {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} predictions for {} targets", pred.rows(), target.rows()),
            ));
        }
        if target.cols() == classes && classes > 1 {
            return Ok(target.clone());
        }
        if target.cols() != 1 {
            return Err(Error::shape(
                "cross_entropy",
                format!("targets have {} columns for {classes} classes", target.cols()),
            ));
        }
        let mut probs = Tensor2::zeros(pred.rows(), classes);
        for r in 0..target.rows() {
            let label = target.get(r, 0);
            if label < 0.0 || label.fract() != 0.0 || label as usize >= classes {
                return Err(Error::Parameter(format!(
                    "label {label} in row {r} is not a class index below {classes}"
                )));
            }
            probs.set(r, label as usize, 1.0);
        }
        Ok(probs)
    }

    fn log_softmax_row(row: &[f64]) -> Vec<f64> {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        row.iter().map(|z| z - lse).collect()
    }

    /// Unreduced loss of each sample (row).
    pub fn per_sample(&self, pred: &Tensor2, target: &Tensor2) -> Result<Vec<f64>> {
        match self.kind {
            LossKind::Huber => {
                if pred.shape() != target.shape() {
                    return Err(Error::shape(
                        "huber",
                        format!("{:?} vs {:?}", pred.shape(), target.shape()),
                    ));
                }
                let d = self.huber_delta;
                Ok((0..pred.rows())
                    .map(|r| {
                        let s: f64 = pred
                            .row(r)
                            .iter()
                            .zip(target.row(r))
                            .map(|(p, t)| {
                                let a = (p - t).abs();
                                if a <= d {
                                    0.5 * a * a
                                } else {
                                    d * (a - 0.5 * d)
                                }
                            })
                            .sum();
                        s / pred.cols() as f64
                    })
                    .collect())
            }
            LossKind::CrossEntropy => {
                let probs = Self::targets_as_probs(pred, target)?;
                Ok((0..pred.rows())
                    .map(|r| {
                        let logp = Self::log_softmax_row(pred.row(r));
                        -logp.iter().zip(probs.row(r)).map(|(l, p)| l * p).sum::<f64>()
                    })
                    .collect())
            }
        }
    }

    pub fn eval(&self, pred: &Tensor2, target: &Tensor2) -> Result<f64> {
        let per = self.per_sample(pred, target)?;
        if per.is_empty() {
            return Ok(0.0);
        }
        Ok(per.iter().sum::<f64>() / per.len() as f64)
    }

    /// Gradient of the batch-mean loss with respect to `pred`.
    pub fn gradient(&self, pred: &Tensor2, target: &Tensor2) -> Result<Tensor2> {
        match self.kind {
            LossKind::Huber => {
                if pred.shape() != target.shape() {
                    return Err(Error::shape(
                        "huber",
                        format!("{:?} vs {:?}", pred.shape(), target.shape()),
                    ));
                }
                let d = self.huber_delta;
                let n = pred.len() as f64;
                let mut g = pred.sub(target)?;
                g.map_inplace(|r| r.clamp(-d, d) / n);
                Ok(g)
            }
            LossKind::CrossEntropy => {
                let probs = Self::targets_as_probs(pred, target)?;
                let n = pred.rows() as f64;
                let mut g = Tensor2::zeros(pred.rows(), pred.cols());
                for r in 0..pred.rows() {
                    let logp = Self::log_softmax_row(pred.row(r));
                    for (c, l) in logp.iter().enumerate() {
                        g.set(r, c, (l.exp() - probs.get(r, c)) / n);
                    }
                }
                Ok(g)
            }
        }
    }
}

/// Fraction of rows whose argmax matches the class-index target.
pub fn accuracy(logits: &Tensor2, labels: &Tensor2) -> f64 {
    if logits.rows() == 0 {
        return 0.0;
    }
    let hits = (0..logits.rows())
        .filter(|&r| {
            let row = logits.row(r);
            let argmax = row
                .iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |best, (i, &v)| if v > best.1 { (i, v) } else { best },
                )
                .0;
            argmax as f64 == labels.get(r, 0)
        })
        .count();
    hits as f64 / logits.rows() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::sample_normal;

    fn random(rng: &mut Rng, rows: usize, cols: usize) -> Tensor2 {
        sample_normal(rng, 0.0, 1.0, rows, cols).unwrap()
    }

    #[test]
    fn zero_net_gives_zero_output() {
        let net = FeedForwardNet::from_layers(vec![
            (Tensor2::zeros(4, 3), vec![0.0; 4], Activation::Relu),
            (Tensor2::zeros(2, 4), vec![0.0; 2], Activation::Identity),
        ])
        .unwrap();
        let mut rng = Rng::new(0);
        let y = net.predict(&random(&mut rng, 5, 3)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_is_affine_map() {
        let mut rng = Rng::new(1);
        let w = random(&mut rng, 2, 3);
        let b = vec![0.5, -1.0];
        let mut net = FeedForwardNet::from_layers(vec![(w.clone(), b.clone(), Activation::Identity)]).unwrap();
        let x = random(&mut rng, 4, 3);
        let y = net.forward(&x).unwrap();
        let expected = x.matmul(&w.transpose()).unwrap();
        for r in 0..4 {
            for c in 0..2 {
                assert!((y.get(r, c) - expected.get(r, c) - b[c]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn forward_matches_straight_line_recomputation() {
        let mut rng = Rng::new(2);
        let spec = NetSpec::new(8, &[100, 100], 5, Activation::Relu);
        let mut net = FeedForwardNet::new(&spec, &mut rng).unwrap();
        let x = random(&mut rng, 3, 8);
        let y = net.forward(&x).unwrap();
        let mut h: Vec<Vec<f64>> = x.to_rows();
        for i in 0..net.depth() {
            let layer = net.layer(i);
            h = h
                .iter()
                .map(|row| {
                    (0..layer.out_dim())
                        .map(|o| {
                            let mut s = layer.bias()[o];
                            for (k, v) in row.iter().enumerate() {
                                s += layer.weights().get(o, k) * v;
                            }
                            match net.activation(i) {
                                Activation::Relu => s.max(0.0),
                                Activation::Tanh => s.tanh(),
                                Activation::Identity => s,
                            }
                        })
                        .collect()
                })
                .collect();
        }
        for (r, row) in h.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                assert!((y.get(r, c) - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_does_not_mutate_parameters() {
        let mut rng = Rng::new(3);
        let mut net = FeedForwardNet::new(&NetSpec::new(3, &[4], 2, Activation::Tanh), &mut rng).unwrap();
        let before = net.params_flat();
        net.forward(&random(&mut rng, 2, 3)).unwrap();
        assert_eq!(before, net.params_flat());
    }

    #[test]
    fn perfect_prediction_has_zero_gradients() {
        let mut rng = Rng::new(4);
        let mut net = FeedForwardNet::new(&NetSpec::new(3, &[6], 1, Activation::Relu), &mut rng).unwrap();
        let x = random(&mut rng, 5, 3);
        let y = net.forward(&x).unwrap();
        let loss = LossFn::huber(1.0).unwrap();
        net.backward_from_loss(&loss, &y).unwrap();
        assert!(net.grads_flat().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn scalar_huber_gradient_is_clipped_residual_times_input() {
        let loss = LossFn::huber(1.0).unwrap();
        for (w, x, target) in [(2.0, 1.5, 0.0), (0.1, 2.0, 0.0), (-1.0, 0.3, 0.5)] {
            let mut net = FeedForwardNet::from_layers(vec![(
                Tensor2::new(1, 1, vec![w]).unwrap(),
                vec![0.0],
                Activation::Identity,
            )])
            .unwrap();
            let xt = Tensor2::new(1, 1, vec![x]).unwrap();
            net.forward(&xt).unwrap();
            net.backward_from_loss(&loss, &Tensor2::new(1, 1, vec![target]).unwrap())
                .unwrap();
            let r: f64 = w * x - target;
            let expected = r.clamp(-1.0, 1.0) * x;
            assert!((net.layer(0).grad_weights().get(0, 0) - expected).abs() < 1e-15);
            assert!((net.layer(0).grad_bias()[0] - r.clamp(-1.0, 1.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_upstream_and_linearity() {
        let mut rng = Rng::new(5);
        let mut net = FeedForwardNet::new(&NetSpec::new(4, &[7], 3, Activation::Tanh), &mut rng).unwrap();
        let x = random(&mut rng, 6, 4);
        net.forward(&x).unwrap();
        net.backward_from_gradient(&Tensor2::zeros(6, 3)).unwrap();
        assert!(net.grads_flat().iter().all(|&g| g == 0.0));

        let g1 = random(&mut rng, 6, 3);
        let g2 = random(&mut rng, 6, 3);
        net.backward_from_gradient(&g1).unwrap();
        let a = net.grads_flat();
        net.zero_grads();
        net.backward_from_gradient(&g2).unwrap();
        let b = net.grads_flat();
        net.zero_grads();
        net.backward_from_gradient(&g1.add(&g2).unwrap()).unwrap();
        for ((s, a), b) in net.grads_flat().iter().zip(&a).zip(&b) {
            assert!((s - a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cache_state_errors() {
        let mut rng = Rng::new(6);
        let mut net = FeedForwardNet::new(&NetSpec::new(2, &[3], 1, Activation::Relu), &mut rng).unwrap();
        let loss = LossFn::huber(1.0).unwrap();
        let y = Tensor2::zeros(2, 1);
        assert!(matches!(net.backward_from_loss(&loss, &y), Err(Error::State(_))));
        net.forward(&random(&mut rng, 2, 2)).unwrap();
        net.detach_cache();
        assert!(matches!(net.backward_from_loss(&loss, &y), Err(Error::State(_))));
        net.forward(&random(&mut rng, 2, 2)).unwrap();
        assert!(net.backward_from_gradient(&Tensor2::zeros(3, 1)).is_err());
    }

    #[test]
    fn second_forward_overwrites_cache() {
        let mut rng = Rng::new(7);
        let mut net = FeedForwardNet::new(&NetSpec::new(2, &[3], 1, Activation::Tanh), &mut rng).unwrap();
        let x1 = random(&mut rng, 4, 2);
        let x2 = random(&mut rng, 3, 2);
        net.forward(&x1).unwrap();
        let y2 = net.forward(&x2).unwrap();
        assert_eq!(net.cached_output(), Some(&y2));
        assert!(net.backward_from_gradient(&Tensor2::zeros(4, 1)).is_err());
        assert!(net.backward_from_gradient(&Tensor2::zeros(3, 1)).is_ok());
    }

    #[test]
    fn zero_grads_clears_buffers() {
        let mut rng = Rng::new(8);
        let mut net = FeedForwardNet::new(&NetSpec::new(2, &[3], 1, Activation::Tanh), &mut rng).unwrap();
        net.forward(&random(&mut rng, 4, 2)).unwrap();
        net.backward_from_gradient(&Tensor2::filled(4, 1, 1.0)).unwrap();
        assert!(net.grads_flat().iter().any(|&g| g != 0.0));
        net.zero_grads();
        assert!(net.grads_flat().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn input_gradient_matches_backward() {
        let mut rng = Rng::new(9);
        let mut net = FeedForwardNet::new(&NetSpec::new(3, &[5, 5], 2, Activation::Tanh), &mut rng).unwrap();
        let x = random(&mut rng, 4, 3);
        let up = random(&mut rng, 4, 2);
        let pure = net.input_gradient(&x, &up).unwrap();
        net.forward(&x).unwrap();
        let via_cache = net.backward_from_gradient(&up).unwrap();
        assert_eq!(pure, via_cache);
    }

    #[test]
    fn huber_values() {
        let loss = LossFn::huber(1.0).unwrap();
        let y = Tensor2::new(2, 1, vec![1.0, -2.0]).unwrap();
        assert_eq!(loss.eval(&y, &y).unwrap(), 0.0);
        let p = Tensor2::new(2, 1, vec![1.5, -1.5]).unwrap();
        assert_eq!(loss.per_sample(&p, &y).unwrap(), vec![0.125, 0.125]);
        assert!(LossFn::huber(0.0).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let loss = LossFn::cross_entropy();
        for c in [2usize, 5, 10] {
            let logits = Tensor2::filled(3, c, 0.7);
            let labels = Tensor2::new(3, 1, vec![0.0, 1.0, (c - 1) as f64]).unwrap();
            assert!((loss.eval(&logits, &labels).unwrap() - (c as f64).ln()).abs() < 1e-12);
        }
        let big = Tensor2::new(1, 2, vec![1000.0, -1000.0]).unwrap();
        let v = loss.eval(&big, &Tensor2::new(1, 1, vec![0.0]).unwrap()).unwrap();
        assert!(v.is_finite() && v.abs() < 1e-12);
        let bad = Tensor2::new(1, 1, vec![4.0]).unwrap();
        assert!(loss.eval(&Tensor2::zeros(1, 3), &bad).is_err());
        assert!(loss.eval(&Tensor2::zeros(1, 3), &Tensor2::zeros(1, 2)).is_err());
    }

    #[test]
    fn weights_round_trip() {
        let mut rng = Rng::new(10);
        let net = FeedForwardNet::new(&NetSpec::new(3, &[4], 2, Activation::Relu), &mut rng).unwrap();
        let mut buf = Vec::new();
        net.write_weights(&mut buf).unwrap();
        let back = FeedForwardNet::read_weights(buf.as_slice()).unwrap();
        assert_eq!(back.params_flat(), net.params_flat());
        assert_eq!(
            back.activations().collect::<Vec<_>>(),
            net.activations().collect::<Vec<_>>()
        );
        assert!(FeedForwardNet::read_weights("nope\n".as_bytes()).is_err());
    }

    #[test]
    fn parameter_count_matches_spec() {
        let spec = NetSpec::new(5, &[100], 5, Activation::Tanh);
        assert_eq!(spec.parameter_count(), 1105);
        let mut rng = Rng::new(0);
        assert_eq!(FeedForwardNet::new(&spec, &mut rng).unwrap().parameter_count(), 1105);
    }
}
