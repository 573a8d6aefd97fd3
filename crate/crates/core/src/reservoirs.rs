//! Black-box reservoirs.
//!
//! A reservoir is a fixed transform that the training loop may only evaluate.
//! Three realizations exist: a frozen Tanh feedforward net ([`FixedReservoir`]),
//! a bank of independent frozen nets over contiguous input blocks
//! ([`ParallelReservoir`]) and an echo state network ([`EchoStateReservoir`]).
//!
//! Because these are simulations, their graphs are in fact available;
//! [`Reservoir::ad_gradient`] exposes the exact vector-Jacobian product so the
//! harness can score estimators against it. Estimators never call it.

use std::ops::Range;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Activation, FeedForwardNet, Init, NetSpec};
use crate::error::{Error, Result};
use crate::numerics::{dot, Rng, Tensor2};

/// Which reservoir-input column a perturbation touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerturbColumn {
    Single(usize),
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StateReset {
    /// Zero the echo state at the start of every epoch.
    #[default]
    Epoch,
    Never,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ReservoirSpec {
    Fixed(FixedSpec),
    Parallel(ParallelSpec),
    Echo(EchoSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParallelSpec {
    pub input: usize,
    pub sub_input: usize,
    pub sub_hidden: Vec<usize>,
    pub sub_output: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EchoSpec {
    pub input: usize,
    pub state: usize,
    pub output: usize,
    #[serde(default = "EchoSpec::default_radius")]
    pub spectral_radius: f64,
    #[serde(default = "EchoSpec::default_one")]
    pub leak: f64,
    #[serde(default = "EchoSpec::default_one")]
    pub input_scaling: f64,
    #[serde(default = "EchoSpec::default_true")]
    pub readout_tanh: bool,
    #[serde(default)]
    pub reset: StateReset,
}

impl EchoSpec {
    fn default_radius() -> f64 {
        0.9
    }
    fn default_one() -> f64 {
        1.0
    }
    fn default_true() -> bool {
        true
    }

    pub fn new(input: usize, state: usize, output: usize) -> Self {
        Self {
            input,
            state,
            output,
            spectral_radius: 0.9,
            leak: 1.0,
            input_scaling: 1.0,
            readout_tanh: true,
            reset: StateReset::Epoch,
        }
    }
}

impl ReservoirSpec {
    /// Frozen 5 -> [100] -> 5 Tanh net.
    pub fn desk_fixed() -> Self {
        ReservoirSpec::Fixed(FixedSpec {
            input: 5,
            hidden: vec![100],
            output: 5,
        })
    }

    /// 5-in, 200-state, 5-out echo state network.
    pub fn desk_echo() -> Self {
        ReservoirSpec::Echo(EchoSpec::new(5, 200, 5))
    }

    pub fn input_dim(&self) -> usize {
        match self {
            ReservoirSpec::Fixed(s) => s.input,
            ReservoirSpec::Parallel(s) => s.input,
            ReservoirSpec::Echo(s) => s.input,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            ReservoirSpec::Fixed(s) => s.output,
            ReservoirSpec::Parallel(s) if s.sub_input > 0 => s.input / s.sub_input * s.sub_output,
            ReservoirSpec::Parallel(_) => 0,
            ReservoirSpec::Echo(s) => s.output,
        }
    }

    pub fn is_recurrent(&self) -> bool {
        matches!(self, ReservoirSpec::Echo(_))
    }
}

/// Single frozen feedforward net with Tanh on every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedReservoir {
    net: FeedForwardNet,
}

impl FixedReservoir {
    pub fn new(spec: &FixedSpec, rng: &mut Rng) -> Result<Self> {
        let net_spec = NetSpec {
            input: spec.input,
            hidden: spec.hidden.clone(),
            output: spec.output,
            hidden_activation: Activation::Tanh,
            output_activation: Activation::Tanh,
            init: Some(Init::XavierUniform),
        };
        Self::from_net(FeedForwardNet::new(&net_spec, rng)?)
    }

    /// Wraps an existing net; every layer must be Tanh so the black box is smooth.
    pub fn from_net(net: FeedForwardNet) -> Result<Self> {
        if net.activations().any(|a| a != Activation::Tanh) {
            return Err(Error::Parameter("fixed reservoirs use Tanh on every layer".into()));
        }
        Ok(Self { net })
    }

    pub fn net(&self) -> &FeedForwardNet {
        &self.net
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.net.output_dim()
    }

    pub fn evaluate(&self, x: &Tensor2) -> Result<Tensor2> {
        self.net.predict(x)
    }

    pub fn ad_gradient(&self, x: &Tensor2, upstream: &Tensor2) -> Result<Tensor2> {
        self.net.input_gradient(x, upstream)
    }
}

/// Independent sub-reservoirs over contiguous input blocks; outputs are concatenated.
#[derive(Debug, Clone, PartialEq)]
pub struct ParallelReservoir {
    subs: Vec<FixedReservoir>,
    partition: Vec<Range<usize>>,
}

impl ParallelReservoir {
    pub fn new(spec: &ParallelSpec, rng: &mut Rng) -> Result<Self> {
        if spec.sub_input == 0 || !spec.input.is_multiple_of(spec.sub_input) {
            return Err(Error::Parameter(format!(
                "parallel reservoir input {} is not a multiple of sub_input {}",
                spec.input, spec.sub_input
            )));
        }
        let sub = FixedSpec {
            input: spec.sub_input,
            hidden: spec.sub_hidden.clone(),
            output: spec.sub_output,
        };
        let subs = (0..spec.input / spec.sub_input)
            .map(|_| FixedReservoir::new(&sub, rng))
            .collect::<Result<Vec<_>>>()?;
        Self::from_subs(subs)
    }

    /// Partition is derived from the sub-reservoir input widths, in order.
    pub fn from_subs(subs: Vec<FixedReservoir>) -> Result<Self> {
        if subs.is_empty() {
            return Err(Error::Parameter(
                "parallel reservoir needs at least one sub-reservoir".into(),
            ));
        }
        let mut start = 0;
        let partition = subs
            .iter()
            .map(|s| {
                let r = start..start + s.input_dim();
                start = r.end;
                r
            })
            .collect();
        Ok(Self { subs, partition })
    }

    pub fn subs(&self) -> &[FixedReservoir] {
        &self.subs
    }

    pub fn partition(&self) -> &[Range<usize>] {
        &self.partition
    }

    pub fn input_dim(&self) -> usize {
        self.partition.last().map_or(0, |r| r.end)
    }

    pub fn output_dim(&self) -> usize {
        self.subs.iter().map(FixedReservoir::output_dim).sum()
    }

    pub fn evaluate(&self, x: &Tensor2) -> Result<Tensor2> {
        let parts = self
            .subs
            .iter()
            .zip(&self.partition)
            .map(|(s, r)| s.evaluate(&x.column_block(r.start, r.end)?))
            .collect::<Result<Vec<_>>>()?;
        Tensor2::hstack(&parts)
    }

    pub fn ad_gradient(&self, x: &Tensor2, upstream: &Tensor2) -> Result<Tensor2> {
        let mut out_start = 0;
        let parts = self
            .subs
            .iter()
            .zip(&self.partition)
            .map(|(s, r)| {
                let out_end = out_start + s.output_dim();
                let up = upstream.column_block(out_start, out_end)?;
                out_start = out_end;
                s.ad_gradient(&x.column_block(r.start, r.end)?, &up)
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor2::hstack(&parts)
    }
}

/// Leaky echo state network read out through a fixed random map.
///
/// Rows of a batch are presented in order:
/// `s <- (1 - leak) s + leak tanh(W_in u + W_rec s)`, `y = tanh(W_out s)` (or
/// `W_out s` without the readout Tanh).
#[derive(Debug, Clone, PartialEq)]
pub struct EchoStateReservoir {
    w_in: Tensor2,
    w_rec: Tensor2,
    w_out: Tensor2,
    leak: f64,
    readout_tanh: bool,
    reset: StateReset,
    spectral_radius: f64,
    state: Vec<f64>,
    /// State before the most recent [`Reservoir::forward`].
    snapshot: Vec<f64>,
}

struct EchoTrace {
    /// `tanh(W_in u + W_rec s)` per row.
    activations: Vec<Vec<f64>>,
    /// State after each row.
    states: Vec<Vec<f64>>,
    outputs: Tensor2,
}

/// Largest eigenvalue modulus, via the real Schur form.
pub fn spectral_radius(m: &Tensor2) -> f64 {
    let dm = DMatrix::from_row_slice(m.rows(), m.cols(), m.data());
    dm.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

impl EchoStateReservoir {
    pub fn new(spec: &EchoSpec, rng: &mut Rng) -> Result<Self> {
        if !(0.0..1.0).contains(&spec.spectral_radius) {
            return Err(Error::Parameter(format!(
                "echo state property needs 0 <= spectral radius < 1, got {}",
                spec.spectral_radius
            )));
        }
        if !(spec.leak > 0.0 && spec.leak <= 1.0) {
            return Err(Error::Parameter(format!("leak must lie in (0, 1], got {}", spec.leak)));
        }
        if spec.input == 0 || spec.state == 0 || spec.output == 0 {
            return Err(Error::Parameter("echo state dimensions must be positive".into()));
        }
        let n = spec.state;
        let uniform = |rng: &mut Rng, rows: usize, cols: usize, bound: f64| {
            let data = (0..rows * cols).map(|_| rng.uniform(-bound, bound)).collect();
            Tensor2::from_vec_unchecked(rows, cols, data)
        };
        let w_in = uniform(rng, n, spec.input, spec.input_scaling);
        let raw = uniform(rng, n, n, 1.0);
        let out_bound = (6.0 / (n + spec.output) as f64).sqrt();
        let w_out = uniform(rng, spec.output, n, out_bound);

        let w_rec = if spec.spectral_radius == 0.0 {
            Tensor2::zeros(n, n)
        } else {
            let rho = spectral_radius(&raw);
            if rho == 0.0 {
                return Err(Error::Parameter("random recurrent matrix is nilpotent".into()));
            }
            let scaled = raw.scale(spec.spectral_radius / rho);
            let measured = spectral_radius(&scaled);
            if (measured - spec.spectral_radius).abs() > 1e-6 {
                return Err(Error::Parameter(format!(
                    "spectral radius rescaling missed: wanted {}, measured {measured}",
                    spec.spectral_radius
                )));
            }
            scaled
        };
        Self::from_parts(w_in, w_rec, w_out, spec.leak, spec.readout_tanh, spec.reset)
    }

    pub fn from_parts(
        w_in: Tensor2,
        w_rec: Tensor2,
        w_out: Tensor2,
        leak: f64,
        readout_tanh: bool,
        reset: StateReset,
    ) -> Result<Self> {
        let n = w_rec.rows();
        if w_rec.cols() != n || w_in.rows() != n || w_out.cols() != n {
            return Err(Error::shape(
                "EchoStateReservoir",
                format!(
                    "w_in {:?}, w_rec {:?}, w_out {:?}",
                    w_in.shape(),
                    w_rec.shape(),
                    w_out.shape()
                ),
            ));
        }
        let spectral_radius = spectral_radius(&w_rec);
        Ok(Self {
            w_in,
            w_rec,
            w_out,
            leak,
            readout_tanh,
            reset,
            spectral_radius,
            state: vec![0.0; n],
            snapshot: vec![0.0; n],
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w_in.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.w_out.rows()
    }

    pub fn state_dim(&self) -> usize {
        self.w_rec.rows()
    }

    pub fn spectral_radius(&self) -> f64 {
        self.spectral_radius
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    pub fn reset_policy(&self) -> StateReset {
        self.reset
    }

    pub fn w_rec(&self) -> &Tensor2 {
        &self.w_rec
    }

    /// One state update for a single input row.
    pub fn step(&self, state: &[f64], u: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.state_dim();
        let mut act = Vec::with_capacity(n);
        let mut next = Vec::with_capacity(n);
        for j in 0..n {
            let pre = dot(self.w_in.row(j), u) + dot(self.w_rec.row(j), state);
            let h = pre.tanh();
            act.push(h);
            next.push((1.0 - self.leak) * state[j] + self.leak * h);
        }
        (act, next)
    }

    fn readout(&self, state: &[f64]) -> Vec<f64> {
        (0..self.output_dim())
            .map(|o| {
                let v = dot(self.w_out.row(o), state);
                if self.readout_tanh {
                    v.tanh()
                } else {
                    v
                }
            })
            .collect()
    }

    fn run(&self, init: &[f64], input: &Tensor2, record: bool) -> Result<(EchoTrace, Vec<f64>)> {
        if input.cols() != self.input_dim() {
            return Err(Error::shape(
                "echo forward",
                format!(
                    "input has {} columns, reservoir expects {}",
                    input.cols(),
                    self.input_dim()
                ),
            ));
        }
        let mut state = init.to_vec();
        let mut out = Vec::with_capacity(input.rows() * self.output_dim());
        let mut activations = Vec::new();
        let mut states = Vec::new();
        for r in 0..input.rows() {
            let (act, next) = self.step(&state, input.row(r));
            out.extend(self.readout(&next));
            if record {
                activations.push(act);
                states.push(next.clone());
            }
            state = next;
        }
        let trace = EchoTrace {
            activations,
            states,
            outputs: Tensor2::from_vec_unchecked(input.rows(), self.output_dim(), out),
        };
        Ok((trace, state))
    }

    /// Backprop through the unrolled batch starting from `init`.
    fn bptt(&self, init: &[f64], input: &Tensor2, upstream: &Tensor2) -> Result<Tensor2> {
        let (trace, _) = self.run(init, input, true)?;
        if upstream.shape() != trace.outputs.shape() {
            return Err(Error::shape(
                "echo ad_gradient",
                format!("upstream {:?} vs output {:?}", upstream.shape(), trace.outputs.shape()),
            ));
        }
        let n = self.state_dim();
        let rows = input.rows();
        let mut grad_in = Tensor2::zeros(rows, self.input_dim());
        // dL/ds_k carried back from step k+1
        let mut carry = vec![0.0; n];
        for k in (0..rows).rev() {
            let mut ds = carry.clone();
            for o in 0..self.output_dim() {
                let y = trace.outputs.get(k, o);
                let g = upstream.get(k, o) * if self.readout_tanh { 1.0 - y * y } else { 1.0 };
                if g != 0.0 {
                    for (d, w) in ds.iter_mut().zip(self.w_out.row(o)) {
                        *d += g * w;
                    }
                }
            }
            let dpre: Vec<f64> = ds
                .iter()
                .zip(&trace.activations[k])
                .map(|(d, h)| d * self.leak * (1.0 - h * h))
                .collect();
            let gi = grad_in.row_mut(k);
            for (j, &dp) in dpre.iter().enumerate() {
                if dp != 0.0 {
                    for (g, w) in gi.iter_mut().zip(self.w_in.row(j)) {
                        *g += dp * w;
                    }
                }
            }
            for (c, d) in carry.iter_mut().zip(&ds) {
                *c = (1.0 - self.leak) * d;
            }
            for (j, &dp) in dpre.iter().enumerate() {
                if dp != 0.0 {
                    for (c, w) in carry.iter_mut().zip(self.w_rec.row(j)) {
                        *c += dp * w;
                    }
                }
            }
        }
        let _ = &trace.states;
        Ok(grad_in)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Reservoir {
    Fixed(FixedReservoir),
    Parallel(ParallelReservoir),
    Echo(EchoStateReservoir),
}

impl Reservoir {
    /// Seeded construction from a spec; echo state networks are rescaled to
    /// the requested spectral radius and verified.
    pub fn from_spec(spec: &ReservoirSpec, rng: &mut Rng) -> Result<Self> {
        Ok(match spec {
            ReservoirSpec::Fixed(s) => Reservoir::Fixed(FixedReservoir::new(s, rng)?),
            ReservoirSpec::Parallel(s) => Reservoir::Parallel(ParallelReservoir::new(s, rng)?),
            ReservoirSpec::Echo(s) => Reservoir::Echo(EchoStateReservoir::new(s, rng)?),
        })
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Reservoir::Fixed(r) => r.input_dim(),
            Reservoir::Parallel(r) => r.input_dim(),
            Reservoir::Echo(r) => r.input_dim(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Reservoir::Fixed(r) => r.output_dim(),
            Reservoir::Parallel(r) => r.output_dim(),
            Reservoir::Echo(r) => r.output_dim(),
        }
    }

    pub fn is_recurrent(&self) -> bool {
        matches!(self, Reservoir::Echo(_))
    }

    fn check(&self, y_a: &Tensor2) -> Result<()> {
        if y_a.cols() != self.input_dim() {
            return Err(Error::shape(
                "reservoir",
                format!(
                    "input has {} columns, reservoir expects {}",
                    y_a.cols(),
                    self.input_dim()
                ),
            ));
        }
        Ok(())
    }

    /// The training-time forward pass. An echo state network records its
    /// current state as the snapshot, then advances through the batch.
    pub fn forward(&mut self, y_a: &Tensor2) -> Result<Tensor2> {
        self.check(y_a)?;
        match self {
            Reservoir::Echo(esn) => {
                esn.snapshot.clone_from(&esn.state);
                let (trace, end) = esn.run(&esn.snapshot, y_a, false)?;
                esn.state = end;
                Ok(trace.outputs)
            }
            _ => self.evaluate(y_a),
        }
    }

    /// Side-effect-free evaluation; an echo state network starts from the
    /// snapshot taken by the last [`forward`](Self::forward).
    pub fn evaluate(&self, input: &Tensor2) -> Result<Tensor2> {
        self.check(input)?;
        match self {
            Reservoir::Fixed(r) => r.evaluate(input),
            Reservoir::Parallel(r) => r.evaluate(input),
            Reservoir::Echo(esn) => Ok(esn.run(&esn.snapshot, input, false)?.0.outputs),
        }
    }

    /// Evaluation from a zero state, for held-out data.
    pub fn evaluate_fresh(&self, input: &Tensor2) -> Result<Tensor2> {
        match self {
            Reservoir::Echo(esn) => {
                self.check(input)?;
                Ok(esn.run(&vec![0.0; esn.state_dim()], input, false)?.0.outputs)
            }
            _ => self.evaluate(input),
        }
    }

    /// `R(y_a + sign * delta)` with `delta` masked to one column (or all).
    pub fn forward_perturbed(
        &self,
        y_a: &Tensor2,
        delta: &Tensor2,
        sign: f64,
        column: PerturbColumn,
    ) -> Result<Tensor2> {
        self.evaluate(&perturb(y_a, delta, sign, column)?)
    }

    /// Exact `dL/dY_a` given `upstream = dL/dY_R`. For an echo state network
    /// the gradient flows through the unrolled batch from the snapshot state.
    pub fn ad_gradient(&self, y_a: &Tensor2, upstream: &Tensor2) -> Result<Tensor2> {
        self.check(y_a)?;
        match self {
            Reservoir::Fixed(r) => r.ad_gradient(y_a, upstream),
            Reservoir::Parallel(r) => r.ad_gradient(y_a, upstream),
            Reservoir::Echo(esn) => esn.bptt(&esn.snapshot, y_a, upstream),
        }
    }

    /// Zeroes the echo state; a no-op for feedforward reservoirs.
    pub fn reset_state(&mut self) {
        if let Reservoir::Echo(esn) = self {
            esn.state.iter_mut().for_each(|s| *s = 0.0);
            esn.snapshot.iter_mut().for_each(|s| *s = 0.0);
        }
    }

    pub fn reset_policy(&self) -> StateReset {
        match self {
            Reservoir::Echo(esn) => esn.reset,
            _ => StateReset::Never,
        }
    }

    pub fn parameter_count(&self) -> usize {
        match self {
            Reservoir::Fixed(r) => r.net.parameter_count(),
            Reservoir::Parallel(r) => r.subs.iter().map(|s| s.net.parameter_count()).sum(),
            Reservoir::Echo(esn) => esn.w_in.len() + esn.w_rec.len() + esn.w_out.len(),
        }
    }

    /// SHA-256 over parameter bit patterns; echo state is not a parameter.
    pub fn digest(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        let mut feed = |values: &[f64]| {
            for v in values {
                hasher.update(v.to_bits().to_le_bytes());
            }
        };
        match self {
            Reservoir::Fixed(r) => feed(&r.net.params_flat()),
            Reservoir::Parallel(r) => r.subs.iter().for_each(|s| feed(&s.net.params_flat())),
            Reservoir::Echo(esn) => {
                feed(esn.w_in.data());
                feed(esn.w_rec.data());
                feed(esn.w_out.data());
            }
        }
        hasher.finalize().into()
    }
}

/// `y_a + sign * delta`, restricted to `column` unless it is `All`.
pub fn perturb(y_a: &Tensor2, delta: &Tensor2, sign: f64, column: PerturbColumn) -> Result<Tensor2> {
    if delta.shape() != y_a.shape() {
        return Err(Error::shape(
            "perturb",
            format!("delta {:?} vs input {:?}", delta.shape(), y_a.shape()),
        ));
    }
    let mut out = y_a.clone();
    match column {
        PerturbColumn::All => {
            for (o, d) in out.data_mut().iter_mut().zip(delta.data()) {
                *o += sign * d;
            }
        }
        PerturbColumn::Single(c) => {
            if c >= y_a.cols() {
                return Err(Error::Parameter(format!(
                    "column {c} out of range for {} reservoir inputs",
                    y_a.cols()
                )));
            }
            for r in 0..out.rows() {
                let v = out.get(r, c) + sign * delta.get(r, c);
                out.set(r, c, v);
            }
        }
    }
    Ok(out)
}
