//! Hybrid model assembly, the training loop and its metrics.
//!
//! One iteration runs `f_a -> R -> f_b` forward, backpropagates the loss
//! through `f_b`, obtains `dL/dY_a` (exactly, or from an estimator), injects it
//! into `f_a`'s cached graph and steps both optimizers. With `compare_ad` on,
//! the exact reservoir gradient is computed after the update purely for the
//! sign-agreement metric.

pub mod data;

use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Activation, FeedForwardNet, Init, LossFn, NetSpec};
use crate::error::{Error, Result};
use crate::estimators::{
    sign_agreement, Estimator, EstimatorConfig, EstimatorKind, GradientEstimate, ReadoutProbe, SpliceContext,
};
use crate::numerics::{Rng, Tensor2};
use crate::optim::{LambdaSchedule, Optimizer, OptimizerKind};
use crate::reservoirs::{Reservoir, ReservoirSpec, StateReset};

pub use data::{load_housing, make_synthetic, read_csv, synthetic_housing, Dataset, Task};

const READ_IN_STREAM: u64 = 1;
const RESERVOIR_STREAM: u64 = 2;
const READ_OUT_STREAM: u64 = 3;
const SHUFFLE_STREAM: u64 = 4;
const ESTIMATOR_STREAM: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchKind {
    /// Frozen linear read-in, frozen FFNN reservoir, trained read-out.
    Lfn,
    /// Frozen linear read-in, echo state reservoir, trained read-out.
    Len,
    Nfn,
    Nen,
    /// Read-in wired straight into the read-out.
    NoReservoir,
}

impl ArchKind {
    pub fn name(self) -> &'static str {
        match self {
            ArchKind::Lfn => "lfn",
            ArchKind::Len => "len",
            ArchKind::Nfn => "nfn",
            ArchKind::Nen => "nen",
            ArchKind::NoReservoir => "no-reservoir",
        }
    }

    fn linear_read_in(self) -> bool {
        matches!(self, ArchKind::Lfn | ArchKind::Len)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub kind: ArchKind,
    /// Hidden widths of `f_a`; ignored by the linear read-in variants.
    #[serde(default = "ArchitectureSpec::default_hidden")]
    pub read_in_hidden: Vec<usize>,
    #[serde(default = "ArchitectureSpec::default_hidden")]
    pub read_out_hidden: Vec<usize>,
    #[serde(default = "ArchitectureSpec::default_relu")]
    pub hidden_activation: Activation,
    #[serde(default = "ArchitectureSpec::default_identity")]
    pub read_in_output_activation: Activation,
    /// Reservoir block; for `no-reservoir` only its input width is used, as
    /// the width of the read-in output.
    pub reservoir: ReservoirSpec,
    /// Require equal trainable parameter counts with and without the reservoir.
    #[serde(default)]
    pub parity: bool,
}

impl ArchitectureSpec {
    fn default_hidden() -> Vec<usize> {
        vec![100, 100]
    }
    fn default_relu() -> Activation {
        Activation::Relu
    }
    fn default_identity() -> Activation {
        Activation::Identity
    }

    pub fn new(kind: ArchKind, reservoir: ReservoirSpec) -> Self {
        Self {
            kind,
            read_in_hidden: Self::default_hidden(),
            read_out_hidden: Self::default_hidden(),
            hidden_activation: Activation::Relu,
            read_in_output_activation: Activation::Identity,
            reservoir,
            parity: false,
        }
    }

    /// 8 -> [100, 100] -> 5, frozen 5 -> [100] -> 5, 5 -> [100, 100] -> 1.
    pub fn desk(kind: ArchKind) -> Self {
        let reservoir = match kind {
            ArchKind::Len | ArchKind::Nen => ReservoirSpec::desk_echo(),
            _ => ReservoirSpec::desk_fixed(),
        };
        Self::new(kind, reservoir)
    }

    fn read_in_spec(&self, input: usize) -> NetSpec {
        let d = self.reservoir.input_dim();
        if self.kind.linear_read_in() {
            NetSpec::new(input, &[], d, Activation::Identity).with_output_activation(Activation::Identity)
        } else {
            NetSpec::new(input, &self.read_in_hidden, d, self.hidden_activation)
                .with_output_activation(self.read_in_output_activation)
        }
    }

    fn read_out_spec(&self, output: usize) -> NetSpec {
        let d = match self.kind {
            ArchKind::NoReservoir => self.reservoir.input_dim(),
            _ => self.reservoir.output_dim(),
        };
        NetSpec::new(d, &self.read_out_hidden, output, self.hidden_activation)
    }

    pub fn validate(&self) -> Result<()> {
        let recurrent = self.reservoir.is_recurrent();
        match self.kind {
            ArchKind::Lfn | ArchKind::Nfn if recurrent => Err(Error::Config(format!(
                "{} needs a feedforward reservoir",
                self.kind.name()
            ))),
            ArchKind::Len | ArchKind::Nen if !recurrent => Err(Error::Config(format!(
                "{} needs an echo state reservoir",
                self.kind.name()
            ))),
            _ => Ok(()),
        }
    }

    /// Trainable parameters of this architecture and of its reservoir-free twin.
    pub fn parameter_report(&self, input: usize, output: usize) -> ParameterReport {
        let read_in = if self.kind.linear_read_in() {
            0
        } else {
            self.read_in_spec(input).parameter_count()
        };
        let read_out = self.read_out_spec(output).parameter_count();
        let mut twin = self.clone();
        twin.kind = ArchKind::NoReservoir;
        let twin_total = twin.read_in_spec(input).parameter_count() + twin.read_out_spec(output).parameter_count();
        ParameterReport {
            read_in,
            read_out,
            trainable: read_in + read_out,
            no_reservoir_trainable: twin_total,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterReport {
    pub read_in: usize,
    pub read_out: usize,
    pub trainable: usize,
    pub no_reservoir_trainable: usize,
}

/// `f_b(R(f_a(x)))` with the reservoir optional.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridModel {
    pub kind: ArchKind,
    pub read_in: FeedForwardNet,
    pub reservoir: Option<Reservoir>,
    pub read_out: FeedForwardNet,
    pub read_in_trainable: bool,
}

impl HybridModel {
    /// Each component draws from its own stream of `seed`.
    pub fn build(spec: &ArchitectureSpec, input: usize, output: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        let report = spec.parameter_report(input, output);
        if spec.parity && report.trainable != report.no_reservoir_trainable {
            return Err(Error::Config(format!(
                "parameter parity requested but {} has {} trainable parameters against {} without the reservoir",
                spec.kind.name(),
                report.trainable,
                report.no_reservoir_trainable
            )));
        }
        let mut in_spec = spec.read_in_spec(input);
        if spec.kind.linear_read_in() {
            in_spec.init = Some(Init::XavierUniform);
        }
        let read_in = FeedForwardNet::new(&in_spec, &mut Rng::stream(seed, READ_IN_STREAM))?;
        let reservoir = match spec.kind {
            ArchKind::NoReservoir => None,
            _ => Some(Reservoir::from_spec(
                &spec.reservoir,
                &mut Rng::stream(seed, RESERVOIR_STREAM),
            )?),
        };
        let read_out = FeedForwardNet::new(&spec.read_out_spec(output), &mut Rng::stream(seed, READ_OUT_STREAM))?;
        Ok(Self {
            kind: spec.kind,
            read_in,
            reservoir,
            read_out,
            read_in_trainable: !spec.kind.linear_read_in(),
        })
    }

    pub fn trainable_parameters(&self) -> usize {
        self.read_out.parameter_count()
            + if self.read_in_trainable {
                self.read_in.parameter_count()
            } else {
                0
            }
    }

    /// Held-out prediction; an echo state reservoir starts from a zero state.
    pub fn predict(&self, x: &Tensor2) -> Result<Tensor2> {
        let y_a = self.read_in.predict(x)?;
        let y_r = match &self.reservoir {
            Some(r) => r.evaluate_fresh(&y_a)?,
            None => y_a,
        };
        self.read_out.predict(&y_r)
    }

    /// SHA-256 over all trainable parameters.
    pub fn trainable_digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for v in self.read_in.params_flat().iter().chain(&self.read_out.params_flat()) {
            h.update(v.to_bits().to_le_bytes());
        }
        h.finalize().into()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub estimator: EstimatorKind,
    pub estimator_config: EstimatorConfig,
    pub optimizer: OptimizerKind,
    pub eta: f64,
    pub schedule: LambdaSchedule,
    pub huber_delta: f64,
    /// Compute the exact reservoir gradient each iteration for sign agreement.
    pub compare_ad: bool,
    pub shuffle: bool,
    /// Abort once the training loss exceeds this multiple of the first loss.
    pub divergence_factor: f64,
    /// Iterations excluded from loop-time statistics.
    pub timing_warmup: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            estimator: EstimatorKind::Bond,
            estimator_config: EstimatorConfig::default(),
            optimizer: OptimizerKind::Adam,
            eta: 1e-3,
            schedule: LambdaSchedule::default(),
            huber_delta: 1.0,
            compare_ad: false,
            shuffle: true,
            divergence_factor: 1e6,
            timing_warmup: 10,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be positive, got {}", self.eta)));
        }
        if !(self.huber_delta > 0.0) {
            return Err(Error::Config(format!(
                "huber_delta must be positive, got {}",
                self.huber_delta
            )));
        }
        if !(self.divergence_factor > 1.0) {
            return Err(Error::Config("divergence_factor must exceed 1".into()));
        }
        self.schedule.validate()?;
        self.estimator_config.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: usize,
    pub epoch: usize,
    pub train_loss: f64,
    /// Present on the last iteration of each epoch.
    pub test_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_accuracy: Option<f64>,
    pub sign_agreement_pct: Option<f64>,
    pub loop_time_ms: f64,
    pub seed: u64,
}

/// What an observer sees after each iteration.
pub struct IterationTrace<'a> {
    pub iteration: usize,
    pub epoch: usize,
    pub y_a: &'a Tensor2,
    /// The gradient injected into `f_a`; absent when the read-in is frozen.
    pub injected: Option<&'a Tensor2>,
    pub estimate: Option<&'a GradientEstimate>,
    /// Exact `dL/dY_a`, when computed.
    pub exact: Option<&'a Tensor2>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub mean_ms: f64,
    pub std_ms: f64,
    pub count: usize,
}

impl TimingStats {
    /// Mean and population std of loop times after `warmup` iterations.
    pub fn from_records(records: &[MetricsRecord], warmup: usize) -> Self {
        let times: Vec<f64> = records.iter().skip(warmup).map(|r| r.loop_time_ms).collect();
        let n = times.len();
        if n == 0 {
            return Self {
                mean_ms: 0.0,
                std_ms: 0.0,
                count: 0,
            };
        }
        let mean = times.iter().sum::<f64>() / n as f64;
        let var = times.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / n as f64;
        Self {
            mean_ms: mean,
            std_ms: var.sqrt(),
            count: n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub arch: ArchKind,
    pub estimator: EstimatorKind,
    pub seed: u64,
    pub iterations: usize,
    pub initial_loss: f64,
    pub final_train_loss: f64,
    pub final_test_loss: f64,
    /// Mean of the last `max(1, epochs / 10)` epoch-end test losses.
    pub smoothed_test_loss: f64,
    pub final_test_accuracy: Option<f64>,
    pub mean_sign_agreement_pct: Option<f64>,
    pub loop_time: TimingStats,
    pub parameters: ParameterReport,
    pub reservoir_digest_start: Option<String>,
    pub reservoir_digest_end: Option<String>,
    pub trainable_digest: String,
    pub metrics_digest: String,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub records: Vec<MetricsRecord>,
    pub summary: RunSummary,
    pub model: HybridModel,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// One JSON object per line.
pub fn metrics_jsonl(records: &[MetricsRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("metrics serialize"));
        out.push('\n');
    }
    out
}

/// SHA-256 of the metrics stream with wall-clock fields removed.
pub fn metrics_digest(records: &[MetricsRecord]) -> String {
    let mut h = Sha256::new();
    for r in records {
        let mut v = serde_json::to_value(r).expect("metrics serialize");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("loop_time_ms");
        }
        h.update(v.to_string().as_bytes());
        h.update(b"\n");
    }
    hex(&h.finalize())
}

/// Mean of the last `window` values.
pub fn smoothed_tail(values: &[f64], window: usize) -> f64 {
    let w = window.clamp(1, values.len().max(1));
    let tail = &values[values.len().saturating_sub(w)..];
    tail.iter().sum::<f64>() / tail.len().max(1) as f64
}

pub fn loss_for(task: Task, huber_delta: f64) -> Result<LossFn> {
    match task {
        Task::Regression => LossFn::huber(huber_delta),
        Task::Classification { .. } => Ok(LossFn::cross_entropy()),
    }
}

/// Evaluates `model` on the dataset's test split: (loss, accuracy if classifying).
pub fn evaluate(model: &HybridModel, ds: &Dataset, loss: &LossFn) -> Result<(f64, Option<f64>)> {
    let pred = model.predict(&ds.x_test)?;
    let l = loss.eval(&pred, &ds.y_test)?;
    let acc = match ds.task {
        Task::Classification { .. } => Some(crate::autodiff::accuracy(&pred, &ds.y_test)),
        Task::Regression => None,
    };
    Ok((l, acc))
}

pub fn train(arch: &ArchitectureSpec, ds: &Dataset, cfg: &TrainConfig) -> Result<RunResult> {
    train_observed(arch, ds, cfg, |_| {})
}

/// [`train`] with a callback after every iteration.
pub fn train_observed(
    arch: &ArchitectureSpec,
    ds: &Dataset,
    cfg: &TrainConfig,
    mut observer: impl FnMut(&IterationTrace<'_>),
) -> Result<RunResult> {
    cfg.validate()?;
    let mut model = HybridModel::build(arch, ds.input_dim(), ds.output_dim(), cfg.seed)?;
    let loss = loss_for(ds.task, cfg.huber_delta)?;
    let d_r = arch.reservoir.input_dim();
    let recurrent = model.reservoir.as_ref().is_some_and(Reservoir::is_recurrent);
    // a frozen read-in consumes no reservoir-input gradient at all
    let needs_gradient = model.read_in_trainable;
    let numerical = cfg.estimator != EstimatorKind::Ad && model.reservoir.is_some() && needs_gradient;
    let mut estimator = if numerical {
        Some(Estimator::new(
            cfg.estimator,
            cfg.estimator_config.clone(),
            d_r,
            recurrent,
        )?)
    } else {
        None
    };
    let mut opt_in = Optimizer::for_net(cfg.optimizer, &model.read_in);
    let mut opt_out = Optimizer::for_net(cfg.optimizer, &model.read_out);
    let mut shuffle_rng = Rng::stream(cfg.seed, SHUFFLE_STREAM);
    let mut est_rng = Rng::stream(cfg.seed, ESTIMATOR_STREAM);
    let reservoir_start = model.reservoir.as_ref().map(|r| hex(&r.digest()));

    let n = ds.x_train.rows();
    let mut records = Vec::with_capacity(cfg.epochs * n.div_ceil(cfg.batch_size));
    let mut initial_loss = None;
    let mut iteration = 0;
    let mut epoch_test = Vec::with_capacity(cfg.epochs);
    let mut last_accuracy = None;

    for epoch in 0..cfg.epochs {
        if let Some(r) = model.reservoir.as_mut() {
            if r.reset_policy() == StateReset::Epoch {
                r.reset_state();
            }
        }
        let eta = cfg.eta * cfg.schedule.multiplier(epoch, cfg.epochs);
        let order: Vec<usize> = if cfg.shuffle {
            shuffle_rng.permutation(n)
        } else {
            (0..n).collect()
        };
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for (b, idx) in batches.iter().enumerate() {
            let start = Instant::now();
            let x = ds.x_train.select_rows(idx);
            let y = ds.y_train.select_rows(idx);

            model.read_in.zero_grads();
            model.read_out.zero_grads();
            let y_a = model.read_in.forward(&x)?;
            let y_r = match model.reservoir.as_mut() {
                Some(r) => r.forward(&y_a)?,
                None => y_a.clone(),
            };
            let pred = model.read_out.forward(&y_r)?;
            let train_loss = loss.eval(&pred, &y)?;
            let grad_y_r = model.read_out.backward_from_loss(&loss, &y)?;

            let mut estimate = None;
            let injected = match (&model.reservoir, estimator.as_mut()) {
                _ if !needs_gradient => None,
                (None, _) => Some(grad_y_r.clone()),
                (Some(r), None) => Some(r.ad_gradient(&y_a, &grad_y_r)?),
                (Some(r), Some(est)) => {
                    let probe = ReadoutProbe {
                        reservoir: r,
                        readout: &model.read_out,
                        loss: &loss,
                        y_true: &y,
                    };
                    let ctx = SpliceContext {
                        y_a: &y_a,
                        y_r: &y_r,
                        grad_y_r: &grad_y_r,
                    };
                    let e = est.estimate(&probe, ctx, eta, &mut est_rng)?;
                    let g = e.g_hat.clone();
                    estimate = Some(e);
                    Some(g)
                }
            };
            if let Some(g) = &injected {
                model.read_in.backward_from_gradient(g)?;
                opt_in.step(&mut model.read_in, eta)?;
            }
            opt_out.step(&mut model.read_out, eta)?;
            model.read_in.detach_cache();
            model.read_out.detach_cache();
            let loop_time_ms = (start.elapsed().as_secs_f64() * 1e3).max(1e-6);

            let initial = *initial_loss.get_or_insert(train_loss);
            if !train_loss.is_finite() || train_loss > cfg.divergence_factor * initial.max(f64::MIN_POSITIVE) {
                return Err(Error::Divergence {
                    iteration,
                    loss: train_loss,
                    initial,
                });
            }

            // exact reference for metrics only; computed after the update
            let exact = match (&model.reservoir, numerical && cfg.compare_ad) {
                (Some(r), true) => Some(r.ad_gradient(&y_a, &grad_y_r)?),
                _ => None,
            };
            let sign_agreement_pct = match (&exact, &injected) {
                (Some(e), Some(g)) => Some(100.0 * sign_agreement(g, e)?),
                _ => None,
            };
            observer(&IterationTrace {
                iteration,
                epoch,
                y_a: &y_a,
                injected: injected.as_ref(),
                estimate: estimate.as_ref(),
                exact: exact.as_ref().or(if numerical { None } else { injected.as_ref() }),
            });

            let (test_loss, test_accuracy) = if b + 1 == batches.len() {
                let (l, acc) = evaluate(&model, ds, &loss)?;
                epoch_test.push(l);
                last_accuracy = acc;
                (Some(l), acc)
            } else {
                (None, None)
            };
            records.push(MetricsRecord {
                iteration,
                epoch,
                train_loss,
                test_loss,
                test_accuracy,
                sign_agreement_pct,
                loop_time_ms,
                seed: cfg.seed,
            });
            iteration += 1;
        }
    }

    let signs: Vec<f64> = records.iter().filter_map(|r| r.sign_agreement_pct).collect();
    let summary = RunSummary {
        arch: arch.kind,
        estimator: cfg.estimator,
        seed: cfg.seed,
        iterations: records.len(),
        initial_loss: initial_loss.unwrap_or(f64::NAN),
        final_train_loss: records.last().map_or(f64::NAN, |r| r.train_loss),
        final_test_loss: epoch_test.last().copied().unwrap_or(f64::NAN),
        smoothed_test_loss: smoothed_tail(&epoch_test, (cfg.epochs / 10).max(1)),
        final_test_accuracy: last_accuracy,
        mean_sign_agreement_pct: (!signs.is_empty()).then(|| signs.iter().sum::<f64>() / signs.len() as f64),
        loop_time: TimingStats::from_records(&records, cfg.timing_warmup),
        parameters: arch.parameter_report(ds.input_dim(), ds.output_dim()),
        reservoir_digest_start: reservoir_start,
        reservoir_digest_end: model.reservoir.as_ref().map(|r| hex(&r.digest())),
        trainable_digest: hex(&model.trainable_digest()),
        metrics_digest: metrics_digest(&records),
    };
    Ok(RunResult {
        records,
        summary,
        model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_dataset(seed: u64) -> Dataset {
        let (x, y) = synthetic_housing(400, seed);
        Dataset::from_arrays(&x, &y, Task::Regression, 10_000.0, 0.8, seed).unwrap()
    }

    fn quick(estimator: EstimatorKind) -> TrainConfig {
        TrainConfig {
            epochs: 2,
            estimator,
            compare_ad: true,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn records_per_iteration_and_epoch_end_test_loss() {
        let ds = small_dataset(1);
        let run = train(&ArchitectureSpec::desk(ArchKind::Nfn), &ds, &quick(EstimatorKind::Bond)).unwrap();
        let per_epoch = ds.x_train.rows().div_ceil(64);
        assert_eq!(run.records.len(), 2 * per_epoch);
        assert_eq!(run.records.iter().filter(|r| r.test_loss.is_some()).count(), 2);
        assert!(run
            .records
            .iter()
            .all(|r| r.loop_time_ms > 0.0 && r.sign_agreement_pct.is_some()));
        assert_eq!(run.summary.reservoir_digest_start, run.summary.reservoir_digest_end);
    }

    #[test]
    fn ad_runs_carry_no_sign_metric() {
        let ds = small_dataset(2);
        let run = train(&ArchitectureSpec::desk(ArchKind::Nfn), &ds, &quick(EstimatorKind::Ad)).unwrap();
        assert!(run.records.iter().all(|r| r.sign_agreement_pct.is_none()));
        assert!(run.summary.mean_sign_agreement_pct.is_none());
    }

    #[test]
    fn linear_read_in_stays_frozen() {
        let ds = small_dataset(3);
        let arch = ArchitectureSpec::desk(ArchKind::Lfn);
        let before = HybridModel::build(&arch, 8, 1, 42).unwrap();
        let run = train(&arch, &ds, &quick(EstimatorKind::Bond)).unwrap();
        assert!(run.records.iter().all(|r| r.sign_agreement_pct.is_none()));
        assert_eq!(before.read_in, run.model.read_in);
        assert_ne!(before.read_out, run.model.read_out);
        assert_eq!(run.model.trainable_parameters(), run.model.read_out.parameter_count());
    }

    #[test]
    fn mismatched_reservoir_rejected() {
        let arch = ArchitectureSpec::new(ArchKind::Nen, ReservoirSpec::desk_fixed());
        assert!(HybridModel::build(&arch, 8, 1, 1).is_err());
        let arch = ArchitectureSpec::new(ArchKind::Nfn, ReservoirSpec::desk_echo());
        assert!(HybridModel::build(&arch, 8, 1, 1).is_err());
    }

    #[test]
    fn parity_report() {
        let mut arch = ArchitectureSpec::desk(ArchKind::Nfn);
        let r = arch.parameter_report(8, 1);
        assert_eq!(r.trainable, r.no_reservoir_trainable);
        arch.parity = true;
        assert!(HybridModel::build(&arch, 8, 1, 1).is_ok());
        arch.reservoir = ReservoirSpec::Fixed(crate::reservoirs::FixedSpec {
            input: 5,
            hidden: vec![50],
            output: 7,
        });
        assert!(HybridModel::build(&arch, 8, 1, 1).is_err());
    }

    #[test]
    fn divergence_guard_fires() {
        let ds = small_dataset(4);
        let cfg = TrainConfig {
            eta: 1e6,
            optimizer: OptimizerKind::Sgd,
            divergence_factor: 2.0,
            schedule: LambdaSchedule::constant(),
            ..quick(EstimatorKind::Ad)
        };
        match train(&ArchitectureSpec::desk(ArchKind::NoReservoir), &ds, &cfg) {
            Err(Error::Divergence { .. }) => {}
            other => panic!("expected divergence, got {:?}", other.map(|r| r.summary)),
        }
    }

    #[test]
    fn smoothing_and_timing() {
        assert_eq!(smoothed_tail(&[4.0, 2.0, 1.0, 3.0], 2), 2.0);
        assert_eq!(smoothed_tail(&[5.0], 10), 5.0);
        let recs: Vec<MetricsRecord> = [1.0, 100.0, 2.0, 4.0]
            .iter()
            .enumerate()
            .map(|(i, &t)| MetricsRecord {
                iteration: i,
                epoch: 0,
                train_loss: 0.0,
                test_loss: None,
                test_accuracy: None,
                sign_agreement_pct: None,
                loop_time_ms: t,
                seed: 0,
            })
            .collect();
        let s = TimingStats::from_records(&recs, 2);
        assert_eq!((s.mean_ms, s.std_ms, s.count), (3.0, 1.0, 2));
    }
}
