//! TOML run configuration with dotted-path overrides.
//!
//! Overrides are applied to the parsed document before it is validated, so
//! `--optimizer.eta=3e-4` behaves exactly as if the file said so. Unknown keys
//! are rejected at every level.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Activation;
use crate::error::{Error, Result};
use crate::estimators::{EstimatorConfig, EstimatorKind, InitStd, RowNorm, SpsaDistribution};
use crate::harness::{
    load_housing, make_synthetic, synthetic_housing, train, ArchKind, ArchitectureSpec, Dataset, RunResult, Task,
    TrainConfig,
};
use crate::optim::{LambdaSchedule, OptimizerKind};
use crate::reservoirs::ReservoirSpec;

/// Seeds averaged over by `sweep` when the config lists none.
pub const DEFAULT_SWEEP_SEEDS: [u64; 5] = [42, 58, 63, 89, 14];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Seeds for `sweep` and `compare`; empty means `[seed]` for `compare`
    /// and the five default seeds for `sweep`.
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub compare_ad: bool,
    pub huber_delta: f64,
    pub shuffle: bool,
    pub divergence_factor: f64,
    pub timing_warmup: usize,
    pub output: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub architecture: ArchitectureConfig,
    /// Defaults to the desk reservoir of the architecture kind.
    pub reservoir: Option<ReservoirSpec>,
    pub estimator: EstimatorBlock,
    pub optimizer: OptimizerBlock,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            seed: t.seed,
            seeds: Vec::new(),
            epochs: t.epochs,
            batch_size: t.batch_size,
            compare_ad: true,
            huber_delta: t.huber_delta,
            shuffle: t.shuffle,
            divergence_factor: t.divergence_factor,
            timing_warmup: t.timing_warmup,
            output: None,
            dataset: DatasetConfig::default(),
            architecture: ArchitectureConfig::default(),
            reservoir: None,
            estimator: EstimatorBlock::default(),
            optimizer: OptimizerBlock::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    /// Housing CSV at `path`.
    Csv,
    SyntheticHousing,
    /// Random-MLP teacher.
    Teacher,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Regression,
    Classification,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DataSource,
    pub path: Option<PathBuf>,
    pub target_scale: f64,
    pub train_fraction: f64,
    /// Rows generated by the synthetic sources.
    pub n: usize,
    /// Seed of the synthetic generators; the split uses the run seed.
    pub generator_seed: u64,
    pub task: TaskKind,
    pub classes: usize,
    pub d_in: usize,
    pub noise: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            source: DataSource::SyntheticHousing,
            path: None,
            target_scale: 10_000.0,
            train_fraction: 0.8,
            n: 4000,
            generator_seed: 7,
            task: TaskKind::Regression,
            classes: 10,
            d_in: 8,
            noise: 0.0,
        }
    }
}

impl DatasetConfig {
    pub fn load(&self, split_seed: u64) -> Result<Dataset> {
        match self.source {
            DataSource::Csv => {
                let path = self
                    .path
                    .as_ref()
                    .ok_or_else(|| Error::Config("dataset.path is required for csv".into()))?;
                load_housing(path, self.target_scale, self.train_fraction, split_seed)
            }
            DataSource::SyntheticHousing => {
                let (x, y) = synthetic_housing(self.n, self.generator_seed);
                Dataset::from_arrays(
                    &x,
                    &y,
                    Task::Regression,
                    self.target_scale,
                    self.train_fraction,
                    split_seed,
                )
            }
            DataSource::Teacher => {
                let task = match self.task {
                    TaskKind::Regression => Task::Regression,
                    TaskKind::Classification => Task::Classification { classes: self.classes },
                };
                let (x, y) = make_synthetic(task, self.n, self.d_in, self.noise, self.generator_seed)?;
                Dataset::from_arrays(&x, &y, task, 1.0, self.train_fraction, split_seed)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchitectureConfig {
    pub kind: ArchKind,
    pub read_in_hidden: Vec<usize>,
    pub read_out_hidden: Vec<usize>,
    pub hidden_activation: Activation,
    pub read_in_output_activation: Activation,
    pub parity: bool,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        let d = ArchitectureSpec::desk(ArchKind::Nfn);
        Self {
            kind: d.kind,
            read_in_hidden: d.read_in_hidden,
            read_out_hidden: d.read_out_hidden,
            hidden_activation: d.hidden_activation,
            read_in_output_activation: d.read_in_output_activation,
            parity: d.parity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorBlock {
    pub kind: EstimatorKind,
    /// Estimators run side by side by `compare`.
    pub compare: Vec<EstimatorKind>,
    pub beta1: f64,
    pub beta2: f64,
    pub delta_min: f64,
    pub init_std: InitStd,
    pub row_norm: RowNorm,
    pub rescale: bool,
    pub mu0: f64,
    pub mu_decay: f64,
    pub n_pert: usize,
    pub distribution: SpsaDistribution,
    pub parallel: bool,
}

impl Default for EstimatorBlock {
    fn default() -> Self {
        let c = EstimatorConfig::default();
        Self {
            kind: EstimatorKind::Bond,
            compare: vec![
                EstimatorKind::Ad,
                EstimatorKind::Bond,
                EstimatorKind::Bonds,
                EstimatorKind::Spsa,
            ],
            beta1: c.beta1,
            beta2: c.beta2,
            delta_min: c.delta_min,
            init_std: c.init_std,
            row_norm: c.row_norm,
            rescale: c.rescale,
            mu0: c.mu0,
            mu_decay: c.mu_decay,
            n_pert: c.n_pert,
            distribution: c.distribution,
            parallel: c.parallel,
        }
    }
}

impl EstimatorBlock {
    pub fn settings(&self) -> EstimatorConfig {
        EstimatorConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            delta_min: self.delta_min,
            init_std: self.init_std,
            row_norm: self.row_norm,
            rescale: self.rescale,
            mu0: self.mu0,
            mu_decay: self.mu_decay,
            n_pert: self.n_pert,
            distribution: self.distribution,
            parallel: self.parallel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerBlock {
    pub kind: OptimizerKind,
    pub eta: f64,
    /// Per-estimator learning rates that replace `eta`.
    pub eta_overrides: BTreeMap<EstimatorKind, f64>,
    /// `[[end_fraction, multiplier], ...]`.
    pub schedule: LambdaSchedule,
}

impl Default for OptimizerBlock {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            eta: 1e-3,
            eta_overrides: BTreeMap::from([(EstimatorKind::Spsa, 1e-2)]),
            schedule: LambdaSchedule::default(),
        }
    }
}

impl RunConfig {
    /// Parses `path` (or the defaults when `None`), applies `overrides` and
    /// validates the result.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                Self::from_toml(&text, overrides).map_err(|e| match e {
                    Error::Config(m) => Error::Config(format!("{}: {m}", p.display())),
                    other => other,
                })
            }
            None => Self::from_toml("", overrides),
        }
    }

    /// Like [`RunConfig::load`] on an in-memory document.
    pub fn from_toml(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut doc = text.parse::<toml::Table>().map_err(|e| Error::Config(e.to_string()))?;
        for (key, value) in overrides {
            apply_override(&mut doc, key, value)?;
        }
        let cfg: RunConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.source == DataSource::Csv {
            match &self.dataset.path {
                None => return Err(Error::Config("dataset.path is required for csv".into())),
                Some(p) if !p.is_file() => {
                    return Err(Error::Config(format!("dataset file {} does not exist", p.display())))
                }
                _ => {}
            }
        }
        if self.dataset.n < 2 && self.dataset.source != DataSource::Csv {
            return Err(Error::Config("dataset.n must be at least 2".into()));
        }
        if self.estimator.compare.is_empty() {
            return Err(Error::Config(
                "estimator.compare must list at least one estimator".into(),
            ));
        }
        for (k, eta) in &self.optimizer.eta_overrides {
            if !(*eta > 0.0 && eta.is_finite()) {
                return Err(Error::Config(format!("eta override for {k} must be positive")));
            }
        }
        self.architecture_spec().validate()?;
        self.train_config(self.estimator.kind, self.seed).validate()
    }

    pub fn reservoir_spec(&self) -> ReservoirSpec {
        self.reservoir
            .clone()
            .unwrap_or_else(|| ArchitectureSpec::desk(self.architecture.kind).reservoir)
    }

    pub fn architecture_spec(&self) -> ArchitectureSpec {
        let a = &self.architecture;
        ArchitectureSpec {
            kind: a.kind,
            read_in_hidden: a.read_in_hidden.clone(),
            read_out_hidden: a.read_out_hidden.clone(),
            hidden_activation: a.hidden_activation,
            read_in_output_activation: a.read_in_output_activation,
            reservoir: self.reservoir_spec(),
            parity: a.parity,
        }
    }

    pub fn eta_for(&self, estimator: EstimatorKind) -> f64 {
        self.optimizer
            .eta_overrides
            .get(&estimator)
            .copied()
            .unwrap_or(self.optimizer.eta)
    }

    pub fn train_config(&self, estimator: EstimatorKind, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            estimator,
            estimator_config: self.estimator.settings(),
            optimizer: self.optimizer.kind,
            eta: self.eta_for(estimator),
            schedule: self.optimizer.schedule.clone(),
            huber_delta: self.huber_delta,
            compare_ad: self.compare_ad,
            shuffle: self.shuffle,
            divergence_factor: self.divergence_factor,
            timing_warmup: self.timing_warmup,
            seed,
        }
    }

    /// Loads the dataset split for `seed` and trains one model.
    pub fn train(&self, estimator: EstimatorKind, seed: u64) -> Result<RunResult> {
        let ds = self.dataset.load(seed)?;
        train(&self.architecture_spec(), &ds, &self.train_config(estimator, seed))
    }

    pub fn sweep_seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            DEFAULT_SWEEP_SEEDS.to_vec()
        } else {
            self.seeds.clone()
        }
    }

    pub fn compare_seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.seeds.clone()
        }
    }
}

/// Parses `raw` as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets `a.b.c = value`, creating intermediate tables.
pub fn apply_override(doc: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key `{key}`")));
    }
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut table = doc;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    table.insert(last.to_string(), parse_value(raw));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(body: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(body.as_bytes()).unwrap();
        f
    }

    #[test]
    fn defaults_are_desk_values() {
        let c = RunConfig::load(None, &[]).unwrap();
        assert_eq!((c.epochs, c.batch_size, c.seed), (100, 64, 42));
        assert_eq!(c.eta_for(EstimatorKind::Spsa), 1e-2);
        assert_eq!(c.eta_for(EstimatorKind::Bond), 1e-3);
        assert_eq!(c.reservoir_spec(), ReservoirSpec::desk_fixed());
        assert_eq!(c.sweep_seeds(), DEFAULT_SWEEP_SEEDS);
    }

    #[test]
    fn file_and_overrides() {
        let f = write(
            "epochs = 3\n[architecture]\nkind = \"nen\"\n[estimator]\nkind = \"bonds\"\n[optimizer]\nschedule = [[1.0, 1.0]]\n",
        );
        let o = vec![
            ("optimizer.eta".to_string(), "5e-4".to_string()),
            ("estimator.row_norm".to_string(), "off".to_string()),
            ("seeds".to_string(), "[1, 2]".to_string()),
        ];
        let c = RunConfig::load(Some(f.path()), &o).unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.optimizer.eta, 5e-4);
        assert_eq!(c.estimator.kind, EstimatorKind::Bonds);
        assert_eq!(c.estimator.row_norm, RowNorm::Off);
        assert_eq!(c.seeds, vec![1, 2]);
        assert_eq!(c.reservoir_spec(), ReservoirSpec::desk_echo());
    }

    #[test]
    fn unknown_keys_rejected() {
        let f = write("epoch = 3\n");
        assert!(matches!(RunConfig::load(Some(f.path()), &[]), Err(Error::Config(_))));
        let f = write("[estimator]\nkind = \"bond\"\nbeta3 = 0.5\n");
        assert!(RunConfig::load(Some(f.path()), &[]).is_err());
        let o = vec![("optimizer.etaa".to_string(), "1".to_string())];
        assert!(RunConfig::load(None, &o).is_err());
    }

    #[test]
    fn missing_files_rejected() {
        assert!(RunConfig::load(Some(Path::new("/nonexistent/run.toml")), &[]).is_err());
        let o = vec![
            ("dataset.source".to_string(), "csv".to_string()),
            ("dataset.path".to_string(), "/nonexistent/housing.csv".to_string()),
        ];
        assert!(RunConfig::load(None, &o).is_err());
    }

    #[test]
    fn reservoir_block_and_mismatch() {
        let f = write("[reservoir]\nkind = \"echo\"\ninput = 5\nstate = 50\noutput = 5\nleak = 0.5\n");
        let o = vec![("architecture.kind".to_string(), "nen".to_string())];
        let c = RunConfig::load(Some(f.path()), &o).unwrap();
        match c.reservoir_spec() {
            ReservoirSpec::Echo(e) => assert_eq!((e.state, e.leak, e.spectral_radius), (50, 0.5, 0.9)),
            other => panic!("{other:?}"),
        }
        // echo reservoir under a feedforward architecture
        assert!(RunConfig::load(Some(f.path()), &[]).is_err());
    }

    #[test]
    fn override_parsing() {
        let mut t = toml::Table::new();
        apply_override(&mut t, "a.b", "3").unwrap();
        apply_override(&mut t, "a.c", "hello").unwrap();
        apply_override(&mut t, "d", "true").unwrap();
        assert_eq!(t["a"]["b"].as_integer(), Some(3));
        assert_eq!(t["a"]["c"].as_str(), Some("hello"));
        assert_eq!(t["d"].as_bool(), Some(true));
        assert!(apply_override(&mut t, "a.b.c", "1").is_err());
        assert!(apply_override(&mut t, "a..c", "1").is_err());
    }
}
