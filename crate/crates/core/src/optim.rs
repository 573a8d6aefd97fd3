//! Parameter updates and piecewise-constant learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::autodiff::FeedForwardNet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

/// `theta <- theta - eta * g`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], eta: f64) -> Result<()> {
    check_len("sgd_step", params, grads)?;
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= eta * g;
    }
    Ok(())
}

fn check_len(op: &'static str, params: &[f64], grads: &[f64]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(
            op,
            format!("{} parameters, {} gradients", params.len(), grads.len()),
        ));
    }
    Ok(())
}

/// Adam moments for one flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
        }
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], eta: f64) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::shape(
                "adam_step",
                format!("state holds {} moments, got {} parameters", self.m.len(), params.len()),
            ));
        }
        self.t += 1;
        self.update_slice(0, params, grads, eta)
    }

    /// Updates moments `offset..offset + params.len()` at the current `t`.
    fn update_slice(&mut self, offset: usize, params: &mut [f64], grads: &[f64], eta: f64) -> Result<()> {
        check_len("adam_step", params, grads)?;
        if offset + params.len() > self.m.len() {
            return Err(Error::shape("adam_step", "parameters exceed optimizer state"));
        }
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, &g)) in params.iter_mut().zip(grads).enumerate() {
            let j = offset + i;
            self.m[j] = self.beta1 * self.m[j] + (1.0 - self.beta1) * g;
            self.v[j] = self.beta2 * self.v[j] + (1.0 - self.beta2) * g * g;
            *p -= eta * (self.m[j] / c1) / ((self.v[j] / c2).sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Optimizer bound to one network.
#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Adam(AdamState),
    Sgd,
}

impl Optimizer {
    pub fn for_net(kind: OptimizerKind, net: &FeedForwardNet) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam(AdamState::new(net.parameter_count())),
            OptimizerKind::Sgd => Optimizer::Sgd,
        }
    }

    /// Steps every parameter group of `net` with its accumulated gradients.
    pub fn step(&mut self, net: &mut FeedForwardNet, eta: f64) -> Result<()> {
        if let Optimizer::Adam(state) = self {
            state.t += 1;
        }
        let mut offset = 0;
        for group in net.param_groups() {
            match self {
                Optimizer::Sgd => sgd_step(group.values, group.grads, eta)?,
                Optimizer::Adam(state) => state.update_slice(offset, group.values, group.grads, eta)?,
            }
            offset += group.values.len();
        }
        Ok(())
    }
}

/// Multipliers over fractions of the run. Each `(end, multiplier)` covers
/// epochs from the previous end (inclusive) up to `end * total` (exclusive),
/// so a boundary epoch belongs to the later segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LambdaSchedule {
    segments: Vec<(f64, f64)>,
}

impl Default for LambdaSchedule {
    fn default() -> Self {
        Self {
            segments: vec![(0.5, 1.0), (0.75, 0.1), (1.0, 0.01)],
        }
    }
}

impl LambdaSchedule {
    pub fn new(segments: Vec<(f64, f64)>) -> Result<Self> {
        let s = Self { segments };
        s.validate()?;
        Ok(s)
    }

    pub fn constant() -> Self {
        Self {
            segments: vec![(1.0, 1.0)],
        }
    }

    pub fn segments(&self) -> &[(f64, f64)] {
        &self.segments
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::Config("schedule needs at least one segment".into()));
        }
        let mut prev = 0.0;
        for &(end, mult) in &self.segments {
            if !(end > prev && end <= 1.0) {
                return Err(Error::Config(format!(
                    "schedule fractions must increase strictly within (0, 1], got {end} after {prev}"
                )));
            }
            if !(mult > 0.0 && mult.is_finite()) {
                return Err(Error::Config(format!(
                    "schedule multiplier must be positive, got {mult}"
                )));
            }
            prev = end;
        }
        if prev != 1.0 {
            return Err(Error::Config("the last schedule segment must end at 1.0".into()));
        }
        Ok(())
    }

    pub fn multiplier(&self, epoch: usize, total_epochs: usize) -> f64 {
        let frac = epoch as f64 / total_epochs.max(1) as f64;
        self.segments
            .iter()
            .find(|(end, _)| frac < *end)
            .or(self.segments.last())
            .map_or(1.0, |s| s.1)
    }
}
