//! Zeroth-order estimates of `dL/dY_a`, the loss gradient at the reservoir inputs.
//!
//! Every estimator sees the black box only through a [`Probe`]: a map from a
//! (perturbed) reservoir-input batch to per-sample losses. [`ReadoutProbe`]
//! composes a reservoir, the trainable read-out and a loss; tests swap in
//! closed-form objectives.
//!
//! BOND and BONDS report per-sample loss differences, so their raw estimates
//! live on a per-sample scale and are brought back to the scale of the exact
//! gradient by variance rescaling. SPSA works on the batch-mean loss. FDSA
//! shares BOND's per-sample column sweep with a constant step.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{FeedForwardNet, LossFn};
use crate::error::{Error, Result};
use crate::numerics::{sample_normal, sample_sign, sample_uniform, Rng, Tensor2};
use crate::reservoirs::{perturb, PerturbColumn, Reservoir};

/// Floor inside square roots of second moments.
pub const MOMENT_EPS: f64 = 1e-12;

/// Default minimum perturbation magnitude, calibrated for single precision.
pub const DELTA_MIN: f64 = 8.16e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    /// Exact gradient through the simulated reservoir graph.
    Ad,
    Bond,
    Bonds,
    Spsa,
    Fdsa,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 5] = [
        EstimatorKind::Ad,
        EstimatorKind::Bond,
        EstimatorKind::Bonds,
        EstimatorKind::Spsa,
        EstimatorKind::Fdsa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Ad => "ad",
            EstimatorKind::Bond => "bond",
            EstimatorKind::Bonds => "bonds",
            EstimatorKind::Spsa => "spsa",
            EstimatorKind::Fdsa => "fdsa",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown estimator `{s}`")))
    }
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowNorm {
    /// BONDS always; BOND only behind a recurrent reservoir.
    #[default]
    Auto,
    On,
    Off,
}

impl RowNorm {
    pub fn resolve(self, kind: EstimatorKind, recurrent: bool) -> bool {
        match self {
            RowNorm::On => true,
            RowNorm::Off => false,
            RowNorm::Auto => kind == EstimatorKind::Bonds || (kind == EstimatorKind::Bond && recurrent),
        }
    }
}

/// Spread of the first-iteration perturbation draw, in terms of the learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitStd {
    #[default]
    SqrtEta,
    Eta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpsaDistribution {
    #[default]
    Rademacher,
    /// Random sign times a magnitude from U[0.5, 1.5], which keeps `1/Δ` bounded.
    Uniform,
    Normal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub delta_min: f64,
    pub init_std: InitStd,
    pub row_norm: RowNorm,
    /// Skip the variance rescaling step (diagnostics only).
    pub rescale: bool,
    pub mu0: f64,
    pub mu_decay: f64,
    pub n_pert: usize,
    pub distribution: SpsaDistribution,
    /// Evaluate perturbed passes on the rayon pool.
    pub parallel: bool,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            delta_min: DELTA_MIN,
            init_std: InitStd::SqrtEta,
            row_norm: RowNorm::Auto,
            rescale: true,
            mu0: 0.01,
            mu_decay: 0.101,
            n_pert: 1,
            distribution: SpsaDistribution::Rademacher,
            parallel: false,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")))
            }
        };
        unit("beta1", self.beta1)?;
        unit("beta2", self.beta2)?;
        if !(self.delta_min > 0.0 && self.delta_min.is_finite()) {
            return Err(Error::Config(format!(
                "delta_min must be positive, got {}",
                self.delta_min
            )));
        }
        if !(self.mu0 > 0.0 && self.mu0.is_finite()) {
            return Err(Error::Config(format!("mu0 must be positive, got {}", self.mu0)));
        }
        if !(self.mu_decay >= 0.0 && self.mu_decay.is_finite()) {
            return Err(Error::Config(format!(
                "mu_decay must be non-negative, got {}",
                self.mu_decay
            )));
        }
        if self.n_pert == 0 {
            return Err(Error::Config("n_pert must be at least 1".into()));
        }
        Ok(())
    }

    /// `mu0 / (t + 1)^mu_decay`.
    pub fn mu(&self, t: usize) -> f64 {
        self.mu0 / ((t + 1) as f64).powf(self.mu_decay)
    }
}

/// Bias-corrected exponential moments of column-reduced estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct RollingMoments {
    m: Vec<f64>,
    v: Vec<f64>,
    m_hat: Vec<f64>,
    v_hat: Vec<f64>,
    beta1: f64,
    beta2: f64,
    t: u64,
}

impl RollingMoments {
    pub fn new(dim: usize, beta1: f64, beta2: f64) -> Self {
        Self {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            m_hat: vec![0.0; dim],
            v_hat: vec![0.0; dim],
            beta1,
            beta2,
            t: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.m.len()
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn m(&self) -> &[f64] {
        &self.m
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub fn m_hat(&self) -> &[f64] {
        &self.m_hat
    }

    pub fn v_hat(&self) -> &[f64] {
        &self.v_hat
    }

    pub fn update(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.dim() {
            return Err(Error::shape(
                "RollingMoments::update",
                format!("got {} values for {} moments", g.len(), self.dim()),
            ));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for j in 0..g.len() {
            self.m[j] = self.beta1 * self.m[j] + (1.0 - self.beta1) * g[j];
            self.v[j] = self.beta2 * self.v[j] + (1.0 - self.beta2) * g[j] * g[j];
            self.m_hat[j] = self.m[j] / c1;
            self.v_hat[j] = self.v[j] / c2;
        }
        Ok(())
    }

    /// Updates with the batch mean of each column.
    pub fn update_from_batch(&mut self, g: &Tensor2) -> Result<()> {
        self.update(&g.column_means())
    }
}

/// Per-dimension perturbation magnitude interval derived from the moments.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub delta_min: f64,
    pub alpha: f64,
}

impl PerturbationBounds {
    /// The lower bound is the positive root of the truncation-error balance,
    /// floored at `delta_min`; the upper bound is `alpha |m̂| / sqrt(v̂)`,
    /// never below the lower one.
    pub fn from_moments(rm: &RollingMoments, delta_min: f64) -> Self {
        let alpha = rm.m_hat.iter().fold(0.0_f64, |a, m| a.max(m.abs()));
        let mut lower = Vec::with_capacity(rm.dim());
        let mut upper = Vec::with_capacity(rm.dim());
        for (&m, &v) in rm.m_hat.iter().zip(&rm.v_hat) {
            let ratio = m.abs() / (v + MOMENT_EPS).sqrt();
            let lo = delta_min.max(lower_root(m, v, delta_min));
            lower.push(lo);
            upper.push((alpha * ratio).max(lo));
        }
        Self {
            lower,
            upper,
            delta_min,
            alpha,
        }
    }

    pub fn contains(&self, column: usize, magnitude: f64) -> bool {
        magnitude >= self.lower[column] && magnitude <= self.upper[column].max(self.lower[column])
    }
}

/// `(|m| / sqrt(v)) (sqrt(1 + z) - 1)` with `z = 2 delta_min v / m^2`, in the
/// cancellation-free form `r z / (1 + sqrt(1 + z))`. Zero when `m == 0`.
fn lower_root(m: f64, v: f64, delta_min: f64) -> f64 {
    if m == 0.0 {
        return 0.0;
    }
    let r = m.abs() / (v + MOMENT_EPS).sqrt();
    let z = 2.0 * delta_min * v / (m * m);
    if !z.is_finite() {
        // sqrt(1+z) ~ sqrt(z) for huge z
        return (2.0 * delta_min).sqrt();
    }
    r * z / (1.0 + (1.0 + z).sqrt())
}

/// A signed perturbation matrix and the bounds its magnitudes were drawn in.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub delta: Tensor2,
    /// `None` on the first iteration, where no moments exist yet.
    pub bounds: Option<PerturbationBounds>,
}

/// Draws `Δ_x` for a `rows x rm.dim()` batch. Iteration 0 samples a normal
/// with spread `sqrt(eta)` (or `eta`); later iterations sample magnitudes
/// uniformly inside the moment-derived bounds and attach random signs.
pub fn set_perturbations(
    rm: &RollingMoments,
    rng: &mut Rng,
    eta: f64,
    t: usize,
    rows: usize,
    cfg: &EstimatorConfig,
) -> Result<Perturbation> {
    let d = rm.dim();
    if t == 0 {
        let std = match cfg.init_std {
            InitStd::SqrtEta => eta.sqrt(),
            InitStd::Eta => eta,
        };
        let mut delta = sample_normal(rng, 0.0, std, rows, d)?;
        // an exact zero would divide the loss difference by zero
        delta.map_inplace(|x| {
            if x.abs() < cfg.delta_min {
                cfg.delta_min.copysign(x)
            } else {
                x
            }
        });
        return Ok(Perturbation { delta, bounds: None });
    }
    let bounds = PerturbationBounds::from_moments(rm, cfg.delta_min);
    let lo = Tensor2::from_vec_unchecked(rows, d, (0..rows).flat_map(|_| bounds.lower.iter().copied()).collect());
    let hi = Tensor2::from_vec_unchecked(rows, d, (0..rows).flat_map(|_| bounds.upper.iter().copied()).collect());
    let magnitude = sample_uniform(rng, &lo, &hi)?;
    let signs = sample_sign(rng, rows, d);
    Ok(Perturbation {
        delta: magnitude.mul(&signs)?,
        bounds: Some(bounds),
    })
}

/// Black-box objective seen by the estimators.
pub trait Probe: Sync {
    /// Per-sample losses for a batch of reservoir inputs.
    fn per_sample(&self, y_a: &Tensor2) -> Result<Vec<f64>>;

    /// Batch-mean loss.
    fn mean_loss(&self, y_a: &Tensor2) -> Result<f64> {
        let l = self.per_sample(y_a)?;
        Ok(l.iter().sum::<f64>() / l.len().max(1) as f64)
    }
}

/// `loss(f_b(R(y_a)), y_true)` per sample, evaluated without touching caches
/// or echo state.
pub struct ReadoutProbe<'a> {
    pub reservoir: &'a Reservoir,
    pub readout: &'a FeedForwardNet,
    pub loss: &'a LossFn,
    pub y_true: &'a Tensor2,
}

impl Probe for ReadoutProbe<'_> {
    fn per_sample(&self, y_a: &Tensor2) -> Result<Vec<f64>> {
        let y_r = self.reservoir.evaluate(y_a)?;
        let y = self.readout.predict(&y_r)?;
        self.loss.per_sample(&y, self.y_true)
    }
}

/// Tensors from the unperturbed pass that rescaling needs.
#[derive(Debug, Clone, Copy)]
pub struct SpliceContext<'a> {
    pub y_a: &'a Tensor2,
    pub y_r: &'a Tensor2,
    /// `dL/dY_R` from the read-out backward pass.
    pub grad_y_r: &'a Tensor2,
}

impl SpliceContext<'_> {
    /// `Var(Y_R) / Var(Y_a) * Var(dL/dY_R)`, or `None` when not finite.
    pub fn target_variance(&self) -> Option<f64> {
        let s = self.y_r.variance() / self.y_a.variance() * self.grad_y_r.variance();
        s.is_finite().then_some(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    /// The estimate handed to the read-in backward pass.
    pub g_hat: Tensor2,
    /// Before row normalization and rescaling.
    pub raw: Tensor2,
    /// After row normalization, before rescaling.
    pub pre_rescale: Tensor2,
    pub delta_x: Option<Tensor2>,
    pub bounds: Option<PerturbationBounds>,
    pub sigma2: Option<f64>,
    pub row_normalized: bool,
    /// Set when rescaling was requested but `Var(ĝ)` was zero or the target
    /// variance was not finite.
    pub rescale_skipped: bool,
}

impl GradientEstimate {
    fn plain(g: Tensor2, delta_x: Option<Tensor2>) -> Self {
        Self {
            g_hat: g.clone(),
            raw: g.clone(),
            pre_rescale: g,
            delta_x,
            bounds: None,
            sigma2: None,
            row_normalized: false,
            rescale_skipped: false,
        }
    }
}

/// Per-column central differences of per-sample losses:
/// `ĝ[k, i] = (L_k(y + Δ e_i) - L_k(y - Δ e_i)) / (2 Δ[k, i])`.
pub fn bond_raw(probe: &dyn Probe, y_a: &Tensor2, delta: &Tensor2, parallel: bool) -> Result<Tensor2> {
    let (rows, d) = y_a.shape();
    let column = |i: usize| -> Result<Vec<f64>> {
        let up = probe.per_sample(&perturb(y_a, delta, 1.0, PerturbColumn::Single(i))?)?;
        let down = probe.per_sample(&perturb(y_a, delta, -1.0, PerturbColumn::Single(i))?)?;
        Ok((0..rows).map(|k| (up[k] - down[k]) / (2.0 * delta.get(k, i))).collect())
    };
    let columns: Vec<Vec<f64>> = if parallel {
        (0..d).into_par_iter().map(column).collect::<Result<_>>()?
    } else {
        (0..d).map(column).collect::<Result<_>>()?
    };
    let mut g = Tensor2::zeros(rows, d);
    for (i, col) in columns.iter().enumerate() {
        for (k, v) in col.iter().enumerate() {
            g.set(k, i, *v);
        }
    }
    check_finite(g)
}

/// One simultaneous pair: `ĝ[k, i] = (L_k(y + Δ) - L_k(y - Δ)) / (2 Δ[k, i])`.
pub fn bonds_raw(probe: &dyn Probe, y_a: &Tensor2, delta: &Tensor2) -> Result<Tensor2> {
    let up = probe.per_sample(&perturb(y_a, delta, 1.0, PerturbColumn::All)?)?;
    let down = probe.per_sample(&perturb(y_a, delta, -1.0, PerturbColumn::All)?)?;
    let mut g = Tensor2::zeros(y_a.rows(), y_a.cols());
    for k in 0..y_a.rows() {
        let diff = up[k] - down[k];
        for i in 0..y_a.cols() {
            g.set(k, i, diff / (2.0 * delta.get(k, i)));
        }
    }
    check_finite(g)
}

fn check_finite(g: Tensor2) -> Result<Tensor2> {
    match g.data().iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(g),
    }
}

/// Scales each row to unit Euclidean norm; zero rows are left alone.
pub fn row_normalize(g: &Tensor2) -> Tensor2 {
    let mut out = g.clone();
    for (k, n) in g.row_norms().into_iter().enumerate() {
        if n > 0.0 {
            out.row_mut(k).iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

/// `g / sqrt(Var(g)) * sqrt(target)`; `None` if either variance is unusable.
pub fn rescale(g: &Tensor2, target: Option<f64>) -> Option<Tensor2> {
    let var = g.variance();
    let target = target?;
    (var > 0.0 && var.is_finite()).then(|| g.scale((target / var).sqrt()))
}

/// Central-difference SPSA on the batch-mean loss, averaged over `n_pert`
/// full-batch perturbations of size `mu`.
pub fn spsa_estimate(
    probe: &dyn Probe,
    y_a: &Tensor2,
    cfg: &EstimatorConfig,
    mu: f64,
    rng: &mut Rng,
) -> Result<GradientEstimate> {
    if !(mu > 0.0) {
        return Err(Error::Parameter(format!("SPSA step must be positive, got {mu}")));
    }
    let (rows, d) = y_a.shape();
    let mut acc = Tensor2::zeros(rows, d);
    let mut last = None;
    for _ in 0..cfg.n_pert {
        let dirs = match cfg.distribution {
            SpsaDistribution::Rademacher => sample_sign(rng, rows, d),
            SpsaDistribution::Uniform => {
                let m = sample_uniform(rng, &Tensor2::filled(rows, d, 0.5), &Tensor2::filled(rows, d, 1.5))?;
                m.mul(&sample_sign(rng, rows, d))?
            }
            SpsaDistribution::Normal => sample_normal(rng, 0.0, 1.0, rows, d)?,
        };
        let step = dirs.scale(mu);
        let up = probe.mean_loss(&perturb(y_a, &step, 1.0, PerturbColumn::All)?)?;
        let down = probe.mean_loss(&perturb(y_a, &step, -1.0, PerturbColumn::All)?)?;
        let diff = up - down;
        for (a, s) in acc.data_mut().iter_mut().zip(step.data()) {
            *a += diff / (2.0 * s);
        }
        last = Some(step);
    }
    let g = check_finite(acc.scale(1.0 / cfg.n_pert as f64))?;
    Ok(GradientEstimate::plain(g, last))
}

/// Per-column central differences with a constant step `mu` and a random
/// sign per column, in the same per-sample units as [`bond_raw`].
pub fn fdsa_estimate(
    probe: &dyn Probe,
    y_a: &Tensor2,
    mu: f64,
    rng: &mut Rng,
    parallel: bool,
) -> Result<GradientEstimate> {
    if !(mu > 0.0) {
        return Err(Error::Parameter(format!("FDSA step must be positive, got {mu}")));
    }
    let (rows, d) = y_a.shape();
    let signs: Vec<f64> = (0..d).map(|_| rng.next_sign()).collect();
    let delta = Tensor2::from_vec_unchecked(rows, d, (0..rows).flat_map(|_| signs.iter().map(|s| s * mu)).collect());
    let g = bond_raw(probe, y_a, &delta, parallel)?;
    Ok(GradientEstimate::plain(g, Some(delta)))
}

/// `sign(x)` in {-1, 0, 1}; entries agree only when their signs are equal.
pub fn sign_agreement(a: &Tensor2, b: &Tensor2) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "sign_agreement",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    if a.is_empty() {
        return Ok(1.0);
    }
    let sign = |x: f64| (x > 0.0) as i8 - (x < 0.0) as i8;
    let same = a
        .data()
        .iter()
        .zip(b.data())
        .filter(|(x, y)| sign(**x) == sign(**y))
        .count();
    Ok(same as f64 / a.len() as f64)
}

/// Stateful estimator for one training run: owns the rolling moments and
/// the iteration counter.
#[derive(Debug, Clone)]
pub struct Estimator {
    kind: EstimatorKind,
    cfg: EstimatorConfig,
    moments: RollingMoments,
    row_norm: bool,
    t: usize,
}

impl Estimator {
    pub fn new(kind: EstimatorKind, cfg: EstimatorConfig, dim: usize, recurrent: bool) -> Result<Self> {
        cfg.validate()?;
        if kind == EstimatorKind::Ad {
            return Err(Error::Parameter(
                "the exact gradient is not a numerical estimator".into(),
            ));
        }
        let row_norm = cfg.row_norm.resolve(kind, recurrent);
        Ok(Self {
            kind,
            moments: RollingMoments::new(dim, cfg.beta1, cfg.beta2),
            cfg,
            row_norm,
            t: 0,
        })
    }

    pub fn kind(&self) -> EstimatorKind {
        self.kind
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.cfg
    }

    pub fn moments(&self) -> &RollingMoments {
        &self.moments
    }

    pub fn iteration(&self) -> usize {
        self.t
    }

    pub fn uses_row_norm(&self) -> bool {
        self.row_norm
    }

    /// Produces one estimate and advances the internal iteration. `eta` is the
    /// current learning rate, used only by the first BOND perturbation draw.
    pub fn estimate(
        &mut self,
        probe: &dyn Probe,
        ctx: SpliceContext<'_>,
        eta: f64,
        rng: &mut Rng,
    ) -> Result<GradientEstimate> {
        let y_a = ctx.y_a;
        if y_a.cols() != self.moments.dim() {
            return Err(Error::shape(
                "Estimator::estimate",
                format!(
                    "{} reservoir inputs, estimator built for {}",
                    y_a.cols(),
                    self.moments.dim()
                ),
            ));
        }
        let est = match self.kind {
            EstimatorKind::Bond | EstimatorKind::Bonds => {
                let p = set_perturbations(&self.moments, rng, eta, self.t, y_a.rows(), &self.cfg)?;
                let raw = if self.kind == EstimatorKind::Bond {
                    bond_raw(probe, y_a, &p.delta, self.cfg.parallel)?
                } else {
                    bonds_raw(probe, y_a, &p.delta)?
                };
                let pre_rescale = if self.row_norm {
                    row_normalize(&raw)
                } else {
                    raw.clone()
                };
                let (g_hat, sigma2, skipped) = if self.cfg.rescale {
                    let sigma2 = ctx.target_variance();
                    match rescale(&pre_rescale, sigma2) {
                        Some(g) => (g, sigma2, false),
                        None => (pre_rescale.clone(), sigma2, true),
                    }
                } else {
                    (pre_rescale.clone(), None, false)
                };
                self.moments.update_from_batch(&g_hat)?;
                GradientEstimate {
                    g_hat,
                    raw,
                    pre_rescale,
                    delta_x: Some(p.delta),
                    bounds: p.bounds,
                    sigma2,
                    row_normalized: self.row_norm,
                    rescale_skipped: skipped,
                }
            }
            EstimatorKind::Spsa => spsa_estimate(probe, y_a, &self.cfg, self.cfg.mu(self.t), rng)?,
            EstimatorKind::Fdsa => fdsa_estimate(probe, y_a, self.cfg.mu(self.t), rng, self.cfg.parallel)?,
            EstimatorKind::Ad => unreachable!("rejected at construction"),
        };
        self.t += 1;
        Ok(est)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Activation, NetSpec};
    use crate::numerics::Rng;
    use crate::reservoirs::ReservoirSpec;
    use proptest::prelude::*;

    /// `f(x_k) = sum_j x_kj^2` per row.
    struct Quadratic;
    impl Probe for Quadratic {
        fn per_sample(&self, y: &Tensor2) -> Result<Vec<f64>> {
            Ok(y.to_rows().iter().map(|r| r.iter().map(|v| v * v).sum()).collect())
        }
    }

    /// `f(x_k) = w . x_k + c`.
    struct Linear(Vec<f64>);
    impl Probe for Linear {
        fn per_sample(&self, y: &Tensor2) -> Result<Vec<f64>> {
            Ok(y.to_rows()
                .iter()
                .map(|r| r.iter().zip(&self.0).map(|(a, b)| a * b).sum::<f64>() + 0.5)
                .collect())
        }
    }

    #[test]
    fn first_moment_update_bias_corrected() {
        let mut rm = RollingMoments::new(1, 0.9, 0.999);
        rm.update(&[1.0]).unwrap();
        assert!((rm.m()[0] - 0.1).abs() < 1e-15);
        assert!((rm.m_hat()[0] - 1.0).abs() < 1e-12);
        assert!((rm.v_hat()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_gradients_keep_moments_zero() {
        let mut rm = RollingMoments::new(3, 0.9, 0.999);
        for _ in 0..20 {
            rm.update(&[0.0; 3]).unwrap();
        }
        assert!(rm.m_hat().iter().chain(rm.v_hat()).all(|&v| v == 0.0));
        assert!(rm.update(&[0.0; 2]).is_err());
    }

    #[test]
    fn moments_match_recurrence_oracle() {
        let mut rng = Rng::new(3);
        let gs: Vec<f64> = (0..50).map(|_| rng.next_normal()).collect();
        let mut rm = RollingMoments::new(1, 0.9, 0.999);
        let (mut m, mut v) = (0.0_f64, 0.0_f64);
        for (i, g) in gs.iter().enumerate() {
            rm.update(&[*g]).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let t = (i + 1) as i32;
            assert!((rm.m_hat()[0] - m / (1.0 - 0.9_f64.powi(t))).abs() < 1e-12);
            assert!((rm.v_hat()[0] - v / (1.0 - 0.999_f64.powi(t))).abs() < 1e-12);
        }
    }

    fn moments_with(m_hat: f64, v_hat: f64) -> RollingMoments {
        let mut rm = RollingMoments::new(1, 0.9, 0.999);
        rm.t = 1;
        rm.m_hat = vec![m_hat];
        rm.v_hat = vec![v_hat];
        rm
    }

    #[test]
    fn zero_moments_clamp_to_delta_min() {
        let rm = RollingMoments::new(4, 0.9, 0.999);
        let cfg = EstimatorConfig::default();
        let p = set_perturbations(&rm, &mut Rng::new(1), 1e-3, 5, 16, &cfg).unwrap();
        assert!(p.delta.data().iter().all(|v| v.abs() == DELTA_MIN));
    }

    #[test]
    fn unit_ratio_bounds_limit() {
        let rm = moments_with(1.0, 1.0);
        let b = PerturbationBounds::from_moments(&rm, 1e-300);
        assert!(b.lower[0] > 0.0 && b.lower[0] < 1e-100);
        assert!((b.upper[0] - 1.0).abs() < 1e-9);
        let cfg = EstimatorConfig {
            delta_min: 1e-300,
            ..EstimatorConfig::default()
        };
        let p = set_perturbations(&rm, &mut Rng::new(2), 1e-3, 1, 200, &cfg).unwrap();
        assert!(p.delta.data().iter().all(|v| v.abs() > 0.0 && v.abs() <= 1.0));
    }

    #[test]
    fn stable_root_matches_naive_form() {
        for (m, v) in [(0.3_f64, 0.2_f64), (-1.5, 4.0), (2.0, 0.01)] {
            let dm = 0.05;
            let naive = m.abs() / (v + MOMENT_EPS).sqrt() * (-1.0 + (1.0 + dm * 2.0 * v / (m * m)).sqrt());
            assert!((lower_root(m, v, dm) - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn first_iteration_draws_normal() {
        let rm = RollingMoments::new(5, 0.9, 0.999);
        let cfg = EstimatorConfig::default();
        let p = set_perturbations(&rm, &mut Rng::new(5), 1e-2, 0, 4000, &cfg).unwrap();
        assert!(p.bounds.is_none());
        assert!((p.delta.variance() - 1e-2).abs() < 1e-3);
        let eta = EstimatorConfig {
            init_std: InitStd::Eta,
            ..cfg
        };
        let p = set_perturbations(&rm, &mut Rng::new(5), 1e-2, 0, 4000, &eta).unwrap();
        assert!((p.delta.variance().sqrt() - 1e-2).abs() < 1e-3);
    }

    proptest! {
        #[test]
        fn bounds_ordered_and_contain_samples(
            m in prop::collection::vec(-10.0f64..10.0, 1..6),
            v in prop::collection::vec(0.0f64..50.0, 6),
            seed in 0u64..1000,
        ) {
            let d = m.len();
            let mut rm = RollingMoments::new(d, 0.9, 0.999);
            rm.t = 3;
            rm.m_hat = m;
            rm.v_hat = v[..d].to_vec();
            let b = PerturbationBounds::from_moments(&rm, DELTA_MIN);
            for j in 0..d {
                prop_assert!(b.lower[j] >= DELTA_MIN);
                prop_assert!(b.lower[j] <= b.upper[j]);
            }
            let p = set_perturbations(&rm, &mut Rng::new(seed), 1e-3, 3, 8, &EstimatorConfig::default()).unwrap();
            for k in 0..8 {
                for j in 0..d {
                    prop_assert!(b.contains(j, p.delta.get(k, j).abs()));
                }
            }
        }

        #[test]
        fn rescaled_variance_hits_target(data in prop::collection::vec(-5.0f64..5.0, 8), target in 1e-8f64..10.0) {
            let g = Tensor2::new(2, 4, data).unwrap();
            if let Some(r) = rescale(&g, Some(target)) {
                prop_assert!((r.variance() - target).abs() <= 1e-9 * target);
            }
        }
    }

    #[test]
    fn central_difference_exact_on_quadratic() {
        let y = Tensor2::filled(3, 4, 1.0);
        for step in [1e-4, 0.3, 2.5] {
            let delta = Tensor2::filled(3, 4, step);
            let g = bond_raw(&Quadratic, &y, &delta, false).unwrap();
            assert!(g.data().iter().all(|v| (v - 2.0).abs() < 1e-9), "{g:?}");
            let f = fdsa_estimate(&Quadratic, &y, step, &mut Rng::new(1), false).unwrap();
            assert!(f.g_hat.data().iter().all(|v| (v - 2.0).abs() < 1e-9));
        }
    }

    #[test]
    fn parallel_sweep_is_bit_identical() {
        let mut rng = Rng::new(8);
        let y = sample_normal(&mut rng, 0.0, 1.0, 5, 6).unwrap();
        let delta = sample_normal(&mut rng, 0.0, 0.1, 5, 6).unwrap();
        assert_eq!(
            bond_raw(&Quadratic, &y, &delta, false).unwrap(),
            bond_raw(&Quadratic, &y, &delta, true).unwrap()
        );
    }

    #[test]
    fn single_column_bonds_equals_bond() {
        let mut rng = Rng::new(9);
        let y = sample_normal(&mut rng, 0.0, 1.0, 6, 1).unwrap();
        let delta = sample_normal(&mut rng, 0.0, 0.1, 6, 1).unwrap();
        let probe = Linear(vec![0.7]);
        assert_eq!(
            bond_raw(&probe, &y, &delta, false).unwrap(),
            bonds_raw(&probe, &y, &delta).unwrap()
        );
        assert_eq!(
            bond_raw(&Quadratic, &y, &delta, false).unwrap(),
            bonds_raw(&Quadratic, &y, &delta).unwrap()
        );
    }

    #[test]
    fn row_normalize_gives_unit_rows() {
        let g = Tensor2::from_rows(&[vec![3.0, 4.0], vec![0.0, 0.0], vec![-1.0, 1.0]]).unwrap();
        let n = row_normalize(&g);
        assert_eq!(n.row(0), &[0.6, 0.8]);
        assert_eq!(n.row(1), &[0.0, 0.0]);
        assert!((n.row_norms()[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn spsa_one_dimensional_exact() {
        let y = Tensor2::filled(1, 1, 1.0);
        let cfg = EstimatorConfig::default();
        let e = spsa_estimate(&Quadratic, &y, &cfg, 0.05, &mut Rng::new(4)).unwrap();
        assert!((e.g_hat.get(0, 0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn spsa_unbiased_on_linear() {
        let w = vec![0.5, -1.0, 2.0, 0.25];
        let probe = Linear(w.clone());
        let y = Tensor2::filled(1, 4, 0.3);
        let cfg = EstimatorConfig::default();
        let mut rng = Rng::new(6);
        let mut sum = [0.0; 4];
        let n = 10_000;
        for _ in 0..n {
            let e = spsa_estimate(&probe, &y, &cfg, 0.01, &mut rng).unwrap();
            sum.iter_mut().zip(e.g_hat.data()).for_each(|(s, v)| *s += v);
        }
        let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (s, w) in sum.iter().zip(&w) {
            assert!(
                (s / n as f64 - w).abs() < 0.02 * norm.max(1.0) * 2.0,
                "{} vs {w}",
                s / n as f64
            );
        }
    }

    #[test]
    fn fdsa_equals_bond_with_constant_step() {
        let mut rng = Rng::new(10);
        let reservoir = Reservoir::from_spec(&ReservoirSpec::desk_fixed(), &mut rng).unwrap();
        let readout = FeedForwardNet::new(&NetSpec::new(5, &[16], 1, Activation::Relu), &mut rng).unwrap();
        let loss = LossFn::huber(1.0).unwrap();
        let y_true = sample_normal(&mut rng, 0.0, 1.0, 8, 1).unwrap();
        let probe = ReadoutProbe {
            reservoir: &reservoir,
            readout: &readout,
            loss: &loss,
            y_true: &y_true,
        };
        let y = sample_normal(&mut rng, 0.0, 1.0, 8, 5).unwrap();
        let mu = 1e-3;
        let f = fdsa_estimate(&probe, &y, mu, &mut Rng::new(1), false).unwrap();
        let b = bond_raw(&probe, &y, &Tensor2::filled(8, 5, mu), false).unwrap();
        assert_eq!(f.g_hat, b);
    }

    #[test]
    fn sign_agreement_cases() {
        let a = Tensor2::from_rows(&[vec![1.0, -2.0, 0.0]]).unwrap();
        assert_eq!(sign_agreement(&a, &a).unwrap(), 1.0);
        let b = Tensor2::from_rows(&[vec![-1.0, 2.0]]).unwrap();
        assert_eq!(sign_agreement(&b, &b.scale(-1.0)).unwrap(), 0.0);
        let z = Tensor2::from_rows(&[vec![0.0, 1.0, 0.0]]).unwrap();
        assert!((sign_agreement(&a, &z).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let mut rng = Rng::new(11);
        let x = sample_sign(&mut rng, 100, 100);
        let y = sample_sign(&mut rng, 100, 100);
        assert!((sign_agreement(&x, &y).unwrap() - 0.5).abs() < 0.02);
        assert!(sign_agreement(&a, &b).is_err());
    }

    #[test]
    fn estimator_rejects_ad_and_bad_config() {
        let cfg = EstimatorConfig::default();
        assert!(Estimator::new(EstimatorKind::Ad, cfg.clone(), 5, false).is_err());
        let bad = EstimatorConfig { n_pert: 0, ..cfg };
        assert!(Estimator::new(EstimatorKind::Spsa, bad, 5, false).is_err());
    }

    #[test]
    fn row_norm_resolution() {
        assert!(RowNorm::Auto.resolve(EstimatorKind::Bonds, false));
        assert!(!RowNorm::Auto.resolve(EstimatorKind::Bond, false));
        assert!(RowNorm::Auto.resolve(EstimatorKind::Bond, true));
        assert!(!RowNorm::Off.resolve(EstimatorKind::Bonds, true));
        assert!(RowNorm::On.resolve(EstimatorKind::Bond, false));
    }

    #[test]
    fn parse_round_trip() {
        for k in EstimatorKind::ALL {
            assert_eq!(EstimatorKind::parse(k.name()).unwrap(), k);
        }
        assert!(EstimatorKind::parse("pgt").is_err());
    }
}
