//! Self-checks against independent references: finite-difference gradient
//! checks, splice exactness, estimator-vs-exact agreement and bound scans.
//!
//! [`Fault`] deliberately corrupts the code under test so that a harness can
//! confirm the checks actually fail on a broken backward pass.

use serde::Serialize;

use crate::autodiff::{FeedForwardNet, LossFn};
use crate::error::{Error, Result};
use crate::estimators::{
    bond_raw, fdsa_estimate, EstimatorConfig, EstimatorKind, PerturbationBounds, Probe, ReadoutProbe, RollingMoments,
};
use crate::harness::{train_observed, ArchKind, ArchitectureSpec, Dataset, HybridModel, Task, TrainConfig};
use crate::numerics::{sample_normal, Rng, Tensor2};
use crate::reservoirs::{ParallelSpec, Reservoir, ReservoirSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Negates the read-in gradient produced by backpropagation.
    FlipBackwardSign,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Autodiff,
    Estimator,
    Bounds,
}

impl Scope {
    pub const ALL: [Scope; 3] = [Scope::Autodiff, Scope::Estimator, Scope::Bounds];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "autodiff" => Ok(Scope::Autodiff),
            "estimator" => Ok(Scope::Estimator),
            "bounds" => Ok(Scope::Bounds),
            _ => Err(Error::Config(format!("unknown oracle scope `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn at_most(name: impl Into<String>, value: f64, threshold: f64, detail: String) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            passed: value <= threshold,
            detail,
        }
    }

    fn at_least(name: impl Into<String>, value: f64, threshold: f64, detail: String) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            passed: value >= threshold,
            detail,
        }
    }
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<36} value={:.3e} threshold={:.3e} {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.value,
            self.threshold,
            self.detail
        )
    }
}

/// `|a - n| / max(|a|, |n|, 1)`.
pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

/// Every architecture the experiments train, with (input, output) widths.
pub fn experiment_architectures() -> Vec<(&'static str, ArchitectureSpec, usize, usize)> {
    let mut parallel = ArchitectureSpec::desk(ArchKind::Nfn);
    parallel.reservoir = ReservoirSpec::Parallel(ParallelSpec {
        input: 10,
        sub_input: 5,
        sub_hidden: vec![100],
        sub_output: 5,
    });
    vec![
        ("nfn", ArchitectureSpec::desk(ArchKind::Nfn), 8, 1),
        ("nen", ArchitectureSpec::desk(ArchKind::Nen), 8, 1),
        ("lfn", ArchitectureSpec::desk(ArchKind::Lfn), 8, 1),
        ("len", ArchitectureSpec::desk(ArchKind::Len), 8, 1),
        ("nfn-parallel", parallel, 8, 1),
        ("no-reservoir", ArchitectureSpec::desk(ArchKind::NoReservoir), 8, 1),
        ("nfn-classify", ArchitectureSpec::desk(ArchKind::Nfn), 8, 10),
    ]
}

fn targets(rng: &mut Rng, rows: usize, output: usize) -> Result<(Tensor2, LossFn)> {
    if output == 1 {
        Ok((sample_normal(rng, 0.0, 2.0, rows, 1)?, LossFn::huber(1.0)?))
    } else {
        let labels = (0..rows).map(|_| rng.below(output) as f64).collect();
        Ok((Tensor2::new(rows, 1, labels)?, LossFn::cross_entropy()))
    }
}

/// Exact gradients of every trainable parameter through the full hybrid
/// model, with `dL/dY_a` taken from the simulated reservoir graph.
fn hybrid_gradients(model: &mut HybridModel, x: &Tensor2, y: &Tensor2, loss: &LossFn) -> Result<Vec<f64>> {
    model.read_in.zero_grads();
    model.read_out.zero_grads();
    let y_a = model.read_in.forward(x)?;
    let y_r = match model.reservoir.as_mut() {
        Some(r) => r.forward(&y_a)?,
        None => y_a.clone(),
    };
    model.read_out.forward(&y_r)?;
    let grad_y_r = model.read_out.backward_from_loss(loss, y)?;
    let mut grads = Vec::new();
    if model.read_in_trainable {
        let g = match &model.reservoir {
            Some(r) => r.ad_gradient(&y_a, &grad_y_r)?,
            None => grad_y_r,
        };
        model.read_in.backward_from_gradient(&g)?;
        grads.extend(model.read_in.grads_flat());
    }
    grads.extend(model.read_out.grads_flat());
    Ok(grads)
}

/// Pure reservoir-side half of the model: `R(f_a(x))` and the read-in ReLU
/// pattern. An echo state reservoir starts from the last forward's snapshot.
fn front(model: &HybridModel, x: &Tensor2) -> Result<(Tensor2, Vec<bool>)> {
    let (y_a, pattern) = model.read_in.predict_with_pattern(x)?;
    let y_r = match &model.reservoir {
        Some(r) => r.evaluate(&y_a)?,
        None => y_a,
    };
    Ok((y_r, pattern))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameters whose +-h evaluations straddle a ReLU kink.
    pub skipped_kinks: usize,
}

/// Central differences over every trainable parameter of one architecture.
pub fn gradient_check(
    spec: &ArchitectureSpec,
    input: usize,
    output: usize,
    seed: u64,
    step: f64,
    fault: Option<Fault>,
) -> Result<GradCheck> {
    let mut model = HybridModel::build(spec, input, output, seed)?;
    let mut rng = Rng::stream(seed, 0x0c);
    let x = sample_normal(&mut rng, 0.0, 1.0, 4, input)?;
    let (y, loss) = targets(&mut rng, 4, output)?;
    let mut analytic = hybrid_gradients(&mut model, &x, &y, &loss)?;
    if fault == Some(Fault::FlipBackwardSign) && model.read_in_trainable {
        let n = model.read_in.parameter_count();
        analytic[..n].iter_mut().for_each(|g| *g = -*g);
    }

    let n_in = if model.read_in_trainable {
        model.read_in.parameter_count()
    } else {
        0
    };
    let (base_y_r, base_front) = front(&model, &x)?;
    let base_back = model.read_out.predict_with_pattern(&base_y_r)?.1;
    let mut worst = 0.0_f64;
    let mut skipped = 0;
    // returns the loss and whether every ReLU kept its state
    let eval = |model: &mut HybridModel, i: usize, delta: f64| -> Result<(f64, bool)> {
        let (net, j) = if i < n_in {
            (&mut model.read_in, i)
        } else {
            (&mut model.read_out, i - n_in)
        };
        let p = net.param_mut(j).ok_or(Error::State("parameter index out of range"))?;
        let orig = *p;
        *p = orig + delta;
        let result = (|| {
            let (y_r, same_front) = if i < n_in {
                let (y_r, pat) = front(model, &x)?;
                (y_r, pat == base_front)
            } else {
                (base_y_r.clone(), true)
            };
            let (pred, back) = model.read_out.predict_with_pattern(&y_r)?;
            Ok((loss.eval(&pred, &y)?, same_front && back == base_back))
        })();
        let net = if i < n_in {
            &mut model.read_in
        } else {
            &mut model.read_out
        };
        *net.param_mut(j).expect("index checked") = orig;
        result
    };
    for i in 0..analytic.len() {
        let (up, same_up) = eval(&mut model, i, step)?;
        let (down, same_down) = eval(&mut model, i, -step)?;
        if !(same_up && same_down) {
            skipped += 1;
            continue;
        }
        worst = worst.max(relative_error(analytic[i], (up - down) / (2.0 * step)));
    }
    Ok(GradCheck {
        max_rel_error: worst,
        checked: analytic.len() - skipped,
        skipped_kinks: skipped,
    })
}

/// Largest deviation between read-in parameter gradients obtained by
/// injecting the exact `dL/dY_a` and those from backpropagating one
/// concatenated network end to end. Needs a feedforward reservoir.
pub fn splice_error(spec: &ArchitectureSpec, input: usize, seed: u64, fault: Option<Fault>) -> Result<f64> {
    let mut model = HybridModel::build(spec, input, 1, seed)?;
    let reservoir_layers = match &model.reservoir {
        Some(Reservoir::Fixed(r)) => r.net().to_layers(),
        _ => return Err(Error::Parameter("splice check needs a fixed reservoir".into())),
    };
    let mut rng = Rng::stream(seed, 0x5b);
    let x = sample_normal(&mut rng, 0.0, 1.0, 64, input)?;
    let (y, loss) = targets(&mut rng, 64, 1)?;
    let spliced = hybrid_gradients(&mut model, &x, &y, &loss)?;
    let n_in = model.read_in.parameter_count();
    let mut spliced_in = spliced[..n_in].to_vec();
    if fault == Some(Fault::FlipBackwardSign) {
        spliced_in.iter_mut().for_each(|g| *g = -*g);
    }

    let mut layers = model.read_in.to_layers();
    layers.extend(reservoir_layers);
    layers.extend(model.read_out.to_layers());
    let mut whole = FeedForwardNet::from_layers(layers)?;
    whole.forward(&x)?;
    whole.backward_from_loss(&loss, &y)?;
    let reference = whole.grads_flat();
    Ok(spliced_in
        .iter()
        .zip(&reference[..n_in])
        .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs())))
}

/// BOND sign agreement against the exact gradient on a freshly built desk
/// NFN, averaged over `batches` random batches of 64. Moments are warmed up
/// with the exact gradient so bounds are active from the first batch.
pub fn bond_sign_check(seed: u64, batches: usize, fault: Option<Fault>) -> Result<f64> {
    let spec = ArchitectureSpec::desk(ArchKind::Nfn);
    let mut model = HybridModel::build(&spec, 8, 1, seed)?;
    let mut rng = Rng::stream(seed, 0xb0);
    let loss = LossFn::huber(1.0)?;
    let cfg = EstimatorConfig::default();
    let mut total = 0.0;
    for _ in 0..batches {
        let x = sample_normal(&mut rng, 0.0, 1.0, 64, 8)?;
        let (y, _) = targets(&mut rng, 64, 1)?;
        let y_a = model.read_in.forward(&x)?;
        let reservoir = model.reservoir.as_mut().expect("nfn has a reservoir");
        let y_r = reservoir.forward(&y_a)?;
        model.read_out.forward(&y_r)?;
        let grad_y_r = model.read_out.backward_from_loss(&loss, &y)?;
        let reservoir = model.reservoir.as_ref().expect("nfn has a reservoir");
        let mut exact = reservoir.ad_gradient(&y_a, &grad_y_r)?;
        if fault == Some(Fault::FlipBackwardSign) {
            exact = exact.scale(-1.0);
        }
        let mut rm = RollingMoments::new(5, cfg.beta1, cfg.beta2);
        rm.update_from_batch(&exact)?;
        let bounds = PerturbationBounds::from_moments(&rm, cfg.delta_min);
        let delta = crate::estimators::set_perturbations(&rm, &mut rng, 1e-3, 1, 64, &cfg)?.delta;
        debug_assert!(delta
            .data()
            .iter()
            .enumerate()
            .all(|(k, d)| bounds.contains(k % 5, d.abs())));
        let probe = ReadoutProbe {
            reservoir,
            readout: &model.read_out,
            loss: &loss,
            y_true: &y,
        };
        let g = bond_raw(&probe, &y_a, &delta, false)?;
        total += crate::estimators::sign_agreement(&g, &exact)?;
        model.read_out.zero_grads();
    }
    Ok(total / batches as f64)
}

/// Max relative error of FDSA with step `mu` against the exact gradient, in
/// per-sample units (the exact gradient of each sample's own loss).
pub fn fdsa_convergence(seed: u64, mu: f64) -> Result<f64> {
    let spec = ArchitectureSpec::desk(ArchKind::Nfn);
    let mut model = HybridModel::build(&spec, 8, 1, seed)?;
    let mut rng = Rng::stream(seed, 0xfd);
    let loss = LossFn::huber(1.0)?;
    let rows = 16;
    let x = sample_normal(&mut rng, 0.0, 1.0, rows, 8)?;
    let (y, _) = targets(&mut rng, rows, 1)?;
    let y_a = model.read_in.forward(&x)?;
    let y_r = model.reservoir.as_mut().expect("nfn has a reservoir").forward(&y_a)?;
    model.read_out.forward(&y_r)?;
    let grad_y_r = model.read_out.backward_from_loss(&loss, &y)?;
    let reservoir = model.reservoir.as_ref().expect("nfn has a reservoir");
    let exact = reservoir.ad_gradient(&y_a, &grad_y_r)?.scale(rows as f64);
    let probe = ReadoutProbe {
        reservoir,
        readout: &model.read_out,
        loss: &loss,
        y_true: &y,
    };
    let est = fdsa_estimate(&probe, &y_a, mu, &mut rng, false)?;
    let scale = exact.max_abs().max(f64::MIN_POSITIVE);
    Ok(est
        .g_hat
        .data()
        .iter()
        .zip(exact.data())
        .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs() / scale)))
}

/// `sum x^2` per sample.
struct Quadratic;

impl Probe for Quadratic {
    fn per_sample(&self, y: &Tensor2) -> Result<Vec<f64>> {
        Ok(y.to_rows().iter().map(|r| r.iter().map(|v| v * v).sum()).collect())
    }
}

/// Worst deviation from the exact value 2 of central differences of `sum x^2`
/// at the all-ones point, over several step sizes.
pub fn quadratic_exactness() -> Result<f64> {
    let y = Tensor2::filled(4, 5, 1.0);
    let mut worst = 0.0_f64;
    for step in [1e-5, 1e-2, 0.5, 3.0] {
        let g = bond_raw(&Quadratic, &y, &Tensor2::filled(4, 5, step), false)?;
        worst = g.data().iter().fold(worst, |m, v| m.max((v - 2.0).abs()));
    }
    Ok(worst)
}

/// Fraction of random `(m̂, v̂)` draws whose bounds are ordered and floored.
pub fn bound_ordering(seed: u64, draws: usize) -> Result<f64> {
    let mut rng = Rng::stream(seed, 0xbd);
    let mut good = 0;
    for _ in 0..draws {
        let mut rm = RollingMoments::new(1, 0.9, 0.999);
        let m = rng.next_normal() * 10f64.powf(rng.uniform(-6.0, 2.0));
        rm.update(&[m])?;
        let v = rng.next_f64() * 10f64.powf(rng.uniform(-8.0, 2.0));
        rm.update(&[v.sqrt() * rng.next_sign()])?;
        let b = PerturbationBounds::from_moments(&rm, crate::estimators::DELTA_MIN);
        if b.lower[0] >= b.delta_min && b.lower[0] <= b.upper[0] {
            good += 1;
        }
    }
    Ok(good as f64 / draws as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ContainmentScan {
    pub samples: usize,
    pub violations: usize,
    pub below_delta_min: usize,
}

/// Trains `arch` with BOND and checks every sampled perturbation magnitude
/// after the first iteration against its bounds.
pub fn bound_containment(arch: &ArchitectureSpec, ds: &Dataset, cfg: &TrainConfig) -> Result<ContainmentScan> {
    let mut scan = ContainmentScan {
        samples: 0,
        violations: 0,
        below_delta_min: 0,
    };
    train_observed(arch, ds, cfg, |trace| {
        let Some(est) = trace.estimate else { return };
        let (Some(delta), Some(bounds)) = (&est.delta_x, &est.bounds) else {
            return;
        };
        let d = delta.cols();
        for (k, v) in delta.data().iter().enumerate() {
            let m = v.abs();
            scan.samples += 1;
            if !bounds.contains(k % d, m) {
                scan.violations += 1;
            }
            if m < bounds.delta_min {
                scan.below_delta_min += 1;
            }
        }
    })?;
    Ok(scan)
}

fn small_housing(seed: u64) -> Result<Dataset> {
    let (x, y) = crate::harness::synthetic_housing(640, seed);
    Dataset::from_arrays(&x, &y, Task::Regression, 10_000.0, 0.8, seed)
}

/// Runs one scope of the oracle suite.
pub fn run_scope(scope: Scope, seed: u64, fault: Option<Fault>) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    match scope {
        Scope::Autodiff => {
            for (name, spec, input, output) in experiment_architectures() {
                let g = gradient_check(&spec, input, output, seed, 1e-5, fault)?;
                out.push(CheckResult::at_most(
                    format!("gradcheck/{name}"),
                    g.max_rel_error,
                    1e-6,
                    format!("params={} kinks_skipped={}", g.checked, g.skipped_kinks),
                ));
            }
            let e = splice_error(&ArchitectureSpec::desk(ArchKind::Nfn), 8, seed, fault)?;
            out.push(CheckResult::at_most("splice/nfn", e, 1e-12, "read-in gradients".into()));
        }
        Scope::Estimator => {
            let s = bond_sign_check(seed, 8, fault)?;
            out.push(CheckResult::at_least(
                "bond-sign/nfn",
                s,
                0.99,
                "8 batches of 64".into(),
            ));
            let f = fdsa_convergence(seed, 1e-5)?;
            out.push(CheckResult::at_most("fdsa-vs-exact/nfn", f, 1e-3, "mu=1e-5".into()));
            let q = quadratic_exactness()?;
            out.push(CheckResult::at_most(
                "central-difference/quadratic",
                q,
                1e-9,
                "steps 1e-5..3".into(),
            ));
        }
        Scope::Bounds => {
            let o = bound_ordering(seed, 10_000)?;
            out.push(CheckResult::at_least("bounds/ordering", o, 1.0, "10000 draws".into()));
            let ds = small_housing(seed)?;
            let cfg = TrainConfig {
                epochs: 2,
                estimator: EstimatorKind::Bond,
                seed,
                ..TrainConfig::default()
            };
            let scan = bound_containment(&ArchitectureSpec::desk(ArchKind::Nfn), &ds, &cfg)?;
            out.push(CheckResult::at_most(
                "bounds/containment",
                scan.violations as f64 + scan.below_delta_min as f64,
                0.0,
                format!("samples={}", scan.samples),
            ));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1e-9, 2e-9), 1e-9);
        assert!((relative_error(10.0, 11.0) - 1.0 / 11.0).abs() < 1e-15);
    }

    #[test]
    fn small_architecture_gradcheck_and_fault() {
        let mut spec = ArchitectureSpec::desk(ArchKind::Nfn);
        spec.read_in_hidden = vec![6];
        spec.read_out_hidden = vec![7];
        spec.reservoir = ReservoirSpec::Fixed(crate::reservoirs::FixedSpec {
            input: 3,
            hidden: vec![8],
            output: 3,
        });
        let g = gradient_check(&spec, 4, 1, 3, 1e-5, None).unwrap();
        assert!(g.max_rel_error < 1e-6, "{g:?}");
        let bad = gradient_check(&spec, 4, 1, 3, 1e-5, Some(Fault::FlipBackwardSign)).unwrap();
        assert!(bad.max_rel_error > 1e-3);
        assert!(splice_error(&spec, 4, 3, None).unwrap() <= 1e-12);
        assert!(splice_error(&spec, 4, 3, Some(Fault::FlipBackwardSign)).unwrap() > 1e-6);
    }

    #[test]
    fn quadratic_and_ordering() {
        assert!(quadratic_exactness().unwrap() < 1e-9);
        assert_eq!(bound_ordering(1, 500).unwrap(), 1.0);
    }

    #[test]
    fn scope_names() {
        assert_eq!(Scope::parse("bounds").unwrap(), Scope::Bounds);
        assert!(Scope::parse("all").is_err());
    }
}
