//! Built-in self-checks reported with per-check margins.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autoencoder::AutoencoderPair;
use crate::diagnostics::{bound_audit, fd_audit};
use crate::error::{Error, Result};
use crate::geometry::{concentration_epsilon, shell_band_test, LinearManifold};
use crate::guidance::{guide_clean_estimate, CleanUpdate, GuidanceLoss, InnerOptimizer, LinearInverseLoss, QuadraticLoss, StepCounters};
use crate::prior::MixturePrior;
use crate::rng;
use crate::sampler::{forward_sample, NoiseSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Concentration,
    Shortcut,
    Autoencoder,
    Bound,
    Gradients,
    All,
}

impl Suite {
    const NAMES: [(&'static str, Suite); 6] = [
        ("concentration", Suite::Concentration),
        ("shortcut", Suite::Shortcut),
        ("autoencoder", Suite::Autoencoder),
        ("bound", Suite::Bound),
        ("gradients", Suite::Gradients),
        ("all", Suite::All),
    ];
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::NAMES
            .iter()
            .find(|(n, _)| *n == s)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::config("suite", format!("unknown suite `{s}`")))
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = Suite::NAMES.iter().find(|(_, v)| v == self).map(|(n, _)| *n).unwrap_or("?");
        f.write_str(name)
    }
}

/// One check: `value` compared with `threshold`. `margin` is positive when passing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub suite: Suite,
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub margin: f64,
    pub passed: bool,
}

impl Check {
    fn at_most(suite: Suite, name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self { suite, name: name.into(), value, threshold, margin: threshold - value, passed: value <= threshold }
    }

    fn at_least(suite: Suite, name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self { suite, name: name.into(), value, threshold, margin: value - threshold, passed: value >= threshold }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub suite: Suite,
    pub passed: bool,
    pub checks: Vec<Check>,
}

/// Runs the selected suite with a fixed seed.
pub fn verify(suite: Suite, seed: u64) -> Result<VerifyReport> {
    let mut checks = Vec::new();
    let all = suite == Suite::All;
    if all || suite == Suite::Concentration {
        concentration(seed, &mut checks)?;
    }
    if all || suite == Suite::Shortcut {
        shortcut(seed, &mut checks)?;
    }
    if all || suite == Suite::Autoencoder {
        autoencoder(seed, &mut checks)?;
    }
    if all || suite == Suite::Bound {
        bound(seed, &mut checks)?;
    }
    if all || suite == Suite::Gradients {
        gradients(seed, &mut checks)?;
    }
    let passed = checks.iter().all(|c| c.passed);
    Ok(VerifyReport { suite, passed, checks })
}

fn benchmark_prior(d: usize, k: usize, seed: u64) -> Result<MixturePrior> {
    MixturePrior::random_mixture(LinearManifold::random(d, k, seed)?, 3, 1.5, 0.5, seed ^ 0x5eed)
}

fn concentration(seed: u64, checks: &mut Vec<Check>) -> Result<()> {
    const N: usize = 10_000;
    let (d, k) = (64, 8);
    let prior = benchmark_prior(d, k, seed)?;
    let m = prior.manifold();
    let mut r = rng::seeded(seed);
    for delta in [0.01, 0.05] {
        let eps = concentration_epsilon(delta, d - k)?;
        for ab in [0.2, 0.5, 0.8] {
            let mut hits = 0usize;
            for x0 in prior.sample(N, &mut r) {
                if shell_band_test(&forward_sample(&x0, ab, &mut r), m, ab, eps)? {
                    hits += 1;
                }
            }
            let floor = 1.0 - delta - 3.0 * (delta * (1.0 - delta) / N as f64).sqrt();
            checks.push(Check::at_least(Suite::Concentration, format!("band pass rate, delta={delta}, alpha_bar={ab}"), hits as f64 / N as f64, floor));
        }
    }
    let widths: Vec<f64> = (1..=512).map(|n| concentration_epsilon(0.05, n)).collect::<Result<_>>()?;
    let worst_rise = widths.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
    checks.push(Check::at_most(Suite::Concentration, "band width nonincreasing in dof", worst_rise, 0.0));
    Ok(())
}

fn shortcut(seed: u64, checks: &mut Vec<Check>) -> Result<()> {
    let prior = benchmark_prior(32, 4, seed)?;
    let m = prior.manifold();
    let pair = AutoencoderPair::perfect_linear(m.clone());
    let loss = QuadraticLoss::isotropic(rng::standard_normal(&mut rng::seeded(seed + 1), 32), 1.0);
    let mut r = rng::seeded(seed + 2);
    let mut tweedie = 0.0_f64;
    let mut guided = 0.0_f64;
    let mut counters = StepCounters::default();
    for i in 0..200 {
        let ab = 0.02 + 0.96 * (i as f64 / 199.0);
        let x = rng::standard_normal(&mut r, 32) * 2.0;
        tweedie = tweedie.max(prior.tweedie_on_manifold_check(ab, &x)?);
        let x0 = m.project(&x);
        let (g, _) = guide_clean_estimate(&x0, &loss, 0.3, CleanUpdate::Projected(&pair), InnerOptimizer::default(), &mut counters)?;
        guided = guided.max(m.orthogonal(&g).norm());
    }
    checks.push(Check::at_most(Suite::Shortcut, "clean estimate off-manifold norm", tweedie, 1e-10));
    checks.push(Check::at_most(Suite::Shortcut, "projected update off-manifold norm", guided, 1e-10));
    Ok(())
}

fn autoencoder(seed: u64, checks: &mut Vec<Check>) -> Result<()> {
    let m = LinearManifold::random(64, 8, seed)?;
    let pair = AutoencoderPair::perfect_linear(m.clone());
    let mut r = rng::seeded(seed + 3);
    let (mut gap, mut angle, mut normal) = (0.0_f64, 0.0_f64, 0.0_f64);
    for _ in 0..1000 {
        let x = rng::standard_normal(&mut r, 64);
        let (g, a) = pair.jacobian_identity_report(&x)?;
        gap = gap.max(g);
        angle = angle.max(a);
        let loss = QuadraticLoss::isotropic(rng::standard_normal(&mut r, 64), 1.0);
        normal = normal.max(m.orthogonal(&pair.projected_gradient(&x, &loss)?).norm());
    }
    checks.push(Check::at_most(Suite::Autoencoder, "encoder-decoder Jacobian identity gap", gap, 1e-10));
    checks.push(Check::at_most(Suite::Autoencoder, "principal angle gap", angle, 1e-8));
    checks.push(Check::at_most(Suite::Autoencoder, "projected gradient normal component", normal, 1e-10));
    Ok(())
}

fn bound(seed: u64, checks: &mut Vec<Check>) -> Result<()> {
    let prior = benchmark_prior(32, 4, seed)?;
    let sched = NoiseSchedule::linear_beta(100, 0.5)?;
    let mut r = rng::seeded(seed + 4);
    let mut worst = f64::NEG_INFINITY;
    let mut violations = 0;
    for _ in 0..100 {
        let q = DMatrix::from_fn(32, 32, |_, _| rng::normal_scalar(&mut r));
        let loss = QuadraticLoss::new(q.tr_mul(&q) / 32.0, rng::standard_normal(&mut r, 32))?;
        let t = r.random_range(1..=100);
        let x = rng::standard_normal(&mut r, 32);
        let noise = rng::standard_normal(&mut r, 32);
        let a = bound_audit(&prior, &sched, t, &x, &loss, 0.05, &noise)?;
        let excess = a.distance - a.bound;
        worst = worst.max(excess);
        if excess > 1e-9 {
            violations += 1;
        }
    }
    checks.push(Check::at_most(Suite::Bound, "largest distance minus bound", worst, 1e-9));
    checks.push(Check::at_most(Suite::Bound, "violations over 100 paired steps", violations as f64, 0.0));
    Ok(())
}

fn gradients(seed: u64, checks: &mut Vec<Check>) -> Result<()> {
    let prior = benchmark_prior(16, 3, seed)?;
    let mut r = rng::seeded(seed + 5);
    let a = DMatrix::from_fn(4, 16, |_, _| rng::normal_scalar(&mut r) / 2.0);
    let x_true = prior.sample(1, &mut r).remove(0);
    let inverse = LinearInverseLoss::simulate(a, &x_true, 0.0025, 1.0, &mut r)?;
    let q = DMatrix::from_fn(16, 16, |_, _| rng::normal_scalar(&mut r));
    let quadratic = QuadraticLoss::new(q.tr_mul(&q) / 16.0, rng::standard_normal(&mut r, 16))?;
    let losses: [(&str, &dyn GuidanceLoss); 2] = [("linear-inverse", &inverse), ("quadratic", &quadratic)];
    let (mut loss_err, mut denoiser_err) = (0.0_f64, 0.0_f64);
    for i in 0..100 {
        let x = rng::standard_normal(&mut r, 16) * 1.5;
        let ab = 0.05 + 0.9 * (i as f64 / 99.0);
        let h = 1e-5 * (1.0 + x.norm());
        let (_, loss) = losses[i % 2];
        let rep = fd_audit(&prior, ab, &x, loss, h)?;
        loss_err = loss_err.max(rep.loss_gradient);
        denoiser_err = denoiser_err.max(rep.jacobian.max(rep.dps_gradient));
    }
    checks.push(Check::at_most(Suite::Gradients, "loss gradient relative error", loss_err, 1e-5));
    checks.push(Check::at_most(Suite::Gradients, "denoiser relative error", denoiser_err, 1e-4));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_parse() {
        for (n, s) in Suite::NAMES {
            assert_eq!(n.parse::<Suite>().unwrap(), s);
            assert_eq!(s.to_string(), n);
        }
        assert!("nope".parse::<Suite>().is_err());
    }

    #[test]
    fn cheap_suites_pass() {
        for s in [Suite::Shortcut, Suite::Bound, Suite::Gradients] {
            let rep = verify(s, 11).unwrap();
            assert!(rep.passed, "{rep:#?}");
            assert!(rep.checks.iter().all(|c| c.suite == s));
        }
    }
}
