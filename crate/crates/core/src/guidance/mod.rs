//! Guided reverse diffusion: losses, step rules and the chain runner.

pub mod loss;
pub mod optimize;
pub mod step_size;
pub mod steps;

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use loss::{GuidanceLoss, LinearInverseLoss, LinearLoss, QuadraticLoss, ZeroLoss};
pub use optimize::{multi_step_optimize, InnerOptimizer, OptimizeOutcome, OptimizerKind};
pub use step_size::{dps_matched_weight, StepSizeMode, StepSizeSchedule};
pub use steps::{
    clean_guided_step, ddim_unguided, dps_gradient, dps_step, guide_clean_estimate, mpgd_ae_step, mpgd_step, mpgd_z_step, time_travel, CleanUpdate,
    DpsGradient, GuidedStep, StepCounters,
};

use crate::autoencoder::AutoencoderPair;
use crate::diagnostics::bound_audit;
use crate::error::{Error, Result};
use crate::prior::{Denoiser, MixturePrior};
use crate::rng::{self, LabRng};
use crate::sampler::{tweedie_estimate, NoiseSchedule, StateSpace, StepRecord, TrajectoryRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Ddim,
    Dps,
    Mpgd,
    MpgdAe,
    MpgdZ,
    MpgdLdm,
}

impl Method {
    pub const ALL: [Method; 6] = [Method::Ddim, Method::Dps, Method::Mpgd, Method::MpgdAe, Method::MpgdZ, Method::MpgdLdm];

    pub fn needs_autoencoder(self) -> bool {
        matches!(self, Method::MpgdAe | Method::MpgdZ | Method::MpgdLdm)
    }

    pub fn is_guided(self) -> bool {
        self != Method::Ddim
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Ddim => "ddim",
            Method::Dps => "dps",
            Method::Mpgd => "mpgd",
            Method::MpgdAe => "mpgd-ae",
            Method::MpgdZ => "mpgd-z",
            Method::MpgdLdm => "mpgd-ldm",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config("method", format!("unknown method `{s}`")))
    }
}

/// Fraction-of-`T` interval `[lo, hi]` in which the autoencoder projection runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActiveWindow {
    pub hi: f64,
    pub lo: f64,
}

impl Default for ActiveWindow {
    fn default() -> Self {
        Self { hi: 0.5, lo: 0.3 }
    }
}

impl ActiveWindow {
    /// The whole reverse process.
    pub fn full() -> Self {
        Self { hi: 1.0, lo: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if (0.0..=1.0).contains(&self.lo) && (0.0..=1.0).contains(&self.hi) && self.lo <= self.hi {
            Ok(())
        } else {
            Err(Error::config("window", format!("need 0 <= lo <= hi <= 1, got [{}, {}]", self.hi, self.lo)))
        }
    }

    pub fn contains(&self, t: usize, steps: usize) -> bool {
        let f = t as f64 / steps as f64;
        f <= self.hi && f >= self.lo
    }
}

/// Everything that selects and tunes a guided sampler.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceSettings {
    pub method: Method,
    pub step_size: StepSizeSchedule,
    #[serde(default)]
    pub window: ActiveWindow,
    #[serde(default)]
    pub inner: InnerOptimizer,
    /// Time-travel repeats per step.
    #[serde(default)]
    pub travel: usize,
    /// Record the paired DPS/MPGD distance audit at every DPS step.
    #[serde(default)]
    pub audit_bound: bool,
}

impl GuidanceSettings {
    pub fn new(method: Method, rho: f64) -> Self {
        Self {
            method,
            step_size: StepSizeSchedule::constant(rho),
            window: ActiveWindow::default(),
            inner: InnerOptimizer::default(),
            travel: 0,
            audit_bound: false,
        }
    }
}

/// Output of one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainResult {
    pub trajectory: TrajectoryRecord,
    pub counters: StepCounters,
    pub terminal_loss: f64,
    pub line_search_failures: usize,
}

/// Runs guided chains for one prior, schedule, loss and method.
pub struct GuidedSampler<'a, L: GuidanceLoss + ?Sized> {
    pub prior: &'a MixturePrior,
    pub schedule: &'a NoiseSchedule,
    pub loss: &'a L,
    pub pair: Option<&'a AutoencoderPair>,
    pub settings: GuidanceSettings,
}

impl<'a, L: GuidanceLoss + ?Sized> GuidedSampler<'a, L> {
    pub fn new(prior: &'a MixturePrior, schedule: &'a NoiseSchedule, loss: &'a L, pair: Option<&'a AutoencoderPair>, settings: GuidanceSettings) -> Result<Self> {
        let s = Self { prior, schedule, loss, pair, settings };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        let d = self.prior.manifold().ambient_dim();
        if self.loss.dim() != d {
            return Err(Error::config("loss", format!("loss acts on dimension {}, prior on {d}", self.loss.dim())));
        }
        if self.settings.method.needs_autoencoder() {
            let pair = self.pair.ok_or_else(|| Error::config("ae", format!("method {} needs an autoencoder", self.settings.method)))?;
            if pair.ambient_dim() != d || pair.latent_dim() != self.prior.manifold().latent_dim() {
                return Err(Error::config("ae", "autoencoder dimensions do not match the manifold"));
            }
        }
        if self.settings.method.is_guided() {
            self.settings.step_size.validate()?;
        }
        if self.settings.inner.steps == 0 {
            return Err(Error::config("inner.steps", "must be at least 1"));
        }
        self.settings.window.validate()
    }

    fn pair(&self) -> &'a AutoencoderPair {
        self.pair.expect("validated at construction")
    }

    /// Runs `n` chains; chain `i` draws from stream `i` of `master_seed`.
    pub fn run(&self, n: usize, master_seed: u64) -> Result<Vec<ChainResult>> {
        (0..n).into_par_iter().map(|i| self.run_chain(i, master_seed)).collect()
    }

    pub fn run_chain(&self, chain: usize, master_seed: u64) -> Result<ChainResult> {
        let mut rng = rng::chain_stream(master_seed, chain as u64);
        if self.settings.method == Method::MpgdLdm {
            self.run_latent_chain(chain, &mut rng)
        } else {
            self.run_ambient_chain(chain, &mut rng)
        }
    }

    fn step_sizes<D: Denoiser + ?Sized>(&self, denoiser: &D, t: usize, x_t: &DVector<f64>, counters: &mut StepCounters, decode: bool) -> Result<(f64, f64)> {
        let current_loss = if self.settings.step_size.mode == StepSizeMode::LossNormalized {
            let ab = self.schedule.alpha_bar(t);
            let eps = denoiser.predict_noise(ab, x_t)?;
            counters.denoiser_calls += 1;
            let x0 = tweedie_estimate(x_t, &eps, ab)?;
            let x0 = if decode { self.pair().decode(&x0) } else { x0 };
            self.loss.value(&x0)
        } else {
            0.0
        };
        self.settings.step_size.resolve(self.schedule, t, current_loss)
    }

    fn run_ambient_chain(&self, chain: usize, rng: &mut LabRng) -> Result<ChainResult> {
        let prior = self.prior;
        let sched = self.schedule;
        let d = prior.manifold().ambient_dim();
        let steps = sched.steps();
        let method = self.settings.method;
        let inner = self.settings.inner;
        let mut counters = StepCounters::default();
        let mut failures = 0;
        let mut record = TrajectoryRecord::new(chain, StateSpace::Ambient);
        let mut x = rng::standard_normal(rng, d);

        for t in (1..=steps).rev() {
            let (rho_t, c_t) = if method.is_guided() {
                self.step_sizes(prior, t, &x, &mut counters, false)?
            } else {
                (0.0, 0.0)
            };
            let active = self.settings.window.contains(t, steps);
            let mut audit = None;
            let audit_wanted = self.settings.audit_bound && method == Method::Dps;
            let (out, x_t) = time_travel(
                |xt, noise| {
                    let out = match method {
                        Method::Ddim => ddim_unguided(prior, sched, t, xt, noise, &mut counters),
                        Method::Dps => dps_step(prior, sched, t, xt, self.loss, rho_t, noise, &mut counters),
                        Method::Mpgd => clean_guided_step(prior, sched, t, xt, self.loss, c_t, CleanUpdate::Plain, inner, noise, &mut counters),
                        Method::MpgdAe => {
                            let update = if active { CleanUpdate::Projected(self.pair()) } else { CleanUpdate::Plain };
                            clean_guided_step(prior, sched, t, xt, self.loss, c_t, update, inner, noise, &mut counters)
                        }
                        Method::MpgdZ => clean_guided_step(prior, sched, t, xt, self.loss, c_t, CleanUpdate::Latent(self.pair()), inner, noise, &mut counters),
                        Method::MpgdLdm => unreachable!("latent chains run separately"),
                    }?;
                    if audit_wanted {
                        audit = Some(bound_audit(prior, sched, t, xt, self.loss, rho_t, noise)?);
                    }
                    Ok(out)
                },
                &x,
                sched,
                t,
                self.settings.travel,
                rng,
            )?;
            if out.line_search_failed {
                failures += 1;
            }
            record.steps.push(StepRecord {
                t,
                x_t: x_t.iter().copied().collect(),
                eps_hat: out.eps_hat.iter().copied().collect(),
                x0: out.x0.iter().copied().collect(),
                guidance: out.guidance.as_ref().map(|g| g.iter().copied().collect()),
                bound: audit.map(|a| a.record()),
            });
            x = out.x_prev;
        }
        let terminal_loss = self.loss.value(&x);
        record.terminal = x.iter().copied().collect();
        Ok(ChainResult { trajectory: record, counters, terminal_loss, line_search_failures: failures })
    }

    fn run_latent_chain(&self, chain: usize, rng: &mut LabRng) -> Result<ChainResult> {
        let latent = self.prior.latent();
        let pair = self.pair();
        let sched = self.schedule;
        let k = latent.dim();
        let inner = self.settings.inner;
        let mut counters = StepCounters::default();
        let mut failures = 0;
        let mut record = TrajectoryRecord::new(chain, StateSpace::Latent);
        let mut z = rng::standard_normal(rng, k);
        let objective = DecodedLoss { pair, loss: self.loss };

        for t in (1..=sched.steps()).rev() {
            let (_, c_t) = self.step_sizes(latent, t, &z, &mut counters, true)?;
            let (out, z_t) = time_travel(
                |zt, noise| clean_guided_step(latent, sched, t, zt, &objective, c_t, CleanUpdate::Plain, inner, noise, &mut counters),
                &z,
                sched,
                t,
                self.settings.travel,
                rng,
            )?;
            if out.line_search_failed {
                failures += 1;
            }
            record.steps.push(StepRecord {
                t,
                x_t: z_t.iter().copied().collect(),
                eps_hat: out.eps_hat.iter().copied().collect(),
                x0: out.x0.iter().copied().collect(),
                guidance: out.guidance.as_ref().map(|g| g.iter().copied().collect()),
                bound: None,
            });
            z = out.x_prev;
        }
        let x = pair.decode(&z);
        let terminal_loss = self.loss.value(&x);
        record.terminal = x.iter().copied().collect();
        Ok(ChainResult { trajectory: record, counters, terminal_loss, line_search_failures: failures })
    }
}

/// `z ↦ L(D(z))` as a loss over latent codes.
pub struct DecodedLoss<'a, L: ?Sized> {
    pub pair: &'a AutoencoderPair,
    pub loss: &'a L,
}

impl<L: GuidanceLoss + ?Sized> GuidanceLoss for DecodedLoss<'_, L> {
    fn dim(&self) -> usize {
        self.pair.latent_dim()
    }

    fn value(&self, z: &DVector<f64>) -> f64 {
        self.loss.value(&self.pair.decode(z))
    }

    fn gradient(&self, z: &DVector<f64>) -> DVector<f64> {
        let g = self.loss.gradient(&self.pair.decode(z));
        self.pair.decode_jacobian(z).tr_mul(&g)
    }
}

/// Latent diffusion with guidance on `z_{0|t}`; returns decoded terminal samples.
#[allow(clippy::too_many_arguments)]
pub fn mpgd_ldm_sample<L: GuidanceLoss + ?Sized>(
    prior: &MixturePrior,
    schedule: &NoiseSchedule,
    pair: &AutoencoderPair,
    loss: &L,
    step_size: StepSizeSchedule,
    n: usize,
    master_seed: u64,
) -> Result<Vec<DVector<f64>>> {
    let mut settings = GuidanceSettings::new(Method::MpgdLdm, step_size.rho);
    settings.step_size = step_size;
    let sampler = GuidedSampler::new(prior, schedule, loss, Some(pair), settings)?;
    Ok(sampler.run(n, master_seed)?.into_iter().map(|c| c.trajectory.terminal()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::LinearManifold;
    use nalgebra::DMatrix;

    fn setup() -> (MixturePrior, NoiseSchedule, AutoencoderPair) {
        let m = LinearManifold::random(10, 3, 4).unwrap();
        let prior = MixturePrior::single_gaussian(m.clone(), DVector::from_vec(vec![0.5, -0.2, 0.1]), DMatrix::identity(3, 3)).unwrap();
        (prior, NoiseSchedule::linear_beta(20, 0.0).unwrap(), AutoencoderPair::perfect_linear(m))
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("foo".parse::<Method>().is_err());
    }

    #[test]
    fn window_membership() {
        let w = ActiveWindow::default();
        assert!(w.contains(15, 50) && w.contains(25, 50));
        assert!(!w.contains(26, 50) && !w.contains(14, 50));
        assert!(ActiveWindow { hi: 0.2, lo: 0.5 }.validate().is_err());
    }

    #[test]
    fn missing_autoencoder_is_a_config_error() {
        let (prior, sched, _) = setup();
        let loss = ZeroLoss(10);
        let err = GuidedSampler::new(&prior, &sched, &loss, None, GuidanceSettings::new(Method::MpgdAe, 0.1)).err().unwrap();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "ae"));
    }

    #[test]
    fn dps_counts_one_jacobian_per_step() {
        let (prior, sched, pair) = setup();
        let loss = QuadraticLoss::isotropic(DVector::from_element(10, 0.3), 1.0);
        for (method, expected) in [(Method::Dps, 20), (Method::Mpgd, 0), (Method::MpgdAe, 0), (Method::MpgdZ, 0), (Method::MpgdLdm, 0)] {
            let s = GuidedSampler::new(&prior, &sched, &loss, Some(&pair), GuidanceSettings::new(method, 0.05)).unwrap();
            let r = s.run_chain(0, 3).unwrap();
            assert_eq!(r.counters.jacobian_products, expected, "{method}");
        }
    }

    #[test]
    fn ldm_terminal_samples_on_manifold() {
        let (prior, sched, pair) = setup();
        let loss = QuadraticLoss::isotropic(DVector::from_element(10, 0.3), 1.0);
        let xs = mpgd_ldm_sample(&prior, &sched, &pair, &loss, StepSizeSchedule::constant(0.1), 5, 1).unwrap();
        for x in xs {
            assert!(prior.manifold().orthogonal(&x).norm() < 1e-10);
        }
    }
}
