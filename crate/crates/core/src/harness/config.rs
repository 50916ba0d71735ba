//! JSON experiment configuration.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autoencoder::AutoencoderPair;
use crate::error::{Error, Result};
use crate::geometry::LinearManifold;
use crate::guidance::{ActiveWindow, GuidanceLoss, GuidanceSettings, InnerOptimizer, LinearInverseLoss, Method, QuadraticLoss, StepSizeSchedule};
use crate::prior::MixturePrior;
use crate::rng;
use crate::sampler::NoiseSchedule;

/// Default measurement noise variance, `0.05²`.
pub const DEFAULT_NOISE_VAR: f64 = 0.0025;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifoldConfig {
    pub d: usize,
    pub k: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PriorConfig {
    /// `N(U·μ, U·s²I·Uᵀ)` with `μ ~ N(0, mean_scale²I)` drawn from `seed`.
    SingleGaussian {
        #[serde(default = "one")]
        mean_scale: f64,
        #[serde(default = "one")]
        cov_scale: f64,
        #[serde(default)]
        seed: u64,
    },
    /// Equal-weight mixture of isotropic latent Gaussians.
    Mixture {
        components: usize,
        #[serde(default = "one")]
        spread: f64,
        #[serde(default = "one")]
        cov_scale: f64,
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AlphaBarMode {
    #[default]
    LinearBeta,
    LogLinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(rename = "T")]
    pub steps: usize,
    #[serde(default)]
    pub alpha_bar_mode: AlphaBarMode,
    /// Terminal `ᾱ_T` for the log-linear mode.
    #[serde(default = "default_final_alpha_bar")]
    pub final_alpha_bar: f64,
    #[serde(default)]
    pub eta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OperatorMode {
    /// i.i.d. `N(0, 1/m)` entries.
    #[default]
    Gaussian,
    /// Rows pick the first `m` ambient coordinates.
    Subsample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LossConfig {
    /// `γ‖y − Ax‖²` with `y = A·x* + noise`, `x*` drawn from the prior.
    LinearInverse {
        #[serde(default, rename = "A_mode")]
        operator_mode: OperatorMode,
        m: usize,
        #[serde(default = "one")]
        gamma: f64,
        #[serde(default = "default_noise_var")]
        noise_var: f64,
        #[serde(default)]
        seed: u64,
    },
    /// `½w‖x − b‖²` with `b = U·a·distance/‖a‖` for a random latent direction `a`,
    /// plus an optional normal offset of length `normal_offset`.
    QuadraticTarget {
        #[serde(default = "one")]
        weight: f64,
        #[serde(default = "one")]
        distance: f64,
        #[serde(default)]
        normal_offset: f64,
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AeConfig {
    #[default]
    Perfect,
    Perturbed {
        scale: f64,
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_out_dir")]
    pub dir: PathBuf,
    #[serde(default = "yes")]
    pub trajectories: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: default_out_dir(), trajectories: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub manifold: ManifoldConfig,
    pub prior: PriorConfig,
    pub schedule: ScheduleConfig,
    pub method: Method,
    pub loss: LossConfig,
    #[serde(default = "default_step_size")]
    pub step_size: StepSizeSchedule,
    #[serde(default)]
    pub ae: AeConfig,
    /// `[t_hi, t_lo]` as fractions of `T`.
    #[serde(default = "default_window")]
    pub window: [f64; 2],
    #[serde(default)]
    pub inner: InnerOptimizer,
    #[serde(default)]
    pub travel: usize,
    #[serde(default = "one_chain")]
    pub chains: usize,
    #[serde(default)]
    pub master_seed: u64,
    /// Record the paired DPS/MPGD bound audit on DPS runs.
    #[serde(default)]
    pub audit_bound: bool,
    #[serde(default)]
    pub output: OutputConfig,
}

fn one() -> f64 {
    1.0
}
fn yes() -> bool {
    true
}
fn one_chain() -> usize {
    1
}
fn default_noise_var() -> f64 {
    DEFAULT_NOISE_VAR
}
fn default_final_alpha_bar() -> f64 {
    1e-3
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_step_size() -> StepSizeSchedule {
    StepSizeSchedule::constant(0.1)
}
fn default_window() -> [f64; 2] {
    let w = ActiveWindow::default();
    [w.hi, w.lo]
}

/// Everything a run needs, built from a validated config.
pub struct Experiment {
    pub manifold: LinearManifold,
    pub prior: MixturePrior,
    pub schedule: NoiseSchedule,
    pub loss: Box<dyn GuidanceLoss + Send>,
    pub pair: AutoencoderPair,
    pub settings: GuidanceSettings,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path == "." { "<root>".to_string() } else { path }, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Canonical JSON: keys sorted, defaults filled in.
    pub fn canonical_json(&self) -> Result<String> {
        let value = serde_json::to_value(self)?;
        Ok(serde_json::to_string(&value)?)
    }

    /// SHA-256 of the canonical JSON, hex encoded.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.canonical_json()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn active_window(&self) -> ActiveWindow {
        ActiveWindow { hi: self.window[0], lo: self.window[1] }
    }

    pub fn validate(&self) -> Result<()> {
        let (d, k) = (self.manifold.d, self.manifold.k);
        if k == 0 || k >= d {
            return Err(Error::config("manifold.k", format!("need 1 <= k < d, got k = {k}, d = {d}")));
        }
        match self.prior {
            PriorConfig::SingleGaussian { mean_scale, cov_scale, .. } => {
                positive_or_zero("prior.mean_scale", mean_scale)?;
                positive_or_zero("prior.cov_scale", cov_scale)?;
            }
            PriorConfig::Mixture { components, spread, cov_scale, .. } => {
                if components == 0 {
                    return Err(Error::config("prior.components", "must be at least 1"));
                }
                positive_or_zero("prior.spread", spread)?;
                positive_or_zero("prior.cov_scale", cov_scale)?;
            }
        }
        let s = &self.schedule;
        if s.steps == 0 || s.steps > 1000 {
            return Err(Error::config("schedule.T", format!("must lie in 1..=1000, got {}", s.steps)));
        }
        if !(0.0..=1.0).contains(&s.eta) {
            return Err(Error::config("schedule.eta", format!("must lie in [0, 1], got {}", s.eta)));
        }
        if s.alpha_bar_mode == AlphaBarMode::LogLinear && !(s.final_alpha_bar > 0.0 && s.final_alpha_bar < 1.0) {
            return Err(Error::config("schedule.final_alpha_bar", "must lie in (0, 1)"));
        }
        match self.loss {
            LossConfig::LinearInverse { m, gamma, noise_var, .. } => {
                if m == 0 {
                    return Err(Error::config("loss.m", "must be at least 1"));
                }
                if !(gamma > 0.0 && gamma.is_finite()) {
                    return Err(Error::config("loss.gamma", "must be positive"));
                }
                positive_or_zero("loss.noise_var", noise_var)?;
            }
            LossConfig::QuadraticTarget { weight, distance, normal_offset, .. } => {
                if !(weight > 0.0 && weight.is_finite()) {
                    return Err(Error::config("loss.weight", "must be positive"));
                }
                positive_or_zero("loss.distance", distance)?;
                positive_or_zero("loss.normal_offset", normal_offset)?;
            }
        }
        if let AeConfig::Perturbed { scale, .. } = self.ae {
            positive_or_zero("ae.scale", scale)?;
        }
        if self.method.is_guided() {
            self.step_size.validate()?;
        }
        let w = self.active_window();
        w.validate()?;
        if self.inner.steps == 0 {
            return Err(Error::config("inner.steps", "must be at least 1"));
        }
        if self.chains == 0 {
            return Err(Error::config("chains", "must be at least 1"));
        }
        Ok(())
    }

    /// Constructs every component named by the config.
    pub fn build(&self) -> Result<Experiment> {
        self.validate()?;
        let manifold = LinearManifold::random(self.manifold.d, self.manifold.k, self.manifold.seed).map_err(|e| Error::config("manifold", e.to_string()))?;
        let k = manifold.latent_dim();
        let prior = match self.prior {
            PriorConfig::SingleGaussian { mean_scale, cov_scale, seed } => {
                let mean = rng::standard_normal(&mut rng::seeded(seed), k) * mean_scale;
                MixturePrior::single_gaussian(manifold.clone(), mean, DMatrix::identity(k, k) * (cov_scale * cov_scale))
            }
            PriorConfig::Mixture { components, spread, cov_scale, seed } => MixturePrior::random_mixture(manifold.clone(), components, spread, cov_scale, seed),
        }
        .map_err(|e| Error::config("prior", e.to_string()))?;
        let s = &self.schedule;
        let schedule = match s.alpha_bar_mode {
            AlphaBarMode::LinearBeta => NoiseSchedule::linear_beta(s.steps, s.eta),
            AlphaBarMode::LogLinear => NoiseSchedule::log_linear(s.steps, s.final_alpha_bar, s.eta),
        }
        .map_err(|e| Error::config("schedule", e.to_string()))?;
        let loss = self.build_loss(&manifold, &prior)?;
        let pair = match self.ae {
            AeConfig::Perfect => AutoencoderPair::perfect_linear(manifold.clone()),
            AeConfig::Perturbed { scale, seed } => AutoencoderPair::perturbed(manifold.clone(), scale, seed).map_err(|e| Error::config("ae.scale", e.to_string()))?,
        };
        let settings = GuidanceSettings {
            method: self.method,
            step_size: self.step_size,
            window: self.active_window(),
            inner: self.inner,
            travel: self.travel,
            audit_bound: self.audit_bound,
        };
        Ok(Experiment { manifold, prior, schedule, loss, pair, settings })
    }

    fn build_loss(&self, manifold: &LinearManifold, prior: &MixturePrior) -> Result<Box<dyn GuidanceLoss + Send>> {
        let d = manifold.ambient_dim();
        Ok(match self.loss {
            LossConfig::LinearInverse { operator_mode, m, gamma, noise_var, seed } => {
                let mut r = rng::seeded(seed);
                let a = match operator_mode {
                    OperatorMode::Gaussian => DMatrix::from_iterator(m, d, rng::standard_normal(&mut r, m * d).iter().map(|v| v / (m as f64).sqrt())),
                    OperatorMode::Subsample => {
                        if m > d {
                            return Err(Error::config("loss.m", format!("subsampling needs m <= d = {d}")));
                        }
                        DMatrix::from_fn(m, d, |i, j| if i == j { 1.0 } else { 0.0 })
                    }
                };
                let x_true = prior.sample(1, &mut r).remove(0);
                Box::new(LinearInverseLoss::simulate(a, &x_true, noise_var, gamma, &mut r).map_err(|e| Error::config("loss", e.to_string()))?)
            }
            LossConfig::QuadraticTarget { weight, distance, normal_offset, seed } => {
                let mut r = rng::seeded(seed);
                let a = rng::standard_normal(&mut r, manifold.latent_dim());
                let mut target = manifold.embed(&(&a * (distance / a.norm())));
                if normal_offset > 0.0 {
                    let n = manifold.orthogonal(&rng::standard_normal(&mut r, d));
                    target += &n * (normal_offset / n.norm());
                }
                Box::new(QuadraticLoss::isotropic(target, weight))
            }
        })
    }

    /// A single-Gaussian linear-inverse problem at the given sizes.
    pub fn linear_inverse(d: usize, k: usize, method: Method, steps: usize, chains: usize) -> Self {
        Self {
            manifold: ManifoldConfig { d, k, seed: 1 },
            prior: PriorConfig::SingleGaussian { mean_scale: 1.0, cov_scale: 1.0, seed: 2 },
            schedule: ScheduleConfig { steps, alpha_bar_mode: AlphaBarMode::LinearBeta, final_alpha_bar: default_final_alpha_bar(), eta: 0.0 },
            method,
            loss: LossConfig::LinearInverse { operator_mode: OperatorMode::Gaussian, m: 4, gamma: 1.0, noise_var: DEFAULT_NOISE_VAR, seed: 3 },
            step_size: default_step_size(),
            ae: AeConfig::Perfect,
            window: default_window(),
            inner: InnerOptimizer::default(),
            travel: 0,
            chains,
            master_seed: 0,
            audit_bound: false,
            output: OutputConfig::default(),
        }
    }
}

fn positive_or_zero(key: &str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(key, format!("must be finite and nonnegative, got {v}")))
    }
}
