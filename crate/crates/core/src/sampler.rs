//! Noise schedules, the DDIM update and unconditional sampling.

use std::io::Write;

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::geometry::LinearManifold;
use crate::prior::Denoiser;
use crate::rng::{self, LabRng};

/// Radicands in `[−RADICAND_SLACK, 0)` are clamped to zero.
pub const RADICAND_SLACK: f64 = 1e-12;

/// Number of steps of the reference DDPM training schedule.
pub const DDPM_TRAIN_STEPS: usize = 1000;

/// `ᾱ_0 = 1 > ᾱ_1 > … > ᾱ_T > 0` plus the stochasticity `η`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
    eta: f64,
}

impl NoiseSchedule {
    pub fn from_alpha_bar(alpha_bar: Vec<f64>, eta: f64) -> Result<Self> {
        if alpha_bar.len() < 2 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::invalid(format!("eta must lie in [0, 1], got {eta}")));
        }
        if alpha_bar[0] != 1.0 {
            return Err(Error::invalid("schedule must start at alpha_bar_0 = 1"));
        }
        for w in alpha_bar.windows(2) {
            if !(w[1] < w[0]) || !(w[1] > 0.0) {
                return Err(Error::invalid("alpha_bar must be strictly decreasing and positive"));
            }
        }
        Ok(Self { alpha_bar, eta })
    }

    /// DDPM linear-β schedule (β from 1e−4 to 0.02 over 1000 steps),
    /// subsampled at `T` evenly spaced training steps.
    pub fn linear_beta(steps: usize, eta: f64) -> Result<Self> {
        if steps == 0 || steps > DDPM_TRAIN_STEPS {
            return Err(Error::invalid(format!("steps must lie in 1..={DDPM_TRAIN_STEPS}, got {steps}")));
        }
        let (b0, b1) = (1e-4, 0.02);
        let n = DDPM_TRAIN_STEPS;
        let mut cumulative = Vec::with_capacity(n + 1);
        cumulative.push(1.0);
        let mut acc = 1.0;
        for s in 0..n {
            let beta = b0 + (b1 - b0) * s as f64 / (n - 1) as f64;
            acc *= 1.0 - beta;
            cumulative.push(acc);
        }
        let alpha_bar = (0..=steps).map(|t| cumulative[t * n / steps]).collect();
        Self::from_alpha_bar(alpha_bar, eta)
    }

    /// `log ᾱ_t` linear in `t`, from `0` down to `log(final_alpha_bar)`.
    pub fn log_linear(steps: usize, final_alpha_bar: f64, eta: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("steps must be positive"));
        }
        if !(final_alpha_bar > 0.0 && final_alpha_bar < 1.0) {
            return Err(Error::invalid("final alpha_bar must lie in (0, 1)"));
        }
        let end = final_alpha_bar.ln();
        let alpha_bar = (0..=steps).map(|t| (end * t as f64 / steps as f64).exp()).collect();
        Self::from_alpha_bar(alpha_bar, eta)
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn with_eta(&self, eta: f64) -> Result<Self> {
        Self::from_alpha_bar(self.alpha_bar.clone(), eta)
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(Error::invalid(format!("step {t} outside 1..={}", self.steps())))
        } else {
            Ok(())
        }
    }

    /// `σ_t = η·√((1−ᾱ_{t−1})/(1−ᾱ_t))·√(1 − ᾱ_t/ᾱ_{t−1})`.
    pub fn sigma(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(sigma_from(self.alpha_bar[t - 1], self.alpha_bar[t], self.eta))
    }

    /// `√(1 − ᾱ_{t−1} − σ_t²)` with the radicand clamp.
    pub fn direction_coefficient(&self, t: usize) -> Result<f64> {
        let sigma = self.sigma(t)?;
        clamped_sqrt(1.0 - self.alpha_bar[t - 1] - sigma * sigma)
    }
}

/// The `σ_t` expression on raw schedule values.
pub fn sigma_from(alpha_bar_prev: f64, alpha_bar_t: f64, eta: f64) -> f64 {
    if eta == 0.0 || alpha_bar_t >= alpha_bar_prev {
        return 0.0;
    }
    eta * ((1.0 - alpha_bar_prev) / (1.0 - alpha_bar_t)).sqrt() * (1.0 - alpha_bar_t / alpha_bar_prev).sqrt()
}

fn clamped_sqrt(v: f64) -> Result<f64> {
    if v >= 0.0 {
        Ok(v.sqrt())
    } else if v >= -RADICAND_SLACK {
        Ok(0.0)
    } else {
        Err(Error::Numerical(format!("negative radicand {v:e}")))
    }
}

/// Tweedie estimate `x_{0|t} = (x_t − √(1−ᾱ_t)ε̂)/√ᾱ_t`.
pub fn tweedie_estimate(x_t: &DVector<f64>, eps_hat: &DVector<f64>, alpha_bar_t: f64) -> Result<DVector<f64>> {
    if !(alpha_bar_t > 0.0 && alpha_bar_t <= 1.0) {
        return Err(Error::invalid(format!("alpha_bar must lie in (0, 1], got {alpha_bar_t}")));
    }
    ensure_dim(eps_hat, x_t.len())?;
    Ok((x_t - eps_hat * (1.0 - alpha_bar_t).sqrt()) / alpha_bar_t.sqrt())
}

/// One DDIM update from a (possibly guided) clean estimate:
/// `x_{t−1} = √ᾱ_{t−1}·x0 + √(1−ᾱ_{t−1}−σ_t²)·ε̂ + σ_t·noise`.
pub fn ddim_step(schedule: &NoiseSchedule, t: usize, x0_est: &DVector<f64>, eps_hat: &DVector<f64>, noise: &DVector<f64>) -> Result<DVector<f64>> {
    schedule.check_step(t)?;
    ensure_dim(eps_hat, x0_est.len())?;
    ensure_dim(noise, x0_est.len())?;
    let sigma = schedule.sigma(t)?;
    let dir = schedule.direction_coefficient(t)?;
    let mut out = x0_est * schedule.alpha_bar(t - 1).sqrt() + eps_hat * dir;
    if sigma != 0.0 {
        out += noise * sigma;
    }
    Ok(out)
}

/// One forward hop `x_{t−1} → x_t`:
/// `x_t = √(ᾱ_t/ᾱ_{t−1})·x_{t−1} + √(1 − ᾱ_t/ᾱ_{t−1})·noise`.
pub fn renoise(x_prev: &DVector<f64>, schedule: &NoiseSchedule, t: usize, noise: &DVector<f64>) -> Result<DVector<f64>> {
    schedule.check_step(t)?;
    renoise_between(x_prev, schedule.alpha_bar(t - 1), schedule.alpha_bar(t), noise)
}

/// The forward kernel between two arbitrary levels `ᾱ_from ≥ ᾱ_to`.
pub fn renoise_between(x_prev: &DVector<f64>, alpha_bar_from: f64, alpha_bar_to: f64, noise: &DVector<f64>) -> Result<DVector<f64>> {
    ensure_dim(noise, x_prev.len())?;
    let ratio = alpha_bar_to / alpha_bar_from;
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::invalid(format!("renoise needs 0 < alpha_bar_to <= alpha_bar_from, got ratio {ratio}")));
    }
    Ok(x_prev * ratio.sqrt() + noise * clamped_sqrt(1.0 - ratio)?)
}

/// Forward-process sample `√ᾱ x + √(1−ᾱ) ε`.
pub fn forward_sample<R: Rng + ?Sized>(x: &DVector<f64>, alpha_bar: f64, rng: &mut R) -> DVector<f64> {
    x * alpha_bar.sqrt() + rng::standard_normal(rng, x.len()) * (1.0 - alpha_bar).sqrt()
}

/// One reverse step as recorded in a trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub x_t: Vec<f64>,
    pub eps_hat: Vec<f64>,
    /// Clean estimate before guidance.
    pub x0: Vec<f64>,
    /// Displacement of `x_{t−1}` caused by guidance, when guidance ran.
    pub guidance: Option<Vec<f64>>,
    pub bound: Option<BoundRecord>,
}

/// Paired DPS/MPGD distance audit at one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundRecord {
    pub lhs: f64,
    pub rhs: f64,
    pub kappa: f64,
}

/// Where a trajectory's states live.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StateSpace {
    Ambient,
    Latent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub chain: usize,
    pub space: StateSpace,
    /// Steps ordered from `t = T` down to `t = 1`.
    pub steps: Vec<StepRecord>,
    /// Final sample `x_0`, always in ambient coordinates.
    pub terminal: Vec<f64>,
}

impl TrajectoryRecord {
    pub fn new(chain: usize, space: StateSpace) -> Self {
        Self { chain, space, steps: Vec::new(), terminal: Vec::new() }
    }

    pub fn terminal(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.terminal)
    }

    /// Checks that time indices strictly decrease and dimensions agree.
    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.steps.first() else {
            return Ok(());
        };
        let dim = first.x_t.len();
        for w in self.steps.windows(2) {
            if w[1].t >= w[0].t {
                return Err(Error::invalid("trajectory time indices must strictly decrease"));
            }
        }
        for s in &self.steps {
            if s.x_t.len() != dim || s.x0.len() != dim || s.eps_hat.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: s.x_t.len() });
            }
        }
        Ok(())
    }
}

/// Writes trajectories as CSV: `chain, t, x_0..x_{n-1}, x0_0..x0_{n-1}, shell_residual`.
///
/// The final row of each chain has `t = 0` and carries the terminal sample in
/// both coordinate blocks. The residual is `|d(x_t, √ᾱ_t, M) − r_t|`; it is
/// empty for latent-space trajectories.
pub fn write_trajectories_csv<W: Write>(out: W, trajectories: &[TrajectoryRecord], manifold: &LinearManifold, schedule: &NoiseSchedule) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let dim = trajectories
        .iter()
        .find_map(|t| t.steps.first().map(|s| s.x_t.len()))
        .unwrap_or(manifold.ambient_dim());
    let mut header = vec!["chain".to_string(), "t".to_string()];
    header.extend((0..dim).map(|i| format!("x_{i}")));
    header.extend((0..dim).map(|i| format!("x0_{i}")));
    header.push("shell_residual".into());
    w.write_record(&header)?;
    for traj in trajectories {
        for s in &traj.steps {
            let resid = match traj.space {
                StateSpace::Ambient => {
                    let x = DVector::from_column_slice(&s.x_t);
                    let ab = schedule.alpha_bar(s.t);
                    let dist = manifold.off_manifold_distance(&x, ab.sqrt())?;
                    format!("{}", (dist - manifold.shell_radius(ab)).abs())
                }
                StateSpace::Latent => String::new(),
            };
            let mut row = vec![traj.chain.to_string(), s.t.to_string()];
            row.extend(s.x_t.iter().map(f64::to_string));
            row.extend(s.x0.iter().map(f64::to_string));
            row.push(resid);
            w.write_record(&row)?;
        }
        if traj.space == StateSpace::Ambient && traj.terminal.len() == dim {
            let x = traj.terminal();
            let dist = manifold.off_manifold_distance(&x, 1.0)?;
            let mut row = vec![traj.chain.to_string(), "0".to_string()];
            row.extend(traj.terminal.iter().map(f64::to_string));
            row.extend(traj.terminal.iter().map(f64::to_string));
            row.push(format!("{dist}"));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Unguided sampling of one chain; `x_T ~ N(0, I)`.
pub fn sample_chain<D: Denoiser + ?Sized>(denoiser: &D, schedule: &NoiseSchedule, rng: &mut LabRng, chain: usize) -> Result<TrajectoryRecord> {
    let dim = denoiser.dim();
    let mut x = rng::standard_normal(rng, dim);
    let mut record = TrajectoryRecord::new(chain, StateSpace::Ambient);
    for t in (1..=schedule.steps()).rev() {
        let ab = schedule.alpha_bar(t);
        let eps = denoiser.predict_noise(ab, &x)?;
        let x0 = tweedie_estimate(&x, &eps, ab)?;
        let noise = rng::standard_normal(rng, dim);
        let next = ddim_step(schedule, t, &x0, &eps, &noise)?;
        record.steps.push(StepRecord {
            t,
            x_t: x.iter().copied().collect(),
            eps_hat: eps.iter().copied().collect(),
            x0: x0.iter().copied().collect(),
            guidance: None,
            bound: None,
        });
        x = next;
    }
    record.terminal = x.iter().copied().collect();
    Ok(record)
}

/// Runs `n` independent unguided chains; chain `i` uses stream `i` of `master_seed`.
pub fn sample_unconditional<D: Denoiser + ?Sized>(denoiser: &D, schedule: &NoiseSchedule, n: usize, master_seed: u64) -> Result<Vec<TrajectoryRecord>> {
    (0..n)
        .into_par_iter()
        .map(|i| sample_chain(denoiser, schedule, &mut rng::chain_stream(master_seed, i as u64), i))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigma_cases() {
        let s = NoiseSchedule::from_alpha_bar(vec![1.0, 0.8, 0.5], 1.0).unwrap();
        assert!((s.sigma(2).unwrap() - 0.387_298_334_620_741_7).abs() < 1e-12);
        let s0 = s.with_eta(0.0).unwrap();
        assert_eq!(s0.sigma(2).unwrap(), 0.0);
        assert_eq!(sigma_from(0.5, 0.5, 1.0), 0.0);
        assert!(s.sigma(0).is_err());
        assert!(s.sigma(3).is_err());
    }

    #[test]
    fn schedule_validation() {
        assert!(NoiseSchedule::from_alpha_bar(vec![1.0, 0.5, 0.6], 0.0).is_err());
        assert!(NoiseSchedule::from_alpha_bar(vec![0.9, 0.5], 0.0).is_err());
        assert!(NoiseSchedule::from_alpha_bar(vec![1.0, 0.5], 1.5).is_err());
        for steps in [20, 50, 100] {
            let s = NoiseSchedule::linear_beta(steps, 1.0).unwrap();
            assert_eq!(s.steps(), steps);
            for t in 1..=steps {
                let sig = s.sigma(t).unwrap();
                assert!(1.0 - s.alpha_bar(t - 1) - sig * sig >= -1e-12);
            }
        }
        let l = NoiseSchedule::log_linear(10, 1e-3, 0.0).unwrap();
        assert!((l.alpha_bar(10) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn tweedie_cases() {
        let x = DVector::from_vec(vec![2.0, 0.0]);
        let e = DVector::from_vec(vec![0.4, 0.0]);
        assert_eq!(tweedie_estimate(&x, &e, 1.0).unwrap(), x);
        assert_eq!(tweedie_estimate(&x, &DVector::zeros(2), 0.25).unwrap(), &x * 2.0);
        let v = tweedie_estimate(&x, &e, 0.25).unwrap();
        assert!((v[0] - 3.307_179_676_972_449).abs() < 1e-12);
        assert!(tweedie_estimate(&x, &e, 0.0).is_err());
    }

    #[test]
    fn final_step_collapses_to_estimate() {
        let s = NoiseSchedule::from_alpha_bar(vec![1.0, 0.9], 0.0).unwrap();
        let x0 = DVector::from_vec(vec![1.5, -2.0]);
        let e = DVector::from_vec(vec![0.3, 0.3]);
        let n = DVector::from_vec(vec![9.0, 9.0]);
        assert_eq!(ddim_step(&s, 1, &x0, &e, &n).unwrap(), x0);
    }

    #[test]
    fn renoise_flat_segment_is_identity() {
        let x = DVector::from_vec(vec![1.0, 2.0]);
        let noise = DVector::from_vec(vec![5.0, -5.0]);
        assert_eq!(renoise_between(&x, 0.4, 0.4, &noise).unwrap(), x);
        let s = NoiseSchedule::from_alpha_bar(vec![1.0, 0.5], 0.0).unwrap();
        let out = renoise(&x, &s, 1, &DVector::zeros(2)).unwrap();
        assert!((out - &x * 0.5f64.sqrt()).amax() < 1e-15);
        assert!(renoise(&x, &s, 2, &noise).is_err());
    }
}
