//! Single reverse steps with guidance.
//!
//! Every rule takes the step noise explicitly so paired comparisons can feed
//! two rules the same draw.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::autoencoder::AutoencoderPair;
use crate::error::{ensure_finite, Result};
use crate::guidance::optimize::{multi_step_optimize, InnerOptimizer, LatentObjective, Objective, PlainObjective, ProjectedObjective};
use crate::guidance::GuidanceLoss;
use crate::prior::Denoiser;
use crate::sampler::{ddim_step, renoise, tweedie_estimate, NoiseSchedule};
use crate::rng::{self, LabRng};

/// Per-chain instrumentation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepCounters {
    pub denoiser_calls: u64,
    /// Products with the denoiser Jacobian (backpropagation through the network).
    pub jacobian_products: u64,
    pub loss_gradients: u64,
}

impl StepCounters {
    pub fn merge(&mut self, other: &StepCounters) {
        self.denoiser_calls += other.denoiser_calls;
        self.jacobian_products += other.jacobian_products;
        self.loss_gradients += other.loss_gradients;
    }
}

/// Result of one reverse step.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidedStep {
    pub x_prev: DVector<f64>,
    pub eps_hat: DVector<f64>,
    /// Tweedie estimate before guidance.
    pub x0: DVector<f64>,
    /// Clean estimate actually used in the recombination.
    pub guided_x0: DVector<f64>,
    /// Displacement of `x_{t−1}` relative to the unguided step with the same noise.
    pub guidance: Option<DVector<f64>>,
    /// Set when an inner line search gave up.
    pub line_search_failed: bool,
}

/// How the clean estimate is moved by the guidance loss.
#[derive(Debug, Clone, Copy)]
pub enum CleanUpdate<'a> {
    /// `x0 − c∇L(x0)`.
    Plain,
    /// `x0 − c∇_{x0}L(D(E(x0)))`.
    Projected(&'a AutoencoderPair),
    /// Gradient step on `z = E(x0)` followed by `D(z) + (x0 − D(E(x0)))`.
    Latent(&'a AutoencoderPair),
}

fn denoise<D: Denoiser + ?Sized>(denoiser: &D, schedule: &NoiseSchedule, t: usize, x_t: &DVector<f64>, counters: &mut StepCounters) -> Result<(DVector<f64>, DVector<f64>)> {
    let ab = schedule.alpha_bar(t);
    let eps = denoiser.predict_noise(ab, x_t)?;
    counters.denoiser_calls += 1;
    let x0 = tweedie_estimate(x_t, &eps, ab)?;
    Ok((eps, x0))
}

/// Plain DDIM with no guidance.
pub fn ddim_unguided<D: Denoiser + ?Sized>(denoiser: &D, schedule: &NoiseSchedule, t: usize, x_t: &DVector<f64>, noise: &DVector<f64>, counters: &mut StepCounters) -> Result<GuidedStep> {
    let (eps, x0) = denoise(denoiser, schedule, t, x_t, counters)?;
    let x_prev = ddim_step(schedule, t, &x0, &eps, noise)?;
    Ok(GuidedStep { x_prev, eps_hat: eps, guided_x0: x0.clone(), x0, guidance: None, line_search_failed: false })
}

/// Parts of the DPS gradient `∇_{x_t}L(x_{0|t})` by the chain rule.
#[derive(Debug, Clone, PartialEq)]
pub struct DpsGradient {
    /// `∇_{x0}L(x_{0|t})`.
    pub clean_gradient: DVector<f64>,
    /// `(∂ε/∂x_t)ᵀ∇_{x0}L`, the transposed row `(∂L/∂x0)(∂ε/∂x_t)`.
    pub jacobian_product: DVector<f64>,
    /// `(∇_{x0}L − √(1−ᾱ_t)·jacobian_product)/√ᾱ_t`.
    pub noisy_gradient: DVector<f64>,
}

/// `∇_{x_t}L(x_{0|t})` using one product with the analytic denoiser Jacobian.
pub fn dps_gradient<D: Denoiser + ?Sized, L: GuidanceLoss + ?Sized>(denoiser: &D, alpha_bar_t: f64, x_t: &DVector<f64>, x0: &DVector<f64>, loss: &L, counters: &mut StepCounters) -> Result<DpsGradient> {
    let g0 = loss.gradient(x0);
    counters.loss_gradients += 1;
    ensure_finite(&g0, "loss gradient")?;
    let jac = denoiser.noise_jacobian(alpha_bar_t, x_t)?;
    counters.jacobian_products += 1;
    let vjp = jac.tr_mul(&g0);
    let noisy = (&g0 - &vjp * (1.0 - alpha_bar_t).sqrt()) / alpha_bar_t.sqrt();
    ensure_finite(&noisy, "DPS gradient")?;
    Ok(DpsGradient { clean_gradient: g0, jacobian_product: vjp, noisy_gradient: noisy })
}

/// DPS composed with DDIM: `x_{t−1} = DDIM(x_t) − ρ_t∇_{x_t}L(x_{0|t})`.
#[allow(clippy::too_many_arguments)]
pub fn dps_step<D: Denoiser + ?Sized, L: GuidanceLoss + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    t: usize,
    x_t: &DVector<f64>,
    loss: &L,
    rho_t: f64,
    noise: &DVector<f64>,
    counters: &mut StepCounters,
) -> Result<GuidedStep> {
    let (eps, x0) = denoise(denoiser, schedule, t, x_t, counters)?;
    let grad = dps_gradient(denoiser, schedule.alpha_bar(t), x_t, &x0, loss, counters)?;
    let base = ddim_step(schedule, t, &x0, &eps, noise)?;
    let displacement = &grad.noisy_gradient * -rho_t;
    Ok(GuidedStep {
        x_prev: base + &displacement,
        eps_hat: eps,
        guided_x0: x0.clone(),
        x0,
        guidance: Some(displacement),
        line_search_failed: false,
    })
}

/// Applies a clean-estimate update with optional inner optimization.
pub fn guide_clean_estimate<L: GuidanceLoss + ?Sized>(x0: &DVector<f64>, loss: &L, c_t: f64, update: CleanUpdate<'_>, inner: InnerOptimizer, counters: &mut StepCounters) -> Result<(DVector<f64>, bool)> {
    if c_t == 0.0 {
        return Ok((x0.clone(), false));
    }
    let single = inner.is_single_step();
    match update {
        CleanUpdate::Plain => {
            if single {
                counters.loss_gradients += 1;
                let g = PlainObjective(loss).gradient(x0)?;
                return Ok((x0 - g * c_t, false));
            }
            let out = multi_step_optimize(&PlainObjective(loss), x0, inner.steps, inner.optimizer, c_t)?;
            counters.loss_gradients += out.values.len() as u64;
            Ok((out.x, out.line_search_failed))
        }
        CleanUpdate::Projected(pair) => {
            if single {
                counters.loss_gradients += 1;
                return Ok((x0 - pair.projected_gradient(x0, loss)? * c_t, false));
            }
            let objective = ProjectedObjective { pair, loss };
            let out = multi_step_optimize(&objective, x0, inner.steps, inner.optimizer, c_t)?;
            counters.loss_gradients += out.values.len() as u64;
            Ok((out.x, out.line_search_failed))
        }
        CleanUpdate::Latent(pair) => {
            let z = pair.encode(x0);
            let residue = x0 - pair.decode(&z);
            let (z_new, failed) = if single {
                counters.loss_gradients += 1;
                (&z - pair.latent_gradient(&z, loss)? * c_t, false)
            } else {
                let out = multi_step_optimize(&LatentObjective { pair, loss }, &z, inner.steps, inner.optimizer, c_t)?;
                counters.loss_gradients += out.values.len() as u64;
                (out.x, out.line_search_failed)
            };
            Ok((pair.decode(&z_new) + residue, failed))
        }
    }
}

/// Shared body of every clean-estimate rule:
/// `x_{t−1} = √ᾱ_{t−1}·g(x_{0|t}) + √(1−ᾱ_{t−1}−σ_t²)ε̂ + σ_t·noise`.
#[allow(clippy::too_many_arguments)]
pub fn clean_guided_step<D: Denoiser + ?Sized, L: GuidanceLoss + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    t: usize,
    x_t: &DVector<f64>,
    loss: &L,
    c_t: f64,
    update: CleanUpdate<'_>,
    inner: InnerOptimizer,
    noise: &DVector<f64>,
    counters: &mut StepCounters,
) -> Result<GuidedStep> {
    let (eps, x0) = denoise(denoiser, schedule, t, x_t, counters)?;
    let (guided_x0, failed) = guide_clean_estimate(&x0, loss, c_t, update, inner, counters)?;
    let x_prev = ddim_step(schedule, t, &guided_x0, &eps, noise)?;
    let displacement = (&guided_x0 - &x0) * schedule.alpha_bar(t - 1).sqrt();
    Ok(GuidedStep { x_prev, eps_hat: eps, x0, guided_x0, guidance: Some(displacement), line_search_failed: failed })
}

/// MPGD without projection: gradient step on `x_{0|t}`, then DDIM.
#[allow(clippy::too_many_arguments)]
pub fn mpgd_step<D: Denoiser + ?Sized, L: GuidanceLoss + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    t: usize,
    x_t: &DVector<f64>,
    loss: &L,
    c_t: f64,
    noise: &DVector<f64>,
    counters: &mut StepCounters,
) -> Result<GuidedStep> {
    clean_guided_step(denoiser, schedule, t, x_t, loss, c_t, CleanUpdate::Plain, InnerOptimizer::default(), noise, counters)
}

/// MPGD-AE; falls back to [`mpgd_step`] when `active` is false.
#[allow(clippy::too_many_arguments)]
pub fn mpgd_ae_step<D: Denoiser + ?Sized, L: GuidanceLoss + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    t: usize,
    x_t: &DVector<f64>,
    pair: &AutoencoderPair,
    loss: &L,
    c_t: f64,
    active: bool,
    noise: &DVector<f64>,
    counters: &mut StepCounters,
) -> Result<GuidedStep> {
    let update = if active { CleanUpdate::Projected(pair) } else { CleanUpdate::Plain };
    clean_guided_step(denoiser, schedule, t, x_t, loss, c_t, update, InnerOptimizer::default(), noise, counters)
}

/// MPGD-Z with the reconstruction-error correction.
#[allow(clippy::too_many_arguments)]
pub fn mpgd_z_step<D: Denoiser + ?Sized, L: GuidanceLoss + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    t: usize,
    x_t: &DVector<f64>,
    pair: &AutoencoderPair,
    loss: &L,
    c_t: f64,
    noise: &DVector<f64>,
    counters: &mut StepCounters,
) -> Result<GuidedStep> {
    clean_guided_step(denoiser, schedule, t, x_t, loss, c_t, CleanUpdate::Latent(pair), InnerOptimizer::default(), noise, counters)
}

/// Repeats `step` then a one-level re-noise `repeats` times, then takes a
/// final `step`. Each pass draws fresh noise from `rng`.
pub fn time_travel<F>(mut step: F, x_t: &DVector<f64>, schedule: &NoiseSchedule, t: usize, repeats: usize, rng: &mut LabRng) -> Result<(GuidedStep, DVector<f64>)>
where
    F: FnMut(&DVector<f64>, &DVector<f64>) -> Result<GuidedStep>,
{
    let dim = x_t.len();
    let mut x = x_t.clone();
    for _ in 0..repeats {
        let noise = rng::standard_normal(rng, dim);
        let out = step(&x, &noise)?;
        let hop = rng::standard_normal(rng, dim);
        x = renoise(&out.x_prev, schedule, t, &hop)?;
    }
    let noise = rng::standard_normal(rng, dim);
    let out = step(&x, &noise)?;
    Ok((out, x))
}
