//! Multi-step minimization of the guidance loss around a clean estimate.

use log::warn;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::autoencoder::AutoencoderPair;
use crate::error::{ensure_finite, Error, Result};
use crate::guidance::GuidanceLoss;

/// Halvings tried before a line search gives up.
pub const MAX_HALVINGS: usize = 30;

const ARMIJO_C1: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    #[default]
    #[serde(alias = "gd")]
    GradientDescent,
    /// Polak–Ribière+ nonlinear conjugate gradient.
    #[serde(alias = "cg", alias = "nonlinear-cg")]
    ConjugateGradient,
}

/// Inner optimization settings; `steps = 1` with gradient descent is the
/// single-step update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InnerOptimizer {
    pub steps: usize,
    #[serde(default)]
    pub optimizer: OptimizerKind,
}

impl Default for InnerOptimizer {
    fn default() -> Self {
        Self { steps: 1, optimizer: OptimizerKind::GradientDescent }
    }
}

impl InnerOptimizer {
    pub fn is_single_step(&self) -> bool {
        self.steps <= 1 && self.optimizer == OptimizerKind::GradientDescent
    }
}

/// A smooth objective with gradient.
pub trait Objective {
    fn value(&self, x: &DVector<f64>) -> f64;
    fn gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>>;
}

/// `L(x)` directly.
pub struct PlainObjective<'a, L: ?Sized>(pub &'a L);

impl<L: GuidanceLoss + ?Sized> Objective for PlainObjective<'_, L> {
    fn value(&self, x: &DVector<f64>) -> f64 {
        self.0.value(x)
    }
    fn gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let g = self.0.gradient(x);
        ensure_finite(&g, "loss gradient")?;
        Ok(g)
    }
}

/// `L(D(E(x)))` with the autoencoder-projected gradient.
pub struct ProjectedObjective<'a, L: ?Sized> {
    pub pair: &'a AutoencoderPair,
    pub loss: &'a L,
}

impl<L: GuidanceLoss + ?Sized> Objective for ProjectedObjective<'_, L> {
    fn value(&self, x: &DVector<f64>) -> f64 {
        self.loss.value(&self.pair.reconstruct(x))
    }
    fn gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.pair.projected_gradient(x, self.loss)
    }
}

/// `L(D(z))` over latent codes.
pub struct LatentObjective<'a, L: ?Sized> {
    pub pair: &'a AutoencoderPair,
    pub loss: &'a L,
}

impl<L: GuidanceLoss + ?Sized> Objective for LatentObjective<'_, L> {
    fn value(&self, z: &DVector<f64>) -> f64 {
        self.loss.value(&self.pair.decode(z))
    }
    fn gradient(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        self.pair.latent_gradient(z, self.loss)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeOutcome {
    pub x: DVector<f64>,
    /// Objective value at the start and after every accepted iteration.
    pub values: Vec<f64>,
    /// Set when a line search exhausted its halvings; `x` is the best iterate.
    pub line_search_failed: bool,
}

/// Runs `steps` iterations of the chosen method starting from `x0`, with
/// initial trial step `step`.
///
/// Gradient descent tries the full step first and halves only when the
/// Armijo condition fails, so one iteration with an acceptable step is the
/// plain update `x0 − step·∇f(x0)`. Conjugate gradient uses a secant step
/// along each direction (exact on quadratics) with the same Armijo safeguard,
/// and restarts from steepest descent whenever the direction is not a
/// descent direction.
pub fn multi_step_optimize<O: Objective + ?Sized>(objective: &O, x0: &DVector<f64>, steps: usize, method: OptimizerKind, step: f64) -> Result<OptimizeOutcome> {
    if steps == 0 {
        return Err(Error::invalid("inner optimization needs at least one step"));
    }
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::invalid(format!("step size must be positive, got {step}")));
    }
    let mut x = x0.clone();
    let mut fx = objective.value(&x);
    let mut g = objective.gradient(&x)?;
    let mut values = vec![fx];
    let mut direction = -&g;
    let mut failed = false;

    for _ in 0..steps {
        let gnorm2 = g.norm_squared();
        if gnorm2 == 0.0 {
            break;
        }
        let mut slope = g.dot(&direction);
        if method == OptimizerKind::GradientDescent || !(slope < 0.0) {
            direction = -&g;
            slope = -gnorm2;
        }

        let mut alpha = step;
        if method == OptimizerKind::ConjugateGradient {
            let trial = &x + &direction * step;
            let slope_trial = objective.gradient(&trial)?.dot(&direction);
            let curvature = slope_trial - slope;
            if curvature > 0.0 {
                alpha = -slope * step / curvature;
            }
        }

        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let candidate = &x + &direction * alpha;
            let fc = objective.value(&candidate);
            if fc.is_finite() && fc <= fx + ARMIJO_C1 * alpha * slope {
                accepted = Some((candidate, fc));
                break;
            }
            alpha *= 0.5;
        }
        let Some((next, fnext)) = accepted else {
            warn!("line search failed after {MAX_HALVINGS} halvings; keeping best iterate");
            failed = true;
            break;
        };

        let g_next = objective.gradient(&next)?;
        if method == OptimizerKind::ConjugateGradient {
            let beta = (g_next.dot(&(&g_next - &g)) / gnorm2).max(0.0);
            direction = -&g_next + &direction * beta;
        }
        x = next;
        fx = fnext;
        g = g_next;
        values.push(fx);
    }
    Ok(OptimizeOutcome { x, values, line_search_failed: failed })
}
