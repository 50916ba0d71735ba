//! Trajectory diagnostics: shell deviation, score/guidance alignment,
//! the paired DPS/MPGD distance audit and finite-difference checks.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::LinearManifold;
use crate::guidance::{dps_matched_weight, dps_step, mpgd_step, GuidanceLoss, StepCounters};
use crate::linalg::{cosine, spectral_norm};
use crate::prior::Denoiser;
use crate::sampler::{tweedie_estimate, BoundRecord, NoiseSchedule, StateSpace, TrajectoryRecord};

/// One row of a deviation curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviationPoint {
    pub t: usize,
    /// `|‖(I−P)x_t‖ − r_t| / r_t`; absent at `t = 0` where the shell collapses.
    pub shell_residual: Option<f64>,
    /// `‖(I−P)x_{0|t}‖`, or of the terminal sample at `t = 0`.
    pub off_manifold_norm: f64,
    /// Cosine between the score estimate and the guidance displacement.
    pub cosine: Option<f64>,
    pub bound: Option<BoundRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationCurve {
    pub chain: usize,
    pub points: Vec<DeviationPoint>,
}

impl DeviationCurve {
    pub fn terminal_off_manifold(&self) -> f64 {
        self.points.last().map_or(0.0, |p| p.off_manifold_norm)
    }
}

/// Builds the deviation curve of an ambient trajectory.
pub fn deviation_curve(trajectory: &TrajectoryRecord, manifold: &LinearManifold, schedule: &NoiseSchedule) -> Result<DeviationCurve> {
    if trajectory.space != StateSpace::Ambient {
        return Err(Error::invalid("deviation curves need an ambient trajectory"));
    }
    trajectory.validate()?;
    let alignment = alignment_curve(trajectory, schedule)?;
    let mut points = Vec::with_capacity(trajectory.steps.len() + 1);
    for (step, (_, cos)) in trajectory.steps.iter().zip(alignment) {
        let x_t = DVector::from_column_slice(&step.x_t);
        let x0 = DVector::from_column_slice(&step.x0);
        let r = manifold.shell_radius(schedule.alpha_bar(step.t));
        let normal = manifold.orthogonal(&x_t).norm();
        points.push(DeviationPoint {
            t: step.t,
            shell_residual: (r > 0.0).then(|| (normal - r).abs() / r),
            off_manifold_norm: manifold.orthogonal(&x0).norm(),
            cosine: cos,
            bound: step.bound,
        });
    }
    points.push(DeviationPoint {
        t: 0,
        shell_residual: None,
        off_manifold_norm: manifold.orthogonal(&trajectory.terminal()).norm(),
        cosine: None,
        bound: None,
    });
    Ok(DeviationCurve { chain: trajectory.chain, points })
}

/// `(t, cos(score, guidance))` per recorded step. The score estimate is
/// `−ε̂/√(1−ᾱ_t)`; the cosine is `None` when guidance was off or zero.
pub fn alignment_curve(trajectory: &TrajectoryRecord, schedule: &NoiseSchedule) -> Result<Vec<(usize, Option<f64>)>> {
    trajectory
        .steps
        .iter()
        .map(|s| {
            if s.t == 0 || s.t > schedule.steps() {
                return Err(Error::invalid(format!("step {} outside the schedule", s.t)));
            }
            let cos = s.guidance.as_ref().and_then(|g| {
                let score = DVector::from_column_slice(&s.eps_hat) / -(1.0 - schedule.alpha_bar(s.t)).sqrt();
                cosine(&score, &DVector::from_column_slice(g))
            });
            Ok((s.t, cos))
        })
        .collect()
}

/// Paired DPS/MPGD comparison at a single state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundAudit {
    /// `‖x^DPS_{t−1} − x^MPGD_{t−1}‖` under shared noise.
    pub distance: f64,
    /// `κρ√(1−ᾱ_t)/√ᾱ_t`.
    pub bound: f64,
    /// Operator norm of the row `(∂L/∂x0)(∂ε/∂x_t)`.
    pub kappa: f64,
    pub kappa_converged: bool,
}

impl BoundAudit {
    pub fn record(&self) -> BoundRecord {
        BoundRecord { lhs: self.distance, rhs: self.bound, kappa: self.kappa }
    }

    pub fn holds(&self, rel_tol: f64) -> bool {
        self.distance <= self.bound * (1.0 + rel_tol) + f64::MIN_POSITIVE
    }
}

/// Runs DPS with weight `ρ` and MPGD with the matched weight from the same
/// state and noise and compares the two against the analytic bound.
#[allow(clippy::too_many_arguments)]
pub fn bound_audit<D: Denoiser + ?Sized, L: GuidanceLoss + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    t: usize,
    x_t: &DVector<f64>,
    loss: &L,
    rho: f64,
    noise: &DVector<f64>,
) -> Result<BoundAudit> {
    let mut scratch = StepCounters::default();
    let ab = schedule.alpha_bar(t);
    let c = dps_matched_weight(rho, schedule.alpha_bar(t - 1), ab);
    let dps = dps_step(denoiser, schedule, t, x_t, loss, rho, noise, &mut scratch)?;
    let mpgd = mpgd_step(denoiser, schedule, t, x_t, loss, c, noise, &mut scratch)?;
    let g0 = loss.gradient(&dps.x0);
    let row = g0.transpose() * denoiser.noise_jacobian(ab, x_t)?;
    let kappa = spectral_norm(&DMatrix::from_row_slice(1, row.len(), row.as_slice()), 100, 1e-10);
    Ok(BoundAudit {
        distance: (&dps.x_prev - &mpgd.x_prev).norm(),
        bound: kappa.value * rho * (1.0 - ab).sqrt() / ab.sqrt(),
        kappa: kappa.value,
        kappa_converged: kappa.converged,
    })
}

/// Largest relative errors of analytic derivatives against central differences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    /// Denoiser Jacobian `∂ε/∂x_t`.
    pub jacobian: f64,
    /// `∇_{x_t}L(x_{0|t}(x_t))`.
    pub dps_gradient: f64,
    /// `∇L` of the loss itself.
    pub loss_gradient: f64,
}

impl FdReport {
    pub fn worst(&self) -> f64 {
        self.jacobian.max(self.dps_gradient).max(self.loss_gradient)
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1e-8)
}

/// Central-difference audit with step `h` at noise level `ᾱ`.
pub fn fd_audit<D: Denoiser + ?Sized, L: GuidanceLoss + ?Sized>(denoiser: &D, alpha_bar: f64, x_t: &DVector<f64>, loss: &L, h: f64) -> Result<FdReport> {
    let n = x_t.len();
    let jac = denoiser.noise_jacobian(alpha_bar, x_t)?;
    let eps = denoiser.predict_noise(alpha_bar, x_t)?;
    let x0 = tweedie_estimate(x_t, &eps, alpha_bar)?;
    let mut counters = StepCounters::default();
    let dps = crate::guidance::dps_gradient(denoiser, alpha_bar, x_t, &x0, loss, &mut counters)?.noisy_gradient;
    let g = loss.gradient(x_t);
    let composite = |x: &DVector<f64>| -> Result<f64> {
        let e = denoiser.predict_noise(alpha_bar, x)?;
        Ok(loss.value(&tweedie_estimate(x, &e, alpha_bar)?))
    };

    let mut report = FdReport { jacobian: 0.0, dps_gradient: 0.0, loss_gradient: 0.0 };
    for j in 0..n {
        let mut plus = x_t.clone();
        let mut minus = x_t.clone();
        plus[j] += h;
        minus[j] -= h;
        let column = (denoiser.predict_noise(alpha_bar, &plus)? - denoiser.predict_noise(alpha_bar, &minus)?) / (2.0 * h);
        for i in 0..n {
            report.jacobian = report.jacobian.max(rel_err(jac[(i, j)], column[i]));
        }
        let fd = (composite(&plus)? - composite(&minus)?) / (2.0 * h);
        report.dps_gradient = report.dps_gradient.max(rel_err(dps[j], fd));
        let fd = (loss.value(&plus) - loss.value(&minus)) / (2.0 * h);
        report.loss_gradient = report.loss_gradient.max(rel_err(g[j], fd));
    }
    Ok(report)
}

/// Writes `method, chain, t, shell_residual, off_manifold_norm, cosine, bound_lhs, bound_rhs, kappa`.
pub fn write_diagnostics_csv<W: Write>(out: W, method: &str, curves: &[DeviationCurve]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["method", "chain", "t", "shell_residual", "off_manifold_norm", "cosine", "bound_lhs", "bound_rhs", "kappa"])?;
    let opt = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{v:e}"));
    for c in curves {
        for p in &c.points {
            w.write_record([
                method.to_string(),
                c.chain.to_string(),
                p.t.to_string(),
                opt(p.shell_residual),
                format!("{:e}", p.off_manifold_norm),
                opt(p.cosine),
                opt(p.bound.map(|b| b.lhs)),
                opt(p.bound.map(|b| b.rhs)),
                opt(p.bound.map(|b| b.kappa)),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guidance::{GuidanceSettings, GuidedSampler, Method, QuadraticLoss};
    use crate::prior::MixturePrior;
    use crate::rng;

    fn prior() -> MixturePrior {
        let m = LinearManifold::random(9, 3, 1).unwrap();
        MixturePrior::random_mixture(m, 3, 2.0, 0.3, 5).unwrap()
    }

    #[test]
    fn bound_is_tight_for_exact_denoiser() {
        let p = prior();
        let sched = NoiseSchedule::linear_beta(30, 0.5).unwrap();
        let loss = QuadraticLoss::isotropic(rng::standard_normal(&mut rng::seeded(2), 9), 1.0);
        let mut r = rng::seeded(4);
        for t in [30, 15, 2] {
            let x = rng::standard_normal(&mut r, 9);
            let noise = rng::standard_normal(&mut r, 9);
            let a = bound_audit(&p, &sched, t, &x, &loss, 0.05, &noise).unwrap();
            assert!(a.holds(1e-9), "{a:?}");
            assert!((a.distance - a.bound).abs() <= 1e-9 * a.bound.max(1e-12), "{a:?}");
        }
    }

    #[test]
    fn finite_differences_agree() {
        let p = prior();
        let loss = QuadraticLoss::isotropic(DVector::from_element(9, 0.2), 1.3);
        let x = rng::standard_normal(&mut rng::seeded(7), 9);
        for ab in [0.1, 0.6, 0.95] {
            let rep = fd_audit(&p, ab, &x, &loss, 1e-5).unwrap();
            assert!(rep.worst() < 1e-5, "{ab}: {rep:?}");
        }
    }

    #[test]
    fn curve_rows_and_csv() {
        let p = prior();
        let sched = NoiseSchedule::linear_beta(10, 0.0).unwrap();
        let loss = QuadraticLoss::isotropic(DVector::zeros(9), 1.0);
        let mut settings = GuidanceSettings::new(Method::Dps, 0.05);
        settings.audit_bound = true;
        let s = GuidedSampler::new(&p, &sched, &loss, None, settings).unwrap();
        let r = s.run_chain(0, 1).unwrap();
        let curve = deviation_curve(&r.trajectory, p.manifold(), &sched).unwrap();
        assert_eq!(curve.points.len(), 11);
        assert!(curve.points[..10].iter().all(|pt| pt.bound.is_some() && pt.cosine.is_some()));
        let mut buf = Vec::new();
        write_diagnostics_csv(&mut buf, "dps", &[curve]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 12);
        assert!(text.starts_with("method,chain,t,shell_residual"));
    }

    #[test]
    fn unguided_alignment_is_absent() {
        let p = prior();
        let sched = NoiseSchedule::linear_beta(5, 0.0).unwrap();
        let loss = QuadraticLoss::isotropic(DVector::zeros(9), 1.0);
        let s = GuidedSampler::new(&p, &sched, &loss, None, GuidanceSettings::new(Method::Ddim, 1.0)).unwrap();
        let r = s.run_chain(0, 1).unwrap();
        assert!(alignment_curve(&r.trajectory, &sched).unwrap().iter().all(|(_, c)| c.is_none()));
    }
}
