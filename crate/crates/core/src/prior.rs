//! Gaussian-mixture data distributions supported on a linear manifold.
//!
//! Every noisy marginal `p_t` of such a prior is again a Gaussian mixture, so
//! the score, the optimal noise predictor `ε*(x_t) = −√(1−ᾱ)∇log p_t(x_t)` and
//! its Jacobian are all available in closed form. Work is done in the split
//! coordinates `x = Ua + r` with `a = Uᵀx` and `r ⟂ span(U)`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, ensure_finite, Error, Result};
use crate::geometry::LinearManifold;
use crate::linalg::{cholesky_with_jitter, max_abs};
use crate::rng;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// An `ε`-prediction model: the quantity a trained diffusion network would
/// output, plus its input Jacobian.
pub trait Denoiser: Sync {
    /// Dimension of the space the diffusion runs in.
    fn dim(&self) -> usize;

    fn predict_noise(&self, alpha_bar: f64, x_t: &DVector<f64>) -> Result<DVector<f64>>;

    /// `∂ε/∂x_t`, a `dim×dim` matrix.
    fn noise_jacobian(&self, alpha_bar: f64, x_t: &DVector<f64>) -> Result<DMatrix<f64>>;

    /// `∇log p_t(x_t) = −ε/√(1−ᾱ)`.
    fn score(&self, alpha_bar: f64, x_t: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.predict_noise(alpha_bar, x_t)? / -(1.0 - alpha_bar).sqrt())
    }
}

fn check_interior(alpha_bar: f64) -> Result<()> {
    if alpha_bar > 0.0 && alpha_bar < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("denoiser requires alpha_bar in (0, 1), got {alpha_bar}")))
    }
}

/// Gaussian mixture over `R^n` with possibly singular component covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentMixture {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covs: Vec<DMatrix<f64>>,
}

/// Per-component quantities at one noise level.
struct ComponentEval {
    /// `log w_i + log N(a; √ᾱμ_i, S_i)`.
    log_weighted: f64,
    /// `−S_i⁻¹(a − √ᾱμ_i)`.
    score: DVector<f64>,
    /// `S_i⁻¹`.
    precision: DMatrix<f64>,
}

impl LatentMixture {
    pub fn new(weights: Vec<f64>, means: Vec<DVector<f64>>, covs: Vec<DMatrix<f64>>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::invalid("mixture needs at least one component"));
        }
        if weights.len() != means.len() || weights.len() != covs.len() {
            return Err(Error::invalid("weights, means and covariances must have equal length"));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid("weights must be nonnegative and finite"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("weights must sum to 1, got {total}")));
        }
        let n = means[0].len();
        if n == 0 {
            return Err(Error::invalid("latent dimension must be positive"));
        }
        for (mu, cov) in means.iter().zip(&covs) {
            ensure_dim(mu, n)?;
            ensure_finite(mu, "latent mean")?;
            if cov.shape() != (n, n) {
                return Err(Error::invalid(format!("covariance must be {n}x{n}, got {:?}", cov.shape())));
            }
            if cov.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("latent covariance"));
            }
            if max_abs(&(cov - cov.transpose())) > 1e-12 {
                return Err(Error::invalid("covariance is not symmetric"));
            }
            let min_eig = SymmetricEigen::new(cov.clone()).eigenvalues.min();
            if min_eig < -1e-12 {
                return Err(Error::invalid(format!("covariance has negative eigenvalue {min_eig:e}")));
            }
        }
        Ok(Self { weights, means, covs })
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn covs(&self) -> &[DMatrix<f64>] {
        &self.covs
    }

    fn evaluate(&self, alpha_bar: f64, a: &DVector<f64>) -> Result<Vec<ComponentEval>> {
        let n = self.dim();
        let root_ab = alpha_bar.sqrt();
        let mut out = Vec::with_capacity(self.len());
        for ((w, mu), cov) in self.weights.iter().zip(&self.means).zip(&self.covs) {
            let s = cov * alpha_bar + DMatrix::identity(n, n) * (1.0 - alpha_bar);
            let chol = cholesky_with_jitter(&s)
                .ok_or_else(|| Error::Numerical("component covariance is singular".into()))?;
            let delta = a - mu * root_ab;
            let solved = chol.solve(&delta);
            let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            let log_density = -0.5 * (n as f64 * LN_2PI + log_det + delta.dot(&solved));
            out.push(ComponentEval {
                log_weighted: w.ln() + log_density,
                score: -solved,
                precision: chol.inverse(),
            });
        }
        Ok(out)
    }

    /// Log-density of the noisy marginal `Σ w_i N(√ᾱ μ_i, ᾱΣ_i + (1−ᾱ)I)`.
    pub fn noisy_log_density(&self, alpha_bar: f64, a: &DVector<f64>) -> Result<f64> {
        if !(alpha_bar > 0.0 && alpha_bar <= 1.0) {
            return Err(Error::invalid(format!("alpha_bar must lie in (0, 1], got {alpha_bar}")));
        }
        ensure_dim(a, self.dim())?;
        if alpha_bar == 1.0 {
            self.require_nonsingular()?;
        }
        let evals = self.evaluate(alpha_bar, a)?;
        Ok(log_sum_exp(evals.iter().map(|e| e.log_weighted)))
    }

    fn require_nonsingular(&self) -> Result<()> {
        for cov in &self.covs {
            if cov.clone().cholesky().is_none() {
                return Err(Error::invalid("density at alpha_bar = 1 needs positive-definite component covariances"));
            }
        }
        Ok(())
    }

    /// Mixture score, responsibility-weighted component scores and
    /// the latent Hessian of `log p_t`.
    fn score_parts(&self, alpha_bar: f64, a: &DVector<f64>, want_hessian: bool) -> Result<(DVector<f64>, Option<DMatrix<f64>>)> {
        let evals = self.evaluate(alpha_bar, a)?;
        let resp = responsibilities(&evals);
        let n = self.dim();
        let mut score = DVector::zeros(n);
        for (g, e) in resp.iter().zip(&evals) {
            score += &e.score * *g;
        }
        if !want_hessian {
            return Ok((score, None));
        }
        let mut hess = DMatrix::zeros(n, n);
        for (g, e) in resp.iter().zip(&evals) {
            let centred = &e.score - &score;
            hess -= &e.precision * *g;
            hess += &centred * centred.transpose() * *g;
        }
        Ok((score, Some(hess)))
    }

    /// Draws one sample and reports the component it came from.
    pub fn sample_labeled<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, DVector<f64>) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut idx = self.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                idx = i;
                break;
            }
        }
        let root = psd_sqrt(&self.covs[idx]);
        let eps = rng::standard_normal(rng, self.dim());
        (idx, &self.means[idx] + root * eps)
    }
}

impl Denoiser for LatentMixture {
    fn dim(&self) -> usize {
        LatentMixture::dim(self)
    }

    fn predict_noise(&self, alpha_bar: f64, x_t: &DVector<f64>) -> Result<DVector<f64>> {
        check_interior(alpha_bar)?;
        ensure_dim(x_t, self.dim())?;
        let (score, _) = self.score_parts(alpha_bar, x_t, false)?;
        Ok(score * -(1.0 - alpha_bar).sqrt())
    }

    fn noise_jacobian(&self, alpha_bar: f64, x_t: &DVector<f64>) -> Result<DMatrix<f64>> {
        check_interior(alpha_bar)?;
        ensure_dim(x_t, self.dim())?;
        let (_, hess) = self.score_parts(alpha_bar, x_t, true)?;
        Ok(hess.expect("requested") * -(1.0 - alpha_bar).sqrt())
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn responsibilities(evals: &[ComponentEval]) -> Vec<f64> {
    let lse = log_sum_exp(evals.iter().map(|e| e.log_weighted));
    evals.iter().map(|e| (e.log_weighted - lse).exp()).collect()
}

/// Symmetric square root of a PSD matrix; exact zero for the zero matrix.
fn psd_sqrt(cov: &DMatrix<f64>) -> DMatrix<f64> {
    if cov.iter().all(|v| *v == 0.0) {
        return DMatrix::zeros(cov.nrows(), cov.ncols());
    }
    let eig = SymmetricEigen::new(cov.clone());
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// A latent mixture embedded on a [`LinearManifold`].
///
/// Components may optionally carry an ambient offset orthogonal to the
/// manifold; such priors are off-manifold by construction and exist to
/// exercise the tangency checks.
#[derive(Debug, Clone, PartialEq)]
pub struct MixturePrior {
    manifold: LinearManifold,
    latent: LatentMixture,
    offsets: Option<Vec<DVector<f64>>>,
}

/// Exact Gaussian posterior in ambient coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub latent_mean: DVector<f64>,
    pub latent_covariance: DMatrix<f64>,
}

impl GaussianPosterior {
    /// Marginal standard deviation of every ambient coordinate.
    pub fn marginal_std(&self) -> DVector<f64> {
        self.covariance.diagonal().map(|v| v.max(0.0).sqrt())
    }
}

impl MixturePrior {
    pub fn new(manifold: LinearManifold, latent: LatentMixture) -> Result<Self> {
        if latent.dim() != manifold.latent_dim() {
            return Err(Error::DimensionMismatch {
                expected: manifold.latent_dim(),
                got: latent.dim(),
            });
        }
        Ok(Self { manifold, latent, offsets: None })
    }

    pub fn single_gaussian(manifold: LinearManifold, mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        Self::new(manifold, LatentMixture::new(vec![1.0], vec![mean], vec![cov])?)
    }

    /// Point mass at `U·mean`.
    pub fn point_mass(manifold: LinearManifold, mean: DVector<f64>) -> Result<Self> {
        let k = manifold.latent_dim();
        Self::single_gaussian(manifold, mean, DMatrix::zeros(k, k))
    }

    /// Equal-weight mixture with means drawn `N(0, spread²I)` and isotropic
    /// component covariance `cov_scale²I`.
    pub fn random_mixture(manifold: LinearManifold, components: usize, spread: f64, cov_scale: f64, seed: u64) -> Result<Self> {
        if components == 0 {
            return Err(Error::invalid("need at least one component"));
        }
        let k = manifold.latent_dim();
        let mut r = rng::seeded(seed);
        let means = (0..components).map(|_| rng::standard_normal(&mut r, k) * spread).collect();
        let covs = vec![DMatrix::identity(k, k) * (cov_scale * cov_scale); components];
        let weights = vec![1.0 / components as f64; components];
        // Sum of equal weights can miss 1 by an ulp or two; renormalize the last.
        let mut weights: Vec<f64> = weights;
        let head: f64 = weights[..components - 1].iter().sum();
        weights[components - 1] = 1.0 - head;
        Self::new(manifold, LatentMixture::new(weights, means, covs)?)
    }

    /// Copy of this prior with component `index` shifted by the normal part of `offset`.
    pub fn with_off_manifold_offset(&self, index: usize, offset: &DVector<f64>) -> Result<Self> {
        ensure_dim(offset, self.manifold.ambient_dim())?;
        if index >= self.latent.len() {
            return Err(Error::invalid(format!("component index {index} out of range")));
        }
        let d = self.manifold.ambient_dim();
        let mut offsets = self.offsets.clone().unwrap_or_else(|| vec![DVector::zeros(d); self.latent.len()]);
        offsets[index] = self.manifold.orthogonal(offset);
        Ok(Self { offsets: Some(offsets), ..self.clone() })
    }

    pub fn manifold(&self) -> &LinearManifold {
        &self.manifold
    }

    pub fn latent(&self) -> &LatentMixture {
        &self.latent
    }

    pub fn is_on_manifold(&self) -> bool {
        self.offsets
            .as_ref()
            .is_none_or(|o| o.iter().all(|v| v.iter().all(|x| *x == 0.0)))
    }

    fn offset(&self, i: usize) -> Option<&DVector<f64>> {
        self.offsets.as_ref().map(|o| &o[i])
    }

    /// Draws `n` samples from the prior.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<DVector<f64>> {
        self.sample_labeled(n, rng).into_iter().map(|(_, x)| x).collect()
    }

    pub fn sample_labeled<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<(usize, DVector<f64>)> {
        (0..n)
            .map(|_| {
                let (i, z) = self.latent.sample_labeled(rng);
                let mut x = self.manifold.embed(&z);
                if let Some(o) = self.offset(i) {
                    x += o;
                }
                (i, x)
            })
            .collect()
    }

    /// Log-density of `p_t(x_t) = Σ w_i N(x_t; √ᾱ Uμ_i, ᾱ UΣ_iUᵀ + (1−ᾱ)I)`.
    ///
    /// At `ᾱ = 1` the measure lives on the manifold; the value returned is the
    /// density with respect to `k`-dimensional volume on `M` and off-manifold
    /// points are rejected.
    pub fn noisy_log_density(&self, alpha_bar: f64, x_t: &DVector<f64>) -> Result<f64> {
        if !(alpha_bar > 0.0 && alpha_bar <= 1.0) {
            return Err(Error::invalid(format!("alpha_bar must lie in (0, 1], got {alpha_bar}")));
        }
        ensure_dim(x_t, self.manifold.ambient_dim())?;
        ensure_finite(x_t, "noisy_log_density input")?;
        let a = self.manifold.coordinates(x_t);
        let r = x_t - self.manifold.embed(&a);
        if alpha_bar == 1.0 {
            if !self.is_on_manifold() {
                return Err(Error::invalid("density at alpha_bar = 1 is only defined for on-manifold priors"));
            }
            if r.norm() > 1e-12 * (1.0 + x_t.norm()) {
                return Err(Error::invalid("point lies off the support at alpha_bar = 1"));
            }
            return self.latent.noisy_log_density(1.0, &a);
        }
        let evals = self.latent.evaluate(alpha_bar, &a)?;
        let var = 1.0 - alpha_bar;
        let codim = self.manifold.codim() as f64;
        let norm_const = -0.5 * codim * (LN_2PI + var.ln());
        let terms: Vec<f64> = evals
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let resid = match self.offset(i) {
                    Some(o) => &r - o * alpha_bar.sqrt(),
                    None => r.clone(),
                };
                e.log_weighted + norm_const - resid.norm_squared() / (2.0 * var)
            })
            .collect();
        Ok(log_sum_exp(terms.into_iter()))
    }

    /// Score and (optionally) Hessian of `log p_t` in ambient coordinates.
    fn ambient_score(&self, alpha_bar: f64, x_t: &DVector<f64>, want_hessian: bool) -> Result<(DVector<f64>, Option<DMatrix<f64>>)> {
        check_interior(alpha_bar)?;
        ensure_dim(x_t, self.manifold.ambient_dim())?;
        ensure_finite(x_t, "denoiser input")?;
        let u = self.manifold.basis();
        let a = self.manifold.coordinates(x_t);
        let r = x_t - u * &a;
        let var = 1.0 - alpha_bar;
        let d = self.manifold.ambient_dim();

        let Some(offsets) = &self.offsets else {
            // Normal part is common to every component and decouples.
            let (lat_score, lat_hess) = self.latent.score_parts(alpha_bar, &a, want_hessian)?;
            let score = u * lat_score - &r / var;
            let hess = lat_hess.map(|h| {
                let tangent = u * h * u.transpose();
                let normal = DMatrix::identity(d, d) - self.manifold.projector();
                tangent - normal / var
            });
            return Ok((score, hess));
        };

        let evals = self.latent.evaluate(alpha_bar, &a)?;
        let root_ab = alpha_bar.sqrt();
        let mut logs = Vec::with_capacity(evals.len());
        let mut scores = Vec::with_capacity(evals.len());
        for (e, o) in evals.iter().zip(offsets) {
            let resid = &r - o * root_ab;
            logs.push(e.log_weighted - resid.norm_squared() / (2.0 * var));
            scores.push(u * &e.score - resid / var);
        }
        let lse = log_sum_exp(logs.iter().copied());
        let resp: Vec<f64> = logs.iter().map(|l| (l - lse).exp()).collect();
        let mut score = DVector::zeros(d);
        for (g, s) in resp.iter().zip(&scores) {
            score += s * *g;
        }
        if !want_hessian {
            return Ok((score, None));
        }
        let mut lat_prec = DMatrix::zeros(self.manifold.latent_dim(), self.manifold.latent_dim());
        let mut hess = DMatrix::zeros(d, d);
        for ((g, s), e) in resp.iter().zip(&scores).zip(&evals) {
            lat_prec += &e.precision * *g;
            let c = s - &score;
            hess += &c * c.transpose() * *g;
        }
        hess -= u * lat_prec * u.transpose();
        hess -= (DMatrix::identity(d, d) - self.manifold.projector()) / var;
        Ok((score, Some(hess)))
    }

    /// Off-manifold norm of the Tweedie estimate built from the optimal denoiser.
    pub fn tweedie_on_manifold_check(&self, alpha_bar: f64, x_t: &DVector<f64>) -> Result<f64> {
        let eps = self.predict_noise(alpha_bar, x_t)?;
        let x0 = crate::sampler::tweedie_estimate(x_t, &eps, alpha_bar)?;
        Ok(self.manifold.orthogonal(&x0).norm())
    }

    /// Conjugate posterior of `x` given `y = Ax + z`, `z ~ N(0, noise_var·I)`.
    ///
    /// Only defined for a single-component prior. Computed in the latent
    /// coordinates with the gain form, so singular prior covariances are fine.
    pub fn exact_linear_posterior(&self, a: &DMatrix<f64>, y: &DVector<f64>, noise_var: f64) -> Result<GaussianPosterior> {
        if self.latent.len() != 1 {
            return Err(Error::invalid("exact posterior needs a single-component prior"));
        }
        if !(noise_var > 0.0 && noise_var.is_finite()) {
            return Err(Error::invalid(format!("noise_var must be positive, got {noise_var}")));
        }
        let d = self.manifold.ambient_dim();
        if a.ncols() != d || a.nrows() != y.len() {
            return Err(Error::invalid(format!(
                "measurement operator is {:?}, expected ({}, {d})",
                a.shape(),
                y.len()
            )));
        }
        let m = a.nrows();
        let mu = &self.latent.means[0];
        let sigma = &self.latent.covs[0];
        let u = self.manifold.basis();
        let b = a * u;
        let shifted_y = match self.offset(0) {
            Some(o) => y - a * o,
            None => y.clone(),
        };
        let innovation_cov = &b * sigma * b.transpose() + DMatrix::identity(m, m) * noise_var;
        let chol = cholesky_with_jitter(&innovation_cov)
            .ok_or_else(|| Error::Numerical("innovation covariance is singular".into()))?;
        let cross = sigma * b.transpose();
        let gain = chol.solve(&cross.transpose()).transpose();
        let latent_mean = mu + &gain * (shifted_y - &b * mu);
        let mut latent_cov = sigma - &gain * &b * sigma;
        latent_cov = (&latent_cov + latent_cov.transpose()) * 0.5;
        let mut mean = u * &latent_mean;
        if let Some(o) = self.offset(0) {
            mean += o;
        }
        let covariance = u * &latent_cov * u.transpose();
        Ok(GaussianPosterior {
            mean,
            covariance,
            latent_mean,
            latent_covariance: latent_cov,
        })
    }

    pub fn to_doc(&self, manifold_ref: &str) -> PriorDoc {
        PriorDoc {
            manifold_ref: manifold_ref.to_string(),
            weights: self.latent.weights.clone(),
            latent_means: self.latent.means.iter().map(|m| m.iter().copied().collect()).collect(),
            latent_covs: self
                .latent
                .covs
                .iter()
                .map(|c| c.row_iter().map(|r| r.iter().copied().collect()).collect())
                .collect(),
            offsets: self
                .offsets
                .as_ref()
                .map(|o| o.iter().map(|v| v.iter().copied().collect()).collect()),
        }
    }

    pub fn from_doc(doc: &PriorDoc, manifold: LinearManifold) -> Result<Self> {
        let k = manifold.latent_dim();
        let means = doc.latent_means.iter().map(|m| DVector::from_vec(m.clone())).collect();
        let mut covs = Vec::with_capacity(doc.latent_covs.len());
        for rows in &doc.latent_covs {
            if rows.len() != k || rows.iter().any(|r| r.len() != k) {
                return Err(Error::invalid(format!("latent covariance must be {k}x{k}")));
            }
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            covs.push(DMatrix::from_row_slice(k, k, &flat));
        }
        let mut prior = Self::new(manifold, LatentMixture::new(doc.weights.clone(), means, covs)?)?;
        if let Some(offsets) = &doc.offsets {
            for (i, o) in offsets.iter().enumerate() {
                prior = prior.with_off_manifold_offset(i, &DVector::from_vec(o.clone()))?;
            }
        }
        Ok(prior)
    }
}

impl Denoiser for MixturePrior {
    fn dim(&self) -> usize {
        self.manifold.ambient_dim()
    }

    fn predict_noise(&self, alpha_bar: f64, x_t: &DVector<f64>) -> Result<DVector<f64>> {
        let (score, _) = self.ambient_score(alpha_bar, x_t, false)?;
        Ok(score * -(1.0 - alpha_bar).sqrt())
    }

    fn noise_jacobian(&self, alpha_bar: f64, x_t: &DVector<f64>) -> Result<DMatrix<f64>> {
        let (_, hess) = self.ambient_score(alpha_bar, x_t, true)?;
        Ok(hess.expect("requested") * -(1.0 - alpha_bar).sqrt())
    }
}

/// JSON form of a prior: `{manifold_ref, weights, latent_means, latent_covs}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorDoc {
    pub manifold_ref: String,
    pub weights: Vec<f64>,
    pub latent_means: Vec<Vec<f64>>,
    pub latent_covs: Vec<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offsets: Option<Vec<Vec<f64>>>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_component(seed: u64) -> MixturePrior {
        let m = LinearManifold::random(6, 2, seed).unwrap();
        let latent = LatentMixture::new(
            vec![0.3, 0.7],
            vec![DVector::from_vec(vec![1.0, -0.5]), DVector::from_vec(vec![-1.2, 0.4])],
            vec![
                DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]),
                DMatrix::from_row_slice(2, 2, &[0.2, 0.0, 0.0, 0.6]),
            ],
        )
        .unwrap();
        MixturePrior::new(m, latent).unwrap()
    }

    #[test]
    fn rejects_invalid_mixtures() {
        let mu = DVector::zeros(2);
        let eye = DMatrix::identity(2, 2);
        assert!(LatentMixture::new(vec![0.5, 0.6], vec![mu.clone(), mu.clone()], vec![eye.clone(), eye.clone()]).is_err());
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(LatentMixture::new(vec![1.0], vec![mu.clone()], vec![bad]).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(LatentMixture::new(vec![1.0], vec![mu], vec![asym]).is_err());
    }

    #[test]
    fn point_mass_samples_are_exact() {
        let m = LinearManifold::random(5, 2, 3).unwrap();
        let mu = DVector::from_vec(vec![0.7, -1.1]);
        let target = m.embed(&mu);
        let prior = MixturePrior::point_mass(m, mu).unwrap();
        let mut r = rng::seeded(0);
        for x in prior.sample(20, &mut r) {
            assert_eq!(x, target);
        }
    }

    #[test]
    fn samples_stay_on_manifold() {
        let prior = two_component(4);
        let mut r = rng::seeded(1);
        for x in prior.sample(200, &mut r) {
            assert!(prior.manifold().orthogonal(&x).norm() < 1e-12);
        }
    }

    #[test]
    fn point_mass_denoiser_closed_form() {
        let m = LinearManifold::random(5, 2, 3).unwrap();
        let mu = DVector::from_vec(vec![0.7, -1.1]);
        let centre = m.embed(&mu);
        let prior = MixturePrior::point_mass(m, mu).unwrap();
        let ab = 0.37;
        let x = DVector::from_vec(vec![0.3, -0.2, 1.5, 0.0, 0.9]);
        let eps = prior.predict_noise(ab, &x).unwrap();
        let expected = (&x - &centre * ab.sqrt()) / (1.0 - ab).sqrt();
        assert!((eps - expected).amax() < 1e-12);
        let at_mode = prior.predict_noise(ab, &(&centre * ab.sqrt())).unwrap();
        assert!(at_mode.amax() < 1e-12);
        let jac = prior.noise_jacobian(ab, &x).unwrap();
        let expected = DMatrix::identity(5, 5) / (1.0 - ab).sqrt();
        assert!(max_abs(&(jac - expected)) < 1e-12);
    }

    #[test]
    fn denoiser_rejects_endpoints() {
        let prior = two_component(1);
        let x = DVector::zeros(6);
        assert!(prior.predict_noise(1.0, &x).is_err());
        assert!(prior.predict_noise(0.0, &x).is_err());
        assert!(prior.noise_jacobian(1.0, &x).is_err());
    }

    #[test]
    fn density_at_unit_alpha_requires_nonsingular() {
        let m = LinearManifold::random(4, 1, 0).unwrap();
        let prior = MixturePrior::point_mass(m.clone(), DVector::from_vec(vec![1.0])).unwrap();
        assert!(prior.noisy_log_density(1.0, &m.embed(&DVector::from_vec(vec![1.0]))).is_err());
        let prior = MixturePrior::single_gaussian(m.clone(), DVector::from_vec(vec![1.0]), DMatrix::identity(1, 1)).unwrap();
        let on = m.embed(&DVector::from_vec(vec![1.0]));
        let v = prior.noisy_log_density(1.0, &on).unwrap();
        assert!((v + 0.5 * LN_2PI).abs() < 1e-12);
    }

    #[test]
    fn symmetric_mixture_density_is_swap_invariant() {
        let m = LinearManifold::axis_aligned(3, 1).unwrap();
        let mu = DVector::from_vec(vec![2.0]);
        let cov = DMatrix::identity(1, 1) * 0.3;
        let p = MixturePrior::new(
            m.clone(),
            LatentMixture::new(vec![0.5, 0.5], vec![mu.clone(), -mu.clone()], vec![cov.clone(), cov.clone()]).unwrap(),
        )
        .unwrap();
        let q = MixturePrior::new(m, LatentMixture::new(vec![0.5, 0.5], vec![-mu.clone(), mu], vec![cov.clone(), cov]).unwrap()).unwrap();
        let x = DVector::from_vec(vec![0.0, 0.4, -0.1]);
        assert_eq!(p.noisy_log_density(0.6, &x).unwrap(), q.noisy_log_density(0.6, &x).unwrap());
    }

    #[test]
    fn tweedie_on_manifold_unless_offset() {
        let prior = two_component(2);
        let x = DVector::from_vec(vec![0.3, -1.0, 2.0, 0.1, 0.0, -0.7]);
        assert!(prior.tweedie_on_manifold_check(0.4, &x).unwrap() < 1e-8);
        let on = prior.manifold().project(&x);
        assert!(prior.tweedie_on_manifold_check(0.4, &on).unwrap() < 1e-10);
        let offset = DVector::from_vec(vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0]);
        let shifted = prior.with_off_manifold_offset(0, &offset).unwrap();
        assert!(!shifted.is_on_manifold());
        assert!(shifted.tweedie_on_manifold_check(0.4, &x).unwrap() > 1e-3);
    }

    #[test]
    fn uninformative_measurement_returns_prior() {
        let m = LinearManifold::random(5, 2, 8).unwrap();
        let mu = DVector::from_vec(vec![0.5, -0.2]);
        let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]);
        let prior = MixturePrior::single_gaussian(m.clone(), mu.clone(), sigma.clone()).unwrap();
        let post = prior.exact_linear_posterior(&DMatrix::zeros(3, 5), &DVector::from_vec(vec![1.0, 2.0, 3.0]), 0.1).unwrap();
        assert!((&post.latent_mean - &mu).amax() < 1e-14);
        assert!(max_abs(&(&post.latent_covariance - &sigma)) < 1e-14);
        assert!(prior.manifold().orthogonal(&post.mean).norm() < 1e-14);
    }

    #[test]
    fn noiseless_identity_measurement_projects() {
        let m = LinearManifold::random(5, 2, 8).unwrap();
        let prior = MixturePrior::single_gaussian(m.clone(), DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        let y = DVector::from_vec(vec![1.0, -2.0, 0.5, 0.3, 0.9]);
        let post = prior.exact_linear_posterior(&DMatrix::identity(5, 5), &y, 1e-8).unwrap();
        assert!((&post.mean - m.project(&y)).amax() < 1e-6);
    }

    #[test]
    fn posterior_satisfies_normal_equations() {
        let m = LinearManifold::random(6, 3, 5).unwrap();
        let mu = DVector::from_vec(vec![0.1, 0.2, -0.3]);
        let sigma = DMatrix::from_row_slice(3, 3, &[1.0, 0.3, 0.0, 0.3, 0.8, 0.1, 0.0, 0.1, 0.5]);
        let prior = MixturePrior::single_gaussian(m.clone(), mu.clone(), sigma.clone()).unwrap();
        let mut r = rng::seeded(3);
        let a = DMatrix::from_fn(2, 6, |_, _| rng::normal_scalar(&mut r));
        let y = DVector::from_vec(vec![0.4, -1.0]);
        let nv = 0.05;
        let post = prior.exact_linear_posterior(&a, &y, nv).unwrap();
        let b = &a * m.basis();
        let prec = sigma.clone().try_inverse().unwrap() + b.transpose() * &b / nv;
        let rhs = sigma.try_inverse().unwrap() * mu + b.transpose() * y / nv;
        assert!((prec * &post.latent_mean - rhs).amax() < 1e-8);
        assert!(SymmetricEigen::new(post.covariance.clone()).eigenvalues.min() > -1e-10);
    }

    #[test]
    fn multi_component_posterior_rejected() {
        let prior = two_component(0);
        assert!(prior.exact_linear_posterior(&DMatrix::zeros(1, 6), &DVector::zeros(1), 1.0).is_err());
    }

    #[test]
    fn prior_doc_round_trip() {
        let prior = two_component(6);
        let doc = prior.to_doc("manifold.json");
        let json = serde_json::to_string(&doc).unwrap();
        let back: PriorDoc = serde_json::from_str(&json).unwrap();
        let rebuilt = MixturePrior::from_doc(&back, prior.manifold().clone()).unwrap();
        assert_eq!(rebuilt, prior);
    }
}
