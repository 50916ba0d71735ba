//! Encoder/decoder pairs for a linear manifold.
//!
//! The perfect pair is `(E, D) = (Uᵀ, U)`. The perturbed family keeps the
//! linear encoder and adds a bounded smooth term to the decoder:
//!
//! `D(z) = Uz + s·Σ_j a_j v_j tanh(w_jᵀz + b_j)` with `Σ|a_j| = 1` and unit
//! `v_j`, so `‖D(z) − Uz‖ ≤ s` and the on-manifold reconstruction error is at
//! most [`RECONSTRUCTION_CONSTANT`]·s.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, ensure_finite, Error, Result};
use crate::geometry::LinearManifold;
use crate::guidance::GuidanceLoss;
use crate::linalg::max_abs;
use crate::rng;

/// Bound `C` in `‖D(E(x)) − x‖ ≤ C·scale` for on-manifold `x`.
pub const RECONSTRUCTION_CONSTANT: f64 = 1.0;

const BUMP_TERMS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AutoencoderKind {
    PerfectLinear,
    Perturbed { scale: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
struct BumpTerm {
    amplitude: f64,
    direction: DVector<f64>,
    frequency: DVector<f64>,
    bias: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderPair {
    manifold: LinearManifold,
    kind: AutoencoderKind,
    bumps: Vec<BumpTerm>,
}

impl AutoencoderPair {
    pub fn perfect_linear(manifold: LinearManifold) -> Self {
        Self { manifold, kind: AutoencoderKind::PerfectLinear, bumps: Vec::new() }
    }

    pub fn perturbed(manifold: LinearManifold, scale: f64, seed: u64) -> Result<Self> {
        if !(scale >= 0.0 && scale.is_finite()) {
            return Err(Error::invalid(format!("perturbation scale must be nonnegative, got {scale}")));
        }
        if scale == 0.0 {
            return Ok(Self { kind: AutoencoderKind::Perturbed { scale, seed }, ..Self::perfect_linear(manifold) });
        }
        let (d, k) = (manifold.ambient_dim(), manifold.latent_dim());
        let mut r = rng::seeded(seed);
        let bumps = (0..BUMP_TERMS)
            .map(|_| {
                let v = rng::standard_normal(&mut r, d);
                BumpTerm {
                    amplitude: 1.0 / BUMP_TERMS as f64,
                    direction: &v / v.norm(),
                    frequency: rng::standard_normal(&mut r, k) / (k as f64).sqrt(),
                    bias: rng::normal_scalar(&mut r),
                }
            })
            .collect();
        Ok(Self { manifold, kind: AutoencoderKind::Perturbed { scale, seed }, bumps })
    }

    pub fn kind(&self) -> AutoencoderKind {
        self.kind
    }

    pub fn manifold(&self) -> &LinearManifold {
        &self.manifold
    }

    fn scale(&self) -> f64 {
        match self.kind {
            AutoencoderKind::PerfectLinear => 0.0,
            AutoencoderKind::Perturbed { scale, .. } => scale,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.manifold.latent_dim()
    }

    pub fn ambient_dim(&self) -> usize {
        self.manifold.ambient_dim()
    }

    pub fn encode(&self, x: &DVector<f64>) -> DVector<f64> {
        self.manifold.coordinates(x)
    }

    pub fn decode(&self, z: &DVector<f64>) -> DVector<f64> {
        let mut x = self.manifold.embed(z);
        let s = self.scale();
        for b in &self.bumps {
            x += &b.direction * (s * b.amplitude * (b.frequency.dot(z) + b.bias).tanh());
        }
        x
    }

    /// `∂E/∂x`, `k×d`; constant for the linear encoder.
    pub fn encode_jacobian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.manifold.basis().transpose()
    }

    /// `∂D/∂z`, `d×k`.
    pub fn decode_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let mut j = self.manifold.basis().clone();
        let s = self.scale();
        for b in &self.bumps {
            let th = (b.frequency.dot(z) + b.bias).tanh();
            j += &b.direction * b.frequency.transpose() * (s * b.amplitude * (1.0 - th * th));
        }
        j
    }

    pub fn reconstruct(&self, x: &DVector<f64>) -> DVector<f64> {
        self.decode(&self.encode(x))
    }

    /// `∇_z L(D(z)) = J_D(z)ᵀ ∇L(D(z))`.
    pub fn latent_gradient<L: GuidanceLoss + ?Sized>(&self, z: &DVector<f64>, loss: &L) -> Result<DVector<f64>> {
        let x = self.decode(z);
        let g = loss.gradient(&x);
        ensure_finite(&g, "loss gradient")?;
        Ok(self.decode_jacobian(z).tr_mul(&g))
    }

    /// `∇_{x0} L(D(E(x0))) = J_Eᵀ J_Dᵀ ∇L`.
    ///
    /// For the perfect pair the result lies in `span(U)`.
    pub fn projected_gradient<L: GuidanceLoss + ?Sized>(&self, x0: &DVector<f64>, loss: &L) -> Result<DVector<f64>> {
        ensure_dim(x0, self.ambient_dim())?;
        let z = self.encode(x0);
        let gz = self.latent_gradient(&z, loss)?;
        Ok(self.encode_jacobian(x0).tr_mul(&gz))
    }

    /// `(‖J_E J_D − I‖_max, largest principal angle between range(J_Eᵀ) and range(J_D))`.
    pub fn jacobian_identity_report(&self, x0: &DVector<f64>) -> Result<(f64, f64)> {
        ensure_dim(x0, self.ambient_dim())?;
        let k = self.latent_dim();
        let z = self.encode(x0);
        let je = self.encode_jacobian(x0);
        let jd = self.decode_jacobian(&z);
        let identity_gap = max_abs(&(&je * &jd - DMatrix::identity(k, k)));
        Ok((identity_gap, principal_angle_gap(&je.transpose(), &jd)))
    }
}

/// Largest principal angle between the column spaces of two full-rank
/// `d×k` matrices, computed through `sin θ_max = ‖(I − Q_aQ_aᵀ)Q_b‖₂`.
pub fn principal_angle_gap(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let qa = a.clone().qr().q();
    let qb = b.clone().qr().q();
    let resid = &qb - &qa * qa.tr_mul(&qb);
    let sin = resid.svd(false, false).singular_values.max();
    sin.clamp(0.0, 1.0).asin()
}
