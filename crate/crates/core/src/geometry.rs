//! Linear-subspace data manifolds and the noisy shells around them.
//!
//! A manifold here is a `k`-dimensional subspace of `R^d` through the origin,
//! stored as an orthonormal `d×k` basis `U`. Noisy samples at level `ᾱ_t`
//! concentrate at orthogonal distance `r_t = √((1−ᾱ_t)(d−k))` from it.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, ensure_finite, Error, Result};
use crate::linalg::max_abs;
use crate::rng;

/// Orthonormality tolerance for stored bases.
pub const BASIS_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ManifoldDoc", into = "ManifoldDoc")]
pub struct LinearManifold {
    basis: DMatrix<f64>,
}

/// On-disk form: `{d, k, basis}` with the basis flattened row-major.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifoldDoc {
    d: usize,
    k: usize,
    basis: Vec<f64>,
}

impl From<LinearManifold> for ManifoldDoc {
    fn from(m: LinearManifold) -> Self {
        let (d, k) = m.basis.shape();
        let mut basis = Vec::with_capacity(d * k);
        for i in 0..d {
            for j in 0..k {
                basis.push(m.basis[(i, j)]);
            }
        }
        ManifoldDoc { d, k, basis }
    }
}

impl TryFrom<ManifoldDoc> for LinearManifold {
    type Error = Error;

    fn try_from(doc: ManifoldDoc) -> Result<Self> {
        if doc.basis.len() != doc.d * doc.k {
            return Err(Error::invalid(format!(
                "basis has {} entries, expected d*k = {}",
                doc.basis.len(),
                doc.d * doc.k
            )));
        }
        LinearManifold::new(DMatrix::from_row_slice(doc.d, doc.k, &doc.basis))
    }
}

impl LinearManifold {
    /// Wraps an existing basis after checking `1 ≤ k < d` and `UᵀU = I`.
    pub fn new(basis: DMatrix<f64>) -> Result<Self> {
        let (d, k) = basis.shape();
        if k == 0 || k >= d {
            return Err(Error::invalid(format!("need 1 <= k < d, got d={d}, k={k}")));
        }
        if basis.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("manifold basis"));
        }
        let gram = basis.transpose() * &basis - DMatrix::identity(k, k);
        let dev = max_abs(&gram);
        if dev >= BASIS_TOL {
            return Err(Error::invalid(format!("basis is not orthonormal (max |UᵀU - I| = {dev:e})")));
        }
        Ok(Self { basis })
    }

    /// Random `k`-dimensional subspace of `R^d`, deterministic in `seed`.
    ///
    /// Orthogonalizes a Gaussian matrix and flips column signs so the first
    /// nonzero entry of every column is positive.
    pub fn random(d: usize, k: usize, seed: u64) -> Result<Self> {
        if k == 0 || k >= d {
            return Err(Error::invalid(format!("need 1 <= k < d, got d={d}, k={k}")));
        }
        let mut r = rng::seeded(seed);
        let g = DMatrix::from_fn(d, k, |_, _| rng::normal_scalar(&mut r));
        let mut q = g.qr().q();
        // One re-orthogonalization pass keeps UᵀU within ~1e-15 for any d we use.
        q = q.clone().qr().q();
        for j in 0..k {
            let mut col = q.column_mut(j);
            if let Some(first) = col.iter().copied().find(|v| *v != 0.0) {
                if first < 0.0 {
                    col.neg_mut();
                }
            }
        }
        Self::new(q)
    }

    /// Coordinate subspace spanned by the first `k` standard basis vectors.
    pub fn axis_aligned(d: usize, k: usize) -> Result<Self> {
        if k == 0 || k >= d {
            return Err(Error::invalid(format!("need 1 <= k < d, got d={d}, k={k}")));
        }
        Self::new(DMatrix::identity(d, k))
    }

    pub fn ambient_dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.basis.ncols()
    }

    /// Codimension `d − k`.
    pub fn codim(&self) -> usize {
        self.ambient_dim() - self.latent_dim()
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    /// Tangent projector `P = UUᵀ`.
    pub fn projector(&self) -> DMatrix<f64> {
        &self.basis * self.basis.transpose()
    }

    /// Latent coordinates `Uᵀx`.
    pub fn coordinates(&self, x: &DVector<f64>) -> DVector<f64> {
        self.basis.tr_mul(x)
    }

    /// Embeds latent coordinates: `Uz`.
    pub fn embed(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.basis * z
    }

    /// Tangent component `UUᵀx`.
    pub fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        self.embed(&self.coordinates(x))
    }

    /// Normal component `(I − UUᵀ)x`.
    pub fn orthogonal(&self, x: &DVector<f64>) -> DVector<f64> {
        x - self.project(x)
    }

    /// `inf_{x'∈M} ‖x − ν x'‖`. Since `νM = M` for a subspace this is the
    /// norm of the normal component for every `ν > 0`.
    pub fn off_manifold_distance(&self, x: &DVector<f64>, nu: f64) -> Result<f64> {
        ensure_dim(x, self.ambient_dim())?;
        ensure_finite(x, "off_manifold_distance input")?;
        if !(nu > 0.0 && nu.is_finite()) {
            return Err(Error::invalid(format!("nu must be positive and finite, got {nu}")));
        }
        Ok(self.orthogonal(x).norm())
    }

    /// Shell radius `√((1−ᾱ)(d−k))`.
    pub fn shell_radius(&self, alpha_bar: f64) -> f64 {
        ((1.0 - alpha_bar) * self.codim() as f64).sqrt()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Concentration width `ε_{δ,dof}` for the chi-square shell bound.
///
/// `ε' = −log(δ/2)/dof` and
/// `ε = min{1 − √max(0, 1 − 2√ε'), √(1 + 2√ε' + 2ε') − 1}`.
pub fn concentration_epsilon(delta: f64, dof: usize) -> Result<f64> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::invalid(format!("delta must lie in (0, 1], got {delta}")));
    }
    if dof == 0 {
        return Err(Error::invalid("dof must be at least 1"));
    }
    let eps_prime = -(delta / 2.0).ln() / dof as f64;
    let root = eps_prime.sqrt();
    let lower = 1.0 - (1.0 - 2.0 * root).max(0.0).sqrt();
    let upper = (1.0 + 2.0 * root + 2.0 * eps_prime).sqrt() - 1.0;
    Ok(lower.min(upper))
}

/// The noisy shell `M_t` at one schedule level together with its band width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShellSpec {
    pub nu: f64,
    pub radius: f64,
    pub band_epsilon: f64,
}

impl ShellSpec {
    pub fn new(manifold: &LinearManifold, alpha_bar: f64, band_epsilon: f64) -> Result<Self> {
        if !(alpha_bar > 0.0 && alpha_bar < 1.0) {
            return Err(Error::invalid(format!("alpha_bar must lie in (0, 1), got {alpha_bar}")));
        }
        if !(band_epsilon > 0.0 && band_epsilon <= 1.0) {
            return Err(Error::invalid(format!("epsilon must lie in (0, 1], got {band_epsilon}")));
        }
        Ok(Self {
            nu: alpha_bar.sqrt(),
            radius: manifold.shell_radius(alpha_bar),
            band_epsilon,
        })
    }

    /// `|d(x, ν, M) − r_t|`.
    pub fn residual(&self, manifold: &LinearManifold, x: &DVector<f64>) -> Result<f64> {
        Ok((manifold.off_manifold_distance(x, self.nu)? - self.radius).abs())
    }

    /// Membership in `B(M_t; ε·r_t)`.
    pub fn contains(&self, manifold: &LinearManifold, x: &DVector<f64>) -> Result<bool> {
        Ok(self.residual(manifold, x)? < self.band_epsilon * self.radius)
    }
}

/// True iff `x_t` lies within `ε·r_t` of the shell at level `alpha_bar_t`.
pub fn shell_band_test(x_t: &DVector<f64>, manifold: &LinearManifold, alpha_bar_t: f64, epsilon: f64) -> Result<bool> {
    ShellSpec::new(manifold, alpha_bar_t, epsilon)?.contains(manifold, x_t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_basis_is_orthonormal_and_deterministic() {
        let m = LinearManifold::random(64, 8, 7).unwrap();
        let gram = m.basis().transpose() * m.basis() - DMatrix::identity(8, 8);
        assert!(max_abs(&gram) < 1e-12);
        assert_eq!(LinearManifold::random(3, 2, 1).unwrap(), LinearManifold::random(3, 2, 1).unwrap());
        let line = LinearManifold::random(2, 1, 0).unwrap();
        assert!((line.basis().column(0).norm() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sign_convention_holds() {
        let m = LinearManifold::random(10, 4, 3).unwrap();
        for col in m.basis().column_iter() {
            let first = col.iter().find(|v| **v != 0.0).unwrap();
            assert!(*first > 0.0);
        }
    }

    #[test]
    fn rejects_bad_dimensions() {
        assert!(LinearManifold::random(3, 3, 0).is_err());
        assert!(LinearManifold::random(3, 0, 0).is_err());
        assert!(LinearManifold::new(DMatrix::from_element(3, 1, 1.0)).is_err());
    }

    #[test]
    fn orthogonal_component_distance() {
        let m = LinearManifold::axis_aligned(2, 1).unwrap();
        let x = DVector::from_vec(vec![3.0, 4.0]);
        assert_eq!(m.off_manifold_distance(&x, 1.0).unwrap(), 4.0);
        let on = m.embed(&DVector::from_vec(vec![2.5]));
        assert_eq!(m.off_manifold_distance(&on, 0.5).unwrap(), 0.0);
        assert!(m.off_manifold_distance(&x, 0.0).is_err());
        assert!(m.off_manifold_distance(&DVector::from_vec(vec![f64::NAN, 0.0]), 1.0).is_err());
    }

    #[test]
    fn epsilon_closed_form_values() {
        // delta = 2e^{-dof} gives ε' = 1, so the lower branch is 1 and the upper √5 − 1.
        let eps = concentration_epsilon(2.0 * (-3.0f64).exp(), 3).unwrap();
        assert!((eps - 1.0).abs() < 1e-12);
        let eps = concentration_epsilon(0.05, 100).unwrap();
        assert!((eps - 0.207_44).abs() < 5e-5, "{eps}");
        assert!(concentration_epsilon(0.01, 100).unwrap() > eps);
        assert!(concentration_epsilon(0.0, 4).is_err());
        assert!(concentration_epsilon(1.5, 4).is_err());
    }

    #[test]
    fn shell_membership_edges() {
        let m = LinearManifold::axis_aligned(5, 2).unwrap();
        let ab = 0.5;
        let r = m.shell_radius(ab);
        let mut x = DVector::zeros(5);
        x[0] = 1.0;
        assert!(!shell_band_test(&x, &m, ab, 0.9).unwrap());
        x[3] = r;
        assert!(shell_band_test(&x, &m, ab, 1e-9).unwrap());
        assert!(shell_band_test(&x, &m, 1.0, 0.5).is_err());
    }

    #[test]
    fn json_round_trip_is_exact() {
        let m = LinearManifold::random(6, 2, 11).unwrap();
        let s = m.to_json().unwrap();
        let back = LinearManifold::from_json(&s).unwrap();
        assert_eq!(m, back);
        assert_eq!(s, back.to_json().unwrap());
    }
}
