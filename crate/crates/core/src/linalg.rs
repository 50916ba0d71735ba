//! Small dense helpers shared across modules.

use nalgebra::{DMatrix, DVector};

/// Largest absolute entry of a matrix.
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Result of a spectral-norm estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralNorm {
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Spectral norm by power iteration on `MᵀM`, falling back to a dense SVD
/// when the iteration does not settle within `max_iter` rounds.
pub fn spectral_norm(m: &DMatrix<f64>, max_iter: usize, tol: f64) -> SpectralNorm {
    let n = m.ncols();
    if n == 0 || m.nrows() == 0 {
        return SpectralNorm { value: 0.0, iterations: 0, converged: true };
    }
    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut estimate = 0.0;
    for iter in 1..=max_iter {
        let mv = m * &v;
        let w = m.transpose() * &mv;
        let norm = w.norm();
        if norm == 0.0 {
            // v is in the null space; the start vector may be unlucky, so let SVD decide.
            break;
        }
        let next = mv.norm();
        v = w / norm;
        if (next - estimate).abs() <= tol * next.max(1.0) {
            return SpectralNorm { value: (m * &v).norm(), iterations: iter, converged: true };
        }
        estimate = next;
    }
    let value = m.clone().svd(false, false).singular_values.max();
    SpectralNorm { value, iterations: max_iter, converged: false }
}

/// Symmetric positive-definite solve with a small diagonal jitter retry.
pub fn cholesky_with_jitter(a: &DMatrix<f64>) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    if let Some(c) = a.clone().cholesky() {
        return Some(c);
    }
    let n = a.nrows();
    (a + DMatrix::identity(n, n) * 1e-12).cholesky()
}

pub fn cosine(a: &DVector<f64>, b: &DVector<f64>) -> Option<f64> {
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return None;
    }
    Some((a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}
