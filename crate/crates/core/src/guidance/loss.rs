use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{ensure_dim, Error, Result};
use crate::rng;

/// A differentiable guidance loss `L(x; y)` with its condition `y` baked in.
pub trait GuidanceLoss: Sync {
    fn dim(&self) -> usize;

    fn value(&self, x: &DVector<f64>) -> f64;

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64>;
}

impl<L: GuidanceLoss + ?Sized> GuidanceLoss for &L {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn value(&self, x: &DVector<f64>) -> f64 {
        (**self).value(x)
    }
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        (**self).gradient(x)
    }
}

impl<L: GuidanceLoss + ?Sized> GuidanceLoss for Box<L> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn value(&self, x: &DVector<f64>) -> f64 {
        (**self).value(x)
    }
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        (**self).gradient(x)
    }
}

/// `L(x) = γ‖y − Ax‖²` for a noisy linear measurement `y = Ax + z`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearInverseLoss {
    pub operator: DMatrix<f64>,
    pub measurement: DVector<f64>,
    pub gamma: f64,
}

impl LinearInverseLoss {
    pub fn new(operator: DMatrix<f64>, measurement: DVector<f64>, gamma: f64) -> Result<Self> {
        if operator.nrows() != measurement.len() {
            return Err(Error::DimensionMismatch { expected: operator.nrows(), got: measurement.len() });
        }
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::invalid(format!("gamma must be positive, got {gamma}")));
        }
        Ok(Self { operator, measurement, gamma })
    }

    /// Simulates `y = A x_true + z` with `z ~ N(0, noise_var·I)`.
    pub fn simulate<R: Rng + ?Sized>(operator: DMatrix<f64>, x_true: &DVector<f64>, noise_var: f64, gamma: f64, rng: &mut R) -> Result<Self> {
        ensure_dim(x_true, operator.ncols())?;
        if noise_var < 0.0 {
            return Err(Error::invalid("noise variance must be nonnegative"));
        }
        let noise = rng::standard_normal(rng, operator.nrows()) * noise_var.sqrt();
        let y = &operator * x_true + noise;
        Self::new(operator, y, gamma)
    }

    pub fn residual(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.measurement - &self.operator * x
    }
}

impl GuidanceLoss for LinearInverseLoss {
    fn dim(&self) -> usize {
        self.operator.ncols()
    }

    fn value(&self, x: &DVector<f64>) -> f64 {
        self.gamma * self.residual(x).norm_squared()
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        self.operator.tr_mul(&self.residual(x)) * (-2.0 * self.gamma)
    }
}

/// `L(x) = ½(x − b)ᵀQ(x − b)` with symmetric PSD `Q`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticLoss {
    pub metric: DMatrix<f64>,
    pub target: DVector<f64>,
}

impl QuadraticLoss {
    pub fn new(metric: DMatrix<f64>, target: DVector<f64>) -> Result<Self> {
        let n = target.len();
        if metric.shape() != (n, n) {
            return Err(Error::invalid(format!("metric must be {n}x{n}")));
        }
        if crate::linalg::max_abs(&(&metric - metric.transpose())) > 1e-12 {
            return Err(Error::invalid("metric must be symmetric"));
        }
        Ok(Self { metric, target })
    }

    /// `½w‖x − b‖²`.
    pub fn isotropic(target: DVector<f64>, weight: f64) -> Self {
        let n = target.len();
        Self { metric: DMatrix::identity(n, n) * weight, target }
    }
}

impl GuidanceLoss for QuadraticLoss {
    fn dim(&self) -> usize {
        self.target.len()
    }

    fn value(&self, x: &DVector<f64>) -> f64 {
        let r = x - &self.target;
        0.5 * r.dot(&(&self.metric * &r))
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.metric * (x - &self.target)
    }
}

/// `L(x) = gᵀx`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLoss {
    pub direction: DVector<f64>,
}

impl GuidanceLoss for LinearLoss {
    fn dim(&self) -> usize {
        self.direction.len()
    }

    fn value(&self, x: &DVector<f64>) -> f64 {
        self.direction.dot(x)
    }

    fn gradient(&self, _x: &DVector<f64>) -> DVector<f64> {
        self.direction.clone()
    }
}

/// Never-active loss; guidance rules reduce to plain DDIM.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZeroLoss(pub usize);

impl GuidanceLoss for ZeroLoss {
    fn dim(&self) -> usize {
        self.0
    }

    fn value(&self, _x: &DVector<f64>) -> f64 {
        0.0
    }

    fn gradient(&self, _x: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_inverse_value_and_gradient() {
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        let loss = LinearInverseLoss::new(a, DVector::from_vec(vec![3.0]), 0.5).unwrap();
        let x = DVector::from_vec(vec![1.0, 0.0]);
        assert_eq!(loss.value(&x), 2.0);
        assert_eq!(loss.gradient(&x), DVector::from_vec(vec![-2.0, -4.0]));
        assert!(LinearInverseLoss::new(DMatrix::zeros(2, 2), DVector::zeros(3), 1.0).is_err());
        assert!(LinearInverseLoss::new(DMatrix::zeros(2, 2), DVector::zeros(2), 0.0).is_err());
    }

    #[test]
    fn quadratic_gradient_at_target_vanishes() {
        let b = DVector::from_vec(vec![3.0, 0.0]);
        let loss = QuadraticLoss::isotropic(b.clone(), 1.0);
        assert_eq!(loss.gradient(&b), DVector::zeros(2));
        assert_eq!(loss.value(&DVector::from_vec(vec![1.0, 0.0])), 2.0);
    }
}
