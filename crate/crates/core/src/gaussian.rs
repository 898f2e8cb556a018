//! Multivariate normal log-densities and log-sum-exp.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// `ln(2π)`.
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `ln Σ exp(x_i)` without overflow or premature underflow.
///
/// Returns `-inf` for an empty slice or when every term is `-inf`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_nan() {
        return max;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// A normal density with its Cholesky factor inverted up front.
#[derive(Debug, Clone)]
pub struct Gaussian {
    dim: usize,
    mean: Vec<f64>,
    /// Lower-triangular `L⁻¹` (row-major), where `Σ = L Lᵀ`.
    inv_chol: Vec<f64>,
    /// `-(d ln 2π + ln |Σ|) / 2`.
    log_norm: f64,
}

impl Gaussian {
    pub fn new(mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::invalid("mean and covariance dimensions differ"));
        }
        let chol = cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::fit("covariance is not positive definite"))?;
        let l = chol.l();
        let log_det: f64 = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let linv = l
            .solve_lower_triangular(&DMatrix::identity(d, d))
            .ok_or_else(|| Error::fit("singular Cholesky factor"))?;
        let mut inv_chol = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..=i {
                inv_chol[i * d + j] = linv[(i, j)];
            }
        }
        if !log_det.is_finite() {
            return Err(Error::fit("covariance determinant is not finite"));
        }
        Ok(Gaussian {
            dim: d,
            mean: mean.iter().copied().collect(),
            inv_chol,
            log_norm: -0.5 * (d as f64 * LN_2PI + log_det),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub(crate) fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub(crate) fn inv_chol(&self) -> &[f64] {
        &self.inv_chol
    }

    pub(crate) fn log_norm(&self) -> f64 {
        self.log_norm
    }

    /// Squared Mahalanobis distance `(x-μ)ᵀ Σ⁻¹ (x-μ)`.
    #[inline]
    pub fn mahalanobis_sq(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim);
        let d = self.dim;
        let mut acc = 0.0;
        for i in 0..d {
            let row = &self.inv_chol[i * d..i * d + i + 1];
            let mut y = 0.0;
            for (j, l) in row.iter().enumerate() {
                y += l * (x[j] - self.mean[j]);
            }
            acc += y * y;
        }
        acc
    }

    #[inline]
    pub fn ln_pdf(&self, x: &[f64]) -> f64 {
        self.log_norm - 0.5 * self.mahalanobis_sq(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sum_exp_matches_direct_sum() {
        let xs = [-1.0, 0.5, 2.0];
        let direct: f64 = xs.iter().map(|x: &f64| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&xs) - direct).abs() < 1e-14);
    }

    #[test]
    fn log_sum_exp_survives_large_magnitudes() {
        assert!((log_sum_exp(&[-1000.0, -1000.0]) - (-1000.0 + 2f64.ln())).abs() < 1e-12);
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY; 3]), f64::NEG_INFINITY);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
    }

    #[test]
    fn density_matches_closed_form_inverse() {
        let mean = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let cov = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.0, -0.2, 0.1, -0.2, 0.5]);
        let g = Gaussian::new(&mean, &cov).unwrap();
        let x = [0.2, -1.0, 1.3];
        let diff = DVector::from_row_slice(&x) - &mean;
        let m = (diff.transpose() * cov.clone().try_inverse().unwrap() * &diff)[(0, 0)];
        let expected = -0.5 * (3.0 * LN_2PI + cov.determinant().ln() + m);
        assert!((g.ln_pdf(&x) - expected).abs() < 1e-12);
    }

    #[test]
    fn singular_covariance_is_a_fit_failure() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let err = Gaussian::new(&DVector::zeros(2), &cov).unwrap_err();
        assert!(err.is_fit_failure());
    }
}
