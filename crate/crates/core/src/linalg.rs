//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Tolerance below which an eigenvalue counts as negative in PSD checks.
pub const PSD_TOL: f64 = 1e-10;

/// Largest condition number accepted for a matrix that must be invertible.
pub const MAX_CONDITION: f64 = 1e14;

/// Ratio of extreme eigenvalue magnitudes; infinite when singular.
pub fn condition_estimate(m: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(symmetrize(m));
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |a, &v| a.min(v));
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |a, &v| a.min(v))
}

pub fn is_psd(m: &DMatrix<f64>) -> bool {
    min_eigenvalue(m) >= -PSD_TOL
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Cholesky factorization of a matrix that must be symmetric positive definite.
pub fn spd_cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    let condition = condition_estimate(m);
    if !condition.is_finite() || condition > MAX_CONDITION {
        return Err(Error::Numeric {
            message: format!("{what} is singular or not positive definite"),
            condition,
        });
    }
    Cholesky::new(m.clone()).ok_or_else(|| Error::Numeric {
        message: format!("Cholesky factorization of {what} failed"),
        condition,
    })
}

/// Max absolute elementwise difference.
pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .fold(0.0f64, |acc, (x, y)| acc.max((x - y).abs()))
}

/// Neumaier-compensated running sum.
#[derive(Debug, Default, Clone, Copy)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

/// Mean and sample standard deviation (`None` for fewer than two values).
pub fn mean_sd(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, None);
    }
    let mut s = CompensatedSum::default();
    values.iter().for_each(|&v| s.add(v));
    let mean = s.value() / n as f64;
    if n < 2 {
        return (mean, None);
    }
    let mut ss = CompensatedSum::default();
    values.iter().for_each(|&v| ss.add((v - mean) * (v - mean)));
    (mean, Some((ss.value() / (n - 1) as f64).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_sum_is_exact_on_cancellation() {
        let mut s = CompensatedSum::default();
        for x in [1e16, 1.0, -1e16, 1.0] {
            s.add(x);
        }
        assert_eq!(s.value(), 2.0);
    }

    #[test]
    fn mean_sd_basic() {
        let (m, sd) = mean_sd(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((sd.unwrap() - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_sd(&[7.0]).1, None);
    }

    #[test]
    fn singular_matrix_reports_condition() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        match spd_cholesky(&m, "test") {
            Err(Error::Numeric { condition, .. }) => assert!(condition > MAX_CONDITION),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }
}
