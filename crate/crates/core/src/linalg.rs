use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Ridge added to a local Gram matrix that is numerically singular.
pub const GRAM_JITTER: f64 = 1e-8;

const MAX_CONDITION: f64 = 1e12;

fn condition_estimate(l: &DMatrix<f64>) -> f64 {
    let diag = l.diagonal();
    let (lo, hi) = diag
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(v.abs()), hi.max(v.abs())));
    if lo == 0.0 {
        f64::INFINITY
    } else {
        (hi / lo).powi(2)
    }
}

/// Least squares via the normal equations. Falls back to `XᵀX + 1e-8·I` when
/// the Gram matrix is numerically singular.
pub fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    if x.ncols() == 0 {
        return Ok(DVector::zeros(0));
    }
    let gram = x.transpose() * x;
    let rhs = x.transpose() * y;
    if let Some(ch) = gram.clone().cholesky() {
        if condition_estimate(&ch.l()) < MAX_CONDITION {
            return Ok(ch.solve(&rhs));
        }
    }
    let p = gram.nrows();
    let jittered = gram + DMatrix::identity(p, p) * GRAM_JITTER;
    match jittered.cholesky() {
        Some(ch) => {
            let cond = condition_estimate(&ch.l());
            if cond.is_finite() && cond < 1e3 * MAX_CONDITION {
                Ok(ch.solve(&rhs))
            } else {
                Err(Error::SingularGram { condition: cond })
            }
        }
        None => Err(Error::SingularGram {
            condition: f64::INFINITY,
        }),
    }
}
