//! Local variable selection on a single user's shard.
//!
//! A selector screens the columns by marginal correlation, fits a sparse
//! model (Lasso or SCAD) on the screened columns, and nominates one variable
//! drawn uniformly from the fitted support.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::UserShard;
use crate::error::{Error, Result};
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectorMethod {
    ScreeningOnly,
    Lasso,
    Scad,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaRule {
    Fixed(f64),
    /// `2 σ̂ √(2 ln d / m)`, with `σ̂` the residual scale of OLS on the
    /// screened columns.
    Universal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for CdOptions {
    fn default() -> Self {
        CdOptions {
            tol: 1e-6,
            max_iter: 3000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectorConfig {
    pub method: SelectorMethod,
    pub screen_size: usize,
    pub lambda: LambdaRule,
    pub scad_a: f64,
    pub solver: CdOptions,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        SelectorConfig {
            method: SelectorMethod::Lasso,
            screen_size: 64,
            lambda: LambdaRule::Universal,
            scad_a: 3.7,
            solver: CdOptions::default(),
        }
    }
}

impl SelectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.screen_size == 0 {
            return Err(Error::invalid("screen_size must be >= 1"));
        }
        if let LambdaRule::Fixed(l) = self.lambda {
            if !(l >= 0.0) {
                return Err(Error::invalid(format!("lambda must be >= 0, got {l}")));
            }
        }
        if !(self.scad_a > 2.0) {
            return Err(Error::invalid(format!("SCAD a must exceed 2, got {}", self.scad_a)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub screened: Vec<usize>,
    /// Indices (into the full design) with non-zero fitted coefficient, ascending.
    pub selected: Vec<usize>,
    /// `(index, coefficient)` for every selected index.
    pub coefficients: Vec<(usize, f64)>,
}

/// Result of a coordinate-descent fit.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseFit {
    pub coef: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

/// The `k` columns with the largest `|Xᵀy|`, in descending order; ties go to
/// the smaller index.
pub fn screen(x: &DMatrix<f64>, y: &DVector<f64>, k: usize) -> Vec<usize> {
    let scores = x.tr_mul(y);
    let mut idx: Vec<usize> = (0..x.ncols()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .abs()
            .partial_cmp(&scores[a].abs())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k.min(x.ncols()));
    idx
}

#[inline]
fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// Cyclic coordinate descent for `(1/n)‖y − Xβ‖² + Σ_j w_j |β_j|`.
pub fn weighted_lasso_fit(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    weights: &[f64],
    opts: &CdOptions,
    warm_start: Option<&[f64]>,
) -> Result<SparseFit> {
    let (n, p) = x.shape();
    if p == 0 {
        return Err(Error::invalid("design has no columns"));
    }
    if y.len() != n {
        return Err(Error::invalid("response length does not match design rows"));
    }
    if weights.len() != p || weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::invalid("penalty weights must be non-negative, one per column"));
    }
    let norms: Vec<f64> = (0..p).map(|j| x.column(j).norm_squared()).collect();
    let mut beta = warm_start.map_or_else(|| vec![0.0; p], <[f64]>::to_vec);
    let mut resid = y.clone();
    for (j, &b) in beta.iter().enumerate() {
        if b != 0.0 {
            resid.axpy(-b, &x.column(j), 1.0);
        }
    }
    let half_n = n as f64 / 2.0;
    let sweep = |cols: &mut dyn Iterator<Item = usize>, beta: &mut [f64], resid: &mut DVector<f64>| {
        let mut max_delta = 0.0f64;
        for j in cols {
            if norms[j] == 0.0 {
                beta[j] = 0.0;
                continue;
            }
            let col = x.column(j);
            let rho = col.dot(resid) + norms[j] * beta[j];
            let next = soft_threshold(rho, half_n * weights[j]) / norms[j];
            let delta = next - beta[j];
            if delta != 0.0 {
                resid.axpy(-delta, &col, 1.0);
                beta[j] = next;
                max_delta = max_delta.max(delta.abs());
            }
        }
        max_delta
    };
    // Full sweeps alternate with sweeps over the current non-zeros only; the
    // fit is accepted only after a full sweep moves nothing.
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iter {
        iterations += 1;
        if sweep(&mut (0..p), &mut beta, &mut resid) < opts.tol {
            converged = true;
            break;
        }
        let active: Vec<usize> = (0..p).filter(|&j| beta[j] != 0.0).collect();
        while iterations < opts.max_iter {
            iterations += 1;
            if sweep(&mut active.iter().copied(), &mut beta, &mut resid) < opts.tol {
                break;
            }
        }
    }
    Ok(SparseFit {
        coef: beta,
        converged,
        iterations,
    })
}

/// Lasso on `(1/n)‖y − Xβ‖² + λ‖β‖₁`.
pub fn lasso_fit(x: &DMatrix<f64>, y: &DVector<f64>, lambda: f64, opts: &CdOptions) -> Result<SparseFit> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("lambda must be >= 0, got {lambda}")));
    }
    weighted_lasso_fit(x, y, &vec![lambda; x.ncols()], opts, None)
}

/// Largest violation of the Lasso subgradient conditions at `beta`.
pub fn lasso_kkt_violation(x: &DMatrix<f64>, y: &DVector<f64>, lambda: f64, beta: &[f64]) -> f64 {
    let n = x.nrows() as f64;
    let b = DVector::from_column_slice(beta);
    let grad = x.tr_mul(&(x * &b - y)) * (2.0 / n);
    (0..beta.len())
        .map(|j| {
            if beta[j] != 0.0 {
                (grad[j] + lambda * beta[j].signum()).abs()
            } else {
                (grad[j].abs() - lambda).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

/// SCAD penalty derivative `ψ'_λ(t)` for `t >= 0`.
pub fn scad_derivative(t: f64, lambda: f64, a: f64) -> f64 {
    if t <= lambda {
        lambda
    } else {
        (a * lambda - t).max(0.0) / (a - 1.0)
    }
}

const MAX_LLA_STEPS: usize = 50;

/// SCAD-penalized least squares by local linear approximation: repeated
/// weighted Lasso with weights `ψ'_λ(|β_prev|)`, starting from `β = 0`.
pub fn scad_fit(x: &DMatrix<f64>, y: &DVector<f64>, lambda: f64, a: f64, opts: &CdOptions) -> Result<SparseFit> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("lambda must be >= 0, got {lambda}")));
    }
    if !(a > 2.0) {
        return Err(Error::invalid(format!("SCAD a must exceed 2, got {a}")));
    }
    let p = x.ncols();
    let mut prev = vec![0.0f64; p];
    let mut total_iters = 0;
    for _ in 0..MAX_LLA_STEPS {
        let weights: Vec<f64> = prev.iter().map(|b| scad_derivative(b.abs(), lambda, a)).collect();
        let fit = weighted_lasso_fit(x, y, &weights, opts, Some(&prev))?;
        total_iters += fit.iterations;
        let change = fit
            .coef
            .iter()
            .zip(&prev)
            .map(|(u, v)| (u - v).abs())
            .fold(0.0, f64::max);
        prev = fit.coef;
        if !fit.converged {
            return Ok(SparseFit {
                coef: prev,
                converged: false,
                iterations: total_iters,
            });
        }
        if change < opts.tol {
            return Ok(SparseFit {
                coef: prev,
                converged: true,
                iterations: total_iters,
            });
        }
    }
    Ok(SparseFit {
        coef: prev,
        converged: false,
        iterations: total_iters,
    })
}

/// Residual scale of OLS on `x`; falls back to the sample std of `y` when
/// there are too few rows for a residual estimate.
pub(crate) fn residual_scale(x: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
    let (m, p) = x.shape();
    if m > p + 1 {
        if let Ok(beta) = linalg::ols(x, y) {
            let rss = (y - x * beta).norm_squared();
            return (rss / (m - p) as f64).sqrt();
        }
    }
    let mean = y.mean();
    (y.map(|v| (v - mean).powi(2)).sum() / (m.max(2) - 1) as f64).sqrt()
}

pub fn universal_lambda(sigma_hat: f64, d: usize, m: usize) -> f64 {
    2.0 * sigma_hat * (2.0 * (d.max(2) as f64).ln() / m as f64).sqrt()
}

/// Screen, then fit on the screened columns. Deterministic.
pub fn local_selection(shard: &UserShard, cfg: &SelectorConfig) -> Result<SelectionResult> {
    cfg.validate()?;
    let screened = screen(&shard.x, &shard.y, cfg.screen_size);
    if cfg.method == SelectorMethod::ScreeningOnly {
        let mut selected = screened.clone();
        selected.sort_unstable();
        return Ok(SelectionResult {
            screened,
            coefficients: selected.iter().map(|&j| (j, f64::NAN)).collect(),
            selected,
        });
    }
    let xs = shard.columns(&screened);
    let lambda = match cfg.lambda {
        LambdaRule::Fixed(l) => l,
        LambdaRule::Universal => universal_lambda(residual_scale(&xs, &shard.y), shard.d(), shard.m()),
    };
    let fit = match cfg.method {
        SelectorMethod::Lasso => lasso_fit(&xs, &shard.y, lambda, &cfg.solver)?,
        SelectorMethod::Scad => scad_fit(&xs, &shard.y, lambda, cfg.scad_a, &cfg.solver)?,
        SelectorMethod::ScreeningOnly => unreachable!(),
    };
    let mut coefficients: Vec<(usize, f64)> = screened
        .iter()
        .zip(&fit.coef)
        .filter(|(_, &b)| b != 0.0)
        .map(|(&j, &b)| (j, b))
        .collect();
    coefficients.sort_unstable_by_key(|&(j, _)| j);
    Ok(SelectionResult {
        selected: coefficients.iter().map(|&(j, _)| j).collect(),
        coefficients,
        screened,
    })
}

/// The one variable this user nominates: uniform over the fitted support, or
/// the top-screened column when the fit is empty.
pub fn select_one<R: Rng + ?Sized>(shard: &UserShard, cfg: &SelectorConfig, rng: &mut R) -> Result<usize> {
    let sel = local_selection(shard, cfg)?;
    Ok(if sel.selected.is_empty() {
        sel.screened[0]
    } else {
        sel.selected[rng.random_range(0..sel.selected.len())]
    })
}

/// Largest useful penalty: at or above it the Lasso solution is zero.
pub fn lambda_max(x: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
    2.0 * x.tr_mul(y).amax() / x.nrows() as f64
}

/// Lasso with the penalty picked by `folds`-fold cross-validation over a
/// log-spaced path of `grid` values from `lambda_max` down to
/// `1e-3 · lambda_max`. Folds are contiguous row blocks. Returns the chosen
/// penalty and the refit on all rows.
pub fn lasso_cv(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    folds: usize,
    grid: usize,
    opts: &CdOptions,
) -> Result<(f64, SparseFit)> {
    let (m, p) = x.shape();
    if folds < 2 || folds > m {
        return Err(Error::invalid(format!("need 2 <= folds <= rows, got {folds} folds for {m} rows")));
    }
    if grid == 0 {
        return Err(Error::invalid("lambda grid must be non-empty"));
    }
    let top = lambda_max(x, y);
    if top == 0.0 {
        return Ok((0.0, lasso_fit(x, y, 0.0, opts)?));
    }
    let path: Vec<f64> = (0..grid)
        .map(|i| {
            let frac = if grid == 1 { 0.0 } else { i as f64 / (grid - 1) as f64 };
            top * 10f64.powf(-3.0 * frac)
        })
        .collect();
    let mut cv_error = vec![0.0; grid];
    for f in 0..folds {
        let (lo, hi) = (f * m / folds, (f + 1) * m / folds);
        let train: Vec<usize> = (0..m).filter(|&r| r < lo || r >= hi).collect();
        let xt = x.select_rows(train.iter());
        let yt = y.select_rows(train.iter());
        let xv = x.rows(lo, hi - lo);
        let yv = y.rows(lo, hi - lo);
        let mut warm = vec![0.0; p];
        for (i, &lambda) in path.iter().enumerate() {
            let fit = weighted_lasso_fit(&xt, &yt, &vec![lambda; p], opts, Some(&warm))?;
            let resid = yv - xv * DVector::from_column_slice(&fit.coef);
            cv_error[i] += resid.norm_squared();
            warm = fit.coef;
        }
    }
    let best = (0..grid).fold(0, |b, i| if cv_error[i] < cv_error[b] { i } else { b });
    Ok((path[best], lasso_fit(x, y, path[best], opts)?))
}
