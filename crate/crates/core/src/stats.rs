//! Shared statistical helpers: empirical quantiles, the normal CDF and
//! ordinary least squares.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear-interpolation quantile (Hyndman–Fan type 7) of sorted data. The
/// result is continuous and non-decreasing in `q`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Quantile of the non-`NaN` entries of `data`.
pub fn quantile(data: &[f64], q: f64) -> Option<f64> {
    let sorted = sorted_finite(data);
    if sorted.is_empty() {
        None
    } else {
        Some(quantile_sorted(&sorted, q))
    }
}

pub fn sorted_finite(data: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = data.iter().copied().filter(|x| !x.is_nan()).collect();
    v.sort_by(f64::total_cmp);
    v
}

/// Empirical CDF value `#{x_i <= x} / n` on sorted data.
pub fn ecdf_sorted(sorted: &[f64], x: f64) -> f64 {
    sorted.partition_point(|v| *v <= x) as f64 / sorted.len() as f64
}

pub fn mean(data: &[f64]) -> f64 {
    data.iter().sum::<f64>() / data.len() as f64
}

pub fn variance(data: &[f64]) -> f64 {
    let m = mean(data);
    data.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (data.len() as f64 - 1.0)
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlsFit {
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub r_squared: f64,
    pub residuals: Vec<f64>,
}

impl OlsFit {
    pub fn predict(&self, row: &[f64]) -> f64 {
        self.coefficients.iter().zip(row).map(|(b, x)| b * x).sum()
    }
}

/// Least squares of `y` on the rows of `design`. Rank deficiency is detected
/// from the singular values of the design matrix.
pub fn ols(design: &[Vec<f64>], y: &[f64]) -> Result<OlsFit> {
    let n = y.len();
    let p = design.first().map_or(0, Vec::len);
    if design.len() != n || p == 0 {
        return Err(Error::InvalidInput(format!(
            "design has {} rows for {} responses",
            design.len(),
            n
        )));
    }
    if n < p {
        return Err(Error::InsufficientData(format!(
            "{n} observations for {p} regression coefficients"
        )));
    }
    let x = DMatrix::from_fn(n, p, |i, j| design[i][j]);
    let yv = DVector::from_column_slice(y);
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let rank = svd
        .singular_values
        .iter()
        .filter(|s| **s > smax * 1e-10 * n.max(p) as f64)
        .count();
    if rank < p {
        return Err(Error::Numerical(format!(
            "rank-deficient design: rank {rank} < {p} columns"
        )));
    }
    let beta = svd
        .solve(&yv, 0.0)
        .map_err(|e| Error::Numerical(format!("least squares solve failed: {e}")))?;
    let fitted = &x * &beta;
    let residuals: Vec<f64> = (0..n).map(|i| y[i] - fitted[i]).collect();
    let rss: f64 = residuals.iter().map(|r| r * r).sum();
    let ybar = mean(y);
    let tss: f64 = y.iter().map(|v| (v - ybar).powi(2)).sum();
    let r_squared = if tss > 0.0 { 1.0 - rss / tss } else { 1.0 };
    let std_errors = if n > p {
        let sigma2 = rss / (n - p) as f64;
        let xtx_inv = (x.transpose() * &x)
            .try_inverse()
            .ok_or_else(|| Error::Numerical("singular normal equations".into()))?;
        (0..p).map(|j| (sigma2 * xtx_inv[(j, j)]).max(0.0).sqrt()).collect()
    } else {
        vec![f64::NAN; p]
    };
    Ok(OlsFit {
        coefficients: beta.iter().copied().collect(),
        std_errors,
        r_squared,
        residuals,
    })
}
