//! Brown-Resnick dependence of the standardized latent field.
//!
//! The model is parametrized by the power semi-variogram
//! `ν(h) = (‖h‖/τ)^κ`. Fitting minimizes the mean gradient score over
//! ℓ-exceedance fields, which needs only derivatives of `log λ` and so avoids
//! the normalizing constant of the exceedance region.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SpaceTimeDataset;
use crate::error::{Error, Result};
use crate::grid::distance;
use crate::marginal::MarginalModel;
use crate::optimize::{bfgs, fd_gradient, BfgsOptions};
use crate::risk::RiskFunctional;
use crate::stats::{normal_cdf, quantile_sorted, sorted_finite};

const MIN_FIELDS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DependenceModel {
    pub tau: f64,
    pub kappa: f64,
    pub risk: RiskFunctional,
    pub u_fit: f64,
}

fn check_params(tau: f64, kappa: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) || !(kappa > 0.0 && kappa <= 2.0) {
        return Err(Error::Domain(format!(
            "variogram needs τ > 0 and 0 < κ ≤ 2, got τ = {tau}, κ = {kappa}"
        )));
    }
    Ok(())
}

impl DependenceModel {
    pub fn new(tau: f64, kappa: f64, risk: RiskFunctional, u_fit: f64) -> Result<Self> {
        check_params(tau, kappa)?;
        Ok(DependenceModel { tau, kappa, risk, u_fit })
    }

    /// Semi-variogram at distance `h` km.
    pub fn nu(&self, h: f64) -> f64 {
        (h / self.tau).powf(self.kappa)
    }

    pub fn extremogram(&self, h: f64) -> f64 {
        model_extremogram(h, self.tau, self.kappa)
    }
}

/// `(‖h‖/τ)^κ` for a lag vector in km.
pub fn power_semivariogram(h: [f64; 2], tau: f64, kappa: f64) -> Result<f64> {
    check_params(tau, kappa)?;
    Ok((h[0].hypot(h[1]) / tau).powf(kappa))
}

/// Bivariate tail-dependence coefficient `2(1 − Φ(√(2ν(h))/2))`.
pub fn model_extremogram(h: f64, tau: f64, kappa: f64) -> f64 {
    let nu = (h / tau).powf(kappa);
    2.0 * (1.0 - normal_cdf((2.0 * nu).sqrt() / 2.0))
}

/// Covariance of the Gaussian increments `W(s_i) − W(s_1)`, `i = 2..d`:
/// `Σ_ij = ν_i1 + ν_j1 − ν_ij`.
pub fn increment_covariance(sites: &[[f64; 2]], tau: f64, kappa: f64) -> DMatrix<f64> {
    let d = sites.len();
    let nu = |a: usize, b: usize| (distance(sites[a], sites[b]) / tau).powf(kappa);
    DMatrix::from_fn(d - 1, d - 1, |i, j| nu(i + 1, 0) + nu(j + 1, 0) - nu(i + 1, j + 1))
}

/// Precomputed pieces of the Brown-Resnick intensity for one site set and
/// one parameter value.
#[derive(Debug, Clone)]
pub struct BrKernel {
    d: usize,
    nu1: Vec<f64>,
    precision: DMatrix<f64>,
    total: f64,
    log_const: f64,
}

/// `log λ` and its first and second partial derivatives along each `z_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogIntensityDerivatives {
    pub log_lambda: f64,
    pub grad: Vec<f64>,
    pub hess_diag: Vec<f64>,
}

impl BrKernel {
    pub fn new(sites: &[[f64; 2]], tau: f64, kappa: f64) -> Result<Self> {
        check_params(tau, kappa)?;
        let d = sites.len();
        if d < 2 {
            return Err(Error::InvalidInput("the intensity needs at least two sites".into()));
        }
        let sigma = increment_covariance(sites, tau, kappa);
        let chol = sigma
            .cholesky()
            .ok_or_else(|| Error::Numerical("increment covariance is not positive definite (duplicate sites?)".into()))?;
        let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let precision = chol.inverse();
        let total = precision.sum();
        let nu1 = (1..d).map(|i| (distance(sites[i], sites[0]) / tau).powf(kappa)).collect();
        Ok(BrKernel {
            d,
            nu1,
            precision,
            total,
            log_const: -0.5 * log_det - 0.5 * (d - 1) as f64 * (2.0 * std::f64::consts::PI).ln(),
        })
    }

    fn centred(&self, z: &[f64]) -> DVector<f64> {
        let l1 = z[0].ln();
        DVector::from_fn(self.d - 1, |i, _| z[i + 1].ln() - l1 + self.nu1[i])
    }

    pub fn log_intensity(&self, z: &[f64]) -> f64 {
        let y = self.centred(z);
        let quad = y.dot(&(&self.precision * &y));
        self.log_const - 2.0 * z[0].ln() - z[1..].iter().map(|v| v.ln()).sum::<f64>() - 0.5 * quad
    }

    pub fn intensity(&self, z: &[f64]) -> f64 {
        self.log_intensity(z).exp()
    }

    pub fn derivatives(&self, z: &[f64]) -> LogIntensityDerivatives {
        let y = self.centred(z);
        let py = &self.precision * &y;
        let quad = y.dot(&py);
        let sum_py = py.sum();
        let mut grad = Vec::with_capacity(self.d);
        let mut hess = Vec::with_capacity(self.d);
        grad.push((-2.0 + sum_py) / z[0]);
        hess.push((2.0 - sum_py - self.total) / (z[0] * z[0]));
        for j in 1..self.d {
            let (pyj, pjj) = (py[j - 1], self.precision[(j - 1, j - 1)]);
            grad.push((-1.0 - pyj) / z[j]);
            hess.push((1.0 + pyj - pjj) / (z[j] * z[j]));
        }
        LogIntensityDerivatives {
            log_lambda: self.log_const - 2.0 * z[0].ln() - z[1..].iter().map(|v| v.ln()).sum::<f64>() - 0.5 * quad,
            grad,
            hess_diag: hess,
        }
    }
}

/// `λ_BR(z)` for sites in km.
pub fn brown_resnick_intensity(z: &[f64], sites: &[[f64; 2]], tau: f64, kappa: f64) -> Result<f64> {
    if z.len() != sites.len() {
        return Err(Error::InvalidInput("one value per site required".into()));
    }
    if z.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::Domain("intensity needs strictly positive values".into()));
    }
    Ok(BrKernel::new(sites, tau, kappa)?.intensity(z))
}

/// One day of the standardized field, all sites observed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExceedanceField {
    pub time: usize,
    pub values: Vec<f64>,
}

impl ExceedanceField {
    pub fn is_exceedance(&self, ell: &RiskFunctional, u: f64) -> bool {
        ell.apply(&self.values).is_ok_and(|r| r / u >= 1.0)
    }
}

/// Gradient-score weights `w_j = z_j(1 − e^{−(ℓ(z/u) − 1)})` and their
/// derivatives along `z_j`.
pub fn score_weights(z: &[f64], ell: &RiskFunctional, u: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let r = ell.apply(z)? / u;
    let e = (-(r - 1.0)).exp();
    let w = z.iter().map(|v| v * (1.0 - e)).collect();
    let dw = z
        .iter()
        .enumerate()
        .map(|(j, v)| (1.0 - e) + v * e * ell.partial(z, j) / u)
        .collect();
    Ok((w, dw))
}

/// Gradient score `δ_w` of one field.
pub fn gradient_score(kernel: &BrKernel, z: &[f64], ell: &RiskFunctional, u: f64) -> Result<f64> {
    let (w, dw) = score_weights(z, ell, u)?;
    if w.iter().all(|v| *v == 0.0) {
        return Ok(0.0);
    }
    let der = kernel.derivatives(z);
    Ok((0..z.len())
        .map(|j| {
            let g = der.grad[j];
            2.0 * w[j] * dw[j] * g + w[j] * w[j] * (der.hess_diag[j] + 0.5 * g * g)
        })
        .sum())
}

/// Mean gradient score over fields. Per-field scores are computed in
/// parallel and summed in input order.
pub fn mean_gradient_score(
    fields: &[ExceedanceField],
    sites: &[[f64; 2]],
    tau: f64,
    kappa: f64,
    ell: &RiskFunctional,
    u: f64,
) -> Result<f64> {
    let kernel = BrKernel::new(sites, tau, kappa)?;
    let scores: Vec<f64> = fields
        .par_iter()
        .map(|f| gradient_score(&kernel, &f.values, ell, u))
        .collect::<Result<_>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependenceFit {
    pub model: DependenceModel,
    pub score: f64,
    pub iterations: usize,
    pub converged: bool,
    pub grad_norm: f64,
    pub n_fields: usize,
    /// Set when `κ̂` sits at the upper bound 2.
    pub kappa_at_boundary: bool,
}

fn kappa_from(x: f64) -> f64 {
    2.0 / (1.0 + (-x).exp())
}

/// Minimizes the mean gradient score over `(τ, κ)` from `init`.
pub fn fit_dependence(
    fields: &[ExceedanceField],
    sites: &[[f64; 2]],
    ell: &RiskFunctional,
    u: f64,
    init: (f64, f64),
) -> Result<DependenceFit> {
    if fields.len() < MIN_FIELDS {
        return Err(Error::InsufficientData(format!(
            "{} exceedance fields, at least {MIN_FIELDS} needed",
            fields.len()
        )));
    }
    check_params(init.0, init.1)?;
    if init.1 >= 2.0 {
        return Err(Error::Domain("initial κ must be below 2".into()));
    }
    if let Some(f) = fields.iter().find(|f| f.values.len() != sites.len()) {
        return Err(Error::InvalidInput(format!(
            "field at time {} has {} values for {} sites",
            f.time,
            f.values.len(),
            sites.len()
        )));
    }
    let mut value = |x: &[f64]| -> f64 {
        let (tau, kappa) = (x[0].exp(), kappa_from(x[1]));
        if !(tau.is_finite() && kappa > 0.0 && kappa < 2.0) {
            return f64::INFINITY;
        }
        mean_gradient_score(fields, sites, tau, kappa, ell, u).unwrap_or(f64::INFINITY)
    };
    let objective = |x: &[f64]| -> (f64, Vec<f64>) {
        let v = value(x);
        if !v.is_finite() {
            return (v, vec![0.0; 2]);
        }
        (v, fd_gradient(&mut value, x, 1e-6))
    };
    let x0 = [init.0.ln(), (init.1 / (2.0 - init.1)).ln()];
    let opts = BfgsOptions {
        max_iter: 300,
        grad_tol: 1e-7,
        f_tol: 1e-13,
    };
    let min = bfgs(objective, &x0, opts);
    if !min.value.is_finite() {
        return Err(Error::Numerical("gradient score is not finite at the initial point".into()));
    }
    if !min.converged {
        return Err(Error::NonConvergence {
            iterations: min.iterations,
            grad_norm: min.grad_norm,
            best: vec![min.x[0].exp(), kappa_from(min.x[1])],
        });
    }
    let kappa = kappa_from(min.x[1]);
    Ok(DependenceFit {
        model: DependenceModel::new(min.x[0].exp(), kappa, *ell, u)?,
        score: min.value,
        iterations: min.iterations,
        converged: min.converged,
        grad_norm: min.grad_norm,
        n_fields: fields.len(),
        kappa_at_boundary: kappa > 2.0 - 1e-4,
    })
}

/// Semiparametric PIT of one value: interpolated empirical CDF below `u_q`,
/// GPD tail above; returns `1/(1 − F̂)`.
fn pit_pareto(sorted: &[f64], q: f64, u_q: f64, tail: &crate::marginal::GpdTail, x: f64) -> f64 {
    if x > u_q {
        return 1.0 / ((1.0 - q) * tail.survival(x - u_q));
    }
    1.0 / (1.0 - inverse_type7(sorted, x))
}

/// Inverse of the type-7 quantile function: the level `p` whose interpolated
/// quantile equals `x`, clamped to `[0, 1]`.
fn inverse_type7(sorted: &[f64], x: f64) -> f64 {
    let n = sorted.len();
    if n == 1 || x < sorted[0] {
        return 0.0;
    }
    if x >= sorted[n - 1] {
        return 1.0;
    }
    // last index with sorted[k] <= x
    let k = sorted.partition_point(|v| *v <= x) - 1;
    let frac = if sorted[k + 1] > sorted[k] {
        (x - sorted[k]) / (sorted[k + 1] - sorted[k])
    } else {
        0.0
    };
    (k as f64 + frac) / (n - 1) as f64
}

/// Transforms each site of the latent sample to unit Pareto margins using
/// the fitted GPD above the site's `q` quantile.
pub fn standardize_margins(latent: &SpaceTimeDataset, marg: &MarginalModel, q: f64) -> Result<SpaceTimeDataset> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::InvalidInput(format!("tail quantile {q} not in (0, 1)")));
    }
    if marg.n_sites() != latent.n_stations() {
        return Err(Error::InvalidInput("marginal model and dataset disagree on stations".into()));
    }
    let m = latent.n_stations();
    let mut out = latent.values().to_vec();
    for s in 0..m {
        let sorted = sorted_finite(&latent.column(s));
        if sorted.is_empty() {
            continue;
        }
        let u_q = quantile_sorted(&sorted, q);
        let tail = marg.tail_at(s, u_q)?;
        for t in 0..latent.n_days() {
            let x = out[t * m + s];
            if !x.is_nan() {
                out[t * m + s] = pit_pareto(&sorted, q, u_q, &tail, x);
            }
        }
    }
    latent.with_values(out)
}

/// Days whose fully observed standardized field satisfies `ℓ(z/u) ≥ 1`.
/// Days with any masked site are skipped.
pub fn exceedance_fields(std: &SpaceTimeDataset, ell: &RiskFunctional, u: f64) -> Vec<ExceedanceField> {
    (0..std.n_days())
        .filter_map(|t| {
            let row = std.row(t);
            if row.iter().any(|v| v.is_nan()) {
                return None;
            }
            let f = ExceedanceField { time: t, values: row.to_vec() };
            f.is_exceedance(ell, u).then_some(f)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinEstimate {
    pub lower: f64,
    pub upper: f64,
    /// Mean pair distance in the bin.
    pub distance: Option<f64>,
    pub n_pairs: usize,
    /// Number of conditioning events (extremogram) or pair-days (variogram).
    pub n_obs: usize,
    /// `None` for an empty bin.
    pub value: Option<f64>,
}

fn check_edges(edges: &[f64]) -> Result<()> {
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidInput("bin edges must be strictly increasing, at least two".into()));
    }
    Ok(())
}

fn bin_of(edges: &[f64], h: f64) -> Option<usize> {
    if h < edges[0] || h >= edges[edges.len() - 1] {
        return None;
    }
    Some(edges.partition_point(|e| *e <= h) - 1)
}

/// Pairs `(i, j)` with `i <= j` (self-pairs when `include_self`), grouped by bin.
fn binned_pairs(sites: &[[f64; 2]], edges: &[f64], include_self: bool) -> Vec<Vec<(usize, usize, f64)>> {
    let mut bins = vec![Vec::new(); edges.len() - 1];
    for i in 0..sites.len() {
        for j in i..sites.len() {
            if i == j && !include_self {
                continue;
            }
            let h = distance(sites[i], sites[j]);
            if let Some(b) = bin_of(edges, h) {
                bins[b].push((i, j, h));
            }
        }
    }
    bins
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtremogramOptions {
    pub q: f64,
    /// Conditioning on `ℓ(Z_t) > u`; `None` uses every day.
    pub ell_threshold: Option<f64>,
    pub include_self: bool,
}

/// Empirical `π̂(h)`: over station pairs in each bin and conditioning days,
/// the frequency of a joint exceedance of the site `q` quantiles given an
/// exceedance at one end. Each unordered pair contributes both directions.
pub fn empirical_extremogram(
    ds: &SpaceTimeDataset,
    sites: &[[f64; 2]],
    edges: &[f64],
    ell: &RiskFunctional,
    opts: &ExtremogramOptions,
) -> Result<Vec<BinEstimate>> {
    check_edges(edges)?;
    if !(opts.q > 0.0 && opts.q < 1.0) {
        return Err(Error::InvalidInput(format!("quantile {} not in (0, 1)", opts.q)));
    }
    let m = ds.n_stations();
    let u_q: Vec<f64> = (0..m)
        .map(|s| crate::stats::quantile(&ds.column(s), opts.q).unwrap_or(f64::NAN))
        .collect();
    let days: Vec<usize> = (0..ds.n_days())
        .filter(|&t| match opts.ell_threshold {
            Some(u) => ell.apply(ds.row(t)).is_ok_and(|r| r > u),
            None => true,
        })
        .collect();
    let exceeds = |t: usize, s: usize| ds.get(t, s).is_some_and(|v| v > u_q[s]);
    let observed = |t: usize, s: usize| ds.get(t, s).is_some();
    Ok(binned_pairs(sites, edges, opts.include_self)
        .into_iter()
        .enumerate()
        .map(|(b, pairs)| {
            let (mut cond, mut joint) = (0usize, 0usize);
            for &(i, j, _) in &pairs {
                let directions: &[(usize, usize)] = if i == j { &[(i, j)] } else { &[(i, j), (j, i)] };
                for &(a, c) in directions {
                    for &t in &days {
                        if observed(t, c) && exceeds(t, a) {
                            cond += 1;
                            if exceeds(t, c) {
                                joint += 1;
                            }
                        }
                    }
                }
            }
            BinEstimate {
                lower: edges[b],
                upper: edges[b + 1],
                distance: mean_distance(&pairs),
                n_pairs: pairs.len(),
                n_obs: cond,
                value: (cond > 0).then(|| joint as f64 / cond as f64),
            }
        })
        .collect())
}

fn mean_distance(pairs: &[(usize, usize, f64)]) -> Option<f64> {
    (!pairs.is_empty()).then(|| pairs.iter().map(|p| p.2).sum::<f64>() / pairs.len() as f64)
}

/// Binned semi-variogram of `g = log z` over the given days. Each pair
/// contributes half the sample variance of `g_i − g_j`, i.e. the Matheron
/// estimator after removing the pair's mean difference.
pub fn empirical_variogram(
    std: &SpaceTimeDataset,
    sites: &[[f64; 2]],
    edges: &[f64],
    days: &[usize],
) -> Result<Vec<BinEstimate>> {
    check_edges(edges)?;
    Ok(binned_pairs(sites, edges, false)
        .into_iter()
        .enumerate()
        .map(|(b, pairs)| {
            let mut per_pair = Vec::new();
            let mut n_obs = 0;
            for &(i, j, _) in &pairs {
                let diffs: Vec<f64> = days
                    .iter()
                    .filter_map(|&t| Some(std.get(t, i)?.ln() - std.get(t, j)?.ln()))
                    .collect();
                if diffs.len() >= 2 {
                    n_obs += diffs.len();
                    per_pair.push(0.5 * crate::stats::variance(&diffs));
                }
            }
            BinEstimate {
                lower: edges[b],
                upper: edges[b + 1],
                distance: mean_distance(&pairs),
                n_pairs: pairs.len(),
                n_obs,
                value: (!per_pair.is_empty()).then(|| per_pair.iter().sum::<f64>() / per_pair.len() as f64),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DayStamp, Station};
    use crate::stats::normal_cdf;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn phi(x: f64) -> f64 {
        (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
    }

    #[test]
    fn semivariogram_values() {
        assert_eq!(power_semivariogram([0.0, 0.0], 100.0, 1.3).unwrap(), 0.0);
        assert!((power_semivariogram([60.0, 80.0], 100.0, 0.7).unwrap() - 1.0).abs() < 1e-15);
        assert!((power_semivariogram([250.0, 0.0], 100.0, 1.0).unwrap() - 2.5).abs() < 1e-15);
        assert!(power_semivariogram([1.0, 0.0], 0.0, 1.0).is_err());
        assert!(power_semivariogram([1.0, 0.0], 1.0, 2.5).is_err());
        assert!(power_semivariogram([1.0, 0.0], 1.0, 0.0).is_err());
    }

    /// Hüsler–Reiss exponent function with `a² = 2ν`.
    fn hr_exponent(x: f64, y: f64, a: f64) -> f64 {
        normal_cdf(a / 2.0 + (y / x).ln() / a) / x + normal_cdf(a / 2.0 + (x / y).ln() / a) / y
    }

    #[test]
    fn bivariate_intensity_matches_husler_reiss() {
        let sites = [[0.0, 0.0], [130.0, 40.0]];
        let (tau, kappa) = (200.0, 1.2);
        let nu = (136.0147050873544f64 / tau).powf(kappa);
        let a = (2.0 * nu).sqrt();
        for &(z1, z2) in &[(1.0, 1.0), (2.0, 0.7), (0.4, 3.5), (5.0, 9.0)] {
            let lam = brown_resnick_intensity(&[z1, z2], &sites, tau, kappa).unwrap();
            let symbolic = phi((z2 / z1).ln() / a + a / 2.0) / (a * z1 * z1 * z2);
            assert!((lam - symbolic).abs() <= 1e-12 * symbolic, "{lam} vs {symbolic}");
            // −∂²V/∂x∂y by central differences
            let h = 1e-4;
            let v = |x: f64, y: f64| hr_exponent(x, y, a);
            let (hx, hy) = (h * z1, h * z2);
            let mixed = (v(z1 + hx, z2 + hy) - v(z1 + hx, z2 - hy) - v(z1 - hx, z2 + hy) + v(z1 - hx, z2 - hy))
                / (4.0 * hx * hy);
            assert!((lam + mixed).abs() <= 1e-5 * lam, "{lam} vs {}", -mixed);
        }
    }

    fn random_sites(rng: &mut impl Rng, d: usize) -> Vec<[f64; 2]> {
        (0..d).map(|_| [rng.random_range(-300.0..300.0), rng.random_range(-300.0..300.0)]).collect()
    }

    #[test]
    fn homogeneity_and_exchangeability() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for d in 2..6 {
            let sites = random_sites(&mut rng, d);
            let z: Vec<f64> = (0..d).map(|_| rng.random_range(0.5..10.0)).collect();
            let k = BrKernel::new(&sites, 150.0, 1.1).unwrap();
            let zt: Vec<f64> = z.iter().map(|v| 3.0 * v).collect();
            let lhs = k.log_intensity(&zt);
            let rhs = k.log_intensity(&z) - (d as f64 + 1.0) * 3f64.ln();
            assert!((lhs - rhs).abs() < 1e-10);
            // relabelling sites together with values leaves λ unchanged
            let mut perm: Vec<usize> = (0..d).collect();
            perm.reverse();
            let ps: Vec<[f64; 2]> = perm.iter().map(|&i| sites[i]).collect();
            let pz: Vec<f64> = perm.iter().map(|&i| z[i]).collect();
            let kp = BrKernel::new(&ps, 150.0, 1.1).unwrap();
            assert!((kp.log_intensity(&pz) - k.log_intensity(&z)).abs() < 1e-10);
        }
        // equilateral triangle: swapping two values leaves λ unchanged
        let tri = [[0.0, 0.0], [100.0, 0.0], [50.0, 50.0 * 3f64.sqrt()]];
        let k = BrKernel::new(&tri, 80.0, 1.5).unwrap();
        assert!((k.log_intensity(&[1.0, 2.0, 3.0]) - k.log_intensity(&[1.0, 3.0, 2.0])).abs() < 1e-12);
    }

    #[test]
    fn duplicate_sites_rejected() {
        assert!(BrKernel::new(&[[0.0, 0.0], [0.0, 0.0]], 100.0, 1.0).is_err());
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let d = rng.random_range(2..6);
            let sites = random_sites(&mut rng, d);
            let k = BrKernel::new(&sites, rng.random_range(50.0..400.0), rng.random_range(0.3..1.9)).unwrap();
            let z: Vec<f64> = (0..d).map(|_| rng.random_range(0.5..20.0)).collect();
            let der = k.derivatives(&z);
            assert!((der.log_lambda - k.log_intensity(&z)).abs() < 1e-12);
            for j in 0..d {
                let h = 1e-4 * z[j];
                let f = |dz: f64| {
                    let mut w = z.clone();
                    w[j] += dz;
                    k.log_intensity(&w)
                };
                let (fp, f0, fm) = (f(h), f(0.0), f(-h));
                let g = (fp - fm) / (2.0 * h);
                let gg = (fp - 2.0 * f0 + fm) / (h * h);
                // Richardson-corrected first derivative
                let g2 = (f(2.0 * h) - f(-2.0 * h)) / (4.0 * h);
                let g_rich = (4.0 * g - g2) / 3.0;
                assert!((der.grad[j] - g_rich).abs() <= 1e-6 * der.grad[j].abs().max(1e-3), "grad {} vs {}", der.grad[j], g_rich);
                assert!((der.hess_diag[j] - gg).abs() <= 1e-5 * der.hess_diag[j].abs().max(1e-2), "hess {} vs {}", der.hess_diag[j], gg);
            }
        }
    }

    #[test]
    fn score_vanishes_on_boundary() {
        let sites = [[0.0, 0.0], [100.0, 0.0], [0.0, 120.0]];
        let k = BrKernel::new(&sites, 150.0, 1.0).unwrap();
        for ell in [RiskFunctional::max(), RiskFunctional::mean(), RiskFunctional::site(1)] {
            // scale a field onto ℓ(z/u) = 1
            let base = [0.7, 1.9, 1.1];
            let u = 2.5;
            let r = ell.apply(&base).unwrap();
            let z: Vec<f64> = base.iter().map(|v| v * u / r).collect();
            let (w, _) = score_weights(&z, &ell, u).unwrap();
            assert!(w.iter().all(|v| v.abs() < 1e-14));
            assert!(gradient_score(&k, &z, &ell, u).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn score_matches_finite_difference_assembly() {
        let sites = [[0.0, 0.0], [90.0, 30.0]];
        let k = BrKernel::new(&sites, 150.0, 1.0).unwrap();
        let ell = RiskFunctional::mean();
        let (z, u) = ([3.0, 5.0], 2.0);
        let logl = |w: &[f64]| k.log_intensity(w);
        let weight = |w: &[f64], j: usize| {
            let r = ell.apply(w).unwrap() / u;
            w[j] * (1.0 - (-(r - 1.0)).exp())
        };
        let mut expected = 0.0;
        for j in 0..2 {
            let h = 1e-4;
            let at = |dz: f64| {
                let mut w = z.to_vec();
                w[j] += dz;
                w
            };
            let g = (logl(&at(h)) - logl(&at(-h))) / (2.0 * h);
            let gg = (logl(&at(h)) - 2.0 * logl(&z) + logl(&at(-h))) / (h * h);
            let dw = (weight(&at(h), j) - weight(&at(-h), j)) / (2.0 * h);
            let wj = weight(&z, j);
            expected += 2.0 * wj * dw * g + wj * wj * (gg + 0.5 * g * g);
        }
        let got = gradient_score(&k, &z, &ell, u).unwrap();
        assert!((got - expected).abs() <= 1e-6 * expected.abs(), "{got} vs {expected}");
    }

    #[test]
    fn extremogram_model_properties() {
        assert!((model_extremogram(0.0, 200.0, 1.0) - 1.0).abs() < 1e-15);
        assert!(model_extremogram(1e9, 200.0, 1.0) < 1e-12);
        let mut prev = 1.0;
        for i in 1..200 {
            let v = model_extremogram(i as f64 * 10.0, 200.0, 1.3);
            assert!(v <= prev);
            prev = v;
        }
    }

    fn ds_from_columns(cols: &[Vec<f64>]) -> SpaceTimeDataset {
        let n = cols[0].len();
        let stations = (0..cols.len())
            .map(|i| Station::new(format!("S{i}"), i as f64, 0.0).unwrap())
            .collect();
        let times = (0..n)
            .map(|t| DayStamp::new(1900 + (t / 365) as i32, (t % 365) as u16 + 1).unwrap())
            .collect();
        let rows = (0..n).map(|t| cols.iter().map(|c| Some(c[t])).collect()).collect();
        SpaceTimeDataset::from_rows(stations, times, rows).unwrap()
    }

    #[test]
    fn empirical_extremogram_baselines() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 40_000;
        let a: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let ds = ds_from_columns(&[a.clone(), b, a.iter().map(|v| 2.0 * v + 1.0).collect()]);
        // site 0 independent of 1 at 100 km, comonotone with 2 at 300 km
        let sites = [[0.0, 0.0], [100.0, 0.0], [300.0, 0.0]];
        let opts = ExtremogramOptions { q: 0.95, ell_threshold: None, include_self: true };
        let est = empirical_extremogram(&ds, &sites, &[0.0, 50.0, 150.0, 250.0, 350.0], &RiskFunctional::max(), &opts).unwrap();
        assert_eq!(est[0].value, Some(1.0));
        let indep = est[1].value.unwrap();
        let se = (0.05 * 0.95 / est[1].n_obs as f64).sqrt();
        assert!((indep - 0.05).abs() < 3.0 * se, "{indep}");
        // bin 3 holds the comonotone pair (0, 2) and the independent (1, 2)
        assert_eq!(est[3].n_pairs, 1);
        assert_eq!(est[3].value, Some(1.0));
    }

    #[test]
    fn empty_bins_are_missing() {
        let ds = ds_from_columns(&[vec![1.0, 2.0, 3.0], vec![3.0, 2.0, 1.0]]);
        let sites = [[0.0, 0.0], [10.0, 0.0]];
        let opts = ExtremogramOptions { q: 0.5, ell_threshold: None, include_self: false };
        let est = empirical_extremogram(&ds, &sites, &[0.0, 5.0, 20.0], &RiskFunctional::max(), &opts).unwrap();
        assert_eq!(est[0].value, None);
        assert!(est[1].value.is_some());
        let vg = empirical_variogram(&ds, &sites, &[0.0, 5.0, 20.0], &[0, 1, 2]).unwrap();
        assert_eq!(vg[0].value, None);
    }

    #[test]
    fn variogram_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 20_000;
        let normal = rand_distr::StandardNormal;
        let g1: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(normal)).collect();
        let g2: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(normal)).collect();
        let exp = |g: &Vec<f64>| g.iter().map(|v| v.exp()).collect::<Vec<_>>();
        let ds = ds_from_columns(&[exp(&g1), exp(&g1), exp(&g2)]);
        let sites = [[0.0, 0.0], [10.0, 0.0], [100.0, 0.0]];
        let days: Vec<usize> = (0..n).collect();
        let vg = empirical_variogram(&ds, &sites, &[0.0, 50.0, 200.0], &days).unwrap();
        assert!(vg[0].value.unwrap().abs() < 1e-12);
        // two pairs of independent unit-variance fields: sill 1
        let sill = vg[1].value.unwrap();
        assert!((sill - 1.0).abs() < 0.05, "{sill}");
    }

    #[test]
    fn pit_identities() {
        let sorted: Vec<f64> = (1..=101).map(f64::from).collect();
        assert!((inverse_type7(&sorted, 51.0) - 0.5).abs() < 1e-15);
        assert!((1.0 / (1.0 - inverse_type7(&sorted, 51.0)) - 2.0).abs() < 1e-12);
        let q = 0.9;
        let u_q = quantile_sorted(&sorted, q);
        let tail = crate::marginal::GpdTail::new(5.0, 0.1, u_q).unwrap();
        assert!((pit_pareto(&sorted, q, u_q, &tail, u_q) - 10.0).abs() < 1e-9);
        // continuity just above the threshold
        assert!((pit_pareto(&sorted, q, u_q, &tail, u_q + 1e-9) - 10.0).abs() < 1e-6);
    }

    #[test]
    fn standardized_gpd_sample_is_pareto() {
        // GPD excesses above a fixed level with a matching marginal model
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (sigma, gamma, b) = (10.0, 0.2, 30.0);
        let col: Vec<f64> = (0..50_000)
            .map(|_| {
                let p: f64 = rng.random();
                b + sigma * ((1.0 - p).powf(-gamma) - 1.0) / gamma
            })
            .collect();
        let ds = ds_from_columns(&[col]);
        let marg = MarginalModel::from_fit(gamma, vec![sigma], vec![b], b, 0.95, 0.5, RiskFunctional::site(0)).unwrap();
        let std = standardize_margins(&ds, &marg, 0.9).unwrap();
        let above: Vec<f64> = std.values().iter().copied().filter(|v| *v > 1.0).map(|v| 1.0 / v).collect();
        // 1/Z for Z unit Pareto on Z > 1 is uniform(0, 1): mean 1/2, sd 1/√12
        let mean = above.iter().sum::<f64>() / above.len() as f64;
        let se = (1.0 / 12.0 / above.len() as f64).sqrt();
        assert!((mean - 0.5).abs() < 4.0 * se, "{mean}");
    }

    proptest! {
        #[test]
        fn homogeneity_random(t in 0.1f64..20.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = rng.random_range(2..7);
            let sites = random_sites(&mut rng, d);
            let k = BrKernel::new(&sites, rng.random_range(20.0..500.0), rng.random_range(0.1..2.0)).unwrap();
            let z: Vec<f64> = (0..d).map(|_| rng.random_range(0.05..50.0)).collect();
            let zt: Vec<f64> = z.iter().map(|v| t * v).collect();
            let expected = k.log_intensity(&z) - (d as f64 + 1.0) * t.ln();
            prop_assert!((k.log_intensity(&zt) - expected).abs() <= 1e-9 * expected.abs().max(1.0));
        }
    }
}
