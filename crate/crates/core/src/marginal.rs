//! Marginal tail model of the latent field: one shape `γ` shared by all
//! sites, per-site scale `a_n(s)` and location `b_n(s)`, and the global
//! normalising scalars `ã_n = ℓ(a_n)`, `b̃_n = ℓ(b_n)`.
//!
//! Fitting runs in three steps:
//!
//! 1. `b̃_n` is the empirical `q_ell` quantile of the daily risk `ℓ(X_t)`.
//! 2. `b_n(s) = u_{q'}(s) − b̃_n`, where `u_{q'}(s)` is the site's
//!    interpolated `q'` quantile over ℓ-exceedance days and one common `q'`
//!    is solved by bisection so that the identifiability constraint holds.
//! 3. `(γ, a_n)` maximise the independence GPD likelihood of the declustered
//!    peaks above `b_n(s)`.
//!
//! For non-linear functionals (max, min) steps 2 and 3 alternate until
//! `ℓ(B_Z) = 0` as well as `ℓ(A_Z) = 1`.

use serde::{Deserialize, Serialize};

use crate::data::SpaceTimeDataset;
use crate::error::{Error, Result};
use crate::optimize::{bfgs, bisect, BfgsOptions};
use crate::preprocess::decluster_runs;
use crate::risk::RiskFunctional;
use crate::stats::{quantile_sorted, sorted_finite};

/// Below this `|γ|` the exponential limit of the GPD is used.
pub const GAMMA_ZERO_TOL: f64 = 1e-8;
pub const GAMMA_BOUNDS: (f64, f64) = (-0.5, 1.0);
const MIN_ELL_DAYS: usize = 50;
const MIN_TOTAL_PEAKS: usize = 30;

/// Generalized Pareto tail above `threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpdTail {
    pub sigma: f64,
    pub gamma: f64,
    pub threshold: f64,
}

impl GpdTail {
    pub fn new(sigma: f64, gamma: f64, threshold: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::Domain(format!("GPD scale must be positive, got {sigma}")));
        }
        Ok(GpdTail { sigma, gamma, threshold })
    }

    /// Survival of the excess `z = x − threshold`.
    pub fn survival(&self, z: f64) -> f64 {
        gpd_survival(z, self)
    }

    /// Excess `z` with `survival(z) = p`.
    pub fn excess_quantile(&self, p: f64) -> f64 {
        if self.gamma.abs() < GAMMA_ZERO_TOL {
            -self.sigma * p.ln()
        } else {
            self.sigma * (p.powf(-self.gamma) - 1.0) / self.gamma
        }
    }

    /// Upper endpoint of the excess distribution (infinite for `γ >= 0`).
    pub fn excess_endpoint(&self) -> f64 {
        if self.gamma < -GAMMA_ZERO_TOL {
            -self.sigma / self.gamma
        } else {
            f64::INFINITY
        }
    }
}

/// `(1 + γz/σ)_+^{−1/γ}`, or `exp(−z/σ)` when `|γ| < 1e-8`.
pub fn gpd_survival(z: f64, tail: &GpdTail) -> f64 {
    let z = z.max(0.0);
    let GpdTail { sigma, gamma, .. } = *tail;
    if gamma.abs() < GAMMA_ZERO_TOL {
        return (-z / sigma).exp();
    }
    if gamma < 0.0 && z >= -sigma / gamma {
        return 0.0;
    }
    let arg = gamma * z / sigma;
    (-arg.ln_1p() / gamma).exp()
}

/// Negative log-density of one excess `y >= 0` under scale `a` and shape `g`,
/// with its derivatives with respect to `log a` and `g`. `None` outside the
/// support.
fn gpd_nll_term(y: f64, a: f64, g: f64) -> Option<(f64, f64, f64)> {
    let x = y / a;
    let gx = g * x;
    if gx <= -1.0 {
        return None;
    }
    let w = 1.0 + gx;
    let log_w = gx.ln_1p();
    if g.abs() < 1e-6 {
        // Series in g about 0 to avoid cancellation.
        let nll = a.ln() + x + g * (x - x * x / 2.0) + g * g * (x * x * x / 3.0 - x * x / 2.0);
        let d_loga = 1.0 - (1.0 + g) * x / w;
        let d_g = -(x * x / 2.0 - 2.0 * g * x * x * x / 3.0) + x / w;
        return Some((nll, d_loga, d_g));
    }
    let nll = a.ln() + (1.0 / g + 1.0) * log_w;
    let d_loga = 1.0 - (1.0 + g) * x / w;
    let d_g = -log_w / (g * g) + (1.0 / g + 1.0) * x / w;
    Some((nll, d_loga, d_g))
}

/// Independence log-likelihood of per-site excesses under a shared shape.
pub fn gpd_loglik(gamma: f64, scales: &[f64], excesses: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for (a, ys) in scales.iter().zip(excesses) {
        for &y in ys {
            match gpd_nll_term(y, *a, gamma) {
                Some((nll, _, _)) => total -= nll,
                None => return f64::NEG_INFINITY,
            }
        }
    }
    total
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpdFit {
    pub gamma: f64,
    pub a_n: Vec<f64>,
    pub loglik: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub n_peaks: Vec<usize>,
}

/// Maximises the shared-shape likelihood for excesses already split by site.
pub fn fit_gpd_excesses(excesses: &[Vec<f64>], warm_start: Option<(f64, &[f64])>) -> Result<GpdFit> {
    let m = excesses.len();
    let total: usize = excesses.iter().map(Vec::len).sum();
    if total < MIN_TOTAL_PEAKS {
        return Err(Error::InsufficientData(format!(
            "{total} exceedances in total, at least {MIN_TOTAL_PEAKS} needed"
        )));
    }
    if let Some(s) = excesses.iter().position(Vec::is_empty) {
        return Err(Error::InsufficientData(format!(
            "site index {s} has no exceedances above its location"
        )));
    }
    let n = total as f64;
    let objective = |p: &[f64]| -> (f64, Vec<f64>) {
        let g = p[m];
        let mut grad = vec![0.0; m + 1];
        if !(GAMMA_BOUNDS.0 < g && g < GAMMA_BOUNDS.1) {
            return (f64::INFINITY, grad);
        }
        let mut value = 0.0;
        for (s, ys) in excesses.iter().enumerate() {
            let a = p[s].exp();
            for &y in ys {
                let Some((nll, d_loga, d_g)) = gpd_nll_term(y, a, g) else {
                    return (f64::INFINITY, grad);
                };
                value += nll;
                grad[s] += d_loga;
                grad[m] += d_g;
            }
        }
        grad.iter_mut().for_each(|v| *v /= n);
        (value / n, grad)
    };

    let means: Vec<f64> = excesses.iter().map(|ys| ys.iter().sum::<f64>() / ys.len() as f64).collect();
    let gamma_mom = {
        let mut est = Vec::new();
        for (ys, &mu) in excesses.iter().zip(&means) {
            if ys.len() > 2 {
                let var = ys.iter().map(|y| (y - mu).powi(2)).sum::<f64>() / (ys.len() - 1) as f64;
                if var > 0.0 {
                    est.push(0.5 * (1.0 - mu * mu / var));
                }
            }
        }
        if est.is_empty() {
            0.1
        } else {
            (est.iter().sum::<f64>() / est.len() as f64).clamp(-0.4, 0.9)
        }
    };
    let mut starts: Vec<Vec<f64>> = Vec::new();
    if let Some((g, a)) = warm_start {
        let mut s: Vec<f64> = a.iter().map(|v| v.ln()).collect();
        s.push(g);
        starts.push(s);
    }
    for g in [gamma_mom, 0.0, 0.2] {
        let mut s: Vec<f64> = means.iter().map(|mu| (mu * (1.0 - g).max(0.1)).ln()).collect();
        s.push(g);
        starts.push(s);
    }

    let opts = BfgsOptions {
        max_iter: 1000,
        grad_tol: 1e-6,
        f_tol: 0.0,
    };
    let mut best: Option<crate::optimize::Minimum> = None;
    for start in starts {
        if !objective(&start).0.is_finite() {
            continue;
        }
        let result = bfgs(objective, &start, opts);
        let better = match &best {
            None => true,
            Some(b) => (result.converged && !b.converged) || (result.converged == b.converged && result.value < b.value),
        };
        if better {
            best = Some(result);
        }
    }
    let best = best.ok_or_else(|| Error::Numerical("no feasible starting point for the GPD fit".into()))?;
    if !best.converged {
        return Err(Error::NonConvergence {
            iterations: best.iterations,
            grad_norm: best.grad_norm,
            best: best.x,
        });
    }
    let gamma = best.x[m];
    let a_n: Vec<f64> = best.x[..m].iter().map(|v| v.exp()).collect();
    for (s, ys) in excesses.iter().enumerate() {
        if ys.iter().any(|y| 1.0 + gamma * y / a_n[s] <= 0.0) {
            return Err(Error::Numerical(format!(
                "support constraint violated at site index {s} at the optimum"
            )));
        }
    }
    Ok(GpdFit {
        gamma,
        loglik: gpd_loglik(gamma, &a_n, excesses),
        a_n,
        grad_norm: best.grad_norm,
        iterations: best.iterations,
        n_peaks: excesses.iter().map(Vec::len).collect(),
    })
}

/// Excesses `x − b_n(s)` of the declustered peaks above `b_n(s)` at each site.
pub fn peak_excesses(ds: &SpaceTimeDataset, b_n: &[f64], run_length: usize) -> Result<Vec<Vec<f64>>> {
    let peaks = decluster_runs(ds, b_n, run_length)?;
    let mut out = vec![Vec::new(); ds.n_stations()];
    for p in &peaks.cluster_peaks {
        out[p.station].push(p.value - b_n[p.station]);
    }
    Ok(out)
}

/// Shared-shape GPD fit on declustered peaks above the per-site locations.
pub fn fit_gpd_shared_shape(ds: &SpaceTimeDataset, b_n: &[f64], run_length: usize) -> Result<GpdFit> {
    if b_n.iter().any(|b| !b.is_finite()) {
        return Err(Error::InvalidInput("site locations must be finite".into()));
    }
    fit_gpd_excesses(&peak_excesses(ds, b_n, run_length)?, None)
}

/// Daily risk values `ℓ(X_t)`; days where `ℓ` is undefined are `NaN`.
pub fn daily_risk(ds: &SpaceTimeDataset, ell: &RiskFunctional) -> Vec<f64> {
    (0..ds.n_days())
        .map(|t| ell.apply(ds.row(t)).unwrap_or(f64::NAN))
        .collect()
}

/// Empirical `q` quantile of the daily risk series.
pub fn select_ell_threshold(ds: &SpaceTimeDataset, ell: &RiskFunctional, q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::InvalidInput(format!("quantile level {q} not in (0, 1)")));
    }
    let sorted = sorted_finite(&daily_risk(ds, ell));
    if sorted.len() < MIN_ELL_DAYS {
        return Err(Error::InsufficientData(format!(
            "{} days with a defined risk value, at least {MIN_ELL_DAYS} needed",
            sorted.len()
        )));
    }
    Ok(quantile_sorted(&sorted, q))
}

/// Days with `ℓ(X_t) >= threshold`.
pub fn ell_exceedance_days(ds: &SpaceTimeDataset, ell: &RiskFunctional, threshold: f64) -> Vec<usize> {
    daily_risk(ds, ell)
        .iter()
        .enumerate()
        .filter(|(_, r)| **r >= threshold)
        .map(|(t, _)| t)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteLocations {
    pub b_n: Vec<f64>,
    pub q_prime: f64,
    /// Spacing of the empirical quantile grid on the sparsest site.
    pub quantile_resolution: f64,
}

/// Per-site sorted values over the ℓ-exceedance days.
struct ExceedanceQuantiles {
    sorted: Vec<Vec<f64>>,
}

impl ExceedanceQuantiles {
    fn new(ds: &SpaceTimeDataset, days: &[usize]) -> Result<Self> {
        if days.is_empty() {
            return Err(Error::InsufficientData("no ℓ-exceedance days".into()));
        }
        let mut sorted = Vec::with_capacity(ds.n_stations());
        for s in 0..ds.n_stations() {
            let v: Vec<f64> = days.iter().filter_map(|&t| ds.get(t, s)).collect();
            if v.is_empty() {
                return Err(Error::InsufficientData(format!(
                    "station `{}` is masked on every ℓ-exceedance day",
                    ds.stations()[s].id
                )));
            }
            sorted.push(sorted_finite(&v));
        }
        Ok(ExceedanceQuantiles { sorted })
    }

    fn at(&self, q: f64) -> Vec<f64> {
        self.sorted.iter().map(|v| quantile_sorted(v, q)).collect()
    }

    fn resolution(&self) -> f64 {
        let n = self.sorted.iter().map(Vec::len).min().unwrap_or(1);
        1.0 / (n.max(2) - 1) as f64
    }

    /// Solves `constraint(u_{q'}) = 0` for `q'` in `[0, 1]`; the constraint
    /// must be non-decreasing in `q'`.
    fn solve(&self, constraint: impl Fn(&[f64]) -> f64) -> Result<f64> {
        let f = |q: f64| constraint(&self.at(q));
        let (lo, hi) = (f(0.0), f(1.0));
        if lo > 0.0 || hi < 0.0 {
            return Err(Error::Numerical(format!(
                "no quantile order q' satisfies the identifiability constraint (range [{lo}, {hi}])"
            )));
        }
        bisect(f, 0.0, 1.0, 1e-15)
    }
}

/// Per-site locations `b_n(s) = u_{q'}(s) − b̃_n` with the common `q'`
/// solving `ℓ(b_n) = b̃_n`.
pub fn site_locations(ds: &SpaceTimeDataset, ell: &RiskFunctional, b_tilde: f64) -> Result<SiteLocations> {
    let days = ell_exceedance_days(ds, ell, b_tilde);
    let quantiles = ExceedanceQuantiles::new(ds, &days)?;
    let q_prime = quantiles.solve(|u| {
        let b: Vec<f64> = u.iter().map(|v| v - b_tilde).collect();
        ell.apply(&b).unwrap_or(f64::NAN) - b_tilde
    })?;
    Ok(SiteLocations {
        b_n: quantiles.at(q_prime).iter().map(|v| v - b_tilde).collect(),
        q_prime,
        quantile_resolution: quantiles.resolution(),
    })
}

/// Fraction of unmasked days with `Z_t(s) > u(s)`.
pub fn exceedance_probability(latent: &SpaceTimeDataset, u: &[f64]) -> Result<Vec<f64>> {
    if u.len() != latent.n_stations() {
        return Err(Error::InvalidInput(format!(
            "{} thresholds for {} stations",
            u.len(),
            latent.n_stations()
        )));
    }
    Ok(u.iter()
        .enumerate()
        .map(|(s, &us)| {
            let series = latent.series(s);
            if series.is_empty() {
                return 0.0;
            }
            series.iter().filter(|(_, v)| *v > us).count() as f64 / series.len() as f64
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalModel {
    pub gamma: f64,
    pub a_n: Vec<f64>,
    pub b_n: Vec<f64>,
    pub a_tilde: f64,
    pub b_tilde: f64,
    pub a_z: Vec<f64>,
    pub b_z: Vec<f64>,
    pub q_ell: f64,
    pub q_prime: f64,
    pub risk: RiskFunctional,
}

impl MarginalModel {
    /// Derives `ã_n = ℓ(a_n)`, `A_Z = a_n/ã_n` and `B_Z = b_n − A_Z·b̃_n`.
    pub fn from_fit(
        gamma: f64,
        a_n: Vec<f64>,
        b_n: Vec<f64>,
        b_tilde: f64,
        q_ell: f64,
        q_prime: f64,
        risk: RiskFunctional,
    ) -> Result<Self> {
        if a_n.len() != b_n.len() {
            return Err(Error::InvalidInput("a_n and b_n lengths differ".into()));
        }
        if let Some(a) = a_n.iter().find(|a| !(**a > 0.0)) {
            return Err(Error::Domain(format!("scale a_n must be positive, got {a}")));
        }
        let a_tilde = risk.apply(&a_n)?;
        let a_z: Vec<f64> = a_n.iter().map(|a| a / a_tilde).collect();
        let b_z: Vec<f64> = b_n.iter().zip(&a_z).map(|(b, az)| b - az * b_tilde).collect();
        Ok(MarginalModel {
            gamma,
            a_n,
            b_n,
            a_tilde,
            b_tilde,
            a_z,
            b_z,
            q_ell,
            q_prime,
            risk,
        })
    }

    pub fn n_sites(&self) -> usize {
        self.a_n.len()
    }

    /// `(ℓ(A_Z) − 1, ℓ(B_Z))`.
    pub fn identifiability_residuals(&self) -> (f64, f64) {
        (
            self.risk.apply(&self.a_z).unwrap_or(f64::NAN) - 1.0,
            self.risk.apply(&self.b_z).unwrap_or(f64::NAN),
        )
    }

    /// GPD tail at site `s` above `u_q`: `σ = a_n + γ(u_q − b_n)`.
    pub fn tail_at(&self, s: usize, u_q: f64) -> Result<GpdTail> {
        GpdTail::new(self.a_n[s] + self.gamma * (u_q - self.b_n[s]), self.gamma, u_q)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginalOptions {
    pub q_ell: f64,
    pub run_length: usize,
    pub max_refinements: usize,
}

impl Default for MarginalOptions {
    fn default() -> Self {
        MarginalOptions {
            q_ell: 0.95,
            run_length: 1,
            max_refinements: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalDiagnostics {
    pub loglik: f64,
    pub grad_norm: f64,
    pub optimizer_iterations: usize,
    pub n_peaks: Vec<usize>,
    pub n_ell_days: usize,
    pub quantile_resolution: f64,
    /// `ℓ(b_n) − b̃_n` of the final locations.
    pub location_residual: f64,
    pub refinements: usize,
    /// Largest move of `b_n` after the last `(γ, a_n)` fit; zero when the
    /// alternation reached a fixed point.
    pub location_shift: f64,
}

/// Full marginal fit on observations.
pub fn fit_marginal(
    ds: &SpaceTimeDataset,
    ell: &RiskFunctional,
    opts: &MarginalOptions,
) -> Result<(MarginalModel, MarginalDiagnostics)> {
    let b_tilde = select_ell_threshold(ds, ell, opts.q_ell)?;
    let days = ell_exceedance_days(ds, ell, b_tilde);
    let quantiles = ExceedanceQuantiles::new(ds, &days)?;
    let locations = |q: f64| -> Vec<f64> { quantiles.at(q).iter().map(|v| v - b_tilde).collect() };

    let initial = site_locations(ds, ell, b_tilde)?;
    let mut q_prime = initial.q_prime;
    let mut b_n = initial.b_n;
    let mut fit = fit_gpd_shared_shape(ds, &b_n, opts.run_length)?;
    let mut refinements = 0;
    let mut location_shift = 0.0;

    if !ell.is_linear() {
        // Alternate q' and (γ, a_n). Peak sets change discretely with b_n, so
        // the loop may settle on a short cycle; the last step always solves
        // q' against the latest A_Z, which makes ℓ(B_Z) = 0 hold exactly.
        loop {
            let a_tilde = ell.apply(&fit.a_n)?;
            let a_z: Vec<f64> = fit.a_n.iter().map(|a| a / a_tilde).collect();
            let next = quantiles.solve(|u| {
                let bz: Vec<f64> = u.iter().zip(&a_z).map(|(v, az)| v - b_tilde - az * b_tilde).collect();
                ell.apply(&bz).unwrap_or(f64::NAN)
            })?;
            let next_b = locations(next);
            location_shift = next_b
                .iter()
                .zip(&b_n)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            let settled = (next - q_prime).abs() <= 1e-12;
            q_prime = next;
            b_n = next_b;
            if settled || refinements >= opts.max_refinements {
                break;
            }
            refinements += 1;
            let excesses = peak_excesses(ds, &b_n, opts.run_length)?;
            fit = fit_gpd_excesses(&excesses, Some((fit.gamma, &fit.a_n)))?;
        }
    }

    let model = MarginalModel::from_fit(fit.gamma, fit.a_n.clone(), b_n.clone(), b_tilde, opts.q_ell, q_prime, *ell)?;
    let diagnostics = MarginalDiagnostics {
        loglik: fit.loglik,
        grad_norm: fit.grad_norm,
        optimizer_iterations: fit.iterations,
        n_peaks: fit.n_peaks,
        n_ell_days: days.len(),
        quantile_resolution: quantiles.resolution(),
        location_residual: ell.apply(&b_n)? - b_tilde,
        refinements,
        location_shift,
    };
    Ok((model, diagnostics))
}

/// Refits `(γ, a_n)` on the latent sample with the locations held fixed.
pub fn refit_on_latent(latent: &SpaceTimeDataset, model: &MarginalModel, run_length: usize) -> Result<MarginalModel> {
    let excesses = peak_excesses(latent, &model.b_n, run_length)?;
    let fit = fit_gpd_excesses(&excesses, Some((model.gamma, &model.a_n)))?;
    MarginalModel::from_fit(
        fit.gamma,
        fit.a_n,
        model.b_n.clone(),
        model.b_tilde,
        model.q_ell,
        model.q_prime,
        model.risk,
    )
}
