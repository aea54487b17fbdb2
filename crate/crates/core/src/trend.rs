//! Skedasis (tail-trend) estimation and the latent transform.
//!
//! The tail of `X_t(s)` is `c_θ(t/n, s)` times the tail of the stationary
//! latent `Z(s)`. Two parametric families are supported:
//!
//! * log-linear: `c¹(u) = θ e^{θu} / (e^θ − 1)`
//! * linear: `c²(u) = θ(2u − 1) + 1`, `|θ| < 1`
//!
//! Both integrate to one on `[0, 1]` for every admissible `θ`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{SpaceTimeDataset, Station};
use crate::error::{Error, Result};
use crate::optimize::brent_root;
use crate::preprocess::decluster_series;
use crate::stats::{ols, OlsFit};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkedasisFamily {
    #[default]
    LogLinear,
    Linear,
}

const THETA_SERIES_TOL: f64 = 1e-6;
const LINEAR_EPS: f64 = 1e-6;
const MIN_PEAKS: usize = 10;

/// `ln(θ / (e^θ − 1))`, finite for all `θ`.
fn log_norm_const(theta: f64) -> f64 {
    if theta.abs() < THETA_SERIES_TOL {
        -theta / 2.0 + theta * theta / 24.0
    } else if theta > 0.0 {
        // θ/(e^θ − 1) = θ e^{−θ} / (1 − e^{−θ})
        theta.ln() - theta - (-(-theta).exp_m1()).ln()
    } else {
        (theta / theta.exp_m1()).ln()
    }
}

pub fn skedasis_eval(family: SkedasisFamily, theta: f64, u: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&u) || !theta.is_finite() {
        return Err(Error::Domain(format!("skedasis argument u = {u}, θ = {theta}")));
    }
    match family {
        SkedasisFamily::LogLinear => Ok((log_norm_const(theta) + theta * u).exp()),
        SkedasisFamily::Linear => {
            if theta.abs() >= 1.0 {
                return Err(Error::Domain(format!("linear skedasis needs |θ| < 1, got {theta}")));
            }
            Ok(theta * (2.0 * u - 1.0) + 1.0)
        }
    }
}

/// `c_θ(u)` for any `u ≥ 0`, extrapolating the fitted family past the
/// record. The linear family is floored at zero.
pub fn skedasis_extrapolate(family: SkedasisFamily, theta: f64, u: f64) -> Result<f64> {
    if !(u >= 0.0) || !u.is_finite() {
        return Err(Error::Domain(format!("skedasis argument u = {u}")));
    }
    if u <= 1.0 {
        return skedasis_eval(family, theta, u);
    }
    match family {
        SkedasisFamily::LogLinear => Ok((log_norm_const(theta) + theta * u).exp()),
        SkedasisFamily::Linear => {
            if theta.abs() >= 1.0 {
                return Err(Error::Domain(format!("linear skedasis needs |θ| < 1, got {theta}")));
            }
            Ok((theta * (2.0 * u - 1.0) + 1.0).max(0.0))
        }
    }
}

/// Mean and variance of `U` under density `c¹_θ` on `[0, 1]`.
fn loglinear_moments(theta: f64) -> (f64, f64) {
    if theta.abs() < 1e-2 {
        let t2 = theta * theta;
        let mean = 0.5 + theta / 12.0 - theta * t2 / 720.0 + theta * t2 * t2 / 30240.0;
        let var = 1.0 / 12.0 - t2 / 240.0 + t2 * t2 / 6048.0;
        return (mean, var);
    }
    let mean = -1.0 / (-theta).exp_m1() - 1.0 / theta;
    let sh = (theta / 2.0).sinh();
    let var = 1.0 / (theta * theta) - 1.0 / (4.0 * sh * sh);
    (mean, var)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkedasisFit {
    pub theta: f64,
    pub se: f64,
    pub n_peaks: usize,
    pub iterations: usize,
    /// Score (derivative of the log-likelihood) at the estimate.
    pub score: f64,
}

/// Maximum likelihood for `θ` from exceedance times in `[0, 1]`.
pub fn fit_skedasis_mle(times: &[f64], family: SkedasisFamily) -> Result<SkedasisFit> {
    let n = times.len();
    if n < MIN_PEAKS {
        return Err(Error::InsufficientData(format!(
            "{n} exceedance times, at least {MIN_PEAKS} needed"
        )));
    }
    if times.iter().any(|u| !(0.0..=1.0).contains(u)) {
        return Err(Error::InvalidInput("exceedance times must lie in [0, 1]".into()));
    }
    if times.iter().all(|u| *u == times[0]) {
        return Err(Error::Numerical("all exceedances at the same time; θ is not identifiable".into()));
    }
    match family {
        SkedasisFamily::LogLinear => fit_loglinear(times),
        SkedasisFamily::Linear => fit_linear(times),
    }
}

fn fit_loglinear(times: &[f64]) -> Result<SkedasisFit> {
    let n = times.len() as f64;
    let ubar = times.iter().sum::<f64>() / n;
    // The score n(ū − m(θ)) is decreasing in θ; Newton with a bisection
    // safeguard inside a bracket that widens until it contains the root.
    let (mut lo, mut hi) = (-1.0, 1.0);
    while loglinear_moments(lo).0 > ubar {
        lo *= 2.0;
        if lo < -1e6 {
            return Err(Error::Numerical("log-linear θ diverges to −∞".into()));
        }
    }
    while loglinear_moments(hi).0 < ubar {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(Error::Numerical("log-linear θ diverges to +∞".into()));
        }
    }
    let mut theta = 0.0f64.clamp(lo, hi);
    let result = |theta: f64, it: usize| {
        let (m, v) = loglinear_moments(theta);
        SkedasisFit {
            theta,
            se: 1.0 / (n * v).sqrt(),
            n_peaks: times.len(),
            iterations: it,
            score: n * (ubar - m),
        }
    };
    for it in 1..=200 {
        let (m, v) = loglinear_moments(theta);
        let g = ubar - m;
        if g.abs() <= 4.0 * f64::EPSILON {
            return Ok(result(theta, it));
        }
        if g > 0.0 {
            lo = theta;
        } else {
            hi = theta;
        }
        let mut next = theta + g / v;
        if !(next >= lo && next <= hi) {
            next = 0.5 * (lo + hi);
        }
        let done = (next - theta).abs() <= 1e-15 * theta.abs().max(1.0);
        theta = next;
        if done {
            return Ok(result(theta, it));
        }
    }
    Err(Error::NonConvergence {
        iterations: 200,
        grad_norm: (ubar - loglinear_moments(theta).0).abs() * n,
        best: vec![theta],
    })
}

fn fit_linear(times: &[f64]) -> Result<SkedasisFit> {
    let score = |th: f64| -> f64 {
        times
            .iter()
            .map(|u| {
                let v = 2.0 * u - 1.0;
                v / (1.0 + th * v)
            })
            .sum()
    };
    let info = |th: f64| -> f64 {
        times
            .iter()
            .map(|u| {
                let v = 2.0 * u - 1.0;
                (v / (1.0 + th * v)).powi(2)
            })
            .sum()
    };
    let (a, b) = (-1.0 + LINEAR_EPS, 1.0 - LINEAR_EPS);
    let theta = if score(a) <= 0.0 {
        a
    } else if score(b) >= 0.0 {
        b
    } else {
        brent_root(score, a, b, 1e-14, 200)?
    };
    Ok(SkedasisFit {
        theta,
        se: 1.0 / info(theta).sqrt(),
        n_peaks: times.len(),
        iterations: 0,
        score: score(theta),
    })
}

/// Per-site fits, run in parallel.
pub fn fit_skedasis_sites(times: &[Vec<f64>], family: SkedasisFamily) -> Result<Vec<SkedasisFit>> {
    times.par_iter().map(|t| fit_skedasis_mle(t, family)).collect()
}

/// Rescaled day index `(t + 1/2)/n` of a 0-based day `t`.
pub fn rescaled_time(t: usize, n: usize) -> f64 {
    (t as f64 + 0.5) / n as f64
}

/// Rescaled times of exceedances of `thresholds[s]` at each station, all
/// exceedance days when `run_length` is `None`, cluster peaks otherwise.
pub fn exceedance_times(
    ds: &SpaceTimeDataset,
    thresholds: &[f64],
    run_length: Option<usize>,
) -> Result<Vec<Vec<f64>>> {
    if thresholds.len() != ds.n_stations() {
        return Err(Error::InvalidInput(format!(
            "{} thresholds for {} stations",
            thresholds.len(),
            ds.n_stations()
        )));
    }
    let n = ds.n_days();
    Ok(thresholds
        .iter()
        .enumerate()
        .map(|(s, &u)| {
            let column = ds.column(s);
            let days: Vec<usize> = match run_length {
                Some(r) => decluster_series(&column, u, r).into_iter().map(|(t, _)| t).collect(),
                None => (0..n).filter(|&t| column[t] > u).collect(),
            };
            days.into_iter().map(|t| rescaled_time(t, n)).collect()
        })
        .collect())
}

/// OLS of `θ̂(s_j)` on `(1, lon_j, lat_j)`.
pub fn regress_theta_spatial(theta_site: &[f64], stations: &[Station]) -> Result<OlsFit> {
    if theta_site.len() != stations.len() {
        return Err(Error::InvalidInput("one θ per station required".into()));
    }
    if stations.len() < 4 {
        return Err(Error::InsufficientData(format!(
            "{} sites for the θ surface, at least 4 needed",
            stations.len()
        )));
    }
    let design: Vec<Vec<f64>> = stations.iter().map(|s| vec![1.0, s.lon, s.lat]).collect();
    ols(&design, theta_site)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendModel {
    pub family: SkedasisFamily,
    pub theta_site: Vec<f64>,
    pub se_site: Vec<f64>,
    /// `(θ₀, θ₁, θ₂)` of `θ(s) = θ₀ + θ₁·lon + θ₂·lat`.
    pub coeffs: [f64; 3],
    pub surface_r_squared: f64,
    /// Length of the series the times were scaled by.
    pub n: usize,
}

impl TrendModel {
    /// Stationary model: `c ≡ 1` at every site.
    pub fn stationary(family: SkedasisFamily, n_sites: usize, n: usize) -> Self {
        TrendModel {
            family,
            theta_site: vec![0.0; n_sites],
            se_site: vec![0.0; n_sites],
            coeffs: [0.0; 3],
            surface_r_squared: 1.0,
            n,
        }
    }

    pub fn theta_at(&self, lon: f64, lat: f64) -> f64 {
        self.coeffs[0] + self.coeffs[1] * lon + self.coeffs[2] * lat
    }

    /// `c_θ` at site `s` on 0-based day `t` of the fitted record.
    pub fn c_site(&self, s: usize, t: usize) -> Result<f64> {
        skedasis_eval(self.family, self.theta_site[s], rescaled_time(t, self.n))
    }
}

/// Fits per-site `θ̂` from exceedance times and the spatial surface.
pub fn fit_trend(
    ds: &SpaceTimeDataset,
    thresholds: &[f64],
    run_length: Option<usize>,
    family: SkedasisFamily,
) -> Result<TrendModel> {
    let times = exceedance_times(ds, thresholds, run_length)?;
    for (s, t) in times.iter().enumerate() {
        if t.len() < MIN_PEAKS {
            return Err(Error::InsufficientData(format!(
                "station `{}` has {} exceedances for the trend fit, at least {MIN_PEAKS} needed",
                ds.stations()[s].id,
                t.len()
            )));
        }
    }
    let fits = fit_skedasis_sites(&times, family)?;
    let theta_site: Vec<f64> = fits.iter().map(|f| f.theta).collect();
    let surface = regress_theta_spatial(&theta_site, ds.stations())?;
    Ok(TrendModel {
        family,
        se_site: fits.iter().map(|f| f.se).collect(),
        coeffs: [surface.coefficients[0], surface.coefficients[1], surface.coefficients[2]],
        surface_r_squared: surface.r_squared,
        theta_site,
        n: ds.n_days(),
    })
}

/// `(c^γ − 1)/γ`, with the limit `ln c` as `γ → 0`.
fn box_cox_c(c: f64, gamma: f64) -> f64 {
    let lc = c.ln();
    if gamma.abs() < 1e-8 {
        lc
    } else {
        (gamma * lc).exp_m1() / gamma
    }
}

/// Observed value to latent value under trend factor `c`.
pub fn latent_value(x: f64, c: f64, gamma: f64, a_tilde: f64, b_tilde: f64) -> f64 {
    if gamma.abs() < 1e-8 {
        return x - c.ln() * a_tilde;
    }
    (-gamma * c.ln()).exp() * (x - box_cox_c(c, gamma) * (a_tilde - gamma * b_tilde))
}

/// Latent value to observed value; inverse of [`latent_value`].
pub fn observed_value(z: f64, c: f64, gamma: f64, a_tilde: f64, b_tilde: f64) -> f64 {
    if gamma.abs() < 1e-8 {
        return z + c.ln() * a_tilde;
    }
    z * (gamma * c.ln()).exp() + box_cox_c(c, gamma) * (a_tilde - gamma * b_tilde)
}

/// Removes the trend from every observation.
pub fn latent_transform(
    ds: &SpaceTimeDataset,
    trend: &TrendModel,
    gamma: f64,
    a_tilde: f64,
    b_tilde: f64,
) -> Result<SpaceTimeDataset> {
    if trend.theta_site.len() != ds.n_stations() {
        return Err(Error::InvalidInput("trend model and dataset disagree on stations".into()));
    }
    let m = ds.n_stations();
    let n = ds.n_days();
    let mut out = Vec::with_capacity(n * m);
    for t in 0..n {
        let u = rescaled_time(t, n);
        for s in 0..m {
            let x = ds.row(t)[s];
            if x.is_nan() {
                out.push(f64::NAN);
                continue;
            }
            let c = skedasis_eval(trend.family, trend.theta_site[s], u)?;
            out.push(latent_value(x, c, gamma, a_tilde, b_tilde));
        }
    }
    ds.with_values(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Composite Simpson on [0, 1] with `k` panels.
    fn simpson(f: impl Fn(f64) -> f64, k: usize) -> f64 {
        let h = 1.0 / k as f64;
        let mut s = f(0.0) + f(1.0);
        for i in 1..k {
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
        }
        s * h / 3.0
    }

    #[test]
    fn closed_form_values() {
        let e = std::f64::consts::E;
        for u in [0.0, 0.3, 1.0] {
            assert_eq!(skedasis_eval(SkedasisFamily::LogLinear, 0.0, u).unwrap(), 1.0);
        }
        let v0 = skedasis_eval(SkedasisFamily::LogLinear, 1.0, 0.0).unwrap();
        let v1 = skedasis_eval(SkedasisFamily::LogLinear, 1.0, 1.0).unwrap();
        assert!((v0 - 1.0 / (e - 1.0)).abs() < 1e-14);
        assert!((v1 - e / (e - 1.0)).abs() < 1e-14);
        assert!((v0 - 0.581977).abs() < 1e-6);
        assert!((v1 - 1.581977).abs() < 1e-6);
        for th in [-0.9, 0.0, 0.4] {
            assert_eq!(skedasis_eval(SkedasisFamily::Linear, th, 0.5).unwrap(), 1.0);
        }
        assert!(skedasis_eval(SkedasisFamily::Linear, 1.0, 0.5).is_err());
        assert!(skedasis_eval(SkedasisFamily::Linear, -1.2, 0.5).is_err());
    }

    #[test]
    fn large_theta_is_finite() {
        let v = skedasis_eval(SkedasisFamily::LogLinear, 800.0, 1.0).unwrap();
        assert!((v - 800.0).abs() < 1e-9);
        let w = skedasis_eval(SkedasisFamily::LogLinear, -800.0, 0.0).unwrap();
        assert!((w - 800.0).abs() < 1e-9);
    }

    #[test]
    fn moments_match_quadrature() {
        for th in [-3.0, -0.5, -0.005, 1e-7, 0.02, 2.0] {
            let c = |u: f64| skedasis_eval(SkedasisFamily::LogLinear, th, u).unwrap();
            let m = simpson(|u| u * c(u), 2000);
            let v = simpson(|u| (u - m).powi(2) * c(u), 2000);
            let (mm, vv) = loglinear_moments(th);
            assert!((m - mm).abs() < 1e-11, "θ={th}: {m} vs {mm}");
            assert!((v - vv).abs() < 1e-11, "θ={th}: {v} vs {vv}");
        }
    }

    fn sample_loglinear(rng: &mut impl Rng, theta: f64, n: usize) -> Vec<f64> {
        // inverse CDF: F(u) = (e^{θu} − 1)/(e^θ − 1)
        (0..n)
            .map(|_| {
                let p: f64 = rng.random();
                (p * theta.exp_m1()).ln_1p() / theta
            })
            .collect()
    }

    fn sample_linear(rng: &mut impl Rng, theta: f64, n: usize) -> Vec<f64> {
        // F(u) = θu² + (1 − θ)u
        (0..n)
            .map(|_| {
                let p: f64 = rng.random();
                let b = 1.0 - theta;
                2.0 * p / (b + (b * b + 4.0 * theta * p).sqrt())
            })
            .collect()
    }

    #[test]
    fn uniform_times_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t: Vec<f64> = (0..500).map(|_| rng.random()).collect();
        for fam in [SkedasisFamily::LogLinear, SkedasisFamily::Linear] {
            let fit = fit_skedasis_mle(&t, fam).unwrap();
            assert!(fit.theta.abs() < 3.0 * fit.se, "{fam:?}: {fit:?}");
        }
    }

    #[test]
    fn recovers_loglinear_theta() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = sample_loglinear(&mut rng, 2.0, 1000);
        let fit = fit_skedasis_mle(&t, SkedasisFamily::LogLinear).unwrap();
        assert!((fit.theta - 2.0).abs() < 0.25, "{fit:?}");
        assert!(fit.score.abs() < 1e-8, "{fit:?}");
    }

    #[test]
    fn recovers_linear_theta() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = sample_linear(&mut rng, 0.5, 1000);
        let fit = fit_skedasis_mle(&t, SkedasisFamily::Linear).unwrap();
        assert!((fit.theta - 0.5).abs() < 0.1, "{fit:?}");
    }

    #[test]
    fn degenerate_times() {
        let t = vec![0.3; 20];
        assert!(fit_skedasis_mle(&t, SkedasisFamily::LogLinear).is_err());
        assert!(fit_skedasis_mle(&t[..5], SkedasisFamily::LogLinear).is_err());
    }

    fn stations(coords: &[(f64, f64)]) -> Vec<Station> {
        coords
            .iter()
            .enumerate()
            .map(|(i, &(lo, la))| Station::new(format!("S{i}"), lo, la).unwrap())
            .collect()
    }

    #[test]
    fn surface_exact_recovery() {
        let st = stations(&[(0.0, 10.0), (1.0, 11.0), (-2.0, 12.5), (1.5, 9.5), (0.5, 14.0)]);
        let th: Vec<f64> = st.iter().map(|s| 0.1 - 0.2 * s.lon + 0.05 * s.lat).collect();
        let fit = regress_theta_spatial(&th, &st).unwrap();
        for (c, e) in fit.coefficients.iter().zip([0.1, -0.2, 0.05]) {
            assert!((c - e).abs() < 1e-10);
        }
        let flat = regress_theta_spatial(&[0.3; 5], &st).unwrap();
        assert!((flat.coefficients[0] - 0.3).abs() < 1e-10);
        assert!(flat.coefficients[1].abs() < 1e-10 && flat.coefficients[2].abs() < 1e-10);
        let collinear = stations(&[(0.0, 0.0), (1.0, 1.0), (2.0, 2.0), (3.0, 3.0)]);
        assert!(regress_theta_spatial(&[0.1, 0.2, 0.3, 0.4], &collinear).is_err());
    }

    #[test]
    fn noisy_surface_within_two_se() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let coords: Vec<(f64, f64)> = (0..40)
            .map(|_| (rng.random_range(-6.0..2.0), rng.random_range(9.0..15.0)))
            .collect();
        let st = stations(&coords);
        let normal = rand_distr::Normal::new(0.0, 0.1).unwrap();
        let th: Vec<f64> = st
            .iter()
            .map(|s| 0.2 + 0.1 * s.lon - 0.05 * s.lat + rng.sample(normal))
            .collect();
        let fit = regress_theta_spatial(&th, &st).unwrap();
        for ((c, e), se) in fit.coefficients.iter().zip([0.2, 0.1, -0.05]).zip(&fit.std_errors) {
            assert!((c - e).abs() < 2.0 * se, "{c} vs {e} (se {se})");
        }
    }

    #[test]
    fn transform_scalar_oracle() {
        let (g, a, b, c, x) = (0.1f64, 10.0, 56.1, 1.2f64, 100.0);
        let expected = c.powf(-g) * (x - ((c.powf(g) - 1.0) / g) * (a - g * b));
        assert!((latent_value(x, c, g, a, b) - expected).abs() < 1e-12);
        assert_eq!(latent_value(x, 1.0, g, a, b), x);
    }

    #[test]
    fn stationary_transform_is_identity() {
        let st = stations(&[(0.0, 0.0), (1.0, 0.0)]);
        let times = (1..=30).map(|d| crate::data::DayStamp::new(2001, d).unwrap()).collect();
        let rows = (0..30).map(|t| vec![Some(t as f64), Some(2.0 * t as f64)]).collect();
        let ds = SpaceTimeDataset::from_rows(st, times, rows).unwrap();
        let trend = TrendModel::stationary(SkedasisFamily::LogLinear, 2, 30);
        assert_eq!(latent_transform(&ds, &trend, 0.1, 10.0, 50.0).unwrap(), ds);
    }

    proptest! {
        #[test]
        fn integrates_to_one(theta in -30.0f64..30.0, linear in any::<bool>()) {
            let (fam, th) = if linear {
                (SkedasisFamily::Linear, theta / 30.0 * 0.999)
            } else {
                (SkedasisFamily::LogLinear, theta)
            };
            // Simpson is exact for the linear family; for c¹ the error term
            // scales as θ⁴e^{|θ|}h⁴, so refine with |θ|.
            let k = if linear { 2 } else { 2 * (200.0 + 400.0 * th.abs()) as usize };
            let integral = simpson(|u| skedasis_eval(fam, th, u).unwrap(), k);
            prop_assert!((integral - 1.0).abs() < 1e-10, "{:?} θ={} ∫={}", fam, th, integral);
        }

        #[test]
        fn monotone_in_sign_of_theta(theta in -0.99f64..0.99, u in 0.0f64..0.99, linear in any::<bool>()) {
            let fam = if linear { SkedasisFamily::Linear } else { SkedasisFamily::LogLinear };
            prop_assume!(theta.abs() > 1e-3);
            let a = skedasis_eval(fam, theta, u).unwrap();
            let b = skedasis_eval(fam, theta, u + 0.01).unwrap();
            prop_assert!(a > 0.0);
            prop_assert_eq!(b > a, theta > 0.0);
        }

        #[test]
        fn round_trip(x in 0.0f64..500.0, c in 0.05f64..5.0, g in -0.45f64..0.9, a in 1.0f64..40.0, b in 0.0f64..100.0, zero in any::<bool>()) {
            let g = if zero { 0.0 } else { g };
            let z = latent_value(x, c, g, a, b);
            let back = observed_value(z, c, g, a, b);
            prop_assert!((back - x).abs() <= 1e-9 * x.abs().max(1.0));
        }
    }
}
