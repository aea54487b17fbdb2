//! Return levels under a trend in exceedance frequency.
//!
//! With daily exceedance probability `p_t(x) = c_θ(t, s)·φ_u(s)·F̄(x − u)`:
//!
//! * ENE: `x_m` makes the expected number of exceedances over the next
//!   `n_x·m` days equal to one.
//! * EWT: `x_m` makes the expected waiting time to the first exceedance equal
//!   to `n_x·m` days.
//!
//! Under a constant trend both reduce to the stationary GPD quantile.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::marginal::GpdTail;
use crate::optimize::brent_root;
use crate::trend::{observed_value, skedasis_extrapolate, SkedasisFamily};

/// Upper limit for return-level brackets, in data units.
pub const RETURN_LEVEL_CAP: f64 = 1e4;
const EWT_PRODUCT_TOL: f64 = 1e-12;
const EWT_MAX_FACTOR: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReturnMethod {
    Ene,
    Ewt,
}

impl std::fmt::Display for ReturnMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ReturnMethod::Ene => "ene",
            ReturnMethod::Ewt => "ewt",
        })
    }
}

impl std::str::FromStr for ReturnMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ene" => Ok(ReturnMethod::Ene),
            "ewt" => Ok(ReturnMethod::Ewt),
            other => Err(Error::InvalidInput(format!("unknown return-level method `{other}` (ene or ewt)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReturnSpec {
    /// Return period in years.
    pub m: f64,
    /// Days per year (season length).
    pub n_x: usize,
    /// Length of the fitted record; the trend is evaluated at `(t − ½)/n`.
    pub n: usize,
    /// First day (1-based) of the horizon; `None` means `n + 1`.
    pub t0: Option<usize>,
}

impl ReturnSpec {
    pub fn new(m: f64, n_x: usize, n: usize) -> Result<Self> {
        let spec = ReturnSpec { m, n_x, n, t0: None };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.m >= 1.0) || !self.m.is_finite() {
            return Err(Error::InvalidInput(format!("return period must be at least 1, got {}", self.m)));
        }
        if self.n_x == 0 || self.n == 0 {
            return Err(Error::InvalidInput("n_x and n must be positive".into()));
        }
        Ok(())
    }

    pub fn start(&self) -> usize {
        self.t0.unwrap_or(self.n + 1)
    }

    /// Number of days in the horizon, `n_x·m` rounded.
    pub fn horizon(&self) -> usize {
        (self.n_x as f64 * self.m).round().max(1.0) as usize
    }

    /// `t_m = 1 + n_x·m/n`.
    pub fn t_m(&self) -> f64 {
        1.0 + self.n_x as f64 * self.m / self.n as f64
    }
}

/// Trend at one location.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SiteTrend {
    pub family: SkedasisFamily,
    pub theta: f64,
}

impl SiteTrend {
    pub fn stationary() -> Self {
        SiteTrend { family: SkedasisFamily::LogLinear, theta: 0.0 }
    }

    /// `c_θ((t − ½)/n)` for a 1-based day `t`.
    pub fn at_day(&self, t: usize, n: usize) -> Result<f64> {
        skedasis_extrapolate(self.family, self.theta, (t as f64 - 0.5) / n as f64)
    }
}

/// Tail of the latent variable above `u` with exceedance probability `φ_u`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SiteTail {
    pub tail: GpdTail,
    pub phi_u: f64,
}

impl SiteTail {
    pub fn new(tail: GpdTail, phi_u: f64) -> Result<Self> {
        if !(phi_u > 0.0 && phi_u <= 1.0) {
            return Err(Error::InvalidInput(format!("φ_u must lie in (0, 1], got {phi_u}")));
        }
        Ok(SiteTail { tail, phi_u })
    }

    /// `φ_u·F̄(x − u)`, with `F̄ = 1` below the threshold.
    pub fn exceedance(&self, x: f64) -> f64 {
        let z = x - self.tail.threshold;
        if z <= 0.0 {
            self.phi_u
        } else {
            self.phi_u * self.tail.survival(z)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnLevel {
    pub x_m: f64,
    pub method: ReturnMethod,
    /// `Σ p_t` for ENE, `E[Y]` in days for EWT, at the solution.
    pub criterion: f64,
    pub warnings: Vec<String>,
}

/// Trend factors for days `t0 .. t0 + len`.
fn trend_factors(trend: &SiteTrend, spec: &ReturnSpec, len: usize) -> Result<(Vec<f64>, bool)> {
    let t0 = spec.start();
    let factors = (t0..t0 + len).map(|t| trend.at_day(t, spec.n)).collect::<Result<Vec<_>>>()?;
    let extrapolated = t0 + len > spec.n + 1;
    Ok((factors, extrapolated))
}

fn clamped(c: f64, q: f64, flag: &mut bool) -> f64 {
    let p = c * q;
    if p > 1.0 {
        *flag = true;
        1.0
    } else {
        p
    }
}

/// Brackets a decreasing `f` between the threshold and the cap and solves.
fn solve_decreasing(mut f: impl FnMut(f64) -> Result<f64>, u: f64, what: &str) -> Result<f64> {
    let at_u = f(u)?;
    if at_u < 0.0 {
        return Err(Error::Domain(format!(
            "{what}: the return level lies below the threshold u = {u}, outside the tail model"
        )));
    }
    if at_u == 0.0 {
        return Ok(u);
    }
    let mut step = u.abs().max(1.0);
    let mut hi = u + step;
    loop {
        if hi > RETURN_LEVEL_CAP {
            return Err(Error::Numerical(format!(
                "{what}: no bracket below the cap {RETURN_LEVEL_CAP}"
            )));
        }
        if f(hi)? <= 0.0 {
            break;
        }
        step *= 2.0;
        hi = (u + step).min(if hi >= RETURN_LEVEL_CAP { f64::INFINITY } else { RETURN_LEVEL_CAP });
        if hi == RETURN_LEVEL_CAP && f(hi)? > 0.0 {
            return Err(Error::Numerical(format!(
                "{what}: no bracket below the cap {RETURN_LEVEL_CAP}"
            )));
        }
    }
    let mut err = None;
    let root = brent_root(
        |x| match f(x) {
            Ok(v) => v,
            Err(e) => {
                err.get_or_insert(e);
                f64::NAN
            }
        },
        u,
        hi,
        1e-12 * hi.abs().max(1.0),
        500,
    )?;
    match err {
        Some(e) => Err(e),
        None => Ok(root),
    }
}

/// Expected number of exceedances of `x` over the horizon.
pub fn expected_exceedances(x: f64, factors: &[f64], tail: &SiteTail) -> (f64, bool) {
    let q = tail.exceedance(x);
    let mut flag = false;
    let sum = factors.iter().map(|c| clamped(*c, q, &mut flag)).sum();
    (sum, flag)
}

/// ENE return level.
pub fn return_level_ene(spec: &ReturnSpec, trend: &SiteTrend, tail: &SiteTail) -> Result<ReturnLevel> {
    spec.validate()?;
    let (factors, extrapolated) = trend_factors(trend, spec, spec.horizon())?;
    let x_m = solve_decreasing(|x| Ok(expected_exceedances(x, &factors, tail).0 - 1.0), tail.tail.threshold, "ENE")?;
    let (sum, clamp) = expected_exceedances(x_m, &factors, tail);
    let mut warnings = Vec::new();
    if extrapolated && trend.theta != 0.0 {
        warnings.push("trend extrapolated beyond the observed record".to_string());
    }
    if clamp {
        warnings.push("daily exceedance probability clamped to 1".to_string());
    }
    Ok(ReturnLevel { x_m, method: ReturnMethod::Ene, criterion: sum, warnings })
}

/// `E[Y] = 1 + Σ_{i≥1} Π_{t≤i}(1 − p_t)` for daily probabilities from `p`.
/// Stops once the product falls below `1e-12`, or early once the partial sum
/// exceeds `stop_above`.
pub fn expected_waiting_time(mut p: impl FnMut(usize) -> Result<f64>, max_terms: usize, stop_above: f64) -> Result<f64> {
    let mut total = 1.0;
    let mut prod = 1.0;
    for i in 1..=max_terms {
        prod *= 1.0 - p(i)?;
        if prod < EWT_PRODUCT_TOL {
            return Ok(total + prod);
        }
        total += prod;
        if total > stop_above {
            return Ok(total);
        }
    }
    Err(Error::Numerical(format!(
        "waiting-time series not converged after {max_terms} days (survival {prod:.3e}); the EWT may be infinite"
    )))
}

/// EWT return level.
pub fn return_level_ewt(spec: &ReturnSpec, trend: &SiteTrend, tail: &SiteTail) -> Result<ReturnLevel> {
    spec.validate()?;
    let target = spec.horizon() as f64;
    let max_terms = EWT_MAX_FACTOR * spec.horizon();
    let t0 = spec.start();
    // Trend factors are cached lazily; the series length depends on x.
    let mut cache: Vec<f64> = Vec::new();
    let mut factor = |i: usize| -> Result<f64> {
        while cache.len() < i {
            cache.push(trend.at_day(t0 + cache.len(), spec.n)?);
        }
        Ok(cache[i - 1])
    };
    let mut clamp = false;
    let mut criterion = |x: f64, stop: f64, clamp: &mut bool| -> Result<f64> {
        let q = tail.exceedance(x);
        expected_waiting_time(|i| Ok(clamped(factor(i)?, q, clamp)), max_terms, stop)
    };
    let x_m = solve_decreasing(
        |x| Ok(target - criterion(x, 2.0 * target, &mut clamp)?),
        tail.tail.threshold,
        "EWT",
    )?;
    let mut clamp_final = false;
    let wait = criterion(x_m, f64::INFINITY, &mut clamp_final)?;
    let mut warnings = Vec::new();
    if trend.theta != 0.0 {
        warnings.push("trend extrapolated beyond the observed record".to_string());
    }
    if clamp_final {
        warnings.push("daily exceedance probability clamped to 1".to_string());
    }
    Ok(ReturnLevel { x_m, method: ReturnMethod::Ewt, criterion: wait, warnings })
}

pub fn return_level(method: ReturnMethod, spec: &ReturnSpec, trend: &SiteTrend, tail: &SiteTail) -> Result<ReturnLevel> {
    match method {
        ReturnMethod::Ene => return_level_ene(spec, trend, tail),
        ReturnMethod::Ewt => return_level_ewt(spec, trend, tail),
    }
}

/// Stationary latent return level `u + (σ/γ)[(n_x m φ_u)^γ − 1]`.
pub fn latent_return_level(spec: &ReturnSpec, tail: &SiteTail) -> Result<f64> {
    spec.validate()?;
    let k = spec.horizon() as f64 * tail.phi_u;
    if k < 1.0 {
        return Err(Error::Domain(format!(
            "n_x·m·φ_u = {k} < 1: the return level lies below the threshold"
        )));
    }
    let GpdTail { sigma, gamma, threshold } = tail.tail;
    Ok(if gamma.abs() < 1e-8 {
        threshold + sigma * k.ln()
    } else {
        threshold + sigma * (gamma * k.ln()).exp_m1() / gamma
    })
}

/// Observed-scale level from a latent level via the trend at `t_m`.
pub fn nonstationary_from_latent(
    z_m: f64,
    spec: &ReturnSpec,
    trend: &SiteTrend,
    gamma: f64,
    a_tilde: f64,
    b_tilde: f64,
) -> Result<(f64, Vec<String>)> {
    let c = skedasis_extrapolate(trend.family, trend.theta, spec.t_m())?;
    if !(c > 0.0) {
        return Err(Error::Domain(format!(
            "trend factor {c} at t_m = {} is not positive",
            spec.t_m()
        )));
    }
    let mut warnings = Vec::new();
    if trend.theta != 0.0 {
        warnings.push(format!("trend extrapolated to t_m = {:.4}", spec.t_m()));
    }
    Ok((observed_value(z_m, c, gamma, a_tilde, b_tilde), warnings))
}
