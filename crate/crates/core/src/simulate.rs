//! Simulation of Brown-Resnick ℓ-Pareto processes and synthetic datasets.
//!
//! Every field index draws from its own ChaCha stream, so output does not
//! depend on how the work is split across threads.

use nalgebra::{Cholesky, DMatrix, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DayStamp, SpaceTimeDataset, Station};
use crate::dependence::{increment_covariance, DependenceModel};
use crate::error::{Error, Result};
use crate::grid::{distance, LocalProjection};
use crate::risk::{RiskFunctional, RiskKind};
use crate::trend::{observed_value, rescaled_time, skedasis_eval, SkedasisFamily};

/// Diagonal jitter tried once when the increment covariance is not
/// numerically positive definite.
pub const CHOLESKY_JITTER: f64 = 1e-10;
const MIN_ACCEPTANCE: f64 = 1e-4;
const MAX_PROPOSALS_PER_FIELD: usize = 1_000_000;

/// Independent random stream for one field index.
pub fn field_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Gaussian process with stationary increments and semi-variogram `ν`,
/// anchored at the first site: `G(s₁) = 0`.
#[derive(Debug, Clone)]
pub struct GaussianIncrements {
    chol: Option<Cholesky<f64, Dyn>>,
    nu: Vec<Vec<f64>>,
    pub jitter_used: bool,
}

impl GaussianIncrements {
    pub fn new(sites: &[[f64; 2]], tau: f64, kappa: f64) -> Result<Self> {
        DependenceModel::new(tau, kappa, RiskFunctional::max(), 1.0)?;
        if sites.is_empty() {
            return Err(Error::InvalidInput("no sites to simulate".into()));
        }
        let d = sites.len();
        let nu: Vec<Vec<f64>> = (0..d)
            .map(|i| (0..d).map(|j| (distance(sites[i], sites[j]) / tau).powf(kappa)).collect())
            .collect();
        if d == 1 {
            return Ok(GaussianIncrements { chol: None, nu, jitter_used: false });
        }
        let sigma = increment_covariance(sites, tau, kappa);
        let (chol, jitter_used) = match sigma.clone().cholesky() {
            Some(c) => (c, false),
            None => {
                let jittered = sigma + DMatrix::identity(d - 1, d - 1) * CHOLESKY_JITTER;
                let c = jittered.cholesky().ok_or_else(|| {
                    Error::Numerical("increment covariance is not positive definite even with jitter".into())
                })?;
                (c, true)
            }
        };
        Ok(GaussianIncrements { chol: Some(chol), nu, jitter_used })
    }

    pub fn n_sites(&self) -> usize {
        self.nu.len()
    }

    /// One draw of `G` with `G(s₁) = 0`.
    pub fn draw(&self, rng: &mut impl Rng) -> Vec<f64> {
        let d = self.n_sites();
        let mut g = vec![0.0; d];
        if let Some(chol) = &self.chol {
            let eps: Vec<f64> = (0..d - 1).map(|_| rng.sample(StandardNormal)).collect();
            let l = chol.l();
            for i in 0..d - 1 {
                g[i + 1] = (0..=i).map(|k| l[(i, k)] * eps[k]).sum();
            }
        }
        g
    }

    /// Extremal function anchored at site `k`: `exp(G(s) − G(s_k) − ν(s − s_k))`.
    /// Equals one at `s_k`.
    pub fn extremal_function(&self, rng: &mut impl Rng, k: usize) -> Vec<f64> {
        let g = self.draw(rng);
        (0..g.len()).map(|i| (g[i] - g[k] - self.nu[i][k]).exp()).collect()
    }
}

pub fn simulate_gaussian_increments(sites: &[[f64; 2]], tau: f64, kappa: f64, seed: u64) -> Result<Vec<f64>> {
    let gi = GaussianIncrements::new(sites, tau, kappa)?;
    Ok(gi.draw(&mut field_rng(seed, 0)))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationConfig {
    /// Site coordinates in km.
    pub sites: Vec<[f64; 2]>,
    pub dep: DependenceModel,
    /// Threshold `u` of the exceedance region `ℓ(y/u) ≥ 1`.
    pub u: f64,
    pub n_fields: usize,
    pub seed: u64,
}

/// One draw `y = r₀·R·Q`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoDraw {
    /// Unit Pareto radial component.
    pub r: f64,
    /// Angular component with `‖Q‖₁ = 1`.
    pub q: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LParetoSample {
    pub draws: Vec<ParetoDraw>,
    pub proposals: usize,
    pub acceptance_rate: f64,
    pub jitter_used: bool,
}

impl LParetoSample {
    pub fn fields(&self) -> Vec<Vec<f64>> {
        self.draws.iter().map(|d| d.y.clone()).collect()
    }
}

fn unit_pareto(rng: &mut impl Rng) -> f64 {
    1.0 / (1.0 - rng.random::<f64>())
}

/// Draws from the standardized ℓ-Pareto process on `{ℓ(y/u) ≥ 1}`.
///
/// For `site(k)` the process is `u·R·V⁽ᵏ⁾` with `V⁽ᵏ⁾` the extremal function
/// anchored at `k`. Otherwise the L1 angular law is sampled exactly by
/// anchoring at a uniformly chosen site and normalizing, and `y = r₀·R·Q`
/// with `r₀ = d·u` for mean and min and `r₀ = u` for max. Mean is then exact;
/// max and min reject draws outside the region.
pub fn simulate_l_pareto(cfg: &SimulationConfig) -> Result<LParetoSample> {
    if cfg.n_fields == 0 {
        return Err(Error::InvalidInput("at least one field must be requested".into()));
    }
    if !(cfg.u > 0.0) {
        return Err(Error::InvalidInput(format!("threshold u must be positive, got {}", cfg.u)));
    }
    let d = cfg.sites.len();
    for i in 0..d {
        for j in 0..i {
            if distance(cfg.sites[i], cfg.sites[j]) == 0.0 {
                return Err(Error::InvalidInput(format!("sites {j} and {i} coincide")));
            }
        }
    }
    let ell = cfg.dep.risk;
    if let RiskKind::Site(k) = ell.kind {
        if k >= d {
            return Err(Error::InvalidInput(format!("risk site {k} out of range for {d} sites")));
        }
    }
    let gi = GaussianIncrements::new(&cfg.sites, cfg.dep.tau, cfg.dep.kappa)?;
    let u = cfg.u;
    let results: Vec<Result<(ParetoDraw, usize)>> = (0..cfg.n_fields)
        .into_par_iter()
        .map(|i| {
            let mut rng = field_rng(cfg.seed, i as u64);
            for tries in 1..=MAX_PROPOSALS_PER_FIELD {
                let r = unit_pareto(&mut rng);
                let (v, r0) = match ell.kind {
                    RiskKind::Site(k) => (gi.extremal_function(&mut rng, k), u),
                    kind => {
                        let anchor = rng.random_range(0..d);
                        let v = gi.extremal_function(&mut rng, anchor);
                        let r0 = if kind == RiskKind::Max { u } else { d as f64 * u };
                        (v, r0)
                    }
                };
                let norm: f64 = v.iter().sum();
                let q: Vec<f64> = v.iter().map(|x| x / norm).collect();
                let y: Vec<f64> = match ell.kind {
                    RiskKind::Site(_) => v.iter().map(|x| r0 * r * x).collect(),
                    _ => q.iter().map(|x| r0 * r * x).collect(),
                };
                let accept = match ell.kind {
                    RiskKind::Max | RiskKind::Min => ell.apply(&y)? / u >= 1.0,
                    _ => true,
                };
                if accept {
                    return Ok((ParetoDraw { r, q, y }, tries));
                }
            }
            Err(Error::Numerical(format!(
                "field {i}: no accepted draw in {MAX_PROPOSALS_PER_FIELD} proposals"
            )))
        })
        .collect();
    let mut draws = Vec::with_capacity(cfg.n_fields);
    let mut proposals = 0;
    for r in results {
        let (draw, tries) = r?;
        draws.push(draw);
        proposals += tries;
    }
    let acceptance_rate = cfg.n_fields as f64 / proposals as f64;
    if acceptance_rate < MIN_ACCEPTANCE {
        return Err(Error::Numerical(format!(
            "rejection sampler acceptance rate {acceptance_rate:.2e} is below {MIN_ACCEPTANCE:.0e}"
        )));
    }
    Ok(LParetoSample {
        draws,
        proposals,
        acceptance_rate,
        jitter_used: gi.jitter_used,
    })
}

/// Per-site generalized Pareto margins `a(Y^γ − 1)/γ + b` (`a·ln Y + b` at
/// `γ = 0`).
pub fn pareto_to_margin(y: f64, a: f64, b: f64, gamma: f64) -> f64 {
    if gamma.abs() < 1e-8 {
        a * y.ln() + b
    } else {
        a * (gamma * y.ln()).exp_m1() / gamma + b
    }
}

/// Parameters of the synthetic back-transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackTransform {
    pub gamma: f64,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub a_tilde: f64,
    pub b_tilde: f64,
    pub family: SkedasisFamily,
    pub theta: Vec<f64>,
}

/// Maps standardized fields to observations: margins first, then the trend
/// at rescaled day `(t + 1/2)/n` for field `t`. Results are clamped at
/// `floor` when given.
pub fn back_transform(fields: &[Vec<f64>], bt: &BackTransform, floor: Option<f64>) -> Result<Vec<Vec<f64>>> {
    let n = fields.len();
    let m = bt.a.len();
    if bt.b.len() != m || bt.theta.len() != m {
        return Err(Error::InvalidInput("back-transform parameters disagree on site count".into()));
    }
    fields
        .iter()
        .enumerate()
        .map(|(t, y)| {
            if y.len() != m {
                return Err(Error::InvalidInput(format!("field {t} has {} sites, expected {m}", y.len())));
            }
            let u = rescaled_time(t, n);
            (0..m)
                .map(|s| {
                    let w = pareto_to_margin(y[s], bt.a[s], bt.b[s], bt.gamma);
                    let c = skedasis_eval(bt.family, bt.theta[s], u)?;
                    let x = observed_value(w, c, bt.gamma, bt.a_tilde, bt.b_tilde);
                    Ok(floor.map_or(x, |f| x.max(f)))
                })
                .collect()
        })
        .collect()
}

/// Description of a synthetic non-stationary dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub stations: Vec<Station>,
    pub start_year: i32,
    pub n_years: usize,
    /// Inclusive day-of-year window laid out in every year.
    pub season: (u16, u16),
    pub gamma: f64,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub family: SkedasisFamily,
    pub theta: Vec<f64>,
    pub tau: f64,
    pub kappa: f64,
    /// Level of the max-risk threshold in Pareto units. Days whose latent
    /// field stays below 1 everywhere form the bulk of the series, so values
    /// under 1 give a dataset where extremes are the exception.
    pub u: f64,
    pub seed: u64,
    /// Observations below this value are set to it (e.g. zero rainfall).
    pub floor: Option<f64>,
}

/// Daily fields are max-Pareto draws (`max y ≥ u`) given GPD margins and
/// trend. Returns the dataset and the acceptance rate of the sampler.
pub fn synthetic_dataset(spec: &SyntheticSpec) -> Result<(SpaceTimeDataset, f64)> {
    let m = spec.stations.len();
    if spec.a.len() != m || spec.b.len() != m || spec.theta.len() != m {
        return Err(Error::InvalidInput("per-site parameters must match the station list".into()));
    }
    let (lo, hi) = spec.season;
    if lo < 1 || lo > hi || hi > 365 {
        return Err(Error::InvalidInput(format!("season window {lo}:{hi} invalid")));
    }
    let mut times = Vec::new();
    for y in 0..spec.n_years {
        for doy in lo..=hi {
            times.push(DayStamp::new(spec.start_year + y as i32, doy)?);
        }
    }
    let proj = LocalProjection::centered_on(&spec.stations);
    let cfg = SimulationConfig {
        sites: proj.project_all(&spec.stations),
        dep: DependenceModel::new(spec.tau, spec.kappa, RiskFunctional::max(), 1.0)?,
        u: spec.u,
        n_fields: times.len(),
        seed: spec.seed,
    };
    let sample = simulate_l_pareto(&cfg)?;
    let rm = RiskFunctional::max();
    let bt = BackTransform {
        gamma: spec.gamma,
        a_tilde: rm.apply(&spec.a)?,
        b_tilde: rm.apply(&spec.b)?,
        a: spec.a.clone(),
        b: spec.b.clone(),
        family: spec.family,
        theta: spec.theta.clone(),
    };
    let rows = back_transform(&sample.fields(), &bt, spec.floor)?;
    let values: Vec<f64> = rows.into_iter().flatten().collect();
    let mask = vec![false; values.len()];
    Ok((
        SpaceTimeDataset::from_parts(spec.stations.clone(), times, values, mask)?,
        sample.acceptance_rate,
    ))
}
