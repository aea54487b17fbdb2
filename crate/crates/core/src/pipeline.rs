//! Stage orchestration shared by the CLI and the FFI: data preparation,
//! model fitting, diagnostics, simulation, return levels, maps, and the
//! hashed manifest of written artifacts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{DependenceConfig, RunConfig, TrendConfig};
use crate::data::{load_station_series, load_stations, SpaceTimeDataset, Station};
use crate::dependence::{
    empirical_extremogram, empirical_variogram, exceedance_fields, fit_dependence, standardize_margins,
    BinEstimate, DependenceFit, ExtremogramOptions,
};
use crate::error::{Error, Result};
use crate::grid::{build_grid, LocalProjection};
use crate::marginal::{daily_risk, exceedance_probability, fit_marginal, refit_on_latent, MarginalDiagnostics, MarginalModel, MarginalOptions};
use crate::preprocess::seasonal_subset;
use crate::returns::{return_level, ReturnMethod, ReturnSpec, SiteTail, SiteTrend};
use crate::risk::RiskFunctional;
use crate::simulate::{pareto_to_margin, simulate_l_pareto, synthetic_dataset, SimulationConfig, SyntheticSpec};
use crate::spatial::{
    fit_per_cluster, fit_spatial_margin_model, kmeans_regions, map_csv, map_geojson, predict_at_grid,
    return_level_map, MapPoint, MapSettings, SiteParameters,
};
use crate::stats::{quantile, quantile_sorted, sorted_finite};
use crate::trend::{fit_trend, latent_transform, TrendModel};

/// Version of the JSON model bundle; loads of other versions fail.
pub const SCHEMA_VERSION: u32 = 1;

/// Season-restricted observations named by the config, either loaded or
/// simulated.
pub fn prepare_data(cfg: &RunConfig) -> Result<SpaceTimeDataset> {
    let ds = match (&cfg.data, &cfg.synthetic) {
        (Some(d), _) => {
            let stations = load_stations(&d.stations)?;
            load_station_series(&d.series, &d.columns, &stations)?.0
        }
        (None, Some(s)) => {
            let spec = SyntheticSpec {
                stations: s.stations.clone(),
                start_year: s.start_year,
                n_years: s.n_years,
                season: cfg.preprocess.season,
                gamma: s.gamma,
                a: s.a.clone(),
                b: s.b.clone(),
                family: s.family,
                theta: s.theta.clone(),
                tau: s.tau,
                kappa: s.kappa,
                u: s.u,
                seed: cfg.seed,
                floor: s.floor,
            };
            synthetic_dataset(&spec)?.0
        }
        (None, None) => return Err(Error::Config("one of `data` or `synthetic` is required".into())),
    };
    let (lo, hi) = cfg.preprocess.season;
    seasonal_subset(&ds, lo, hi)
}

/// Settings of the fitting stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSettings {
    pub risk: RiskFunctional,
    pub marginal: MarginalOptions,
    /// Refit `(γ, a_n)` once on the detrended sample, locations held fixed.
    pub refit_latent: bool,
    pub trend: TrendConfig,
    pub dependence: DependenceConfig,
}

impl FitSettings {
    pub fn from_config(cfg: &RunConfig, stations: &[Station]) -> Result<Self> {
        Ok(FitSettings {
            risk: cfg.risk(stations)?,
            marginal: MarginalOptions {
                q_ell: cfg.marginal.q_ell,
                run_length: cfg.preprocess.run_length,
                max_refinements: cfg.marginal.max_refinements,
            },
            refit_latent: cfg.marginal.refit_latent,
            trend: cfg.trend,
            dependence: cfg.dependence.clone(),
        })
    }
}

/// Everything the later stages need, serialized as one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub schema_version: u32,
    pub stations: Vec<Station>,
    pub n_days: usize,
    pub settings: FitSettings,
    pub marginal: MarginalModel,
    pub marginal_diagnostics: MarginalDiagnostics,
    /// Whether `(γ, a_n)` were refitted on the latent sample.
    pub refit_latent: bool,
    pub trend: TrendModel,
    /// Daily probability that the latent value exceeds `b_n(s)`.
    pub phi_u: Vec<f64>,
    pub dependence: DependenceFit,
    /// Threshold of the standardized exceedance fields.
    pub field_threshold: f64,
}

impl ModelBundle {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_str(text)?;
        match raw.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == SCHEMA_VERSION as u64 => {}
            Some(v) => {
                return Err(Error::Config(format!(
                    "bundle schema version {v} is not supported (expected {SCHEMA_VERSION})"
                )))
            }
            None => return Err(Error::Config("bundle has no `schema_version`".into())),
        }
        Ok(serde_json::from_value(raw)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn site_params(&self) -> SiteParameters {
        SiteParameters {
            a_n: self.marginal.a_n.clone(),
            b_n: self.marginal.b_n.clone(),
            theta: self.trend.theta_site.clone(),
            gamma: self.marginal.gamma,
        }
    }

    pub fn site_km(&self) -> Vec<[f64; 2]> {
        LocalProjection::centered_on(&self.stations).project_all(&self.stations)
    }
}

/// Per-site quantile thresholds of raw observations.
fn site_quantiles(ds: &SpaceTimeDataset, q: f64) -> Result<Vec<f64>> {
    (0..ds.n_stations())
        .map(|s| {
            quantile(&ds.column(s), q).ok_or_else(|| {
                Error::InsufficientData(format!("station `{}` has no observations", ds.stations()[s].id))
            })
        })
        .collect()
}

/// Latent sample, standardized exceedance fields and their threshold.
pub struct LatentView {
    pub latent: SpaceTimeDataset,
    pub standardized: SpaceTimeDataset,
    pub threshold: f64,
}

pub fn latent_view(ds: &SpaceTimeDataset, bundle: &ModelBundle) -> Result<LatentView> {
    let m = &bundle.marginal;
    let latent = latent_transform(ds, &bundle.trend, m.gamma, m.a_tilde, m.b_tilde)?;
    let standardized = standardize_margins(&latent, m, bundle.settings.dependence.tail_quantile)?;
    Ok(LatentView { latent, standardized, threshold: bundle.field_threshold })
}

/// Fits trend, marginal and dependence models in that order.
///
/// The trend is estimated from raw exceedance days and the margins from the
/// observations; the data are then detrended with the fitted `(γ, ã, b̃)`,
/// optionally followed by one refit of `(γ, a_n)` on the latent sample. The
/// dependence model is then fitted to standardized latent fields whose `ℓ`
/// exceeds the configured quantile.
pub fn fit_models(ds: &SpaceTimeDataset, settings: &FitSettings) -> Result<ModelBundle> {
    let thresholds = site_quantiles(ds, settings.trend.quantile)?;
    let trend = fit_trend(ds, &thresholds, settings.trend.run_length, settings.trend.family)?;

    let (mut marginal, diagnostics) = fit_marginal(ds, &settings.risk, &settings.marginal)?;
    let mut latent = latent_transform(ds, &trend, marginal.gamma, marginal.a_tilde, marginal.b_tilde)?;
    if settings.refit_latent {
        marginal = refit_on_latent(&latent, &marginal, settings.marginal.run_length)?;
        latent = latent_transform(ds, &trend, marginal.gamma, marginal.a_tilde, marginal.b_tilde)?;
    }
    let phi_u = exceedance_probability(&latent, &marginal.b_n)?;

    let dep = &settings.dependence;
    let standardized = standardize_margins(&latent, &marginal, dep.tail_quantile)?;
    let daily: Vec<f64> = daily_risk(&standardized, &settings.risk);
    let threshold = quantile(&daily, dep.field_quantile)
        .ok_or_else(|| Error::InsufficientData("no fully observed days for the dependence fit".into()))?;
    let fields = exceedance_fields(&standardized, &settings.risk, threshold);
    let sites = LocalProjection::centered_on(ds.stations()).project_all(ds.stations());
    let dependence = fit_dependence(&fields, &sites, &settings.risk, threshold, (dep.tau0, dep.kappa0))?;

    Ok(ModelBundle {
        schema_version: SCHEMA_VERSION,
        stations: ds.stations().to_vec(),
        n_days: ds.n_days(),
        settings: settings.clone(),
        marginal,
        marginal_diagnostics: diagnostics,
        refit_latent: settings.refit_latent,
        trend,
        phi_u,
        dependence,
        field_threshold: threshold,
    })
}

fn check_same_stations(ds: &SpaceTimeDataset, bundle: &ModelBundle) -> Result<()> {
    let ids = |s: &[Station]| s.iter().map(|x| x.id.clone()).collect::<Vec<_>>();
    if ids(ds.stations()) != ids(&bundle.stations) {
        return Err(Error::InvalidInput("dataset stations differ from the fitted bundle".into()));
    }
    Ok(())
}

/// Quantile-quantile pairs of one site's tail with a bootstrap envelope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QqPoint {
    pub station: String,
    pub rank: usize,
    pub probability: f64,
    pub empirical: f64,
    pub model: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub qq: Vec<QqPoint>,
    pub extremogram: Vec<(BinEstimate, f64)>,
    pub variogram: Vec<(BinEstimate, f64)>,
    pub warnings: Vec<String>,
}

/// Fraction of QQ points inside their envelope.
pub fn envelope_coverage(qq: &[QqPoint]) -> f64 {
    if qq.is_empty() {
        return f64::NAN;
    }
    qq.iter().filter(|p| p.empirical >= p.lower && p.empirical <= p.upper).count() as f64 / qq.len() as f64
}

/// Tail QQ data of each site above the local `q` quantile of its values on
/// `ℓ`-exceedance days, against the fitted GPD. The envelope holds the
/// pointwise 2.5% and 97.5% order statistics of `n_boot` GPD samples of the
/// same size.
pub fn qq_diagnostics(latent: &SpaceTimeDataset, bundle: &ModelBundle, q: f64, n_boot: usize, seed: u64) -> Result<(Vec<QqPoint>, Vec<String>)> {
    let m = &bundle.marginal;
    let ell_days: Vec<usize> = daily_risk(latent, &m.risk)
        .iter()
        .enumerate()
        .filter(|(_, r)| **r >= m.b_tilde)
        .map(|(t, _)| t)
        .collect();
    let mut out = Vec::new();
    let mut warnings = Vec::new();
    for s in 0..latent.n_stations() {
        let id = &latent.stations()[s].id;
        let vals = sorted_finite(&ell_days.iter().filter_map(|&t| latent.get(t, s)).collect::<Vec<_>>());
        if vals.len() < 10 {
            warnings.push(format!("station `{id}`: {} ℓ-exceedance values, skipped", vals.len()));
            continue;
        }
        let u = quantile_sorted(&vals, q);
        let exc: Vec<f64> = vals.iter().filter(|v| **v > u).map(|v| v - u).collect();
        if exc.len() < 5 {
            warnings.push(format!("station `{id}`: {} excesses above the local quantile, skipped", exc.len()));
            continue;
        }
        let tail = match m.tail_at(s, u) {
            Ok(t) => t,
            Err(e) => {
                warnings.push(format!("station `{id}`: {e}"));
                continue;
            }
        };
        let k = exc.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(s as u64));
        let mut boot = vec![Vec::with_capacity(n_boot); k];
        for _ in 0..n_boot {
            let mut sample: Vec<f64> = (0..k)
                .map(|_| tail.excess_quantile(rand::Rng::random::<f64>(&mut rng)))
                .collect();
            sample.sort_by(f64::total_cmp);
            for (i, v) in sample.into_iter().enumerate() {
                boot[i].push(v);
            }
        }
        for (i, e) in exc.iter().enumerate() {
            let p = (i + 1) as f64 / (k + 1) as f64;
            let env = sorted_finite(&boot[i]);
            let (lower, upper) = if env.is_empty() {
                (f64::NEG_INFINITY, f64::INFINITY)
            } else {
                (quantile_sorted(&env, 0.025), quantile_sorted(&env, 0.975))
            };
            out.push(QqPoint {
                station: id.clone(),
                rank: i + 1,
                probability: p,
                empirical: u + e,
                model: u + tail.excess_quantile(1.0 - p),
                lower: u + lower,
                upper: u + upper,
            });
        }
    }
    Ok((out, warnings))
}

/// QQ data plus empirical and model extremogram and variogram curves.
pub fn diagnose(ds: &SpaceTimeDataset, bundle: &ModelBundle, cfg: &RunConfig) -> Result<Diagnostics> {
    check_same_stations(ds, bundle)?;
    let view = latent_view(ds, bundle)?;
    let (qq, warnings) = qq_diagnostics(&view.latent, bundle, cfg.diagnose.qq_quantile, cfg.diagnose.bootstrap, cfg.seed)?;
    let sites = bundle.site_km();
    let edges = &bundle.settings.dependence.bin_edges;
    let dep = &bundle.dependence.model;
    let opts = ExtremogramOptions { q: cfg.diagnose.extremogram_quantile, ell_threshold: None, include_self: false };
    let with_model = |bins: Vec<BinEstimate>, f: &dyn Fn(f64) -> f64| {
        bins.into_iter()
            .map(|b| {
                let h = b.distance.unwrap_or(0.5 * (b.lower + b.upper));
                (b, f(h))
            })
            .collect::<Vec<_>>()
    };
    let extremogram = with_model(
        empirical_extremogram(&view.latent, &sites, edges, &bundle.marginal.risk, &opts)?,
        &|h| dep.extremogram(h),
    );
    let days: Vec<usize> = exceedance_fields(&view.standardized, &bundle.marginal.risk, view.threshold)
        .iter()
        .map(|f| f.time)
        .collect();
    let variogram = with_model(empirical_variogram(&view.standardized, &sites, edges, &days)?, &|h| dep.nu(h));
    Ok(Diagnostics { qq, extremogram, variogram, warnings })
}

/// Return levels at stations for each period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteReturnLevel {
    pub station: String,
    pub m: f64,
    pub method: ReturnMethod,
    pub x_m: Option<f64>,
    pub warnings: Vec<String>,
}

pub fn site_return_levels(
    bundle: &ModelBundle,
    periods: &[f64],
    method: ReturnMethod,
    n_x: usize,
    site: Option<&str>,
) -> Result<Vec<SiteReturnLevel>> {
    let m = &bundle.marginal;
    let idx: Vec<usize> = match site {
        Some(id) => vec![bundle
            .stations
            .iter()
            .position(|s| s.id == id)
            .ok_or_else(|| Error::InvalidInput(format!("unknown station `{id}`")))?],
        None => (0..bundle.stations.len()).collect(),
    };
    let mut out = Vec::new();
    for s in idx {
        let tail = SiteTail::new(crate::marginal::GpdTail::new(m.a_n[s], m.gamma, m.b_n[s])?, bundle.phi_u[s])?;
        let trend = SiteTrend { family: bundle.trend.family, theta: bundle.trend.theta_site[s] };
        for &period in periods {
            let spec = ReturnSpec::new(period, n_x, bundle.n_days)?;
            let station = bundle.stations[s].id.clone();
            out.push(match return_level(method, &spec, &trend, &tail) {
                Ok(r) => SiteReturnLevel { station, m: period, method, x_m: Some(r.x_m), warnings: r.warnings },
                Err(e @ (Error::Numerical(_) | Error::Domain(_))) => {
                    SiteReturnLevel { station, m: period, method, x_m: None, warnings: vec![e.to_string()] }
                }
                Err(e) => return Err(e),
            });
        }
    }
    Ok(out)
}

/// Grid return-level map.
pub fn grid_map(bundle: &ModelBundle, cfg: &RunConfig) -> Result<(Vec<MapPoint>, Vec<String>)> {
    let g = cfg
        .grid
        .as_ref()
        .ok_or_else(|| Error::Config("a `[grid]` section is required for maps".into()))?;
    let grid = build_grid(g.bbox, g.resolution)?;
    let stations = &bundle.stations;
    let clusters = kmeans_regions(&grid.points, stations)?;
    let params = bundle.site_params();
    let global = fit_spatial_margin_model(&params, stations, None)?;
    let local = g.neighborhood_radius.map(|r| fit_per_cluster(&params, stations, r)).transpose()?;
    let pred = predict_at_grid(
        &global,
        local.as_deref(),
        &grid.points,
        &clusters,
        stations,
        &bundle.phi_u,
        g.phi_mode,
        Some(&bundle.dependence.model),
    )?;
    let settings = MapSettings {
        family: bundle.trend.family,
        a_tilde: bundle.marginal.a_tilde,
        b_tilde: bundle.marginal.b_tilde,
        n_x: cfg.returns.n_x,
        n: bundle.n_days,
    };
    let mut warnings = clusters.warnings.clone();
    if pred.n_invalid > 0 {
        warnings.push(format!("{} grid points with non-positive a_n excluded", pred.n_invalid));
    }
    Ok((return_level_map(&pred, &cfg.returns.periods, &settings)?, warnings))
}

/// Fields simulated from the fitted dependence model, on the standardized
/// Pareto scale and on the latent scale of each site.
pub struct Simulated {
    pub pareto: Vec<Vec<f64>>,
    pub latent: Vec<Vec<f64>>,
    pub acceptance_rate: f64,
}

pub fn simulate_fields(bundle: &ModelBundle, n_fields: usize, seed: u64) -> Result<Simulated> {
    let cfg = SimulationConfig {
        sites: bundle.site_km(),
        dep: bundle.dependence.model.clone(),
        u: bundle.field_threshold,
        n_fields,
        seed,
    };
    let sample = simulate_l_pareto(&cfg)?;
    let m = &bundle.marginal;
    let pareto = sample.fields();
    let latent = pareto
        .iter()
        .map(|y| {
            y.iter()
                .enumerate()
                .map(|(s, v)| pareto_to_margin(*v, m.a_n[s], m.b_n[s], m.gamma))
                .collect()
        })
        .collect();
    Ok(Simulated { pareto, latent, acceptance_rate: sample.acceptance_rate })
}

fn csv_text(header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(|e| Error::InvalidInput(format!("csv: {e}")))?;
    for r in rows {
        w.write_record(&r).map_err(|e| Error::InvalidInput(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Numerical(format!("csv buffer: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Numerical(format!("csv encoding: {e}")))
}

fn strings(h: &[&str]) -> Vec<String> {
    h.iter().map(|s| s.to_string()).collect()
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

pub fn qq_csv(qq: &[QqPoint]) -> Result<String> {
    csv_text(
        &strings(&["station", "rank", "probability", "empirical", "model", "lower", "upper"]),
        qq.iter().map(|p| {
            vec![
                p.station.clone(),
                p.rank.to_string(),
                p.probability.to_string(),
                p.empirical.to_string(),
                p.model.to_string(),
                p.lower.to_string(),
                p.upper.to_string(),
            ]
        }),
    )
}

pub fn curve_csv(bins: &[(BinEstimate, f64)]) -> Result<String> {
    csv_text(
        &strings(&["lower", "upper", "distance", "n_pairs", "n_obs", "empirical", "model"]),
        bins.iter().map(|(b, model)| {
            vec![
                b.lower.to_string(),
                b.upper.to_string(),
                opt(b.distance),
                b.n_pairs.to_string(),
                b.n_obs.to_string(),
                opt(b.value),
                model.to_string(),
            ]
        }),
    )
}

pub fn returns_csv(levels: &[SiteReturnLevel]) -> Result<String> {
    csv_text(
        &strings(&["site", "m", "method", "x_m", "warnings"]),
        levels.iter().map(|r| {
            vec![r.station.clone(), r.m.to_string(), r.method.to_string(), opt(r.x_m), r.warnings.join("; ")]
        }),
    )
}

pub fn fields_csv(stations: &[Station], fields: &[Vec<f64>]) -> Result<String> {
    let mut header = vec!["field".to_string()];
    header.extend(stations.iter().map(|s| s.id.clone()));
    csv_text(
        &header,
        fields.iter().enumerate().map(|(i, f)| {
            let mut r = vec![i.to_string()];
            r.extend(f.iter().map(|v| v.to_string()));
            r
        }),
    )
}

/// Writes files inside one output directory and records their hashes.
pub struct OutputDir {
    root: PathBuf,
    written: BTreeMap<String, String>,
}

impl OutputDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(OutputDir { root, written: BTreeMap::new() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Writes `name` (a plain file name) under the root.
    pub fn write(&mut self, name: &str, contents: &str) -> Result<PathBuf> {
        if name.contains(['/', '\\']) || name == ".." || name.is_empty() {
            return Err(Error::InvalidInput(format!("output name `{name}` must be a plain file name")));
        }
        let path = self.root.join(name);
        std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        self.written.insert(name.to_string(), sha256_hex(contents.as_bytes()));
        Ok(path)
    }

    pub fn hashes(&self) -> &BTreeMap<String, String> {
        &self.written
    }

    /// Writes `manifest.json` listing every file written so far.
    pub fn write_manifest(&mut self) -> Result<Manifest> {
        let manifest = Manifest { schema_version: SCHEMA_VERSION, files: self.written.clone() };
        let text = serde_json::to_string_pretty(&manifest)?;
        let path = self.root.join(MANIFEST_NAME);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    /// File name to SHA-256 hex digest.
    pub files: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Stage names used in pipeline errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Data,
    Fit,
    Diagnose,
    Simulate,
    Returns,
    Map,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Data => "data",
            Stage::Fit => "fit",
            Stage::Diagnose => "diagnose",
            Stage::Simulate => "simulate",
            Stage::Returns => "returns",
            Stage::Map => "map",
        })
    }
}

/// An error tagged with the stage that raised it.
#[derive(Debug, thiserror::Error)]
#[error("stage `{stage}` failed: {source}")]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

impl StageError {
    pub fn exit_code(&self) -> i32 {
        self.source.exit_code()
    }
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, StageError> {
        self.map_err(|source| StageError { stage, source })
    }
}

pub fn write_fit(out: &mut OutputDir, bundle: &ModelBundle) -> Result<()> {
    out.write("bundle.json", &bundle.to_json()?)?;
    Ok(())
}

pub fn write_diagnostics(out: &mut OutputDir, d: &Diagnostics) -> Result<()> {
    out.write("qq.csv", &qq_csv(&d.qq)?)?;
    out.write("extremogram.csv", &curve_csv(&d.extremogram)?)?;
    out.write("variogram.csv", &curve_csv(&d.variogram)?)?;
    Ok(())
}

pub fn write_simulation(out: &mut OutputDir, stations: &[Station], sim: &Simulated) -> Result<()> {
    out.write("simulated_pareto.csv", &fields_csv(stations, &sim.pareto)?)?;
    out.write("simulated_latent.csv", &fields_csv(stations, &sim.latent)?)?;
    Ok(())
}

pub fn write_map(out: &mut OutputDir, map: &[MapPoint], stations: &[Station], periods: &[f64]) -> Result<()> {
    out.write("map.geojson", &map_geojson(map, stations, periods)?)?;
    out.write("map.csv", &map_csv(map, stations, periods)?)?;
    Ok(())
}

/// Summary of a full run.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub bundle: ModelBundle,
    pub manifest: Manifest,
    pub warnings: Vec<String>,
}

/// fit → diagnose → simulate → returns → map, then the manifest.
pub fn run_pipeline(cfg: &RunConfig) -> std::result::Result<PipelineRun, StageError> {
    let ds = prepare_data(cfg).at(Stage::Data)?;
    let mut out = OutputDir::create(&cfg.output_dir).at(Stage::Data)?;
    let settings = FitSettings::from_config(cfg, ds.stations()).at(Stage::Fit)?;
    let bundle = fit_models(&ds, &settings).at(Stage::Fit)?;
    write_fit(&mut out, &bundle).at(Stage::Fit)?;

    let diag = diagnose(&ds, &bundle, cfg).at(Stage::Diagnose)?;
    write_diagnostics(&mut out, &diag).at(Stage::Diagnose)?;
    let mut warnings = diag.warnings;

    let sim = simulate_fields(&bundle, cfg.simulate.n_fields, cfg.seed).at(Stage::Simulate)?;
    write_simulation(&mut out, &bundle.stations, &sim).at(Stage::Simulate)?;

    let levels = site_return_levels(&bundle, &cfg.returns.periods, cfg.returns.method, cfg.returns.n_x, None)
        .at(Stage::Returns)?;
    out.write("returns.csv", &returns_csv(&levels).at(Stage::Returns)?).at(Stage::Returns)?;

    if cfg.grid.is_some() {
        let (map, w) = grid_map(&bundle, cfg).at(Stage::Map)?;
        write_map(&mut out, &map, &bundle.stations, &cfg.returns.periods).at(Stage::Map)?;
        warnings.extend(w);
    }
    let manifest = out.write_manifest().at(Stage::Map)?;
    Ok(PipelineRun { bundle, manifest, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schema_version_is_enforced() {
        let err = ModelBundle::from_json(r#"{"schema_version": 99}"#).unwrap_err();
        assert!(err.to_string().contains("99"));
        assert!(ModelBundle::from_json("{}").is_err());
    }

    #[test]
    fn output_names_stay_inside_root() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = OutputDir::create(dir.path()).unwrap();
        assert!(out.write("../escape.txt", "x").is_err());
        assert!(out.write("sub/file.txt", "x").is_err());
        out.write("a.txt", "abc").unwrap();
        assert_eq!(
            out.hashes()["a.txt"],
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        let m = out.write_manifest().unwrap();
        assert_eq!(m.files.len(), 1);
        assert!(dir.path().join(MANIFEST_NAME).is_file());
    }

    #[test]
    fn coverage_counts_inside_points() {
        let p = |e: f64| QqPoint {
            station: "A".into(),
            rank: 1,
            probability: 0.5,
            empirical: e,
            model: 1.0,
            lower: 0.0,
            upper: 2.0,
        };
        assert_eq!(envelope_coverage(&[p(1.0), p(3.0)]), 0.5);
    }
}
