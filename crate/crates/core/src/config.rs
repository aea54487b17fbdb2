//! Run configuration read from a TOML document.
//!
//! Only `seed`, `output_dir` and one of `[data]` / `[synthetic]` are
//! required; every other section falls back to its defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{ColumnMapping, Station};
use crate::error::{Error, Result};
use crate::grid::BBox;
use crate::preprocess::DEFAULT_SEASON;
use crate::returns::ReturnMethod;
use crate::risk::RiskFunctional;
use crate::spatial::PhiMode;
use crate::trend::SkedasisFamily;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default)]
    pub marginal: MarginalConfig,
    #[serde(default)]
    pub trend: TrendConfig,
    #[serde(default)]
    pub dependence: DependenceConfig,
    #[serde(default)]
    pub diagnose: DiagnoseConfig,
    #[serde(default)]
    pub simulate: SimulateConfig,
    #[serde(default)]
    pub returns: ReturnsConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub stations: PathBuf,
    pub series: PathBuf,
    #[serde(default)]
    pub columns: ColumnMapping,
}

/// Synthetic data drawn from the model itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub stations: Vec<Station>,
    #[serde(default = "default_start_year")]
    pub start_year: i32,
    pub n_years: usize,
    pub gamma: f64,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub theta: Vec<f64>,
    #[serde(default)]
    pub family: SkedasisFamily,
    pub tau: f64,
    pub kappa: f64,
    #[serde(default = "default_sim_level")]
    pub u: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub floor: Option<f64>,
}

fn default_start_year() -> i32 {
    1961
}

fn default_sim_level() -> f64 {
    0.25
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub season: (u16, u16),
    pub run_length: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig { season: DEFAULT_SEASON, run_length: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarginalConfig {
    /// `max`, `min`, `mean` or `site:<station id>`.
    pub risk: String,
    pub q_ell: f64,
    pub max_refinements: usize,
    /// Refit shape and scales once on the detrended sample.
    pub refit_latent: bool,
}

impl Default for MarginalConfig {
    fn default() -> Self {
        MarginalConfig { risk: "max".into(), q_ell: 0.95, max_refinements: 50, refit_latent: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrendConfig {
    pub family: SkedasisFamily,
    /// Per-site quantile whose exceedance days feed the skedasis fit.
    pub quantile: f64,
    /// Decluster exceedance days with this run length; all days when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub run_length: Option<usize>,
}

impl Default for TrendConfig {
    fn default() -> Self {
        TrendConfig { family: SkedasisFamily::LogLinear, quantile: 0.9, run_length: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DependenceConfig {
    pub tau0: f64,
    pub kappa0: f64,
    /// Quantile above which margins use the fitted GPD when standardizing.
    pub tail_quantile: f64,
    /// Quantile of the daily `ℓ` of standardized fields used as the
    /// exceedance threshold.
    pub field_quantile: f64,
    /// Distance bin edges in km for the empirical curves.
    pub bin_edges: Vec<f64>,
}

impl Default for DependenceConfig {
    fn default() -> Self {
        DependenceConfig {
            tau0: 100.0,
            kappa0: 1.0,
            tail_quantile: 0.9,
            field_quantile: 0.95,
            bin_edges: vec![0.0, 100.0, 200.0, 300.0, 400.0, 500.0, 700.0, 1000.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnoseConfig {
    pub qq_quantile: f64,
    pub bootstrap: usize,
    pub extremogram_quantile: f64,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        DiagnoseConfig { qq_quantile: 0.865, bootstrap: 200, extremogram_quantile: 0.9 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub n_fields: usize,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig { n_fields: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReturnsConfig {
    pub periods: Vec<f64>,
    pub method: ReturnMethod,
    pub n_x: usize,
}

impl Default for ReturnsConfig {
    fn default() -> Self {
        ReturnsConfig { periods: vec![50.0, 100.0], method: ReturnMethod::Ene, n_x: 184 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub bbox: BBox,
    pub resolution: f64,
    #[serde(default = "default_phi_mode")]
    pub phi_mode: PhiMode,
    /// Neighborhood radius in degrees for per-cluster regressions; one global
    /// regression when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub neighborhood_radius: Option<f64>,
}

fn default_phi_mode() -> PhiMode {
    PhiMode::Cluster
}

fn unit_interval(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("`{name}` must lie in (0, 1), got {v}")))
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads, resolves relative paths against the file's directory, validates
    /// and checks that referenced inputs exist.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        cfg.resolve_paths(base);
        cfg.check_inputs_exist()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        if let Some(d) = &mut self.data {
            fix(&mut d.stations);
            fix(&mut d.series);
        }
    }

    pub fn check_inputs_exist(&self) -> Result<()> {
        if let Some(d) = &self.data {
            for p in [&d.stations, &d.series] {
                if !p.is_file() {
                    return Err(Error::Config(format!("input file {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    pub fn risk(&self, stations: &[Station]) -> Result<RiskFunctional> {
        parse_risk(&self.marginal.risk, stations)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.data, &self.synthetic) {
            (None, None) => return Err(Error::Config("one of `data` or `synthetic` is required".into())),
            (Some(_), Some(_)) => {
                return Err(Error::Config("`data` and `synthetic` are mutually exclusive".into()))
            }
            _ => {}
        }
        let (lo, hi) = self.preprocess.season;
        if lo < 1 || lo > hi || hi > 366 {
            return Err(Error::Config(format!("`preprocess.season` {lo}:{hi} is not a valid window")));
        }
        if self.preprocess.run_length == 0 {
            return Err(Error::Config("`preprocess.run_length` must be at least 1".into()));
        }
        unit_interval("marginal.q_ell", self.marginal.q_ell)?;
        unit_interval("trend.quantile", self.trend.quantile)?;
        unit_interval("dependence.tail_quantile", self.dependence.tail_quantile)?;
        unit_interval("dependence.field_quantile", self.dependence.field_quantile)?;
        unit_interval("diagnose.qq_quantile", self.diagnose.qq_quantile)?;
        unit_interval("diagnose.extremogram_quantile", self.diagnose.extremogram_quantile)?;
        if !(self.dependence.tau0 > 0.0) || !(self.dependence.kappa0 > 0.0 && self.dependence.kappa0 < 2.0) {
            return Err(Error::Config("`dependence.tau0` must be positive and `kappa0` in (0, 2)".into()));
        }
        let edges = &self.dependence.bin_edges;
        if edges.len() < 2 || edges.windows(2).any(|w| !(w[1] > w[0])) || edges[0] < 0.0 {
            return Err(Error::Config("`dependence.bin_edges` must be increasing and non-negative".into()));
        }
        if self.returns.periods.is_empty() || self.returns.periods.iter().any(|m| !(*m >= 1.0)) {
            return Err(Error::Config("`returns.periods` must be non-empty with every period ≥ 1".into()));
        }
        if self.returns.n_x == 0 {
            return Err(Error::Config("`returns.n_x` must be positive".into()));
        }
        if self.simulate.n_fields == 0 {
            return Err(Error::Config("`simulate.n_fields` must be positive".into()));
        }
        if let Some(g) = &self.grid {
            if !(g.resolution > 0.0) {
                return Err(Error::Config("`grid.resolution` must be positive".into()));
            }
            if !(g.bbox.lon_max > g.bbox.lon_min && g.bbox.lat_max > g.bbox.lat_min) {
                return Err(Error::Config("`grid.bbox` is empty or inverted".into()));
            }
        }
        if let Some(s) = &self.synthetic {
            let m = s.stations.len();
            if m < 2 || s.a.len() != m || s.b.len() != m || s.theta.len() != m {
                return Err(Error::Config(
                    "`synthetic` needs ≥ 2 stations and one a, b, theta per station".into(),
                ));
            }
            if s.n_years == 0 || !(s.tau > 0.0) || !(s.kappa > 0.0 && s.kappa <= 2.0) || !(s.u > 0.0) {
                return Err(Error::Config("`synthetic` n_years, tau, kappa or u out of range".into()));
            }
            for st in &s.stations {
                st.validate().map_err(|e| Error::Config(e.to_string()))?;
            }
        }
        // the risk string must parse; station ids are checked once data is loaded
        if let Some(s) = &self.synthetic {
            parse_risk(&self.marginal.risk, &s.stations)?;
        } else if !self.marginal.risk.starts_with("site:") {
            parse_risk(&self.marginal.risk, &[])?;
        }
        Ok(())
    }
}

/// Parses `max`, `min`, `mean` or `site:<station id>`.
pub fn parse_risk(text: &str, stations: &[Station]) -> Result<RiskFunctional> {
    match text.trim() {
        "max" => Ok(RiskFunctional::max()),
        "min" => Ok(RiskFunctional::min()),
        "mean" => Ok(RiskFunctional::mean()),
        other => match other.strip_prefix("site:") {
            Some(id) => stations
                .iter()
                .position(|s| s.id == id)
                .map(RiskFunctional::site)
                .ok_or_else(|| Error::Config(format!("risk functional names unknown station `{id}`"))),
            None => Err(Error::Config(format!(
                "unknown risk functional `{other}`; expected max, min, mean or site:<id>"
            ))),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 7
output_dir = "out"

[data]
stations = "stations.csv"
series = "series.csv"
"#;

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = RunConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(cfg.preprocess.season, DEFAULT_SEASON);
        assert_eq!(cfg.returns.periods, vec![50.0, 100.0]);
        assert_eq!(cfg.diagnose.qq_quantile, 0.865);
    }

    #[test]
    fn round_trip_is_identity() {
        let mut cfg = RunConfig::from_toml_str(MINIMAL).unwrap();
        cfg.grid = Some(GridConfig {
            bbox: BBox { lon_min: -5.5, lon_max: 2.5, lat_min: 9.5, lat_max: 15.0 },
            resolution: 0.25,
            phi_mode: PhiMode::ExtremogramWeighted,
            neighborhood_radius: Some(3.0),
        });
        cfg.trend.run_length = Some(2);
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn missing_key_is_named() {
        let err = RunConfig::from_toml_str("output_dir = \"x\"\n[data]\nstations = \"a\"\nseries = \"b\"\n").unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn unknown_key_and_bad_values_rejected() {
        assert!(RunConfig::from_toml_str(&format!("{MINIMAL}\n[trend]\nquantil = 0.9\n")).is_err());
        assert!(RunConfig::from_toml_str(&format!("{MINIMAL}\n[trend]\nquantile = 1.5\n")).is_err());
        assert!(RunConfig::from_toml_str(&format!("{MINIMAL}\n[marginal]\nrisk = \"median\"\n")).is_err());
        assert!(RunConfig::from_toml_str("seed = 1\noutput_dir = \"o\"\n").is_err());
    }

    #[test]
    fn risk_strings() {
        let st = vec![Station::new("A", 0.0, 0.0).unwrap(), Station::new("B", 1.0, 0.0).unwrap()];
        assert_eq!(parse_risk("site:B", &st).unwrap(), RiskFunctional::site(1));
        assert!(parse_risk("site:C", &st).is_err());
        assert_eq!(parse_risk(" mean ", &st).unwrap(), RiskFunctional::mean());
    }

    #[test]
    fn missing_input_file_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, MINIMAL).unwrap();
        let err = RunConfig::load(&p).unwrap_err();
        assert!(err.to_string().contains("stations.csv"));
    }
}
