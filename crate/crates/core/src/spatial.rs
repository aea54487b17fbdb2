//! Regionalisation, coordinate regressions of the marginal parameters, and
//! return-level maps on a grid.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::Station;
use crate::dependence::DependenceModel;
use crate::error::{Error, Result};
use crate::grid::{distance, LocalProjection};
use crate::marginal::GpdTail;
use crate::returns::{latent_return_level, nonstationary_from_latent, ReturnSpec, SiteTail, SiteTrend};
use crate::stats::{ols, OlsFit};
use crate::trend::SkedasisFamily;

pub const KMEANS_MAX_ITER: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    /// Reference-station index per grid point.
    pub labels: Vec<usize>,
    pub k: usize,
    pub iterations: usize,
    pub converged: bool,
    /// Set when k-means was abandoned for nearest-station assignment.
    pub voronoi_fallback: bool,
    pub warnings: Vec<String>,
}

impl ClusterAssignment {
    pub fn sizes(&self) -> Vec<usize> {
        let mut out = vec![0; self.k];
        for &l in &self.labels {
            out[l] += 1;
        }
        out
    }

    pub fn station_ids(&self, stations: &[Station]) -> Vec<String> {
        self.labels.iter().map(|&l| stations[l].id.clone()).collect()
    }
}

fn sq_dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)
}

/// Index of the nearest centre; strict comparison keeps the lower index on ties.
fn nearest(p: (f64, f64), centres: &[(f64, f64)]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, &c) in centres.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best_d {
            best = j;
            best_d = d;
        }
    }
    best
}

pub fn voronoi_assignment(points: &[(f64, f64)], stations: &[Station]) -> Vec<usize> {
    let centres: Vec<_> = stations.iter().map(|s| (s.lon, s.lat)).collect();
    points.iter().map(|&p| nearest(p, &centres)).collect()
}

/// Lloyd's k-means in (lon, lat) degrees with one centroid per station,
/// initialised at the stations. Each final cluster is labelled by the station
/// nearest its centroid; if a cluster empties or two clusters claim the same
/// station, nearest-station assignment is used instead.
pub fn kmeans_regions(points: &[(f64, f64)], stations: &[Station]) -> Result<ClusterAssignment> {
    let k = stations.len();
    if k == 0 || points.is_empty() {
        return Err(Error::InvalidInput("k-means needs stations and grid points".into()));
    }
    let station_xy: Vec<_> = stations.iter().map(|s| (s.lon, s.lat)).collect();
    for i in 0..k {
        for j in 0..i {
            if station_xy[i] == station_xy[j] {
                return Err(Error::InvalidInput(format!(
                    "stations {} and {} share coordinates",
                    stations[j].id, stations[i].id
                )));
            }
        }
    }

    let mut centres = station_xy.clone();
    let mut assign: Vec<usize> = points.iter().map(|&p| nearest(p, &centres)).collect();
    let mut iterations = 0;
    let mut converged = false;
    let mut empty = false;
    while iterations < KMEANS_MAX_ITER {
        iterations += 1;
        let mut sums = vec![(0.0, 0.0, 0usize); k];
        for (&p, &c) in points.iter().zip(&assign) {
            sums[c].0 += p.0;
            sums[c].1 += p.1;
            sums[c].2 += 1;
        }
        empty = sums.iter().any(|s| s.2 == 0);
        for (c, s) in centres.iter_mut().zip(&sums) {
            if s.2 > 0 {
                *c = (s.0 / s.2 as f64, s.1 / s.2 as f64);
            }
        }
        let next: Vec<usize> = points.iter().map(|&p| nearest(p, &centres)).collect();
        if next == assign {
            converged = true;
            break;
        }
        assign = next;
    }
    let mut counts = vec![0usize; k];
    for &c in &assign {
        counts[c] += 1;
    }
    empty |= counts.iter().any(|&c| c == 0);

    let label_of: Vec<usize> = centres.iter().map(|&c| nearest(c, &station_xy)).collect();
    let mut seen = vec![false; k];
    let mut duplicate = false;
    for &l in &label_of {
        duplicate |= std::mem::replace(&mut seen[l], true);
    }

    let mut warnings = Vec::new();
    if !converged {
        warnings.push(format!("k-means stopped after {KMEANS_MAX_ITER} iterations without a fixpoint"));
    }
    if empty || duplicate {
        warnings.push(
            if empty { "k-means left an empty cluster" } else { "two k-means clusters share a reference station" }
                .to_string()
                + "; using nearest-station assignment",
        );
        return Ok(ClusterAssignment {
            labels: voronoi_assignment(points, stations),
            k,
            iterations,
            converged,
            voronoi_fallback: true,
            warnings,
        });
    }
    Ok(ClusterAssignment {
        labels: assign.iter().map(|&c| label_of[c]).collect(),
        k,
        iterations,
        converged,
        voronoi_fallback: false,
        warnings,
    })
}

/// Fitted marginal and trend parameters at each station.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteParameters {
    pub a_n: Vec<f64>,
    pub b_n: Vec<f64>,
    pub theta: Vec<f64>,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionSummary {
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub r_squared: f64,
    pub residuals: Vec<f64>,
}

impl From<OlsFit> for RegressionSummary {
    fn from(f: OlsFit) -> Self {
        RegressionSummary {
            coefficients: f.coefficients,
            std_errors: f.std_errors,
            r_squared: f.r_squared,
            residuals: f.residuals,
        }
    }
}

/// `a_n = a₀ + a₁·lon·lat`, `b_n = b₀ + b₁·lat² + b₂·lon·lat`,
/// `θ = θ₀ + θ₁·lon + θ₂·lat`, `γ = γ₀`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialMarginModel {
    pub a_coeffs: [f64; 2],
    pub b_coeffs: [f64; 3],
    pub theta_coeffs: [f64; 3],
    pub gamma0: f64,
    /// Station indices the regressions were fitted on.
    pub neighborhood: Vec<usize>,
    pub a_fit: RegressionSummary,
    pub b_fit: RegressionSummary,
    pub theta_fit: RegressionSummary,
}

fn a_row(lon: f64, lat: f64) -> Vec<f64> {
    vec![1.0, lon * lat]
}

fn b_row(lon: f64, lat: f64) -> Vec<f64> {
    vec![1.0, lat * lat, lon * lat]
}

fn theta_row(lon: f64, lat: f64) -> Vec<f64> {
    vec![1.0, lon, lat]
}

impl SpatialMarginModel {
    pub fn a_at(&self, lon: f64, lat: f64) -> f64 {
        self.a_coeffs[0] + self.a_coeffs[1] * lon * lat
    }

    pub fn b_at(&self, lon: f64, lat: f64) -> f64 {
        self.b_coeffs[0] + self.b_coeffs[1] * lat * lat + self.b_coeffs[2] * lon * lat
    }

    pub fn theta_at(&self, lon: f64, lat: f64) -> f64 {
        self.theta_coeffs[0] + self.theta_coeffs[1] * lon + self.theta_coeffs[2] * lat
    }
}

/// Fits the three surfaces on the stations in `neighborhood` (all when `None`).
pub fn fit_spatial_margin_model(
    params: &SiteParameters,
    stations: &[Station],
    neighborhood: Option<&[usize]>,
) -> Result<SpatialMarginModel> {
    let n = stations.len();
    if params.a_n.len() != n || params.b_n.len() != n || params.theta.len() != n {
        return Err(Error::InvalidInput(format!("site parameters do not match {n} stations")));
    }
    let idx: Vec<usize> = neighborhood.map_or_else(|| (0..n).collect(), <[usize]>::to_vec);
    if idx.iter().any(|&i| i >= n) {
        return Err(Error::InvalidInput("neighborhood index out of range".into()));
    }
    if idx.len() < 4 {
        return Err(Error::InsufficientData(format!(
            "{} stations for the spatial regressions, at least 4 needed",
            idx.len()
        )));
    }
    let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
    let design = |row: fn(f64, f64) -> Vec<f64>| {
        idx.iter().map(|&i| row(stations[i].lon, stations[i].lat)).collect::<Vec<_>>()
    };
    let a_fit = ols(&design(a_row), &pick(&params.a_n))?;
    let b_fit = ols(&design(b_row), &pick(&params.b_n))?;
    let t_fit = ols(&design(theta_row), &pick(&params.theta))?;
    Ok(SpatialMarginModel {
        a_coeffs: [a_fit.coefficients[0], a_fit.coefficients[1]],
        b_coeffs: [b_fit.coefficients[0], b_fit.coefficients[1], b_fit.coefficients[2]],
        theta_coeffs: [t_fit.coefficients[0], t_fit.coefficients[1], t_fit.coefficients[2]],
        gamma0: params.gamma,
        neighborhood: idx,
        a_fit: a_fit.into(),
        b_fit: b_fit.into(),
        theta_fit: t_fit.into(),
    })
}

/// Stations within `radius` degrees of station `s0`, itself included.
pub fn neighborhood(stations: &[Station], s0: usize, radius: f64) -> Vec<usize> {
    let c = (stations[s0].lon, stations[s0].lat);
    (0..stations.len())
        .filter(|&j| sq_dist(c, (stations[j].lon, stations[j].lat)).sqrt() <= radius)
        .collect()
}

/// One regression per cluster, each on the neighborhood of its reference station.
pub fn fit_per_cluster(params: &SiteParameters, stations: &[Station], radius: f64) -> Result<Vec<SpatialMarginModel>> {
    (0..stations.len())
        .map(|s0| {
            let nb = neighborhood(stations, s0, radius);
            fit_spatial_margin_model(params, stations, Some(&nb)).map_err(|e| match e {
                Error::InsufficientData(m) => {
                    Error::InsufficientData(format!("neighborhood of {}: {m}", stations[s0].id))
                }
                other => other,
            })
        })
        .collect()
}

/// How `φ_u` is carried from stations to grid points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhiMode {
    /// The cluster's reference-station value.
    Cluster,
    /// Average of station values weighted by the model extremogram between
    /// the point and each station. One reading of how dependence enters maps.
    ExtremogramWeighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridParameters {
    pub lon: f64,
    pub lat: f64,
    pub cluster: usize,
    pub a_n: f64,
    pub b_n: f64,
    pub theta: f64,
    pub gamma: f64,
    pub phi_u: f64,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPrediction {
    pub points: Vec<GridParameters>,
    pub n_invalid: usize,
}

/// Evaluates the surfaces at each grid point. `per_cluster`, when given,
/// holds one model per station and replaces the global model inside that
/// station's cluster. `dep` is required for [`PhiMode::ExtremogramWeighted`].
pub fn predict_at_grid(
    global: &SpatialMarginModel,
    per_cluster: Option<&[SpatialMarginModel]>,
    points: &[(f64, f64)],
    clusters: &ClusterAssignment,
    stations: &[Station],
    phi_station: &[f64],
    phi_mode: PhiMode,
    dep: Option<&DependenceModel>,
) -> Result<GridPrediction> {
    if clusters.labels.len() != points.len() {
        return Err(Error::InvalidInput("cluster assignment does not match the grid".into()));
    }
    if phi_station.len() != stations.len() {
        return Err(Error::InvalidInput("one φ_u per station required".into()));
    }
    if let Some(pc) = per_cluster {
        if pc.len() != stations.len() {
            return Err(Error::InvalidInput("one per-cluster model per station required".into()));
        }
    }
    let proj = LocalProjection::centered_on(stations);
    let station_km = proj.project_all(stations);
    let dep = match (phi_mode, dep) {
        (PhiMode::ExtremogramWeighted, None) => {
            return Err(Error::InvalidInput("extremogram-weighted φ_u needs a dependence model".into()))
        }
        (_, d) => d,
    };
    let out: Vec<GridParameters> = points
        .par_iter()
        .zip(clusters.labels.par_iter())
        .map(|(&(lon, lat), &cluster)| {
            let model = per_cluster.map_or(global, |pc| &pc[cluster]);
            let phi_u = match phi_mode {
                PhiMode::Cluster => phi_station[cluster],
                PhiMode::ExtremogramWeighted => {
                    let dep = dep.expect("checked above");
                    let here = proj.project(lon, lat);
                    let (num, den) = station_km.iter().zip(phi_station).fold((0.0, 0.0), |(n, d), (s, phi)| {
                        let w = dep.extremogram(distance(here, *s));
                        (n + w * phi, d + w)
                    });
                    if den > 0.0 {
                        num / den
                    } else {
                        phi_station[cluster]
                    }
                }
            };
            let a_n = model.a_at(lon, lat);
            GridParameters {
                lon,
                lat,
                cluster,
                a_n,
                b_n: model.b_at(lon, lat),
                theta: model.theta_at(lon, lat),
                gamma: model.gamma0,
                phi_u,
                valid: a_n > 0.0 && a_n.is_finite(),
            }
        })
        .collect();
    let n_invalid = out.iter().filter(|p| !p.valid).count();
    Ok(GridPrediction { points: out, n_invalid })
}

/// Inputs shared by every map point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapSettings {
    pub family: SkedasisFamily,
    pub a_tilde: f64,
    pub b_tilde: f64,
    pub n_x: usize,
    /// Record length in days.
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapPoint {
    pub params: GridParameters,
    /// `(m, z_m, x_m)`; empty for invalid points.
    pub levels: Vec<(f64, f64, f64)>,
    pub warnings: Vec<String>,
}

/// Latent and observed return level at one parameter set.
pub fn point_return_level(p: &GridParameters, m: f64, settings: &MapSettings) -> Result<(f64, f64, Vec<String>)> {
    let spec = ReturnSpec::new(m, settings.n_x, settings.n)?;
    let tail = SiteTail::new(GpdTail::new(p.a_n, p.gamma, p.b_n)?, p.phi_u)?;
    let z_m = latent_return_level(&spec, &tail)?;
    let trend = SiteTrend { family: settings.family, theta: p.theta };
    let (x_m, warnings) = nonstationary_from_latent(z_m, &spec, &trend, p.gamma, settings.a_tilde, settings.b_tilde)?;
    Ok((z_m, x_m, warnings))
}

/// Return levels for each period in `periods` at every valid grid point.
/// A failure at one point is recorded in its warnings and leaves its levels
/// empty.
pub fn return_level_map(pred: &GridPrediction, periods: &[f64], settings: &MapSettings) -> Result<Vec<MapPoint>> {
    if periods.is_empty() {
        return Err(Error::InvalidInput("no return periods requested".into()));
    }
    ReturnSpec::new(1.0, settings.n_x, settings.n)?;
    Ok(pred
        .points
        .par_iter()
        .map(|p| {
            let mut warnings = Vec::new();
            let mut levels = Vec::new();
            if !p.valid {
                warnings.push(format!("predicted a_n = {} is not positive", p.a_n));
            } else {
                for &m in periods {
                    match point_return_level(p, m, settings) {
                        Ok((z, x, w)) => {
                            levels.push((m, z, x));
                            for msg in w {
                                if !warnings.contains(&msg) {
                                    warnings.push(msg);
                                }
                            }
                        }
                        Err(e) => {
                            levels.clear();
                            warnings.push(format!("m = {m}: {e}"));
                            break;
                        }
                    }
                }
            }
            MapPoint { params: p.clone(), levels, warnings }
        })
        .collect())
}

fn period_key(m: f64) -> String {
    if m.fract() == 0.0 {
        format!("x_m_{}", m as i64)
    } else {
        format!("x_m_{m}")
    }
}

fn properties(p: &MapPoint, stations: &[Station], periods: &[f64]) -> BTreeMap<String, Value> {
    let mut props = BTreeMap::new();
    props.insert("a_n".into(), json!(p.params.a_n));
    props.insert("b_n".into(), json!(p.params.b_n));
    props.insert("theta".into(), json!(p.params.theta));
    props.insert("gamma".into(), json!(p.params.gamma));
    props.insert("phi_u".into(), json!(p.params.phi_u));
    props.insert("cluster".into(), json!(stations[p.params.cluster].id));
    props.insert("valid".into(), json!(p.params.valid));
    for &m in periods {
        let v = p.levels.iter().find(|l| l.0 == m).map(|l| l.2);
        props.insert(period_key(m), v.map_or(Value::Null, |x| json!(x)));
    }
    props.insert("warnings".into(), json!(p.warnings));
    props
}

pub fn map_geojson(map: &[MapPoint], stations: &[Station], periods: &[f64]) -> Result<String> {
    let pts: Vec<_> = map.iter().map(|p| (p.params.lon, p.params.lat)).collect();
    let props: Vec<_> = map.iter().map(|p| properties(p, stations, periods)).collect();
    crate::grid::geojson_string(&pts, &props)
}

pub fn map_csv(map: &[MapPoint], stations: &[Station], periods: &[f64]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["lon", "lat", "cluster", "a_n", "b_n", "theta", "gamma", "phi_u", "valid"]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
    header.extend(periods.iter().map(|&m| period_key(m)));
    header.push("warnings".into());
    w.write_record(&header).map_err(csv_err)?;
    for p in map {
        let g = &p.params;
        let mut rec = vec![
            g.lon.to_string(),
            g.lat.to_string(),
            stations[g.cluster].id.clone(),
            g.a_n.to_string(),
            g.b_n.to_string(),
            g.theta.to_string(),
            g.gamma.to_string(),
            g.phi_u.to_string(),
            g.valid.to_string(),
        ];
        for &m in periods {
            rec.push(p.levels.iter().find(|l| l.0 == m).map_or(String::new(), |l| l.2.to_string()));
        }
        rec.push(p.warnings.join("; "));
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Numerical(format!("csv buffer: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Numerical(format!("csv encoding: {e}")))
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidInput(format!("csv: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, BBox};
    use crate::risk::RiskFunctional;
    use crate::trend::{latent_value, skedasis_extrapolate};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn burkina() -> Vec<Station> {
        [
            ("DORI", -0.03, 14.03),
            ("OUAHIGOUYA", -2.43, 13.58),
            ("OUAGADOUGOU", -1.52, 12.35),
            ("FADA", 0.37, 12.07),
            ("BOBO", -4.32, 11.17),
            ("GAOUA", -3.18, 10.33),
            ("PO", -1.15, 11.17),
            ("DEDOUGOU", -3.48, 12.47),
            ("BOROMO", -2.93, 11.75),
            ("BOGANDE", -0.13, 12.98),
        ]
        .iter()
        .map(|(id, lon, lat)| Station::new(*id, *lon, *lat).unwrap())
        .collect()
    }

    fn bf_grid() -> Vec<(f64, f64)> {
        build_grid(BBox { lon_min: -5.5, lon_max: 2.5, lat_min: 9.5, lat_max: 15.0 }, 0.25)
            .unwrap()
            .points
    }

    #[test]
    fn station_points_keep_their_station() {
        let st = burkina();
        let pts: Vec<_> = st.iter().map(|s| (s.lon, s.lat)).collect();
        let a = kmeans_regions(&pts, &st).unwrap();
        assert_eq!(a.labels, (0..st.len()).collect::<Vec<_>>());
        assert!(a.converged && !a.voronoi_fallback);
    }

    #[test]
    fn bisector_tie_goes_to_lower_index() {
        let st = vec![Station::new("A", 0.0, 0.0).unwrap(), Station::new("B", 2.0, 0.0).unwrap()];
        assert_eq!(voronoi_assignment(&[(1.0, 5.0), (1.0, -3.0)], &st), vec![0, 0]);
        // symmetric grid: centroids stay mirror images, so the bisector column ties
        let pts: Vec<_> = (0..=4).flat_map(|i| (0..=2).map(move |j| (i as f64 * 0.5, j as f64))).collect();
        let a = kmeans_regions(&pts, &st).unwrap();
        for (p, l) in pts.iter().zip(&a.labels) {
            if p.0 == 1.0 {
                assert_eq!(*l, 0);
            }
        }
        assert_eq!(a.labels, voronoi_assignment(&pts, &st));
    }

    #[test]
    fn burkina_regions_are_nonempty_and_deterministic() {
        let st = burkina();
        let g = bf_grid();
        let a = kmeans_regions(&g, &st).unwrap();
        let b = kmeans_regions(&g, &st).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.labels.len(), g.len());
        assert!(a.sizes().iter().all(|&c| c > 0), "{:?}", a.sizes());
    }

    #[test]
    fn duplicate_stations_rejected() {
        let st = vec![Station::new("A", 0.0, 0.0).unwrap(), Station::new("B", 0.0, 0.0).unwrap()];
        assert!(kmeans_regions(&[(0.0, 0.0)], &st).is_err());
    }

    fn exact_params(st: &[Station]) -> SiteParameters {
        SiteParameters {
            a_n: st.iter().map(|s| 12.0 + 0.05 * s.lon * s.lat).collect(),
            b_n: st.iter().map(|s| 30.0 + 0.08 * s.lat * s.lat - 0.1 * s.lon * s.lat).collect(),
            theta: st.iter().map(|s| 0.3 + 0.2 * s.lon - 0.1 * (s.lat - 12.0)).collect(),
            gamma: 0.1,
        }
    }

    #[test]
    fn exact_surfaces_are_recovered() {
        let st = burkina();
        let m = fit_spatial_margin_model(&exact_params(&st), &st, None).unwrap();
        assert!((m.a_coeffs[0] - 12.0).abs() < 1e-9 && (m.a_coeffs[1] - 0.05).abs() < 1e-10);
        assert!((m.b_coeffs[0] - 30.0).abs() < 1e-8);
        assert!((m.b_coeffs[1] - 0.08).abs() < 1e-10 && (m.b_coeffs[2] + 0.1).abs() < 1e-10);
        assert!((m.theta_coeffs[0] - 1.5).abs() < 1e-9 && (m.theta_coeffs[1] - 0.2).abs() < 1e-10);
        assert!((m.theta_coeffs[2] + 0.1).abs() < 1e-10);
        for f in [&m.a_fit, &m.b_fit, &m.theta_fit] {
            assert!(f.residuals.iter().sum::<f64>().abs() < 1e-10);
        }
    }

    #[test]
    fn constant_parameters_have_zero_slopes() {
        let st = burkina();
        let p = SiteParameters { a_n: vec![10.0; 10], b_n: vec![40.0; 10], theta: vec![0.0; 10], gamma: 0.1 };
        let m = fit_spatial_margin_model(&p, &st, None).unwrap();
        assert!(m.a_coeffs[1].abs() < 1e-12);
        assert!(m.b_coeffs[1].abs() < 1e-12 && m.b_coeffs[2].abs() < 1e-12);
        assert!(m.theta_coeffs[1].abs() < 1e-12 && m.theta_coeffs[2].abs() < 1e-12);
    }

    #[test]
    fn noisy_plane_within_two_standard_errors() {
        let st = burkina();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise = Normal::new(0.0, 0.05).unwrap();
        let mut p = exact_params(&st);
        for t in &mut p.theta {
            *t += noise.sample(&mut rng);
        }
        let m = fit_spatial_margin_model(&p, &st, None).unwrap();
        let truth = [1.5, 0.2, -0.1];
        for i in 0..3 {
            assert!((m.theta_coeffs[i] - truth[i]).abs() < 2.0 * m.theta_fit.std_errors[i] + 1e-12);
        }
        // residuals sum to zero with an intercept
        assert!(m.theta_fit.residuals.iter().sum::<f64>().abs() < 1e-10);
    }

    #[test]
    fn collinear_design_is_an_error() {
        let st: Vec<_> = (0..6).map(|i| Station::new(&format!("S{i}"), i as f64, 10.0).unwrap()).collect();
        let p = SiteParameters { a_n: vec![10.0; 6], b_n: vec![40.0; 6], theta: vec![0.0; 6], gamma: 0.1 };
        // lat constant: lat² duplicates the intercept
        assert!(fit_spatial_margin_model(&p, &st, None).is_err());
        assert!(fit_spatial_margin_model(&p, &st[..3], None).is_err());
    }

    fn settings() -> MapSettings {
        MapSettings { family: SkedasisFamily::LogLinear, a_tilde: 12.0, b_tilde: 45.0, n_x: 184, n: 60 * 184 }
    }

    #[test]
    fn station_points_get_station_parameters_and_levels() {
        let st = burkina();
        let params = exact_params(&st);
        let model = fit_spatial_margin_model(&params, &st, None).unwrap();
        let pts: Vec<_> = st.iter().map(|s| (s.lon, s.lat)).collect();
        let clusters = kmeans_regions(&pts, &st).unwrap();
        let phi: Vec<f64> = (0..10).map(|i| 0.01 + 0.001 * i as f64).collect();
        let pred = predict_at_grid(&model, None, &pts, &clusters, &st, &phi, PhiMode::Cluster, None).unwrap();
        assert_eq!(pred.n_invalid, 0);
        let map = return_level_map(&pred, &[50.0, 100.0], &settings()).unwrap();
        for (s, p) in map.iter().enumerate() {
            assert!((p.params.a_n - params.a_n[s]).abs() < 1e-9);
            assert!((p.params.theta - params.theta[s]).abs() < 1e-9);
            // pointwise oracle: closed-form GPD level, then the inverse of the latent map
            let k = 184.0 * 50.0 * phi[s];
            let z = params.b_n[s] + params.a_n[s] * (k.powf(0.1) - 1.0) / 0.1;
            let c = skedasis_extrapolate(SkedasisFamily::LogLinear, params.theta[s], 1.0 + 50.0 / 60.0).unwrap();
            let (_, z_m, x_m) = p.levels[0];
            assert!((z_m - z).abs() < 1e-6 * z.abs());
            assert!((latent_value(x_m, c, 0.1, 12.0, 45.0) - z).abs() < 1e-6 * z.abs());
            assert!(p.levels[1].2 > x_m);
        }
    }

    #[test]
    fn uniform_parameters_give_constant_map() {
        let st = burkina();
        let p = SiteParameters { a_n: vec![10.0; 10], b_n: vec![40.0; 10], theta: vec![0.4; 10], gamma: 0.1 };
        let model = fit_spatial_margin_model(&p, &st, None).unwrap();
        let g = bf_grid();
        let clusters = kmeans_regions(&g, &st).unwrap();
        let pred = predict_at_grid(&model, None, &g, &clusters, &st, &[0.02; 10], PhiMode::Cluster, None).unwrap();
        let map = return_level_map(&pred, &[50.0, 100.0], &settings()).unwrap();
        let x0 = map[0].levels[0].2;
        for p in &map {
            assert!((p.levels[0].2 - x0).abs() < 1e-9 * x0);
            assert!(p.levels[1].2 >= p.levels[0].2);
        }
    }

    #[test]
    fn theta_sign_splits_the_map() {
        let st = burkina();
        let model = fit_spatial_margin_model(&exact_params(&st), &st, None).unwrap();
        let g = bf_grid();
        let clusters = kmeans_regions(&g, &st).unwrap();
        let pred = predict_at_grid(&model, None, &g, &clusters, &st, &[0.02; 10], PhiMode::Cluster, None).unwrap();
        let up = pred.points.iter().filter(|p| p.theta > 0.0).count();
        assert!(up > 0 && up < g.len());
    }

    #[test]
    fn negative_scale_flags_points() {
        let st = burkina();
        let p = SiteParameters {
            a_n: st.iter().map(|s| 1.0 + 0.2 * s.lon * s.lat).collect(),
            b_n: vec![40.0; 10],
            theta: vec![0.0; 10],
            gamma: 0.1,
        };
        let model = fit_spatial_margin_model(&p, &st, None).unwrap();
        let g = bf_grid();
        let clusters = kmeans_regions(&g, &st).unwrap();
        let pred = predict_at_grid(&model, None, &g, &clusters, &st, &[0.02; 10], PhiMode::Cluster, None).unwrap();
        assert!(pred.n_invalid > 0);
        let map = return_level_map(&pred, &[50.0], &settings()).unwrap();
        assert!(map.iter().filter(|p| !p.params.valid).all(|p| p.levels.is_empty() && !p.warnings.is_empty()));
    }

    #[test]
    fn extremogram_weighting_is_a_convex_combination() {
        let st = burkina();
        let model = fit_spatial_margin_model(&exact_params(&st), &st, None).unwrap();
        let g = bf_grid();
        let clusters = kmeans_regions(&g, &st).unwrap();
        let phi: Vec<f64> = (0..10).map(|i| 0.01 + 0.002 * i as f64).collect();
        let dep = DependenceModel::new(200.0, 1.0, RiskFunctional::max(), 1.0).unwrap();
        let pred =
            predict_at_grid(&model, None, &g, &clusters, &st, &phi, PhiMode::ExtremogramWeighted, Some(&dep)).unwrap();
        for p in &pred.points {
            assert!(p.phi_u >= 0.01 - 1e-15 && p.phi_u <= 0.028 + 1e-15);
        }
        assert!(predict_at_grid(&model, None, &g, &clusters, &st, &phi, PhiMode::ExtremogramWeighted, None).is_err());
    }

    #[test]
    fn per_cluster_models_need_four_neighbours() {
        let st = burkina();
        let p = exact_params(&st);
        assert!(fit_per_cluster(&p, &st, 1.0).is_err());
        let models = fit_per_cluster(&p, &st, 10.0).unwrap();
        assert_eq!(models.len(), 10);
        assert!((models[3].a_coeffs[1] - 0.05).abs() < 1e-9);
    }

    #[test]
    fn outputs_are_deterministic() {
        let st = burkina();
        let model = fit_spatial_margin_model(&exact_params(&st), &st, None).unwrap();
        let g = bf_grid();
        let run = || {
            let clusters = kmeans_regions(&g, &st).unwrap();
            let pred = predict_at_grid(&model, None, &g, &clusters, &st, &[0.02; 10], PhiMode::Cluster, None).unwrap();
            let map = return_level_map(&pred, &[50.0, 100.0], &settings()).unwrap();
            (map_geojson(&map, &st, &[50.0, 100.0]).unwrap(), map_csv(&map, &st, &[50.0, 100.0]).unwrap())
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert!(a.0.contains("x_m_100") && a.1.starts_with("lon,lat,cluster"));
    }
}
