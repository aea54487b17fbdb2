//! Regular prediction lattices, GeoJSON export, and the local projection used
//! for kilometre distances.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::Station;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub lon_min: f64,
    pub lon_max: f64,
    pub lat_min: f64,
    pub lat_max: f64,
}

impl BBox {
    pub fn contains(&self, lon: f64, lat: f64) -> bool {
        (self.lon_min..=self.lon_max).contains(&lon) && (self.lat_min..=self.lat_max).contains(&lat)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDomain {
    pub points: Vec<(f64, f64)>,
    pub resolution: f64,
    pub bbox: BBox,
    /// Station id each point is assigned to, once clustering has run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster_of: Option<Vec<String>>,
}

// Absorbs representation error in spans like 8.5 / 0.25.
const LATTICE_EPS: f64 = 1e-9;

fn steps(span: f64, resolution: f64) -> usize {
    (span / resolution + LATTICE_EPS).floor() as usize
}

/// Lattice from the lower-left corner of `bbox` in steps of `resolution`
/// degrees, longitude varying fastest. Holds
/// `(⌊Δlon/res⌋ + 1)·(⌊Δlat/res⌋ + 1)` points.
pub fn build_grid(bbox: BBox, resolution: f64) -> Result<GridDomain> {
    if !(resolution > 0.0) || !resolution.is_finite() {
        return Err(Error::InvalidInput(format!(
            "grid resolution must be positive, got {resolution}"
        )));
    }
    if !(bbox.lon_max > bbox.lon_min) || !(bbox.lat_max > bbox.lat_min) {
        return Err(Error::InvalidInput(format!(
            "degenerate or inverted bounding box {bbox:?}"
        )));
    }
    let nx = steps(bbox.lon_max - bbox.lon_min, resolution) + 1;
    let ny = steps(bbox.lat_max - bbox.lat_min, resolution) + 1;
    let mut points = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        let lat = (bbox.lat_min + j as f64 * resolution).min(bbox.lat_max);
        for i in 0..nx {
            let lon = (bbox.lon_min + i as f64 * resolution).min(bbox.lon_max);
            points.push((lon, lat));
        }
    }
    Ok(GridDomain {
        points,
        resolution,
        bbox,
        cluster_of: None,
    })
}

/// Writes points as a GeoJSON `FeatureCollection`, one property bag per point.
pub fn write_geojson(
    path: impl AsRef<Path>,
    points: &[(f64, f64)],
    properties: &[BTreeMap<String, Value>],
) -> Result<()> {
    let path = path.as_ref();
    let text = geojson_string(points, properties)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn geojson_string(points: &[(f64, f64)], properties: &[BTreeMap<String, Value>]) -> Result<String> {
    if points.len() != properties.len() {
        return Err(Error::InvalidInput(format!(
            "{} points but {} property bags",
            points.len(),
            properties.len()
        )));
    }
    let features: Vec<Value> = points
        .iter()
        .zip(properties)
        .map(|(&(lon, lat), props)| {
            json!({
                "type": "Feature",
                "geometry": { "type": "Point", "coordinates": [lon, lat] },
                "properties": props,
            })
        })
        .collect();
    let doc = json!({ "type": "FeatureCollection", "features": features });
    Ok(serde_json::to_string_pretty(&doc)?)
}

const EARTH_RADIUS_KM: f64 = 6371.0;

/// Equirectangular projection about a reference point, in kilometres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalProjection {
    pub lon0: f64,
    pub lat0: f64,
}

impl LocalProjection {
    pub fn centered_on(stations: &[Station]) -> Self {
        let n = stations.len().max(1) as f64;
        LocalProjection {
            lon0: stations.iter().map(|s| s.lon).sum::<f64>() / n,
            lat0: stations.iter().map(|s| s.lat).sum::<f64>() / n,
        }
    }

    pub fn project(&self, lon: f64, lat: f64) -> [f64; 2] {
        let k = EARTH_RADIUS_KM * std::f64::consts::PI / 180.0;
        [
            k * (lon - self.lon0) * self.lat0.to_radians().cos(),
            k * (lat - self.lat0),
        ]
    }

    pub fn project_all(&self, stations: &[Station]) -> Vec<[f64; 2]> {
        stations.iter().map(|s| self.project(s.lon, s.lat)).collect()
    }
}

pub fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}
