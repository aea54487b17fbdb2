//! Seasonal windowing and runs declustering.

use serde::{Deserialize, Serialize};

use crate::data::SpaceTimeDataset;
use crate::error::{Error, Result};

/// May 1 to October 31 in a non-leap year.
pub const DEFAULT_SEASON: (u16, u16) = (121, 304);

/// Keeps the days whose day-of-year lies in `[start_doy, end_doy]`.
pub fn seasonal_subset(ds: &SpaceTimeDataset, start_doy: u16, end_doy: u16) -> Result<SpaceTimeDataset> {
    if start_doy < 1 || start_doy > end_doy || end_doy > 366 {
        return Err(Error::InvalidInput(format!(
            "season window {start_doy}:{end_doy} must satisfy 1 <= start <= end <= 366"
        )));
    }
    let out = ds.select_days(|_, d| (start_doy..=end_doy).contains(&d.doy))?;
    if out.n_days() == 0 {
        return Err(Error::InsufficientData(format!(
            "no days fall in the season window {start_doy}:{end_doy}"
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub time: usize,
    pub station: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeclusterResult {
    pub cluster_peaks: Vec<Peak>,
    pub run_length: usize,
    pub threshold_used: Vec<f64>,
}

impl DeclusterResult {
    pub fn peaks_at(&self, station: usize) -> impl Iterator<Item = &Peak> + '_ {
        self.cluster_peaks.iter().filter(move |p| p.station == station)
    }
}

/// Runs declustering of one series. `NaN` days count as non-exceedances.
///
/// A cluster ends once more than `r` consecutive days fail to exceed
/// `threshold`; each cluster contributes its maximum (earliest on ties).
/// Returns `(day index, value)` pairs.
pub fn decluster_series(series: &[f64], threshold: f64, r: usize) -> Vec<(usize, f64)> {
    let mut peaks = Vec::new();
    let mut current: Option<(usize, f64)> = None;
    let mut gap = 0usize;
    for (t, &v) in series.iter().enumerate() {
        if v > threshold {
            match current {
                Some((_, best)) if v <= best => {}
                _ => current = Some((t, v)),
            }
            gap = 0;
        } else if let Some(peak) = current {
            gap += 1;
            if gap > r {
                peaks.push(peak);
                current = None;
            }
        }
    }
    peaks.extend(current);
    peaks
}

/// Declusters every station against its own threshold.
pub fn decluster_runs(ds: &SpaceTimeDataset, thresholds: &[f64], r: usize) -> Result<DeclusterResult> {
    if r < 1 {
        return Err(Error::InvalidInput("run length must be at least 1".into()));
    }
    if thresholds.len() != ds.n_stations() {
        return Err(Error::InvalidInput(format!(
            "{} thresholds for {} stations",
            thresholds.len(),
            ds.n_stations()
        )));
    }
    if let Some(u) = thresholds.iter().find(|u| !u.is_finite()) {
        return Err(Error::InvalidInput(format!("threshold {u} is not finite")));
    }
    let mut cluster_peaks = Vec::new();
    for (s, &u) in thresholds.iter().enumerate() {
        let column = ds.column(s);
        cluster_peaks.extend(
            decluster_series(&column, u, r)
                .into_iter()
                .map(|(time, value)| Peak { time, station: s, value }),
        );
    }
    Ok(DeclusterResult {
        cluster_peaks,
        run_length: r,
        threshold_used: thresholds.to_vec(),
    })
}
