//! Station series: the rectangular (day × station) matrix every other module
//! consumes, plus CSV ingestion and export.
//!
//! Missing observations are carried as a mask and never imputed. Dates are
//! reduced to `(year, day-of-year)` pairs so that seasonal windows are plain
//! index filters.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Calendar day as `(year, day-of-year)`, with `doy` in `1..=366`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DayStamp {
    pub year: i32,
    pub doy: u16,
}

pub fn is_leap_year(year: i32) -> bool {
    (year % 4 == 0 && year % 100 != 0) || year % 400 == 0
}

const CUMULATIVE_DAYS: [u16; 12] = [0, 31, 59, 90, 120, 151, 181, 212, 243, 273, 304, 334];

impl DayStamp {
    pub fn new(year: i32, doy: u16) -> Result<Self> {
        let max = if is_leap_year(year) { 366 } else { 365 };
        if doy == 0 || doy > max {
            return Err(Error::InvalidInput(format!(
                "day-of-year {doy} out of range for {year}"
            )));
        }
        Ok(DayStamp { year, doy })
    }

    pub fn from_ymd(year: i32, month: u32, day: u32) -> Result<Self> {
        if !(1..=12).contains(&month) {
            return Err(Error::InvalidInput(format!("month {month} out of range")));
        }
        let leap = is_leap_year(year);
        let month_len = match month {
            2 if leap => 29,
            2 => 28,
            4 | 6 | 9 | 11 => 30,
            _ => 31,
        };
        if day == 0 || day > month_len {
            return Err(Error::InvalidInput(format!(
                "day {day} out of range for {year}-{month:02}"
            )));
        }
        let mut doy = CUMULATIVE_DAYS[(month - 1) as usize] + day as u16;
        if leap && month > 2 {
            doy += 1;
        }
        Ok(DayStamp { year, doy })
    }

    /// Parses an ISO-8601 `YYYY-MM-DD` date.
    pub fn parse_iso(text: &str) -> Result<Self> {
        let bad = || Error::InvalidInput(format!("`{text}` is not a YYYY-MM-DD date"));
        let mut parts = text.trim().splitn(3, '-');
        let year: i32 = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let month_str = parts.next().ok_or_else(bad)?;
        let day_str = parts.next().ok_or_else(bad)?;
        if month_str.len() != 2 || day_str.len() != 2 {
            return Err(bad());
        }
        let month: u32 = month_str.parse().map_err(|_| bad())?;
        let day: u32 = day_str.parse().map_err(|_| bad())?;
        DayStamp::from_ymd(year, month, day)
    }

    pub fn to_ymd(self) -> (i32, u32, u32) {
        let leap = is_leap_year(self.year);
        let mut doy = self.doy;
        if leap && doy > 59 {
            if doy == 60 {
                return (self.year, 2, 29);
            }
            doy -= 1;
        }
        let month = CUMULATIVE_DAYS
            .iter()
            .rposition(|&c| c < doy)
            .expect("doy >= 1");
        (
            self.year,
            month as u32 + 1,
            (doy - CUMULATIVE_DAYS[month]) as u32,
        )
    }
}

impl fmt::Display for DayStamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (y, m, d) = self.to_ymd();
        write!(f, "{y:04}-{m:02}-{d:02}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Station {
    pub id: String,
    pub lon: f64,
    pub lat: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

impl Station {
    pub fn new(id: impl Into<String>, lon: f64, lat: f64) -> Result<Self> {
        let station = Station {
            id: id.into(),
            lon,
            lat,
            name: None,
        };
        station.validate()?;
        Ok(station)
    }

    pub fn validate(&self) -> Result<()> {
        if !(-180.0..=180.0).contains(&self.lon) || !(-90.0..=90.0).contains(&self.lat) {
            return Err(Error::InvalidInput(format!(
                "station `{}` has coordinates ({}, {}) outside lon [-180, 180] / lat [-90, 90]",
                self.id, self.lon, self.lat
            )));
        }
        Ok(())
    }
}

/// Reads a station catalog with header `id,lon,lat[,name]`.
pub fn load_stations(path: impl AsRef<Path>) -> Result<Vec<Station>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut stations = Vec::new();
    for (i, record) in reader.deserialize::<Station>().enumerate() {
        let station = record.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line() as usize).unwrap_or(i + 2),
            message: e.to_string(),
        })?;
        station.validate()?;
        stations.push(station);
    }
    check_unique_ids(&stations)?;
    Ok(stations)
}

pub fn write_stations(path: impl AsRef<Path>, stations: &[Station]) -> Result<()> {
    let path = path.as_ref();
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    writer
        .write_record(["id", "lon", "lat", "name"])
        .map_err(|e| csv_error(path, e))?;
    for s in stations {
        writer
            .write_record([
                s.id.clone(),
                s.lon.to_string(),
                s.lat.to_string(),
                s.name.clone().unwrap_or_default(),
            ])
            .map_err(|e| csv_error(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

fn check_unique_ids(stations: &[Station]) -> Result<()> {
    let mut seen = HashMap::new();
    for (i, s) in stations.iter().enumerate() {
        if let Some(prev) = seen.insert(s.id.as_str(), i) {
            return Err(Error::InvalidInput(format!(
                "station id `{}` appears twice (entries {} and {})",
                s.id, prev, i
            )));
        }
    }
    Ok(())
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.kind() {
        csv::ErrorKind::Io(_) => {
            let msg = e.to_string();
            Error::io(path, std::io::Error::other(msg))
        }
        _ => Error::Parse {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        },
    }
}

/// Daily values at `m` stations over `n` days, stored row-major by day.
///
/// Masked entries hold `NaN` and are skipped by every estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceTimeDataset {
    stations: Vec<Station>,
    times: Vec<DayStamp>,
    values: Vec<f64>,
    mask: Vec<bool>,
}

impl SpaceTimeDataset {
    /// Builds a dataset from a dense matrix where `None` marks a missing value.
    pub fn from_rows(
        stations: Vec<Station>,
        times: Vec<DayStamp>,
        rows: Vec<Vec<Option<f64>>>,
    ) -> Result<Self> {
        let m = stations.len();
        if rows.len() != times.len() {
            return Err(Error::InvalidInput(format!(
                "{} rows for {} time stamps",
                rows.len(),
                times.len()
            )));
        }
        let mut values = Vec::with_capacity(rows.len() * m);
        let mut mask = Vec::with_capacity(rows.len() * m);
        for (t, row) in rows.into_iter().enumerate() {
            if row.len() != m {
                return Err(Error::InvalidInput(format!(
                    "row {t} has {} values for {m} stations",
                    row.len()
                )));
            }
            for v in row {
                match v {
                    Some(x) => {
                        values.push(x);
                        mask.push(false);
                    }
                    None => {
                        values.push(f64::NAN);
                        mask.push(true);
                    }
                }
            }
        }
        Self::from_parts(stations, times, values, mask)
    }

    pub fn from_parts(
        stations: Vec<Station>,
        times: Vec<DayStamp>,
        mut values: Vec<f64>,
        mask: Vec<bool>,
    ) -> Result<Self> {
        let (n, m) = (times.len(), stations.len());
        if values.len() != n * m || mask.len() != n * m {
            return Err(Error::InvalidInput(format!(
                "matrix has {} values / {} mask entries, expected {}x{}",
                values.len(),
                mask.len(),
                n,
                m
            )));
        }
        for s in &stations {
            s.validate()?;
        }
        check_unique_ids(&stations)?;
        if let Some(w) = times.windows(2).position(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput(format!(
                "time stamps not strictly increasing at index {} ({} then {})",
                w + 1,
                times[w],
                times[w + 1]
            )));
        }
        for (i, (v, &masked)) in values.iter_mut().zip(&mask).enumerate() {
            if masked {
                *v = f64::NAN;
            } else if !v.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "non-finite value at day {} station `{}`",
                    i / m.max(1),
                    stations[i % m].id
                )));
            }
        }
        Ok(SpaceTimeDataset {
            stations,
            times,
            values,
            mask,
        })
    }

    /// Checks the observation-scale invariant: every unmasked value is `>= 0`.
    pub fn check_non_negative(&self) -> Result<()> {
        let m = self.n_stations();
        for (i, v) in self.values.iter().enumerate() {
            if *v < 0.0 {
                return Err(Error::InvalidInput(format!(
                    "negative value {v} at {} station `{}`",
                    self.times[i / m],
                    self.stations[i % m].id
                )));
            }
        }
        Ok(())
    }

    pub fn stations(&self) -> &[Station] {
        &self.stations
    }

    pub fn times(&self) -> &[DayStamp] {
        &self.times
    }

    pub fn n_days(&self) -> usize {
        self.times.len()
    }

    pub fn n_stations(&self) -> usize {
        self.stations.len()
    }

    pub fn station_index(&self, id: &str) -> Option<usize> {
        self.stations.iter().position(|s| s.id == id)
    }

    pub fn get(&self, t: usize, s: usize) -> Option<f64> {
        let i = t * self.stations.len() + s;
        if self.mask[i] {
            None
        } else {
            Some(self.values[i])
        }
    }

    pub fn is_masked(&self, t: usize, s: usize) -> bool {
        self.mask[t * self.stations.len() + s]
    }

    /// One day's field; masked entries are `NaN`.
    pub fn row(&self, t: usize) -> &[f64] {
        let m = self.stations.len();
        &self.values[t * m..(t + 1) * m]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// The unmasked `(day index, value)` pairs of one station.
    pub fn series(&self, s: usize) -> Vec<(usize, f64)> {
        (0..self.n_days())
            .filter_map(|t| self.get(t, s).map(|v| (t, v)))
            .collect()
    }

    /// Full column with `NaN` at masked days.
    pub fn column(&self, s: usize) -> Vec<f64> {
        (0..self.n_days()).map(|t| self.row(t)[s]).collect()
    }

    pub fn masked_fraction(&self, s: usize) -> f64 {
        let n = self.n_days();
        if n == 0 {
            return 0.0;
        }
        (0..n).filter(|&t| self.is_masked(t, s)).count() as f64 / n as f64
    }

    /// Keeps only the days selected by `keep`.
    pub fn select_days(&self, keep: impl Fn(usize, DayStamp) -> bool) -> Result<Self> {
        let m = self.n_stations();
        let mut times = Vec::new();
        let mut values = Vec::new();
        let mut mask = Vec::new();
        for (t, &stamp) in self.times.iter().enumerate() {
            if keep(t, stamp) {
                times.push(stamp);
                values.extend_from_slice(&self.values[t * m..(t + 1) * m]);
                mask.extend_from_slice(&self.mask[t * m..(t + 1) * m]);
            }
        }
        Self::from_parts(self.stations.clone(), times, values, mask)
    }

    /// Same layout and mask, new values. Used for latent and standardized fields.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::from_parts(
            self.stations.clone(),
            self.times.clone(),
            values,
            self.mask.clone(),
        )
    }
}

/// Column names of the long-format series CSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMapping {
    pub station: String,
    pub date: String,
    pub value: String,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        ColumnMapping {
            station: "station".into(),
            date: "date".into(),
            value: "value".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoadReport {
    /// `(station id, masked fraction)` in dataset order.
    pub masked_fraction: Vec<(String, f64)>,
    pub rows_read: usize,
}

/// Loads a long-format `station,date,value` CSV into a dataset.
///
/// Stations keep their order of first appearance in the file; their
/// coordinates come from `catalog`. The time axis is the sorted union of all
/// dates present, and any (station, date) pair absent from the file or with an
/// empty value is masked.
pub fn load_station_series(
    path: impl AsRef<Path>,
    schema: &ColumnMapping,
    catalog: &[Station],
) -> Result<(SpaceTimeDataset, LoadReport)> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(false)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let column = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            line: 1,
            message: format!("missing column `{name}` in header"),
        })
    };
    let (c_station, c_date, c_value) = (
        column(&schema.station)?,
        column(&schema.date)?,
        column(&schema.value)?,
    );

    let mut order: Vec<String> = Vec::new();
    let mut station_pos: HashMap<String, usize> = HashMap::new();
    let mut cells: BTreeMap<(DayStamp, usize), (Option<f64>, usize)> = BTreeMap::new();
    let mut rows_read = 0;
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let parse_err = |message: String| Error::Parse { line, message };
        let id = record.get(c_station).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(parse_err("empty station id".into()));
        }
        let date = DayStamp::parse_iso(record.get(c_date).unwrap_or(""))
            .map_err(|e| parse_err(e.to_string()))?;
        let raw = record.get(c_value).unwrap_or("");
        let value = if raw.is_empty() {
            None
        } else {
            let v: f64 = raw
                .parse()
                .map_err(|_| parse_err(format!("`{raw}` is not a number")))?;
            if !v.is_finite() || v < 0.0 {
                return Err(parse_err(format!(
                    "value {v} is not a finite non-negative amount"
                )));
            }
            Some(v)
        };
        let pos = *station_pos.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            order.len() - 1
        });
        if let Some((_, first)) = cells.insert((date, pos), (value, line)) {
            return Err(Error::Conflict {
                station: id,
                date: date.to_string(),
                line: line.max(first),
            });
        }
        rows_read += 1;
    }

    let stations = order
        .iter()
        .map(|id| {
            catalog
                .iter()
                .find(|s| &s.id == id)
                .cloned()
                .ok_or_else(|| {
                    Error::InvalidInput(format!("station `{id}` not found in station catalog"))
                })
        })
        .collect::<Result<Vec<_>>>()?;

    let times: Vec<DayStamp> = {
        let mut t: Vec<DayStamp> = cells.keys().map(|(d, _)| *d).collect();
        t.dedup();
        t
    };
    let index: HashMap<DayStamp, usize> = times.iter().enumerate().map(|(i, d)| (*d, i)).collect();
    let m = stations.len();
    let mut values = vec![f64::NAN; times.len() * m];
    let mut mask = vec![true; times.len() * m];
    for ((date, s), (value, _)) in &cells {
        if let Some(v) = value {
            let i = index[date] * m + s;
            values[i] = *v;
            mask[i] = false;
        }
    }
    let ds = SpaceTimeDataset::from_parts(stations, times, values, mask)?;
    for s in 0..m {
        if (0..ds.n_days()).all(|t| ds.is_masked(t, s)) {
            return Err(Error::InvalidInput(format!(
                "station `{}` has no observed values",
                ds.stations()[s].id
            )));
        }
    }
    let report = LoadReport {
        masked_fraction: (0..m)
            .map(|s| (ds.stations()[s].id.clone(), ds.masked_fraction(s)))
            .collect(),
        rows_read,
    };
    Ok((ds, report))
}

/// Writes every (station, day) cell, masked cells as an empty value, station
/// by station. [`load_station_series`] reproduces the dataset exactly.
pub fn write_station_series(path: impl AsRef<Path>, ds: &SpaceTimeDataset) -> Result<()> {
    let path = path.as_ref();
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    writer
        .write_record(["station", "date", "value"])
        .map_err(|e| csv_error(path, e))?;
    for (s, station) in ds.stations().iter().enumerate() {
        for (t, stamp) in ds.times().iter().enumerate() {
            let value = ds.get(t, s).map(|v| v.to_string()).unwrap_or_default();
            writer
                .write_record([station.id.as_str(), &stamp.to_string(), &value])
                .map_err(|e| csv_error(path, e))?;
        }
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn catalog() -> Vec<Station> {
        vec![
            Station::new("A", -1.0, 12.0).unwrap(),
            Station::new("B", 0.5, 13.0).unwrap(),
            Station::new("C", -3.0, 11.0).unwrap(),
        ]
    }

    fn write_csv(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn day_of_year_round_trip() {
        for year in [1999, 2000, 2024] {
            let days = if is_leap_year(year) { 366 } else { 365 };
            for doy in 1..=days {
                let d = DayStamp::new(year, doy).unwrap();
                assert_eq!(DayStamp::parse_iso(&d.to_string()).unwrap(), d);
            }
        }
        assert_eq!(DayStamp::from_ymd(2001, 5, 1).unwrap().doy, 121);
        assert_eq!(DayStamp::from_ymd(2001, 10, 31).unwrap().doy, 304);
        assert!(DayStamp::parse_iso("2001-02-29").is_err());
        assert!(DayStamp::parse_iso("2001-2-3").is_err());
    }

    #[test]
    fn complete_input_has_no_mask() {
        let mut text = String::from("station,date,value\n");
        for id in ["A", "B", "C"] {
            for d in 1..=10 {
                text.push_str(&format!("{id},2001-05-{d:02},{}\n", d as f64 * 1.5));
            }
        }
        let f = write_csv(&text);
        let (ds, report) = load_station_series(f.path(), &ColumnMapping::default(), &catalog()).unwrap();
        assert_eq!((ds.n_days(), ds.n_stations()), (10, 3));
        assert!(ds.mask().iter().all(|m| !m));
        assert!(report.masked_fraction.iter().all(|(_, f)| *f == 0.0));
        assert_eq!(ds.get(3, 1), Some(6.0));
    }

    #[test]
    fn single_hole_is_masked_exactly_there() {
        let mut text = String::from("station,date,value\n");
        for id in ["A", "B", "C"] {
            for d in 1..=10 {
                if id == "B" && d == 4 {
                    continue;
                }
                text.push_str(&format!("{id},2001-05-{d:02},1\n"));
            }
        }
        let f = write_csv(&text);
        let (ds, _) = load_station_series(f.path(), &ColumnMapping::default(), &catalog()).unwrap();
        let masked: Vec<_> = (0..10)
            .flat_map(|t| (0..3).map(move |s| (t, s)))
            .filter(|&(t, s)| ds.is_masked(t, s))
            .collect();
        assert_eq!(masked, vec![(3, 1)]);
    }

    #[test]
    fn duplicate_row_is_a_conflict() {
        let f = write_csv("station,date,value\nA,2001-05-01,1\nA,2001-05-02,2\nA,2001-05-01,3\n");
        match load_station_series(f.path(), &ColumnMapping::default(), &catalog()) {
            Err(Error::Conflict { station, line, .. }) => {
                assert_eq!(station, "A");
                assert_eq!(line, 4);
            }
            other => panic!("expected conflict, got {other:?}"),
        }
    }

    #[test]
    fn malformed_row_reports_line() {
        let f = write_csv("station,date,value\nA,2001-05-01,1\nA,2001-05-02,abc\n");
        match load_station_series(f.path(), &ColumnMapping::default(), &catalog()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_station_is_rejected() {
        let f = write_csv("station,date,value\nA,2001-05-01,1\nB,2001-05-01,\n");
        let err = load_station_series(f.path(), &ColumnMapping::default(), &catalog()).unwrap_err();
        assert!(err.to_string().contains("`B`"), "{err}");
    }

    #[test]
    fn custom_column_names() {
        let f = write_csv("day,site,mm\n2001-05-01,A,2.5\n");
        let schema = ColumnMapping {
            station: "site".into(),
            date: "day".into(),
            value: "mm".into(),
        };
        let (ds, _) = load_station_series(f.path(), &schema, &catalog()).unwrap();
        assert_eq!(ds.get(0, 0), Some(2.5));
    }

    #[test]
    fn rejects_unsorted_times() {
        let st = catalog();
        let times = vec![DayStamp::new(2000, 5).unwrap(), DayStamp::new(2000, 4).unwrap()];
        let rows = vec![vec![Some(1.0); 3]; 2];
        assert!(SpaceTimeDataset::from_rows(st, times, rows).is_err());
    }

    #[test]
    fn station_coordinates_validated() {
        assert!(Station::new("X", 200.0, 0.0).is_err());
        assert!(Station::new("X", 0.0, -91.0).is_err());
    }
}
