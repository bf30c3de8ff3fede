//! Trip log ingestion, feature exploration and feature selection.
//!
//! A trip is a CSV file whose header row names the CAN features. Empty cells
//! are kept as missing markers; they are never imputed. An optional
//! `timestamp` column is only used to check that samples are uniformly spaced.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved column name. Ignored for all math.
pub const TIMESTAMP_COLUMN: &str = "timestamp";

/// Default indifference-rule tolerance, as a fraction of the pooled standard deviation.
pub const DEFAULT_INDIFFERENCE_TOLERANCE: f64 = 0.05;

/// Default minimum separation score for an essential feature.
pub const DEFAULT_SEPARATION_THRESHOLD: f64 = 0.5;

/// One trip's multivariate time series sampled at a fixed period.
#[derive(Debug, Clone, PartialEq)]
pub struct TripLog {
    trip_id: String,
    driver_id: String,
    sample_period_s: f64,
    features: IndexMap<String, Vec<Option<f64>>>,
    len: usize,
}

impl TripLog {
    pub fn new(
        trip_id: impl Into<String>,
        driver_id: impl Into<String>,
        sample_period_s: f64,
        features: IndexMap<String, Vec<Option<f64>>>,
    ) -> Result<Self> {
        let trip_id = trip_id.into();
        if !(sample_period_s.is_finite() && sample_period_s > 0.0) {
            return Err(Error::Config(format!(
                "sample period must be positive, got {sample_period_s}"
            )));
        }
        let len = features.values().next().map_or(0, Vec::len);
        if len == 0 {
            return Err(Error::EmptyTrip(trip_id));
        }
        if let Some((name, values)) = features.iter().find(|(_, v)| v.len() != len) {
            return Err(Error::Feature {
                feature: name.clone(),
                message: format!(
                    "trip {trip_id}: has {} samples, expected {len}",
                    values.len()
                ),
            });
        }
        Ok(Self {
            trip_id,
            driver_id: driver_id.into(),
            sample_period_s,
            features,
            len,
        })
    }

    pub fn trip_id(&self) -> &str {
        &self.trip_id
    }

    pub fn driver_id(&self) -> &str {
        &self.driver_id
    }

    pub fn with_driver(mut self, driver_id: impl Into<String>) -> Self {
        self.driver_id = driver_id.into();
        self
    }

    pub fn with_trip_id(mut self, trip_id: impl Into<String>) -> Self {
        self.trip_id = trip_id.into();
        self
    }

    pub fn sample_period_s(&self) -> f64 {
        self.sample_period_s
    }

    /// Number of samples.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn duration_s(&self) -> f64 {
        self.len as f64 * self.sample_period_s
    }

    pub fn feature_names(&self) -> impl Iterator<Item = &str> {
        self.features.keys().map(String::as_str)
    }

    pub fn features(&self) -> &IndexMap<String, Vec<Option<f64>>> {
        &self.features
    }

    pub fn get(&self, feature: &str) -> Option<&[Option<f64>]> {
        self.features.get(feature).map(Vec::as_slice)
    }

    /// The feature as plain reals. Fails if the column is absent or holds a
    /// missing marker.
    pub fn dense(&self, feature: &str) -> Result<Vec<f64>> {
        let values = self.get(feature).ok_or_else(|| {
            Error::Schema(format!(
                "trip {} has no feature named {feature:?}",
                self.trip_id
            ))
        })?;
        values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                v.ok_or_else(|| Error::Feature {
                    feature: feature.to_string(),
                    message: format!("trip {}: missing value at sample {i}", self.trip_id),
                })
            })
            .collect()
    }

    /// Writes the trip in the same CSV layout [`parse_trip`] reads, with a
    /// leading `timestamp` column.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(writer);
        let csv_err = |e: csv::Error| Error::Parse {
            file: self.trip_id.clone(),
            line: 0,
            message: e.to_string(),
        };
        let mut header = vec![TIMESTAMP_COLUMN.to_string()];
        header.extend(self.features.keys().cloned());
        out.write_record(&header).map_err(csv_err)?;
        let mut row = Vec::with_capacity(header.len());
        for i in 0..self.len {
            row.clear();
            row.push(format_real(i as f64 * self.sample_period_s));
            for values in self.features.values() {
                row.push(values[i].map(format_real).unwrap_or_default());
            }
            out.write_record(&row).map_err(csv_err)?;
        }
        out.flush().map_err(|e| Error::io(&self.trip_id, e))?;
        Ok(())
    }
}

/// Shortest decimal that parses back to the same `f64`.
pub(crate) fn format_real(x: f64) -> String {
    format!("{x:?}")
}

/// Parses a trip CSV. The trip id is the file stem; the driver id is left
/// empty for the caller to fill in from a manifest.
pub fn parse_trip(path: impl AsRef<Path>, sample_period_s: f64) -> Result<TripLog> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let trip_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    read_trip(file, &trip_id, sample_period_s)
}

/// Parses trip CSV content from any reader.
pub fn read_trip<R: Read>(reader: R, trip_id: &str, sample_period_s: f64) -> Result<TripLog> {
    if !(sample_period_s.is_finite() && sample_period_s > 0.0) {
        return Err(Error::Config(format!(
            "sample period must be positive, got {sample_period_s}"
        )));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let parse_err = |line: u64, message: String| Error::Parse {
        file: trip_id.to_string(),
        line,
        message,
    };

    let headers = rdr
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    if headers.is_empty() || headers.iter().all(str::is_empty) {
        return Err(parse_err(1, "missing header row".into()));
    }
    let mut timestamp_col = None;
    let mut columns: Vec<(usize, String)> = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, name) in headers.iter().enumerate() {
        if name.is_empty() {
            return Err(parse_err(1, format!("column {} has an empty name", i + 1)));
        }
        if !seen.insert(name.to_string()) {
            return Err(parse_err(1, format!("duplicate column {name:?}")));
        }
        if name == TIMESTAMP_COLUMN {
            timestamp_col = Some(i);
        } else {
            columns.push((i, name.to_string()));
        }
    }

    let mut data: Vec<Vec<Option<f64>>> = vec![Vec::new(); columns.len()];
    let mut first_stamp: Option<f64> = None;
    let mut rows = 0usize;
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() == 1 && record.get(0) == Some("") && headers.len() > 1 {
            // blank line
            continue;
        }
        if record.len() != headers.len() {
            return Err(parse_err(
                line,
                format!("expected {} cells, found {}", headers.len(), record.len()),
            ));
        }
        let cell = |i: usize| -> Result<Option<f64>> {
            let raw = &record[i];
            if raw.is_empty() {
                return Ok(None);
            }
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .map(Some)
                .ok_or_else(|| parse_err(line, format!("cell {raw:?} is not a finite real")))
        };
        if let Some(tc) = timestamp_col {
            if let Some(stamp) = cell(tc)? {
                let origin = *first_stamp.get_or_insert(stamp - rows as f64 * sample_period_s);
                let expected = origin + rows as f64 * sample_period_s;
                if (stamp - expected).abs() > 1e-6 * sample_period_s.max(expected.abs()) + 1e-9 {
                    return Err(Error::NonUniformSampling {
                        trip: trip_id.to_string(),
                        expected: sample_period_s,
                        line,
                    });
                }
            }
        }
        for (slot, (col, _)) in data.iter_mut().zip(&columns) {
            slot.push(cell(*col)?);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::EmptyTrip(trip_id.to_string()));
    }
    if columns.is_empty() {
        return Err(parse_err(1, "no feature columns besides timestamp".into()));
    }
    let features = columns.into_iter().map(|(_, n)| n).zip(data).collect();
    TripLog::new(trip_id, "", sample_period_s, features)
}

/// Feature categories by data source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    Fuel,
    Engine,
    Transmission,
}

impl Category {
    /// Guesses the category from the feature name. Anything not recognizably
    /// fuel- or drivetrain-related is filed under `Engine`.
    pub fn infer(feature: &str) -> Self {
        let name = feature.to_ascii_lowercase();
        const FUEL: &[&str] = &["fuel", "intake", "air_pressure", "manifold", "lambda"];
        const TRANSMISSION: &[&str] = &["transmission", "wheel_speed", "speed_of", "torque_converter", "gear", "clutch"];
        if FUEL.iter().any(|k| name.contains(k)) {
            Category::Fuel
        } else if TRANSMISSION.iter().any(|k| name.contains(k))
            || (name.contains("wheel") && !name.contains("steering"))
        {
            Category::Transmission
        } else {
            Category::Engine
        }
    }
}

/// Summary statistics of one feature for one driver (or pooled).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub count: usize,
    pub sum: f64,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl SummaryStats {
    /// Sorts `values` in place and summarizes them. `None` when empty.
    pub fn from_values(values: &mut [f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        values.sort_by(f64::total_cmp);
        let n = values.len();
        let sum: f64 = values.iter().sum();
        let mean = sum / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        Some(Self {
            count: n,
            sum,
            mean,
            std: var.sqrt(),
            min: values[0],
            q1: quantile_sorted(values, 0.25),
            median: quantile_sorted(values, 0.5),
            q3: quantile_sorted(values, 0.75),
            max: values[n - 1],
        })
    }

    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }

    /// Min, lower quartile, median, upper quartile, max.
    pub fn five_number(&self) -> [f64; 5] {
        [self.min, self.q1, self.median, self.q3, self.max]
    }
}

/// Linear-interpolation quantile of sorted data.
pub(crate) fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureEntry {
    pub name: String,
    pub category: Category,
    /// True if any trip holds a missing marker for this feature or lacks the
    /// column altogether.
    pub has_missing: bool,
    /// Keyed by driver id. Drivers whose values are all missing are absent.
    pub per_driver: BTreeMap<String, SummaryStats>,
    pub pooled: Option<SummaryStats>,
}

/// Per-feature, per-driver summary statistics over a set of trips.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureCatalog {
    pub drivers: Vec<String>,
    pub trip_count: usize,
    pub features: BTreeMap<String, FeatureEntry>,
}

impl FeatureCatalog {
    pub fn get(&self, feature: &str) -> Option<&FeatureEntry> {
        self.features.get(feature)
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// Computes the feature catalog. Values are sorted before summation so the
/// result does not depend on trip order.
pub fn build_catalog(trips: &[TripLog]) -> Result<FeatureCatalog> {
    if trips.is_empty() {
        return Err(Error::Config("cannot build a catalog from zero trips".into()));
    }
    let drivers: BTreeSet<&str> = trips.iter().map(TripLog::driver_id).collect();
    let names: BTreeSet<&str> = trips.iter().flat_map(TripLog::feature_names).collect();

    let features = names
        .into_par_iter()
        .map(|name| {
            let mut has_missing = false;
            let mut by_driver: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
            for trip in trips {
                match trip.get(name) {
                    None => has_missing = true,
                    Some(values) => {
                        let bucket = by_driver.entry(trip.driver_id()).or_default();
                        for v in values {
                            match v {
                                Some(x) => bucket.push(*x),
                                None => has_missing = true,
                            }
                        }
                    }
                }
            }
            let mut pooled_values: Vec<f64> = by_driver.values().flatten().copied().collect();
            let per_driver = by_driver
                .into_iter()
                .filter_map(|(d, mut v)| SummaryStats::from_values(&mut v).map(|s| (d.to_string(), s)))
                .collect();
            let entry = FeatureEntry {
                name: name.to_string(),
                category: Category::infer(name),
                has_missing,
                per_driver,
                pooled: SummaryStats::from_values(&mut pooled_values),
            };
            (name.to_string(), entry)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect();

    Ok(FeatureCatalog {
        drivers: drivers.into_iter().map(str::to_string).collect(),
        trip_count: trips.len(),
        features,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionReason {
    MissingValue,
    Indifference,
    Invariance,
    StatisticalReject,
    Kept,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionDecision {
    pub feature: String,
    pub kept: bool,
    pub reason: SelectionReason,
}

impl SelectionDecision {
    fn new(feature: &str, reason: SelectionReason) -> Self {
        Self {
            feature: feature.to_string(),
            kept: reason == SelectionReason::Kept,
            reason,
        }
    }
}

/// Applies the three rejection rules to every catalog feature.
///
/// Rules are checked in the order missing value, invariance, indifference, so
/// an all-zero feature is reported as invariant even though it is trivially
/// indifferent too. The indifference rule needs at least two drivers and is
/// skipped otherwise.
pub fn apply_selection_rules(
    catalog: &FeatureCatalog,
    indifference_tolerance: f64,
) -> Result<Vec<SelectionDecision>> {
    if !(indifference_tolerance >= 0.0 && indifference_tolerance.is_finite()) {
        return Err(Error::Config(format!(
            "indifference tolerance must be nonnegative, got {indifference_tolerance}"
        )));
    }
    Ok(catalog
        .features
        .values()
        .map(|entry| {
            let reason = if entry.has_missing || entry.per_driver.len() < catalog.drivers.len() {
                SelectionReason::MissingValue
            } else if is_invariant(entry) {
                SelectionReason::Invariance
            } else if catalog.drivers.len() >= 2 && is_indifferent(entry, indifference_tolerance) {
                SelectionReason::Indifference
            } else {
                SelectionReason::Kept
            };
            SelectionDecision::new(&entry.name, reason)
        })
        .collect())
}

fn is_invariant(entry: &FeatureEntry) -> bool {
    entry.per_driver.values().all(|s| s.sum == 0.0 && s.std == 0.0)
}

fn is_indifferent(entry: &FeatureEntry, tolerance: f64) -> bool {
    let pooled_std = entry.pooled.map_or(0.0, |p| p.std);
    let stats: Vec<[f64; 4]> = entry
        .per_driver
        .values()
        .map(|s| [s.mean, s.std, s.min, s.max])
        .collect();
    (0..4).all(|j| {
        let (lo, hi) = stats
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s[j]), hi.max(s[j])));
        let spread = hi - lo;
        if pooled_std == 0.0 {
            spread == 0.0
        } else {
            spread < indifference_bound(tolerance, pooled_std)
        }
    })
}

fn indifference_bound(tolerance: f64, pooled_std: f64) -> f64 {
    tolerance * pooled_std
}

/// Mean over driver pairs of the average absolute gap between their
/// five-number summaries, in units of the pooled interquartile range (pooled
/// standard deviation when the IQR is zero). Zero with fewer than two drivers.
pub fn separation_score(entry: &FeatureEntry) -> f64 {
    let Some(pooled) = entry.pooled else {
        return 0.0;
    };
    let scale = if pooled.iqr() > 0.0 { pooled.iqr() } else { pooled.std };
    if scale == 0.0 {
        return 0.0;
    }
    let summaries: Vec<[f64; 5]> = entry.per_driver.values().map(SummaryStats::five_number).collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (i, a) in summaries.iter().enumerate() {
        for b in &summaries[i + 1..] {
            let gap: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / 5.0;
            total += gap / scale;
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

/// Separation scores of the rule survivors, best first (ties by name).
pub fn rank_survivors(decisions: &[SelectionDecision], catalog: &FeatureCatalog) -> Vec<(String, f64)> {
    let mut ranked: Vec<(String, f64)> = decisions
        .iter()
        .filter(|d| d.kept)
        .filter_map(|d| catalog.get(&d.feature).map(|e| (d.feature.clone(), separation_score(e))))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked
}

/// Rule survivors whose separation score exceeds the threshold, best first.
pub fn select_essential(
    decisions: &[SelectionDecision],
    catalog: &FeatureCatalog,
    separation_score_threshold: f64,
) -> Result<Vec<String>> {
    let ranked = rank_survivors(decisions, catalog);
    let essential: Vec<String> = ranked
        .iter()
        .filter(|(_, score)| *score > separation_score_threshold)
        .map(|(name, _)| name.clone())
        .collect();
    if essential.is_empty() {
        return Err(Error::NoEssentialFeatures {
            best_score: ranked.first().map_or(0.0, |r| r.1),
            threshold: separation_score_threshold,
        });
    }
    Ok(essential)
}

/// Rewrites rule survivors that did not make the essential list as
/// statistical rejects.
pub fn finalize_decisions(decisions: &[SelectionDecision], essential: &[String]) -> Vec<SelectionDecision> {
    decisions
        .iter()
        .map(|d| {
            if d.kept && !essential.contains(&d.feature) {
                SelectionDecision::new(&d.feature, SelectionReason::StatisticalReject)
            } else {
                d.clone()
            }
        })
        .collect()
}
