//! End-to-end stages behind the command-line front end.
//!
//! Layout on disk:
//!
//! ```text
//! <data_dir>/manifest.json          drivers, trips, seeds, splice specs
//! <data_dir>/trips/<trip>.csv       clean trips
//! <data_dir>/splices/<trip>.csv     owner trips with a thief tail
//! <data_dir>/labels/<trip>.csv      per-sample theft labels of spliced trips
//!
//! <output_dir>/catalog.json, features.json          ingest
//! <output_dir>/codebooks/<feature>.json, train.json train
//! <output_dir>/evaluation.json, metrics.{md,csv},
//!     thresholds.json, roc/<feature>.csv            evaluate
//! <output_dir>/detect/<trip>.json                   detect
//! <output_dir>/report/...                           report
//! ```
//!
//! Nothing written here depends on wall-clock time or absolute paths, so the
//! same configuration and seed reproduce every file byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::cluster::{elbow_sweep, kmeans_fit, Codebook, ElbowCurve, KMeansParams, UNSTAMPED};
use crate::detect::{
    compute_metrics, ensemble_vote, optimize_threshold, representative_errors, roc_sweep, threshold_grid,
    write_roc_csv, DetectionConfig, DetectionReport, EnsembleReport, MetricSet, ModelReport, Verdict,
};
use crate::error::{Error, Result};
use crate::ingest::{
    apply_selection_rules, build_catalog, finalize_decisions, parse_trip, rank_survivors, select_essential,
    FeatureCatalog, SelectionDecision, TripLog,
};
use crate::plot::reconstruction_svg;
use crate::reconstruct::{error_series, reconstruct_with, write_reconstruction_csv, ErrorSeries, Reconstruction};
use crate::synth::{default_profiles, generate_trip, splice_theft, trip_seed, window_labels, DriverProfile, SpliceSpec};
use crate::windowing::{highlighted_segments, FilterKind, WindowConfig};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;
pub const OPTIMIZE: &str = "optimize";

/// Per-model thresholds: the keyword `"optimize"` or an explicit map from
/// feature name to threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Thresholds {
    Keyword(String),
    Explicit(BTreeMap<String, f64>),
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds::Keyword(OPTIMIZE.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub drivers: usize,
    pub trips_per_driver: usize,
    pub duration_s: f64,
    /// Fraction of an owner validation trip replaced by a thief's data.
    pub splice_fraction: f64,
    /// Custom driver profiles; the built-in four when absent.
    pub profiles: Option<Vec<DriverProfile>>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            drivers: 4,
            trips_per_driver: 16,
            duration_s: 600.0,
            splice_fraction: 0.25,
            profiles: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub output_dir: PathBuf,
    pub owner: String,
    pub window_s: f64,
    pub stride_s: f64,
    pub sample_period_s: f64,
    pub filter: FilterKind,
    /// Codebook size, capped at the number of distinct training segments.
    pub k: usize,
    /// When set, k is picked by the elbow method over these values.
    pub elbow_k: Option<Vec<usize>>,
    pub seed: u64,
    pub restarts: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub thresholds: Thresholds,
    pub detection_window_s: f64,
    /// Owner : thief detection-window ratio of the validation set.
    pub validation_ratio: [u32; 2],
    /// Leading owner trips (manifest order) used for training; the rest are
    /// held out for validation.
    pub train_trips: usize,
    pub indifference_tolerance: f64,
    pub separation_threshold: f64,
    pub trained_at: Option<String>,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            output_dir: PathBuf::from("out"),
            owner: "A".into(),
            window_s: crate::windowing::DEFAULT_WINDOW_S,
            stride_s: crate::windowing::DEFAULT_STRIDE_S,
            sample_period_s: 1.0,
            filter: FilterKind::RaisedCosine,
            k: crate::cluster::DEFAULT_K,
            elbow_k: None,
            seed: 0,
            restarts: crate::cluster::DEFAULT_RESTARTS,
            max_iter: crate::cluster::DEFAULT_MAX_ITER,
            tol: crate::cluster::DEFAULT_TOL,
            thresholds: Thresholds::default(),
            detection_window_s: crate::detect::DEFAULT_DETECTION_WINDOW_S,
            validation_ratio: [8, 2],
            train_trips: 10,
            indifference_tolerance: crate::ingest::DEFAULT_INDIFFERENCE_TOLERANCE,
            separation_threshold: crate::ingest::DEFAULT_SEPARATION_THRESHOLD,
            trained_at: None,
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn window_config(&self) -> Result<WindowConfig> {
        WindowConfig::new(self.window_s, self.stride_s, self.sample_period_s, self.filter)
    }

    pub fn kmeans_params(&self) -> KMeansParams {
        KMeansParams {
            k: self.k,
            seed: self.seed,
            max_iter: self.max_iter,
            tol: self.tol,
            restarts: self.restarts,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.window_config()?;
        DetectionConfig::new(self.detection_window_s, self.sample_period_s, 0.0)?;
        if self.validation_ratio.contains(&0) {
            return Err(Error::Config("validation ratio components must be positive".into()));
        }
        if self.k == 0 || self.restarts == 0 || self.max_iter == 0 {
            return Err(Error::Config("k, restarts and max_iter must be positive".into()));
        }
        if self.train_trips == 0 {
            return Err(Error::Config("at least one training trip is required".into()));
        }
        if self.owner.is_empty() {
            return Err(Error::Config("owner driver id is empty".into()));
        }
        match &self.thresholds {
            Thresholds::Keyword(k) if k != OPTIMIZE => {
                return Err(Error::Config(format!(
                    "thresholds must be {OPTIMIZE:?} or a feature-to-threshold map, got {k:?}"
                )))
            }
            Thresholds::Explicit(map) => {
                if let Some((f, t)) = map.iter().find(|(_, t)| !(t.is_finite() && **t >= 0.0)) {
                    return Err(Error::Config(format!("threshold for {f} must be nonnegative, got {t}")));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Stamp recorded in codebooks: the configured value, else
    /// `SOURCE_DATE_EPOCH`, else the Unix epoch.
    pub fn training_stamp(&self) -> String {
        if let Some(s) = &self.trained_at {
            return s.clone();
        }
        std::env::var("SOURCE_DATE_EPOCH")
            .ok()
            .and_then(|v| v.trim().parse::<i64>().ok())
            .and_then(|secs| chrono::DateTime::from_timestamp(secs, 0))
            .map(|t| t.to_rfc3339_opts(chrono::SecondsFormat::Secs, true))
            .unwrap_or_else(|| UNSTAMPED.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripEntry {
    pub trip_id: String,
    pub driver_id: String,
    /// Relative to the data directory.
    pub file: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpliceEntry {
    pub trip_id: String,
    pub file: String,
    pub labels_file: String,
    pub donor_trip_id: String,
    pub spec: SpliceSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub sample_period_s: f64,
    pub duration_s: f64,
    pub designated_owner: String,
    pub drivers: Vec<String>,
    pub trips: Vec<TripEntry>,
    pub splices: Vec<SpliceEntry>,
}

impl Manifest {
    pub fn load(data_dir: &Path) -> Result<Self> {
        let manifest: Manifest = read_json(&data_dir.join("manifest.json"))?;
        if manifest.format_version != MANIFEST_FORMAT_VERSION {
            return Err(Error::Schema(format!(
                "unsupported manifest version {}",
                manifest.format_version
            )));
        }
        Ok(manifest)
    }

    pub fn owner_trips(&self, owner: &str) -> Vec<&TripEntry> {
        self.trips.iter().filter(|t| t.driver_id == owner).collect()
    }

    /// Non-owner trips interleaved across drivers: first trip of every thief,
    /// then the second, and so on.
    pub fn thief_trips_round_robin(&self, owner: &str) -> Vec<&TripEntry> {
        let mut per_driver: Vec<Vec<&TripEntry>> = self
            .drivers
            .iter()
            .filter(|d| d.as_str() != owner)
            .map(|d| self.trips.iter().filter(|t| &t.driver_id == d).collect())
            .collect();
        let mut out = Vec::new();
        let longest = per_driver.iter().map(Vec::len).max().unwrap_or(0);
        for i in 0..longest {
            for trips in &mut per_driver {
                if let Some(t) = trips.get(i) {
                    out.push(*t);
                }
            }
        }
        out
    }

    pub fn find(&self, trip_id: &str) -> Option<&TripEntry> {
        self.trips.iter().find(|t| t.trip_id == trip_id)
    }

    pub fn find_splice(&self, trip_id: &str) -> Option<&SpliceEntry> {
        self.splices.iter().find(|s| s.trip_id == trip_id)
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_dir(path: &Path) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "directory does not exist"),
        ))
    }
}

fn load_entry(data_dir: &Path, entry: &TripEntry, sample_period_s: f64) -> Result<TripLog> {
    Ok(parse_trip(data_dir.join(&entry.file), sample_period_s)?
        .with_trip_id(&entry.trip_id)
        .with_driver(&entry.driver_id))
}

fn write_trip(path: &Path, trip: &TripLog) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    trip.write_csv(BufWriter::new(file))
}

/// Writes a synthetic corpus: every driver's clean trips plus one tail splice
/// per thief onto the designated owner's held-out trips.
pub fn run_synth(cfg: &RunConfig) -> Result<Manifest> {
    let sc = &cfg.synth;
    if sc.trips_per_driver == 0 {
        return Err(Error::Config("trips_per_driver must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&sc.splice_fraction) {
        return Err(Error::Config(format!("splice fraction {} outside [0, 1)", sc.splice_fraction)));
    }
    let profiles: Vec<DriverProfile> = match &sc.profiles {
        Some(p) => p.clone(),
        None => {
            let all = default_profiles();
            if sc.drivers < 2 || sc.drivers > all.len() {
                return Err(Error::Config(format!(
                    "built-in profiles support 2..={} drivers, got {}",
                    all.len(),
                    sc.drivers
                )));
            }
            all.into_iter().take(sc.drivers).collect()
        }
    };
    if !profiles.iter().any(|p| p.driver_id == cfg.owner) {
        return Err(Error::Config(format!("owner {} is not among the synthetic drivers", cfg.owner)));
    }
    let data_dir = &cfg.data_dir;
    fs::create_dir_all(data_dir).map_err(|e| Error::io(data_dir, e))?;

    let jobs: Vec<(usize, usize)> = (0..profiles.len())
        .flat_map(|d| (0..sc.trips_per_driver).map(move |i| (d, i)))
        .collect();
    let trips: Vec<(TripEntry, TripLog)> = jobs
        .par_iter()
        .map(|&(d, i)| {
            let p = &profiles[d];
            let trip_id = format!("{}-{i:02}", p.driver_id);
            let seed = trip_seed(cfg.seed, d, i);
            let trip = generate_trip(p, &trip_id, sc.duration_s, cfg.sample_period_s, seed)?;
            let entry = TripEntry {
                file: format!("trips/{trip_id}.csv"),
                trip_id,
                driver_id: p.driver_id.clone(),
                seed,
            };
            Ok((entry, trip))
        })
        .collect::<Result<_>>()?;
    for (entry, trip) in &trips {
        write_trip(&data_dir.join(&entry.file), trip)?;
    }

    let owner_held_out: Vec<&(TripEntry, TripLog)> = trips
        .iter()
        .filter(|(e, _)| e.driver_id == cfg.owner)
        .skip(cfg.train_trips)
        .collect();
    let mut splices = Vec::new();
    if sc.splice_fraction > 0.0 && !owner_held_out.is_empty() {
        let thieves: Vec<&str> = profiles
            .iter()
            .map(|p| p.driver_id.as_str())
            .filter(|d| *d != cfg.owner)
            .collect();
        for (j, thief) in thieves.iter().enumerate() {
            let (victim_entry, victim) = owner_held_out[j % owner_held_out.len()];
            let (donor_entry, donor) = trips
                .iter()
                .rev()
                .find(|(e, _)| e.driver_id == *thief)
                .expect("every driver has trips");
            let spec = SpliceSpec::tail(victim, thief, sc.splice_fraction);
            let (spliced, labels) = splice_theft(victim, donor, &spec)?;
            let entry = SpliceEntry {
                trip_id: spliced.trip_id().to_string(),
                file: format!("splices/{}.csv", spliced.trip_id()),
                labels_file: format!("labels/{}.csv", spliced.trip_id()),
                donor_trip_id: donor_entry.trip_id.clone(),
                spec,
            };
            debug_assert_eq!(victim_entry.trip_id, entry.spec.victim_trip_id);
            write_trip(&data_dir.join(&entry.file), &spliced)?;
            let mut text = String::from("index,theft\n");
            for (i, l) in labels.iter().enumerate() {
                text.push_str(&format!("{i},{}\n", u8::from(*l)));
            }
            write_text(&data_dir.join(&entry.labels_file), &text)?;
            splices.push(entry);
        }
    }

    let manifest = Manifest {
        format_version: MANIFEST_FORMAT_VERSION,
        seed: cfg.seed,
        sample_period_s: cfg.sample_period_s,
        duration_s: sc.duration_s,
        designated_owner: cfg.owner.clone(),
        drivers: profiles.iter().map(|p| p.driver_id.clone()).collect(),
        trips: trips.into_iter().map(|(e, _)| e).collect(),
        splices,
    };
    write_json(&data_dir.join("manifest.json"), &manifest)?;
    info!(
        "wrote {} trips and {} spliced trips to {}",
        manifest.trips.len(),
        manifest.splices.len(),
        data_dir.display()
    );
    Ok(manifest)
}

pub fn read_labels(path: &Path) -> Result<Vec<bool>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| match line.trim().rsplit(',').next() {
            Some("0") => Ok(false),
            Some("1") => Ok(true),
            _ => Err(Error::Parse {
                file: path.display().to_string(),
                line: i as u64 + 1,
                message: format!("expected 0 or 1, got {line:?}"),
            }),
        })
        .collect()
}

/// Output of the feature exploration stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSelection {
    pub drivers: Vec<String>,
    pub trip_count: usize,
    pub indifference_tolerance: f64,
    pub separation_threshold: f64,
    /// Every feature of the catalog.
    pub catalog_features: Vec<String>,
    pub decisions: Vec<SelectionDecision>,
    pub scores: Vec<(String, f64)>,
    pub essential: Vec<String>,
}

/// Builds the catalog over all clean trips of all drivers and selects the
/// essential features.
pub fn run_ingest(cfg: &RunConfig) -> Result<(FeatureCatalog, FeatureSelection)> {
    cfg.validate()?;
    ensure_dir(&cfg.data_dir)?;
    let manifest = Manifest::load(&cfg.data_dir)?;
    let trips = manifest
        .trips
        .par_iter()
        .map(|e| load_entry(&cfg.data_dir, e, cfg.sample_period_s))
        .collect::<Result<Vec<_>>>()?;
    let catalog = build_catalog(&trips)?;
    let decisions = apply_selection_rules(&catalog, cfg.indifference_tolerance)?;
    let scores = rank_survivors(&decisions, &catalog);
    let essential = select_essential(&decisions, &catalog, cfg.separation_threshold)?;
    if essential.len() < 5 {
        warn!("only {} essential features survived selection", essential.len());
    }
    let selection = FeatureSelection {
        drivers: catalog.drivers.clone(),
        trip_count: catalog.trip_count,
        indifference_tolerance: cfg.indifference_tolerance,
        separation_threshold: cfg.separation_threshold,
        catalog_features: catalog.features.keys().cloned().collect(),
        decisions: finalize_decisions(&decisions, &essential),
        scores,
        essential,
    };
    write_json(&cfg.output_dir.join("catalog.json"), &catalog)?;
    write_json(&cfg.output_dir.join("features.json"), &selection)?;
    info!("essential features: {}", selection.essential.join(", "));
    Ok((catalog, selection))
}

pub fn load_selection(cfg: &RunConfig) -> Result<FeatureSelection> {
    let path = cfg.output_dir.join("features.json");
    if !path.exists() {
        return Err(Error::Config(format!(
            "{} not found; run the ingest stage first",
            path.display()
        )));
    }
    read_json(&path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedFeature {
    pub feature: String,
    pub k: usize,
    pub segment_count: usize,
    pub sse: f64,
    pub elbow: Option<ElbowCurve>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub owner: String,
    /// Every trip file the stage opened.
    pub trips_read: Vec<String>,
    pub features: Vec<TrainedFeature>,
}

/// Trains one codebook per essential feature from the owner's training trips
/// only.
pub fn run_train(cfg: &RunConfig) -> Result<(TrainSummary, Vec<Codebook>)> {
    cfg.validate()?;
    ensure_dir(&cfg.data_dir)?;
    let manifest = Manifest::load(&cfg.data_dir)?;
    let selection = load_selection(cfg)?;
    if selection.essential.len() < 5 {
        warn!(
            "training {} models instead of five; ensemble majority adapts to the model count",
            selection.essential.len()
        );
    }
    let wcfg = cfg.window_config()?;
    let owner_trips: Vec<&TripEntry> = manifest
        .owner_trips(&cfg.owner)
        .into_iter()
        .take(cfg.train_trips)
        .collect();
    if owner_trips.is_empty() {
        return Err(Error::Config(format!("no trips for owner {}", cfg.owner)));
    }
    if owner_trips.len() < cfg.train_trips {
        warn!(
            "owner {} has only {} trips; training on all of them",
            cfg.owner,
            owner_trips.len()
        );
    }
    let trips = owner_trips
        .par_iter()
        .map(|e| load_entry(&cfg.data_dir, e, cfg.sample_period_s))
        .collect::<Result<Vec<_>>>()?;
    let trip_ids: Vec<String> = trips.iter().map(|t| t.trip_id().to_string()).collect();
    let stamp = cfg.training_stamp();

    let results = selection
        .essential
        .par_iter()
        .map(|feature| {
            let mut segments = Vec::new();
            for trip in &trips {
                segments.extend(highlighted_segments(feature, &trip.dense(feature)?, &wcfg)?);
            }
            let params = cfg.kmeans_params();
            let distinct = distinct_segments(&segments);
            let (k, elbow) = match &cfg.elbow_k {
                Some(ks) => {
                    let curve = elbow_sweep(&segments, &wcfg, ks, &params)?;
                    (curve.recommended_k, Some(curve))
                }
                None => {
                    if params.k > distinct {
                        warn!("{feature}: k capped from {} to {distinct} distinct segments", params.k);
                    }
                    (params.k.min(distinct), None)
                }
            };
            let cb = kmeans_fit(feature, &segments, &wcfg, &params.with_k(k))?
                .with_training_trips(trip_ids.clone())
                .with_trained_at(stamp.clone());
            let summary = TrainedFeature {
                feature: feature.clone(),
                k,
                segment_count: segments.len(),
                sse: cb.sse,
                elbow,
            };
            Ok((summary, cb))
        })
        .collect::<Result<Vec<_>>>()?;

    let codebook_dir = cfg.output_dir.join("codebooks");
    fs::create_dir_all(&codebook_dir).map_err(|e| Error::io(&codebook_dir, e))?;
    let mut features = Vec::new();
    let mut books = Vec::new();
    for (summary, cb) in results {
        cb.save(codebook_dir.join(format!("{}.json", cb.feature)))?;
        info!("{}: k = {}, SSE = {:.4}", cb.feature, cb.k(), cb.sse);
        features.push(summary);
        books.push(cb);
    }
    let summary = TrainSummary {
        owner: cfg.owner.clone(),
        trips_read: owner_trips.iter().map(|e| e.file.clone()).collect(),
        features,
    };
    write_json(&cfg.output_dir.join("train.json"), &summary)?;
    Ok((summary, books))
}

fn distinct_segments(segments: &[crate::windowing::Segment]) -> usize {
    segments
        .iter()
        .map(|s| s.values.iter().map(|v| (v + 0.0).to_bits()).collect::<Vec<u64>>())
        .collect::<std::collections::HashSet<_>>()
        .len()
}

/// Loads the codebooks of the essential features, checking that they share
/// one window geometry.
pub fn load_codebooks(cfg: &RunConfig) -> Result<Vec<Codebook>> {
    let selection = load_selection(cfg)?;
    let books = selection
        .essential
        .iter()
        .map(|f| {
            let path = cfg.output_dir.join("codebooks").join(format!("{f}.json"));
            if !path.exists() {
                return Err(Error::Config(format!(
                    "{} not found; run the train stage first",
                    path.display()
                )));
            }
            Codebook::load(path)
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(first) = books.first() {
        if let Some(other) = books.iter().find(|b| {
            b.window_len() != first.window_len() || b.cfg.stride_len() != first.cfg.stride_len()
        }) {
            return Err(Error::ConfigMismatch(format!(
                "codebooks {} and {} use different window geometry",
                first.feature, other.feature
            )));
        }
    }
    Ok(books)
}

/// Reconstruction and error series of one trip under every codebook.
pub struct TripAnalysis {
    pub trip_id: String,
    pub per_model: Vec<(Reconstruction, ErrorSeries)>,
}

pub fn analyze_trip(trip: &TripLog, books: &[Codebook]) -> Result<TripAnalysis> {
    let per_model = books
        .par_iter()
        .map(|cb| {
            if trip.sample_period_s() != cb.cfg.sample_period_s {
                return Err(Error::ConfigMismatch(format!(
                    "trip {} sampled every {} s, codebook {} every {} s",
                    trip.trip_id(),
                    trip.sample_period_s(),
                    cb.feature,
                    cb.cfg.sample_period_s
                )));
            }
            let series = trip.dense(&cb.feature)?;
            let rec = reconstruct_with(&series, &cb.cfg, cb)?;
            let err = error_series(&rec);
            Ok((rec, err))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TripAnalysis {
        trip_id: trip.trip_id().to_string(),
        per_model,
    })
}

/// Threshold per feature: explicit config values first, then the tuned
/// values of the last evaluation.
pub fn resolve_thresholds(cfg: &RunConfig, features: &[String]) -> Result<BTreeMap<String, f64>> {
    let tuned: Option<BTreeMap<String, f64>> = {
        let path = cfg.output_dir.join("thresholds.json");
        if path.exists() {
            Some(read_json(&path)?)
        } else {
            None
        }
    };
    features
        .iter()
        .map(|f| {
            let explicit = match &cfg.thresholds {
                Thresholds::Explicit(map) => map.get(f).copied(),
                Thresholds::Keyword(_) => None,
            };
            explicit
                .or_else(|| tuned.as_ref().and_then(|t| t.get(f).copied()))
                .map(|t| (f.clone(), t))
                .ok_or_else(|| {
                    Error::Config(format!(
                        "no threshold for {f}: set it explicitly or run the evaluate stage to tune it"
                    ))
                })
        })
        .collect()
}

/// Locates a trip by manifest id (clean or spliced) or by CSV path. Returns
/// the trip and its per-sample theft labels when known.
pub fn locate_trip(cfg: &RunConfig, trip: &str) -> Result<(TripLog, Option<Vec<bool>>)> {
    let manifest = Manifest::load(&cfg.data_dir).ok();
    if let Some(m) = &manifest {
        if let Some(e) = m.find(trip) {
            let log = load_entry(&cfg.data_dir, e, cfg.sample_period_s)?;
            let theft = e.driver_id != cfg.owner;
            let labels = vec![theft; log.len()];
            return Ok((log, Some(labels)));
        }
        if let Some(s) = m.find_splice(trip) {
            let log = parse_trip(cfg.data_dir.join(&s.file), cfg.sample_period_s)?;
            let labels = read_labels(&cfg.data_dir.join(&s.labels_file))?;
            if labels.len() != log.len() {
                return Err(Error::LengthMismatch {
                    expected: log.len(),
                    actual: labels.len(),
                });
            }
            return Ok((log, Some(labels)));
        }
    }
    let path = Path::new(trip);
    if path.is_file() {
        return Ok((parse_trip(path, cfg.sample_period_s)?, None));
    }
    Err(Error::io(
        path,
        std::io::Error::new(std::io::ErrorKind::NotFound, "neither a manifest trip id nor a file"),
    ))
}

fn check_schema(trip: &TripLog, selection: &FeatureSelection) -> Result<()> {
    if let Some(unknown) = trip
        .feature_names()
        .find(|f| !selection.catalog_features.iter().any(|c| c == f))
    {
        return Err(Error::Schema(format!(
            "trip {} has unknown feature {unknown:?}",
            trip.trip_id()
        )));
    }
    if let Some(missing) = selection
        .essential
        .iter()
        .find(|f| trip.get(f).is_none())
    {
        return Err(Error::Schema(format!(
            "trip {} lacks essential feature {missing:?}",
            trip.trip_id()
        )));
    }
    Ok(())
}

/// Runs every model on one trip and majority-votes their verdicts.
pub fn run_detect(cfg: &RunConfig, trip: &str) -> Result<DetectionReport> {
    cfg.validate()?;
    let selection = load_selection(cfg)?;
    let books = load_codebooks(cfg)?;
    let (log, sample_labels) = locate_trip(cfg, trip)?;
    check_schema(&log, &selection)?;
    let features: Vec<String> = books.iter().map(|b| b.feature.clone()).collect();
    let thresholds = resolve_thresholds(cfg, &features)?;
    let analysis = analyze_trip(&log, &books)?;
    let base = DetectionConfig::new(cfg.detection_window_s, cfg.sample_period_s, 0.0)?;
    let covered = analysis.per_model.first().map_or(0, |(_, e)| e.len());
    let labels = sample_labels.map(|l| window_labels(&l[..covered.min(l.len())], base.detection_len()));

    let mut models = Vec::new();
    for (rec, err) in &analysis.per_model {
        let threshold = thresholds[&rec.feature];
        let dcfg = base.with_threshold(threshold)?;
        let verdicts = crate::detect::windows_verdicts(err, &dcfg)?;
        let metrics = match &labels {
            Some(l) => Some(compute_metrics(&verdicts.iter().map(|v| v.is_theft).collect::<Vec<_>>(), l)?),
            None => None,
        };
        models.push(ModelReport {
            feature: rec.feature.clone(),
            threshold,
            verdicts,
            metrics,
            auc: None,
        });
    }
    let ensemble_verdicts = ensemble_vote(&models.iter().map(|m| m.verdicts.clone()).collect::<Vec<_>>())?;
    let ensemble_metrics = match &labels {
        Some(l) => Some(compute_metrics(
            &ensemble_verdicts.iter().map(|v| v.is_theft).collect::<Vec<_>>(),
            l,
        )?),
        None => None,
    };
    let report = DetectionReport {
        trip_id: log.trip_id().to_string(),
        detection_window_s: cfg.detection_window_s,
        detection_len: base.detection_len(),
        models,
        ensemble: EnsembleReport {
            rule: format!("majority of {}", features.len()),
            verdicts: ensemble_verdicts,
            metrics: ensemble_metrics,
        },
        labels,
    };
    write_json(
        &cfg.output_dir.join("detect").join(format!("{}.json", report.trip_id)),
        &report,
    )?;
    Ok(report)
}

/// One detection window of the validation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationWindow {
    pub trip_id: String,
    pub window_start: usize,
    pub theft: bool,
    /// Representative error per model, in model order.
    pub errors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEvaluation {
    pub model: String,
    pub feature: String,
    pub threshold: f64,
    pub threshold_source: String,
    pub auc: f64,
    pub metrics: MetricSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub owner: String,
    pub validation_ratio: [u32; 2],
    pub owner_windows: usize,
    pub thief_windows: usize,
    pub owner_trips: Vec<String>,
    pub thief_trips: Vec<String>,
    pub models: Vec<ModelEvaluation>,
    pub ensemble: MetricSet,
    pub windows: Vec<ValidationWindow>,
}

/// Short model name from the feature's initials, e.g. `Model TOT`.
pub fn model_name(feature: &str) -> String {
    let initials: String = feature
        .split(|c: char| c == '_' || c == '-' || c.is_whitespace())
        .filter_map(|w| w.chars().next())
        .map(|c| c.to_ascii_uppercase())
        .collect();
    format!("Model {initials}")
}

fn trip_windows(log: &TripLog, books: &[Codebook], detection_len: usize, theft: bool) -> Result<Vec<ValidationWindow>> {
    let analysis = analyze_trip(log, books)?;
    let per_model = analysis
        .per_model
        .iter()
        .map(|(_, err)| representative_errors(&err.errors, detection_len))
        .collect::<Result<Vec<_>>>()?;
    let count = per_model.first().map_or(0, Vec::len);
    Ok((0..count)
        .map(|w| ValidationWindow {
            trip_id: log.trip_id().to_string(),
            window_start: per_model[0][w].0,
            theft,
            errors: per_model.iter().map(|m| m[w].1).collect(),
        })
        .collect())
}

/// Scores every model on held-out owner windows mixed with thief windows at
/// the configured ratio, tuning thresholds on the ROC curve when asked.
pub fn run_evaluate(cfg: &RunConfig) -> Result<Evaluation> {
    cfg.validate()?;
    ensure_dir(&cfg.data_dir)?;
    let manifest = Manifest::load(&cfg.data_dir)?;
    let books = load_codebooks(cfg)?;
    if books.is_empty() {
        return Err(Error::Config("no trained models".into()));
    }
    let detection_len = DetectionConfig::new(cfg.detection_window_s, cfg.sample_period_s, 0.0)?.detection_len();

    let owner_entries: Vec<&TripEntry> = manifest.owner_trips(&cfg.owner).into_iter().skip(cfg.train_trips).collect();
    if owner_entries.is_empty() {
        return Err(Error::Config(format!(
            "owner {} has no trips beyond the {} training trips",
            cfg.owner, cfg.train_trips
        )));
    }
    let owner_windows: Vec<ValidationWindow> = owner_entries
        .par_iter()
        .map(|e| trip_windows(&load_entry(&cfg.data_dir, e, cfg.sample_period_s)?, &books, detection_len, false))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();

    let [r_owner, r_thief] = cfg.validation_ratio;
    let needed = (owner_windows.len() as f64 * r_thief as f64 / r_owner as f64).round() as usize;
    let mut thief_windows = Vec::with_capacity(needed);
    let mut thief_trips = Vec::new();
    for e in manifest.thief_trips_round_robin(&cfg.owner) {
        if thief_windows.len() >= needed {
            break;
        }
        let log = load_entry(&cfg.data_dir, e, cfg.sample_period_s)?;
        let windows = trip_windows(&log, &books, detection_len, true)?;
        let take = (needed - thief_windows.len()).min(windows.len());
        thief_windows.extend(windows.into_iter().take(take));
        thief_trips.push(e.trip_id.clone());
    }
    if thief_windows.len() < needed {
        return Err(Error::Config(format!(
            "need {needed} thief windows for a {r_owner}:{r_thief} split but the corpus has {}",
            thief_windows.len()
        )));
    }

    let windows: Vec<ValidationWindow> = owner_windows.into_iter().chain(thief_windows).collect();
    let labels: Vec<bool> = windows.iter().map(|w| w.theft).collect();
    let mut models = Vec::new();
    let mut verdicts = Vec::new();
    let mut tuned = BTreeMap::new();
    for (m, cb) in books.iter().enumerate() {
        let labeled: Vec<(f64, bool)> = windows.iter().map(|w| (w.errors[m], w.theft)).collect();
        let scores: Vec<f64> = labeled.iter().map(|(e, _)| *e).collect();
        let curve = roc_sweep(&labeled, &threshold_grid(&scores))?;
        let (threshold, source) = match &cfg.thresholds {
            Thresholds::Explicit(map) if map.contains_key(&cb.feature) => (map[&cb.feature], "explicit"),
            _ => (optimize_threshold(&curve), "youden"),
        };
        let list: Vec<Verdict> = windows
            .iter()
            .map(|w| Verdict {
                window_start: w.window_start,
                representative_error: w.errors[m],
                is_theft: w.errors[m] > threshold,
            })
            .collect();
        let metrics = compute_metrics(&list.iter().map(|v| v.is_theft).collect::<Vec<_>>(), &labels)?;
        let roc_path = cfg.output_dir.join("roc").join(format!("{}.csv", cb.feature));
        if let Some(parent) = roc_path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = fs::File::create(&roc_path).map_err(|e| Error::io(&roc_path, e))?;
        write_roc_csv(BufWriter::new(file), &curve).map_err(|e| Error::io(&roc_path, e))?;
        tuned.insert(cb.feature.clone(), threshold);
        models.push(ModelEvaluation {
            model: model_name(&cb.feature),
            feature: cb.feature.clone(),
            threshold,
            threshold_source: source.to_string(),
            auc: curve.auc,
            metrics,
        });
        verdicts.push(list);
    }
    let ensemble = ensemble_vote(&verdicts)?;
    let ensemble = compute_metrics(&ensemble.iter().map(|v| v.is_theft).collect::<Vec<_>>(), &labels)?;

    let evaluation = Evaluation {
        owner: cfg.owner.clone(),
        validation_ratio: cfg.validation_ratio,
        owner_windows: labels.iter().filter(|l| !**l).count(),
        thief_windows: labels.iter().filter(|l| **l).count(),
        owner_trips: owner_entries.iter().map(|e| e.trip_id.clone()).collect(),
        thief_trips,
        models,
        ensemble,
        windows,
    };
    write_json(&cfg.output_dir.join("thresholds.json"), &tuned)?;
    write_json(&cfg.output_dir.join("evaluation.json"), &evaluation)?;
    write_text(&cfg.output_dir.join("metrics.md"), &metrics_markdown(&evaluation))?;
    write_text(&cfg.output_dir.join("metrics.csv"), &metrics_csv(&evaluation))?;
    Ok(evaluation)
}

fn fmt4(x: f64) -> String {
    format!("{x:.4}")
}

/// Results table: one row per model plus the ensemble.
pub fn metrics_markdown(ev: &Evaluation) -> String {
    let mut out = String::from(
        "| Model Name | Feature | Optimized Threshold | Accuracy | Precision | Recall | F1 Score |\n\
         |---|---|---|---|---|---|---|\n",
    );
    for m in &ev.models {
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} |\n",
            m.model,
            m.feature,
            fmt4(m.threshold),
            fmt4(m.metrics.accuracy),
            fmt4(m.metrics.precision),
            fmt4(m.metrics.recall),
            fmt4(m.metrics.f1)
        ));
    }
    out.push_str(&format!(
        "| Model Ensemble | Majority of {} Models |  | {} | {} | {} | {} |\n",
        ev.models.len(),
        fmt4(ev.ensemble.accuracy),
        fmt4(ev.ensemble.precision),
        fmt4(ev.ensemble.recall),
        fmt4(ev.ensemble.f1)
    ));
    out
}

pub fn metrics_csv(ev: &Evaluation) -> String {
    let mut out = String::from("model,feature,threshold,accuracy,precision,recall,f1,auc,tp,fp,tn,fn\n");
    for m in &ev.models {
        let s = &m.metrics;
        out.push_str(&format!(
            "{},{},{:?},{:?},{:?},{:?},{:?},{:?},{},{},{},{}\n",
            m.model, m.feature, m.threshold, s.accuracy, s.precision, s.recall, s.f1, m.auc, s.tp, s.fp, s.tn, s.fn_
        ));
    }
    let s = &ev.ensemble;
    out.push_str(&format!(
        "Model Ensemble,majority,,{:?},{:?},{:?},{:?},,{},{},{},{}\n",
        s.accuracy, s.precision, s.recall, s.f1, s.tp, s.fp, s.tn, s.fn_
    ));
    out
}

/// Files written by the report stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFiles {
    pub markdown: PathBuf,
    pub csv: Vec<PathBuf>,
    pub svg: Vec<PathBuf>,
}

/// Per-feature reconstruction dumps and plots for one trip, plus a Markdown
/// summary with the evaluation table when one exists.
pub fn run_report(cfg: &RunConfig, trip: &str, with_svg: bool) -> Result<ReportFiles> {
    cfg.validate()?;
    let selection = load_selection(cfg)?;
    let books = load_codebooks(cfg)?;
    let (log, sample_labels) = locate_trip(cfg, trip)?;
    check_schema(&log, &selection)?;
    let analysis = analyze_trip(&log, &books)?;
    let dir = cfg.output_dir.join("report").join(log.trip_id());
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let theft_span = sample_labels.as_ref().and_then(|l| {
        let first = l.iter().position(|x| *x)?;
        let last = l.iter().rposition(|x| *x)?;
        Some((first, last + 1))
    });
    let mut files = ReportFiles {
        markdown: dir.join("summary.md"),
        csv: Vec::new(),
        svg: Vec::new(),
    };
    let mut md = format!("# Reconstruction report: {}\n\n", log.trip_id());
    md.push_str("| Feature | Mean error | Max error | Mean segment distance |\n|---|---|---|---|\n");
    for (rec, err) in &analysis.per_model {
        let csv_path = dir.join(format!("{}.csv", rec.feature));
        let file = fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        write_reconstruction_csv(BufWriter::new(file), rec).map_err(|e| Error::io(&csv_path, e))?;
        files.csv.push(csv_path);
        if with_svg {
            let svg_path = dir.join(format!("{}.svg", rec.feature));
            let span = theft_span.map(|(a, b)| (a.min(err.len()), b.min(err.len())));
            write_text(
                &svg_path,
                &reconstruction_svg(
                    &format!("{} / {}", log.trip_id(), rec.feature),
                    &rec.original_assembled,
                    &rec.reconstructed,
                    &err.errors,
                    span,
                ),
            )?;
            files.svg.push(svg_path);
        }
        let mean = err.errors.iter().sum::<f64>() / err.len().max(1) as f64;
        let max = err.errors.iter().cloned().fold(0.0, f64::max);
        let dist = rec.matches.iter().map(|m| m.distance).sum::<f64>() / rec.matches.len().max(1) as f64;
        md.push_str(&format!("| {} | {} | {} | {} |\n", rec.feature, fmt4(mean), fmt4(max), fmt4(dist)));
    }
    let eval_path = cfg.output_dir.join("evaluation.json");
    if eval_path.exists() {
        let ev: Evaluation = read_json(&eval_path)?;
        md.push_str("\n## Validation results\n\n");
        md.push_str(&metrics_markdown(&ev));
    }
    write_text(&files.markdown, &md)?;
    Ok(files)
}
