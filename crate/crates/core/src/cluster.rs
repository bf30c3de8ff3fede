//! Per-feature k-means codebooks over highlighted owner segments.
//!
//! Centroids are seeded with distance-weighted (k-means++) sampling and
//! refined with Lloyd's iteration. Each restart draws from its own ChaCha
//! stream so results only depend on the seed, never on thread scheduling.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::windowing::{FilterKind, Segment, WindowConfig};

pub const DEFAULT_K: usize = 300;
pub const DEFAULT_MAX_ITER: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_RESTARTS: usize = 5;

pub const CODEBOOK_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Convergence bound on the largest squared centroid shift.
    pub tol: f64,
    pub restarts: usize,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            seed: 0,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
            restarts: DEFAULT_RESTARTS,
        }
    }
}

impl KMeansParams {
    pub fn with_k(self, k: usize) -> Self {
        Self { k, ..self }
    }

    fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be positive".into()));
        }
        if self.max_iter == 0 || self.restarts == 0 {
            return Err(Error::Config("max_iter and restarts must be positive".into()));
        }
        if !(self.tol >= 0.0 && self.tol.is_finite()) {
            return Err(Error::Config(format!("tol must be nonnegative, got {}", self.tol)));
        }
        Ok(())
    }
}

/// Outcome of one Lloyd run (or the best of several restarts).
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansRun {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub sse: f64,
    pub iterations: usize,
    pub converged: bool,
    /// SSE after each assignment step, starting with the seeding.
    pub sse_trace: Vec<f64>,
    pub restart: usize,
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and squared distance of the nearest centroid; ties go to the lowest
/// index.
pub(crate) fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn distinct_count(points: &[&[f64]]) -> usize {
    points
        .iter()
        .map(|p| p.iter().map(|v| (v + 0.0).to_bits()).collect::<Vec<u64>>())
        .collect::<HashSet<_>>()
        .len()
}

fn seed_centroids(points: &[&[f64]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..n)].to_vec());
    let mut d2: Vec<f64> = points.iter().map(|p| squared_distance(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, w) in d2.iter().enumerate() {
                acc += w;
                if *w > 0.0 && acc > target {
                    chosen = Some(i);
                    break;
                }
            }
            chosen.unwrap_or_else(|| d2.iter().rposition(|w| *w > 0.0).expect("positive mass"))
        } else {
            rng.random_range(0..n)
        };
        let c = points[pick].to_vec();
        for (p, d) in points.iter().zip(d2.iter_mut()) {
            *d = d.min(squared_distance(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Assigns every point to its nearest centroid. Returns the SSE and whether
/// any assignment changed.
fn assign_all(points: &[&[f64]], centroids: &[Vec<f64>], assignments: &mut [usize], dist: &mut [f64]) -> (f64, bool) {
    let mut changed = false;
    let mut sse = 0.0;
    for ((p, a), d) in points.iter().zip(assignments.iter_mut()).zip(dist.iter_mut()) {
        let (j, dj) = nearest(p, centroids);
        if *a != j {
            *a = j;
            changed = true;
        }
        *d = dj;
        sse += dj;
    }
    (sse, changed)
}

/// Recomputes centroids as member means. An empty cluster is moved onto the
/// point currently farthest from its own centroid. Returns the largest squared
/// shift.
fn update_centroids(points: &[&[f64]], assignments: &[usize], dist: &[f64], centroids: &mut [Vec<f64>]) -> f64 {
    let dim = centroids[0].len();
    let k = centroids.len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter().zip(assignments) {
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(p.iter()) {
            *s += v;
        }
    }
    let mut taken: HashSet<usize> = HashSet::new();
    let mut max_shift: f64 = 0.0;
    for j in 0..k {
        let next = if counts[j] > 0 {
            let n = counts[j] as f64;
            sums[j].iter().map(|s| s / n).collect()
        } else {
            let far = dist
                .iter()
                .enumerate()
                .filter(|(i, _)| !taken.contains(i))
                .fold(None, |best: Option<(usize, f64)>, (i, d)| match best {
                    Some((_, bd)) if *d <= bd => best,
                    _ => Some((i, *d)),
                })
                .map(|(i, _)| i)
                .expect("more points than clusters");
            taken.insert(far);
            points[far].to_vec()
        };
        max_shift = max_shift.max(squared_distance(&next, &centroids[j]));
        centroids[j] = next;
    }
    max_shift
}

fn lloyd(points: &[&[f64]], k: usize, max_iter: usize, tol: f64, rng: &mut ChaCha8Rng, restart: usize) -> KMeansRun {
    let mut centroids = seed_centroids(points, k, rng);
    let mut assignments = vec![usize::MAX; points.len()];
    let mut dist = vec![0.0; points.len()];
    let (mut sse, _) = assign_all(points, &centroids, &mut assignments, &mut dist);
    let mut trace = vec![sse];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let shift = update_centroids(points, &assignments, &dist, &mut centroids);
        let (next_sse, changed) = assign_all(points, &centroids, &mut assignments, &mut dist);
        sse = next_sse;
        trace.push(sse);
        if !changed || shift <= tol {
            converged = true;
            break;
        }
    }
    KMeansRun {
        centroids,
        assignments,
        sse,
        iterations,
        converged,
        sse_trace: trace,
        restart,
    }
}

/// Best-of-restarts k-means on raw points.
pub fn kmeans(points: &[&[f64]], params: &KMeansParams) -> Result<KMeansRun> {
    params.validate()?;
    let Some(first) = points.first() else {
        return Err(Error::InfeasibleK {
            k: params.k,
            available: 0,
            what: "segments",
        });
    };
    let dim = first.len();
    if let Some(bad) = points.iter().find(|p| p.len() != dim) {
        return Err(Error::LengthMismatch {
            expected: dim,
            actual: bad.len(),
        });
    }
    if params.k > points.len() {
        return Err(Error::InfeasibleK {
            k: params.k,
            available: points.len(),
            what: "segments",
        });
    }
    let distinct = distinct_count(points);
    if params.k > distinct {
        return Err(Error::InfeasibleK {
            k: params.k,
            available: distinct,
            what: "distinct segments",
        });
    }
    let runs: Vec<KMeansRun> = (0..params.restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
            rng.set_stream(r as u64);
            lloyd(points, params.k, params.max_iter, params.tol, &mut rng, r)
        })
        .collect();
    Ok(runs
        .into_iter()
        .reduce(|best, run| if run.sse < best.sse { run } else { best })
        .expect("at least one restart"))
}

/// Where a codebook came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub trip_ids: Vec<String>,
    pub segment_count: usize,
    pub iterations: usize,
    pub seed: u64,
    pub restarts: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub trained_at: String,
}

/// Trained centroids for one feature.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub feature: String,
    pub centroids: Vec<Vec<f64>>,
    pub sse: f64,
    pub cfg: WindowConfig,
    pub meta: TrainingMeta,
}

pub const UNSTAMPED: &str = "1970-01-01T00:00:00Z";

/// Fits a codebook on highlighted segments of one feature.
pub fn kmeans_fit(feature: &str, segments: &[Segment], cfg: &WindowConfig, params: &KMeansParams) -> Result<Codebook> {
    check_segments(segments, cfg)?;
    let points: Vec<&[f64]> = segments.iter().map(|s| s.values.as_slice()).collect();
    let run = kmeans(&points, params)?;
    Ok(Codebook {
        feature: feature.to_string(),
        centroids: run.centroids,
        sse: run.sse,
        cfg: *cfg,
        meta: TrainingMeta {
            trip_ids: Vec::new(),
            segment_count: segments.len(),
            iterations: run.iterations,
            seed: params.seed,
            restarts: params.restarts,
            max_iter: params.max_iter,
            tol: params.tol,
            trained_at: UNSTAMPED.to_string(),
        },
    })
}

fn check_segments(segments: &[Segment], cfg: &WindowConfig) -> Result<()> {
    for s in segments {
        if !s.highlighted {
            return Err(Error::Config(format!(
                "segment of {} at {} must be highlighted before clustering",
                s.feature, s.start
            )));
        }
        if s.len() != cfg.window_len() {
            return Err(Error::LengthMismatch {
                expected: cfg.window_len(),
                actual: s.len(),
            });
        }
    }
    Ok(())
}

impl Codebook {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn window_len(&self) -> usize {
        self.cfg.window_len()
    }

    pub fn with_training_trips(mut self, trip_ids: Vec<String>) -> Self {
        self.meta.trip_ids = trip_ids;
        self
    }

    pub fn with_trained_at(mut self, stamp: impl Into<String>) -> Self {
        self.meta.trained_at = stamp.into();
        self
    }

    pub fn to_document(&self) -> CodebookDocument {
        CodebookDocument {
            format_version: CODEBOOK_FORMAT_VERSION,
            feature: self.feature.clone(),
            k: self.k(),
            window_len: self.cfg.window_len(),
            stride_len: self.cfg.stride_len(),
            window_s: self.cfg.window_s,
            stride_s: self.cfg.stride_s,
            sample_period_s: self.cfg.sample_period_s,
            filter_name: self.cfg.filter.name().to_string(),
            centroids: self.centroids.clone(),
            sse: self.sse,
            seed: self.meta.seed,
            trained_at: self.meta.trained_at.clone(),
            training: self.meta.clone(),
        }
    }

    pub fn from_document(doc: CodebookDocument) -> Result<Self> {
        if doc.format_version != CODEBOOK_FORMAT_VERSION {
            return Err(Error::Schema(format!(
                "unsupported codebook format version {}",
                doc.format_version
            )));
        }
        let cfg = WindowConfig::new(
            doc.window_s,
            doc.stride_s,
            doc.sample_period_s,
            FilterKind::from_name(&doc.filter_name)?,
        )?;
        if cfg.window_len() != doc.window_len || cfg.stride_len() != doc.stride_len {
            return Err(Error::Schema(format!(
                "codebook {}: window/stride lengths {}/{} disagree with {} s/{} s at {} s per sample",
                doc.feature, doc.window_len, doc.stride_len, doc.window_s, doc.stride_s, doc.sample_period_s
            )));
        }
        if doc.centroids.len() != doc.k || doc.k == 0 {
            return Err(Error::Schema(format!(
                "codebook {}: k = {} but {} centroids",
                doc.feature,
                doc.k,
                doc.centroids.len()
            )));
        }
        if let Some(c) = doc.centroids.iter().find(|c| c.len() != doc.window_len) {
            return Err(Error::LengthMismatch {
                expected: doc.window_len,
                actual: c.len(),
            });
        }
        if doc.sse.is_nan() || doc.sse < 0.0 {
            return Err(Error::Schema(format!("codebook {}: negative SSE", doc.feature)));
        }
        Ok(Self {
            feature: doc.feature,
            centroids: doc.centroids,
            sse: doc.sse,
            cfg,
            meta: TrainingMeta {
                seed: doc.seed,
                trained_at: doc.trained_at,
                ..doc.training
            },
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_document(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.to_json()?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// On-disk layout of a codebook. Reals are written as the shortest decimal
/// that reads back to the identical `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookDocument {
    pub format_version: u32,
    pub feature: String,
    pub k: usize,
    pub window_len: usize,
    pub stride_len: usize,
    pub window_s: f64,
    pub stride_s: f64,
    pub sample_period_s: f64,
    pub filter_name: String,
    pub centroids: Vec<Vec<f64>>,
    pub sse: f64,
    pub seed: u64,
    pub trained_at: String,
    pub training: TrainingMeta,
}

/// Nearest centroid to a highlighted segment and its Euclidean distance.
pub fn assign(segment: &Segment, cb: &Codebook) -> Result<(usize, f64)> {
    if segment.len() != cb.window_len() {
        return Err(Error::LengthMismatch {
            expected: cb.window_len(),
            actual: segment.len(),
        });
    }
    let (j, d2) = nearest(&segment.values, &cb.centroids);
    Ok((j, d2.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElbowPoint {
    pub k: usize,
    pub sse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElbowCurve {
    pub points: Vec<ElbowPoint>,
    pub recommended_k: usize,
}

/// Fits every k in `k_values` and picks the knee of the SSE curve.
///
/// `params.k` is ignored.
pub fn elbow_sweep(segments: &[Segment], cfg: &WindowConfig, k_values: &[usize], params: &KMeansParams) -> Result<ElbowCurve> {
    check_segments(segments, cfg)?;
    let points: Vec<&[f64]> = segments.iter().map(|s| s.values.as_slice()).collect();
    elbow_sweep_points(&points, k_values, params)
}

pub fn elbow_sweep_points(points: &[&[f64]], k_values: &[usize], params: &KMeansParams) -> Result<ElbowCurve> {
    if k_values.is_empty() {
        return Err(Error::Config("elbow sweep needs at least one k".into()));
    }
    if k_values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("elbow k values must be strictly increasing".into()));
    }
    let curve = k_values
        .par_iter()
        .map(|&k| kmeans(points, &params.with_k(k)).map(|run| ElbowPoint { k, sse: run.sse }))
        .collect::<Result<Vec<_>>>()?;
    let recommended_k = knee(&curve);
    Ok(ElbowCurve {
        points: curve,
        recommended_k,
    })
}

/// The point farthest from the chord joining the first and last points, with
/// both axes rescaled to [0, 1]. SSE is taken on a log scale so that a
/// proportional drop counts the same at every magnitude; a curve that reaches
/// zero falls back to the linear scale. Ties go to the smaller k.
pub fn knee(curve: &[ElbowPoint]) -> usize {
    let (first, last) = (curve[0], curve[curve.len() - 1]);
    let k_span = (last.k - first.k) as f64;
    let log_scale = curve.iter().all(|p| p.sse > 0.0);
    let y = |p: &ElbowPoint| if log_scale { p.sse.ln() } else { p.sse };
    let (lo, hi) = curve
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(y(p)), hi.max(y(p))));
    if curve.len() < 3 || k_span == 0.0 || hi == lo {
        return first.k;
    }
    let norm = |p: &ElbowPoint| ((p.k - first.k) as f64 / k_span, (y(p) - lo) / (hi - lo));
    let (x0, y0) = norm(&first);
    let (x1, y1) = norm(&last);
    let (dx, dy) = (x1 - x0, y1 - y0);
    let chord = (dx * dx + dy * dy).sqrt();
    let mut best = (first.k, f64::NEG_INFINITY);
    for p in curve {
        let (x, y) = norm(p);
        let d = (dy * (x - x0) - dx * (y - y0)).abs() / chord;
        if d > best.1 {
            best = (p.k, d);
        }
    }
    best.0
}
