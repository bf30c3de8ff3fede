//! Reconstruction of a validation series from nearest owner centroids.
//!
//! Both the reconstruction and the reference it is compared against live in
//! the highlighted domain: the original is highlighted segment by segment and
//! overlap-merged with the same averaging rule used for the centroids.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::cluster::{assign, Codebook};
use crate::error::{Error, Result};
use crate::ingest::format_real;
use crate::windowing::{highlighted_segments, Segment, WindowConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentMatch {
    pub start: usize,
    pub centroid: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reconstruction {
    pub feature: String,
    pub original_assembled: Vec<f64>,
    pub reconstructed: Vec<f64>,
    pub matches: Vec<SegmentMatch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSeries {
    pub feature: String,
    pub errors: Vec<f64>,
}

impl ErrorSeries {
    pub fn len(&self) -> usize {
        self.errors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.errors.is_empty()
    }
}

/// Averages overlapping windows sample by sample. `total_len` must cover the
/// last window.
pub fn overlap_merge<'a, I>(windows: I, total_len: usize) -> Vec<f64>
where
    I: IntoIterator<Item = (usize, &'a [f64])>,
{
    let mut sum = vec![0.0; total_len];
    let mut count = vec![0u32; total_len];
    for (start, values) in windows {
        for (i, v) in values.iter().enumerate() {
            sum[start + i] += v;
            count[start + i] += 1;
        }
    }
    sum.iter()
        .zip(&count)
        .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect()
}

/// Reconstructs `series` with the codebook's own window configuration.
pub fn reconstruct_series(series: &[f64], cb: &Codebook) -> Result<Reconstruction> {
    reconstruct_with(series, &cb.cfg, cb)
}

/// Reconstructs `series` segmented with `cfg`, which must agree with the
/// geometry the codebook was trained on.
pub fn reconstruct_with(series: &[f64], cfg: &WindowConfig, cb: &Codebook) -> Result<Reconstruction> {
    if cfg.window_len() != cb.cfg.window_len()
        || cfg.stride_len() != cb.cfg.stride_len()
        || cfg.filter != cb.cfg.filter
    {
        return Err(Error::ConfigMismatch(format!(
            "series windows {}/{} ({}) vs codebook {} windows {}/{} ({})",
            cfg.window_len(),
            cfg.stride_len(),
            cfg.filter.name(),
            cb.feature,
            cb.cfg.window_len(),
            cb.cfg.stride_len(),
            cb.cfg.filter.name()
        )));
    }
    if let Some(c) = cb.centroids.iter().find(|c| c.len() != cfg.window_len()) {
        return Err(Error::ConfigMismatch(format!(
            "codebook {} has centroids of length {}, windows are {}",
            cb.feature,
            c.len(),
            cfg.window_len()
        )));
    }
    let segments = highlighted_segments(&cb.feature, series, cfg)?;
    let matches = segments
        .iter()
        .map(|s| {
            assign(s, cb).map(|(centroid, distance)| SegmentMatch {
                start: s.start,
                centroid,
                distance,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let total = cfg.covered_len(series.len());
    let original_assembled = overlap_merge(segments.iter().map(|s: &Segment| (s.start, s.values.as_slice())), total);
    let reconstructed = overlap_merge(
        matches.iter().map(|m| (m.start, cb.centroids[m.centroid].as_slice())),
        total,
    );
    Ok(Reconstruction {
        feature: cb.feature.clone(),
        original_assembled,
        reconstructed,
        matches,
    })
}

/// Per-sample absolute reconstruction error.
pub fn error_series(rec: &Reconstruction) -> ErrorSeries {
    ErrorSeries {
        feature: rec.feature.clone(),
        errors: rec
            .original_assembled
            .iter()
            .zip(&rec.reconstructed)
            .map(|(a, b)| (a - b).abs())
            .collect(),
    }
}

/// Writes `index,original_assembled,reconstructed,error` rows.
pub fn write_reconstruction_csv<W: Write>(mut out: W, rec: &Reconstruction) -> std::io::Result<()> {
    writeln!(out, "index,original_assembled,reconstructed,error")?;
    for (i, (a, b)) in rec.original_assembled.iter().zip(&rec.reconstructed).enumerate() {
        writeln!(out, "{i},{},{},{}", format_real(*a), format_real(*b), format_real((a - b).abs()))?;
    }
    Ok(())
}
