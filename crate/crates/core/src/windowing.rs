//! Sliding-window segmentation and filter highlighting.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_WINDOW_S: f64 = 32.0;
pub const DEFAULT_STRIDE_S: f64 = 16.0;

/// Zero-endpoint highlighting filters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterKind {
    /// `0.5 * (1 - cos(2πn / (N - 1)))`
    #[default]
    RaisedCosine,
    /// `1 - |2n / (N - 1) - 1|`
    Triangular,
}

impl FilterKind {
    pub fn name(self) -> &'static str {
        match self {
            FilterKind::RaisedCosine => "raised-cosine",
            FilterKind::Triangular => "triangular",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "raised-cosine" => Ok(FilterKind::RaisedCosine),
            "triangular" => Ok(FilterKind::Triangular),
            other => Err(Error::Config(format!("unknown filter {other:?}"))),
        }
    }

    /// Filter coefficient `n` of an `len`-point filter.
    pub fn coefficient(self, n: usize, len: usize) -> f64 {
        // Endpoints are pinned to exactly zero; cos(2π) is not exactly 1.
        if n == 0 || n + 1 == len {
            return 0.0;
        }
        let x = n as f64 / (len - 1) as f64;
        match self {
            FilterKind::RaisedCosine => 0.5 * (1.0 - (2.0 * PI * x).cos()),
            FilterKind::Triangular => 1.0 - (2.0 * x - 1.0).abs(),
        }
    }

    pub fn coefficients(self, len: usize) -> Vec<f64> {
        (0..len).map(|n| self.coefficient(n, len)).collect()
    }
}

/// Window geometry in seconds plus the derived sample counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WindowConfig {
    pub window_s: f64,
    pub stride_s: f64,
    pub sample_period_s: f64,
    pub filter: FilterKind,
    window_len: usize,
    stride_len: usize,
}

/// `round(seconds / period)` with halves rounded up.
pub(crate) fn seconds_to_samples(seconds: f64, sample_period_s: f64) -> usize {
    (seconds / sample_period_s + 0.5).floor() as usize
}

impl WindowConfig {
    pub fn new(window_s: f64, stride_s: f64, sample_period_s: f64, filter: FilterKind) -> Result<Self> {
        for (what, v) in [("window", window_s), ("stride", stride_s), ("sample period", sample_period_s)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{what} must be positive, got {v}")));
            }
        }
        let window_len = seconds_to_samples(window_s, sample_period_s);
        let stride_len = seconds_to_samples(stride_s, sample_period_s);
        if window_len < 2 {
            return Err(Error::Config(format!(
                "window of {window_s} s at {sample_period_s} s per sample is {window_len} samples; need at least 2"
            )));
        }
        if stride_len < 1 || stride_len > window_len {
            return Err(Error::Config(format!(
                "stride of {stride_len} samples must lie in 1..={window_len}"
            )));
        }
        Ok(Self {
            window_s,
            stride_s,
            sample_period_s,
            filter,
            window_len,
            stride_len,
        })
    }

    /// 32 s windows with a 16 s stride and the raised-cosine filter.
    pub fn with_period(sample_period_s: f64) -> Result<Self> {
        Self::new(DEFAULT_WINDOW_S, DEFAULT_STRIDE_S, sample_period_s, FilterKind::RaisedCosine)
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn stride_len(&self) -> usize {
        self.stride_len
    }

    /// Number of full windows in a series of `len` samples.
    pub fn segment_count(&self, len: usize) -> usize {
        if len < self.window_len {
            0
        } else {
            (len - self.window_len) / self.stride_len + 1
        }
    }

    /// Samples covered by full windows.
    pub fn covered_len(&self, len: usize) -> usize {
        match self.segment_count(len) {
            0 => 0,
            n => (n - 1) * self.stride_len + self.window_len,
        }
    }
}

/// A fixed-length window of one feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub feature: String,
    pub start: usize,
    pub values: Vec<f64>,
    pub highlighted: bool,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Cuts `series` into windows starting at 0, stride, 2·stride, ...; a
/// trailing partial window is dropped.
pub fn slide(feature: &str, series: &[f64], cfg: &WindowConfig) -> Result<Vec<Segment>> {
    let w = cfg.window_len();
    if series.len() < w {
        return Err(Error::TooShort {
            len: series.len(),
            required: w,
        });
    }
    Ok((0..cfg.segment_count(series.len()))
        .map(|i| {
            let start = i * cfg.stride_len();
            Segment {
                feature: feature.to_string(),
                start,
                values: series[start..start + w].to_vec(),
                highlighted: false,
            }
        })
        .collect())
}

/// Multiplies a raw segment by the highlighting filter.
pub fn highlight(mut seg: Segment, filter: FilterKind) -> Result<Segment> {
    if seg.highlighted {
        return Err(Error::Config(format!(
            "segment of {} at {} is already highlighted",
            seg.feature, seg.start
        )));
    }
    let n = seg.values.len();
    for (i, v) in seg.values.iter_mut().enumerate() {
        *v *= filter.coefficient(i, n);
    }
    seg.highlighted = true;
    Ok(seg)
}

/// `slide` followed by `highlight` on every segment.
pub fn highlighted_segments(feature: &str, series: &[f64], cfg: &WindowConfig) -> Result<Vec<Segment>> {
    slide(feature, series, cfg)?
        .into_iter()
        .map(|s| highlight(s, cfg.filter))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(w: f64, s: f64) -> WindowConfig {
        WindowConfig::new(w, s, 1.0, FilterKind::RaisedCosine).unwrap()
    }

    #[test]
    fn derived_lengths_round_half_up() {
        let c = WindowConfig::new(32.0, 16.0, 0.5, FilterKind::RaisedCosine).unwrap();
        assert_eq!((c.window_len(), c.stride_len()), (64, 32));
        let c = WindowConfig::new(2.5, 1.5, 1.0, FilterKind::RaisedCosine).unwrap();
        assert_eq!((c.window_len(), c.stride_len()), (3, 2));
    }

    #[test]
    fn invalid_geometry_rejected() {
        assert!(WindowConfig::new(1.0, 1.0, 1.0, FilterKind::RaisedCosine).is_err());
        assert!(WindowConfig::new(8.0, 9.0, 1.0, FilterKind::RaisedCosine).is_err());
        assert!(WindowConfig::new(8.0, 0.2, 1.0, FilterKind::RaisedCosine).is_err());
        assert!(WindowConfig::new(8.0, 4.0, 0.0, FilterKind::RaisedCosine).is_err());
    }

    #[test]
    fn slide_counts() {
        let c = cfg(32.0, 16.0);
        let segs = slide("f", &[0.0; 64], &c).unwrap();
        assert_eq!(segs.iter().map(|s| s.start).collect::<Vec<_>>(), [0, 16, 32]);
        assert_eq!(slide("f", &[0.0; 32], &c).unwrap().len(), 1);
        assert!(matches!(
            slide("f", &[0.0; 31], &c),
            Err(Error::TooShort { len: 31, required: 32 })
        ));
    }

    #[test]
    fn highlight_all_ones_gives_filter() {
        let seg = Segment {
            feature: "f".into(),
            start: 0,
            values: vec![1.0; 32],
            highlighted: false,
        };
        let h = highlight(seg, FilterKind::RaisedCosine).unwrap();
        assert_eq!(h.values[0], 0.0);
        assert_eq!(h.values[31], 0.0);
        // Direct evaluation of 0.5 * (1 - cos(30π/31)).
        let mid = 0.5 * (1.0 - (30.0 * PI / 31.0).cos());
        assert!((h.values[15] - mid).abs() < 1e-15);
        assert!((h.values[16] - mid).abs() < 1e-15);
        assert!((mid - 0.99743).abs() < 5e-6);
        assert!(highlight(h, FilterKind::RaisedCosine).is_err());
    }

    #[test]
    fn highlight_zeros_stays_zero() {
        let seg = Segment {
            feature: "f".into(),
            start: 0,
            values: vec![0.0; 32],
            highlighted: false,
        };
        assert!(highlight(seg, FilterKind::Triangular).unwrap().values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn triangular_shape() {
        let w = FilterKind::Triangular.coefficients(5);
        assert_eq!(w, [0.0, 0.5, 1.0, 0.5, 0.0]);
        assert_eq!(FilterKind::from_name("triangular").unwrap(), FilterKind::Triangular);
        assert!(FilterKind::from_name("boxcar").is_err());
    }
}
