//! Deterministic synthetic multi-driver CAN corpus.
//!
//! Every feature is a first-order autoregressive series around a drifting
//! base level with a periodic excursion on top. Drivers differ in base level
//! (and excursion period) on the essential features and are identical on the
//! decoy features, so the selection rules and the separation filter have
//! something to reject.

use std::f64::consts::PI;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::TripLog;
use crate::windowing::{seconds_to_samples, DEFAULT_WINDOW_S};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureProfile {
    pub base: f64,
    /// Units per second.
    pub drift: f64,
    /// AR(1) coefficient in [0, 1).
    pub autocorr: f64,
    /// Innovation standard deviation. Zero gives a noiseless series.
    pub noise_scale: f64,
    pub event_amplitude: f64,
    pub event_period_s: f64,
}

impl FeatureProfile {
    pub fn constant(level: f64) -> Self {
        Self {
            base: level,
            drift: 0.0,
            autocorr: 0.0,
            noise_scale: 0.0,
            event_amplitude: 0.0,
            event_period_s: 0.0,
        }
    }

    fn validate(&self, feature: &str) -> Result<()> {
        let bad = |message: String| {
            Err(Error::Feature {
                feature: feature.to_string(),
                message,
            })
        };
        if !(0.0..1.0).contains(&self.autocorr) {
            return bad(format!("autocorrelation {} outside [0, 1)", self.autocorr));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return bad(format!("noise scale {} must be nonnegative", self.noise_scale));
        }
        if self.event_amplitude != 0.0 && (self.event_period_s.is_nan() || self.event_period_s <= 0.0) {
            return bad("excursions need a positive period".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriverProfile {
    pub driver_id: String,
    pub features: IndexMap<String, FeatureProfile>,
    /// Columns written with every cell empty.
    #[serde(default)]
    pub missing_features: Vec<String>,
}

/// Generates one trip. The duration must cover at least one 32 s window.
pub fn generate_trip(
    profile: &DriverProfile,
    trip_id: &str,
    duration_s: f64,
    sample_period_s: f64,
    seed: u64,
) -> Result<TripLog> {
    if !(sample_period_s.is_finite() && sample_period_s > 0.0) {
        return Err(Error::Config(format!("sample period must be positive, got {sample_period_s}")));
    }
    if duration_s.is_nan() || duration_s < DEFAULT_WINDOW_S {
        return Err(Error::Config(format!(
            "trip duration {duration_s} s is shorter than one {DEFAULT_WINDOW_S} s window"
        )));
    }
    let n = seconds_to_samples(duration_s, sample_period_s);
    let mut features = IndexMap::new();
    for (stream, (name, fp)) in profile.features.iter().enumerate() {
        fp.validate(name)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream as u64);
        features.insert(name.clone(), ar1_series(fp, n, sample_period_s, &mut rng));
    }
    for name in &profile.missing_features {
        features.insert(name.clone(), vec![None; n]);
    }
    TripLog::new(trip_id, profile.driver_id.clone(), sample_period_s, features)
}

fn ar1_series(fp: &FeatureProfile, n: usize, dt: f64, rng: &mut ChaCha8Rng) -> Vec<Option<f64>> {
    let phase = rng.random::<f64>() * 2.0 * PI;
    let mut gauss = || -> f64 { StandardNormal.sample(rng) };
    let stationary = fp.noise_scale / (1.0 - fp.autocorr * fp.autocorr).sqrt();
    let mut noise = if fp.noise_scale > 0.0 { stationary * gauss() } else { 0.0 };
    (0..n)
        .map(|i| {
            if i > 0 && fp.noise_scale > 0.0 {
                noise = fp.autocorr * noise + fp.noise_scale * gauss();
            }
            let t = i as f64 * dt;
            let event = if fp.event_amplitude != 0.0 {
                fp.event_amplitude * (2.0 * PI * t / fp.event_period_s + phase).sin()
            } else {
                0.0
            };
            Some(fp.base + fp.drift * t + event + noise)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpliceSpec {
    pub victim_trip_id: String,
    pub donor_driver_id: String,
    /// Where the splice begins, as a fraction of the victim's length.
    pub start_fraction: f64,
    pub length_s: f64,
}

impl SpliceSpec {
    /// Replaces the final `fraction` of the victim.
    pub fn tail(victim: &TripLog, donor_driver_id: &str, fraction: f64) -> Self {
        Self {
            victim_trip_id: victim.trip_id().to_string(),
            donor_driver_id: donor_driver_id.to_string(),
            start_fraction: 1.0 - fraction,
            length_s: fraction * victim.duration_s(),
        }
    }
}

/// Overwrites the splice window of `victim` with the donor's samples at the
/// same indices. Returns the spliced trip and one theft label per sample.
pub fn splice_theft(victim: &TripLog, donor: &TripLog, spec: &SpliceSpec) -> Result<(TripLog, Vec<bool>)> {
    if spec.victim_trip_id != victim.trip_id() {
        return Err(Error::Config(format!(
            "splice targets {} but victim is {}",
            spec.victim_trip_id,
            victim.trip_id()
        )));
    }
    if spec.donor_driver_id != donor.driver_id() {
        return Err(Error::Config(format!(
            "splice donor should be driver {} but trip {} belongs to {}",
            spec.donor_driver_id,
            donor.trip_id(),
            donor.driver_id()
        )));
    }
    if victim.sample_period_s() != donor.sample_period_s() {
        return Err(Error::Config("victim and donor sample periods differ".into()));
    }
    let mut victim_names: Vec<&str> = victim.feature_names().collect();
    let mut donor_names: Vec<&str> = donor.feature_names().collect();
    victim_names.sort_unstable();
    donor_names.sort_unstable();
    if victim_names != donor_names {
        return Err(Error::Schema("victim and donor feature sets differ".into()));
    }
    if !(0.0..1.0).contains(&spec.start_fraction) || spec.length_s.is_nan() || spec.length_s < 0.0 {
        return Err(Error::Config(format!(
            "splice start fraction {} must be in [0, 1) and length {} nonnegative",
            spec.start_fraction, spec.length_s
        )));
    }
    let len = victim.len();
    let start = (spec.start_fraction * len as f64).round() as usize;
    let count = seconds_to_samples(spec.length_s, victim.sample_period_s());
    let end = start + count;
    if end > len {
        return Err(Error::Config(format!(
            "splice [{start}, {end}) does not fit in a {len}-sample trip"
        )));
    }
    if end > donor.len() {
        return Err(Error::Config(format!(
            "donor trip {} has {} samples, splice needs {end}",
            donor.trip_id(),
            donor.len()
        )));
    }
    let features = victim
        .features()
        .iter()
        .map(|(name, values)| {
            let mut out = values.clone();
            let source = donor.get(name).expect("feature sets checked");
            out[start..end].copy_from_slice(&source[start..end]);
            (name.clone(), out)
        })
        .collect();
    let trip_id = format!("{}-splice-{}", victim.trip_id(), spec.donor_driver_id);
    let spliced = TripLog::new(trip_id, victim.driver_id(), victim.sample_period_s(), features)?;
    let labels = (0..len).map(|i| (start..end).contains(&i)).collect();
    Ok((spliced, labels))
}

/// A detection window is theft iff more than half of its samples are.
pub fn window_labels(sample_labels: &[bool], detection_len: usize) -> Vec<bool> {
    sample_labels
        .chunks_exact(detection_len.max(1))
        .map(|w| 2 * w.iter().filter(|t| **t).count() > w.len())
        .collect()
}

pub const DEFAULT_DRIVERS: [&str; 4] = ["A", "B", "C", "D"];

/// Essential features: per-driver base levels for A..D, innovation scale,
/// AR coefficient, excursion amplitude, per-driver excursion period, drift.
#[allow(clippy::type_complexity)]
const SEPARABLE: [(&str, [f64; 4], f64, f64, f64, [f64; 4], f64); 5] = [
    ("transmission_oil_temperature", [88.0, 74.0, 102.0, 116.0], 0.3, 0.9, 1.5, [120.0, 90.0, 150.0, 100.0], 0.003),
    ("speed_back_left_wheel", [40.0, 14.0, 66.0, 92.0], 1.0, 0.85, 3.0, [90.0, 60.0, 120.0, 75.0], 0.0),
    ("torque_converter_turbine_speed", [1400.0, 1150.0, 1650.0, 1900.0], 10.0, 0.8, 30.0, [75.0, 60.0, 100.0, 90.0], 0.0),
    ("idle_engine_speed", [720.0, 660.0, 780.0, 840.0], 3.0, 0.7, 6.0, [150.0, 120.0, 180.0, 100.0], 0.0),
    ("torque_converter_speed", [1500.0, 1250.0, 1750.0, 2000.0], 10.0, 0.8, 30.0, [75.0, 60.0, 100.0, 90.0], 0.0),
];

pub const ESSENTIAL_FEATURES: [&str; 5] = [
    SEPARABLE[0].0,
    SEPARABLE[1].0,
    SEPARABLE[2].0,
    SEPARABLE[3].0,
    SEPARABLE[4].0,
];

/// The four default drivers A..D.
pub fn default_profiles() -> Vec<DriverProfile> {
    DEFAULT_DRIVERS
        .iter()
        .enumerate()
        .map(|(d, id)| {
            let mut features = IndexMap::new();
            for (name, bases, noise, phi, amp, periods, drift) in SEPARABLE {
                features.insert(
                    name.to_string(),
                    FeatureProfile {
                        base: bases[d],
                        drift,
                        autocorr: phi,
                        noise_scale: noise,
                        event_amplitude: amp,
                        event_period_s: periods[d],
                    },
                );
            }
            // Same distribution for every driver.
            features.insert(
                "steering_wheel_acceleration".into(),
                FeatureProfile {
                    base: 0.0,
                    drift: 0.0,
                    autocorr: 0.2,
                    noise_scale: 4.0,
                    event_amplitude: 0.0,
                    event_period_s: 0.0,
                },
            );
            features.insert(
                "fuel_injection_quantity".into(),
                FeatureProfile {
                    base: 12.0,
                    drift: 0.0,
                    autocorr: 0.95,
                    noise_scale: 0.4,
                    event_amplitude: 1.0,
                    event_period_s: 60.0,
                },
            );
            features.insert("engine_coolant_setpoint".into(), FeatureProfile::constant(90.0));
            features.insert("engine_fault_code".into(), FeatureProfile::constant(0.0));
            DriverProfile {
                driver_id: id.to_string(),
                features,
                missing_features: vec!["fuel_rail_pressure_aux".into()],
            }
        })
        .collect()
}

/// Mixes a corpus seed with driver and trip indices into a trip seed.
pub fn trip_seed(corpus_seed: u64, driver_index: usize, trip_index: usize) -> u64 {
    let mut z = corpus_seed ^ ((driver_index as u64) << 32 | trip_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
