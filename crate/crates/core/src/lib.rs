//! Owner-only vehicle theft detection from CAN-bus time series.
//!
//! The owner's trips are cut into highlighted windows and clustered into one
//! k-means codebook per essential feature. A trip under test is rebuilt from
//! the nearest owner centroids; windows whose mean reconstruction error
//! exceeds a tuned threshold are flagged as theft, and five single-feature
//! models vote by majority.

pub mod cluster;
pub mod detect;
pub mod error;
pub mod ingest;
pub mod pipeline;
pub mod plot;
pub mod reconstruct;
pub mod synth;
pub mod windowing;

pub use error::{Error, Result};
