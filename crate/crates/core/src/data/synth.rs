//! Synthetic benchmark generator.
//!
//! Class 0 is stationary Gaussian noise on every channel. Each fault class
//! `k >= 1` adds a deterministic signature — a mean shift plus a sinusoidal
//! drift — to three channels unique to `k` (`3(k-1)`, `3(k-1)+1`,
//! `3(k-1)+2`, wrapping modulo the channel count). Train and test series are
//! drawn from disjoint random streams of the same seed.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding;

use super::{RawSeries, SeriesLabel};

pub const MAX_CLASSES: usize = 21;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_classes: usize,
    /// Sliding windows (stride 1) each class's training series yields.
    pub windows_per_class: usize,
    /// Test windows per class; defaults to a quarter of the training count.
    pub test_windows_per_class: Option<usize>,
    pub seq_len: usize,
    pub num_features: usize,
    /// Mean offset injected into signature channels, in noise-std units.
    pub mean_shift: f64,
    pub drift_amp: f64,
    pub drift_period: f64,
    pub noise_std: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 5,
            windows_per_class: 200,
            test_windows_per_class: None,
            seq_len: 10,
            num_features: 52,
            mean_shift: 3.0,
            drift_amp: 1.0,
            drift_period: 37.0,
            noise_std: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > MAX_CLASSES {
            return Err(Error::Parameter(format!(
                "synth.num_classes {} outside 1..={MAX_CLASSES}",
                self.num_classes
            )));
        }
        if self.windows_per_class == 0 {
            return Err(Error::Parameter("synth.windows_per_class must be >= 1".into()));
        }
        if self.test_windows_per_class == Some(0) {
            return Err(Error::Parameter("synth.test_windows_per_class must be >= 1".into()));
        }
        if self.seq_len == 0 || self.num_features == 0 {
            return Err(Error::Parameter("synth.seq_len and synth.num_features must be >= 1".into()));
        }
        if self.noise_std <= 0.0 || !self.noise_std.is_finite() {
            return Err(Error::Parameter(format!("synth.noise_std {} must be positive", self.noise_std)));
        }
        for (name, v) in [("mean_shift", self.mean_shift), ("drift_amp", self.drift_amp), ("drift_period", self.drift_period)] {
            if !v.is_finite() || (name == "drift_period" && v <= 0.0) {
                return Err(Error::Parameter(format!("synth.{name} {v} is invalid")));
            }
        }
        Ok(())
    }

    pub fn test_windows(&self) -> usize {
        self.test_windows_per_class.unwrap_or((self.windows_per_class / 4).max(1))
    }
}

/// The channels carrying class `k`'s injected signature; empty for class 0.
pub fn signature_channels(class: usize, num_features: usize) -> Vec<usize> {
    if class == 0 {
        return Vec::new();
    }
    let base = (class - 1) * 3;
    (0..3).map(|i| (base + i) % num_features).collect()
}

/// Everything needed to regenerate or audit a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub seed: u64,
    pub config: SynthConfig,
    /// Signature channel set per class id.
    pub signature_channels: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub train: Vec<RawSeries>,
    pub test: Vec<RawSeries>,
    pub manifest: SynthManifest,
}

fn series_for(cfg: &SynthConfig, class: usize, split: &str, windows: usize, seed: u64) -> Result<RawSeries> {
    let rows = windows + cfg.seq_len - 1;
    let mut rng = seeding::rng_for(seed, &format!("synth/{split}/class{class:02}"));
    let noise = Normal::new(0.0, cfg.noise_std).expect("validated std");
    let channels = signature_channels(class, cfg.num_features);
    let phase = 0.7 * class as f64;
    let mut values = Vec::with_capacity(rows * cfg.num_features);
    for t in 0..rows {
        let drift = cfg.mean_shift * cfg.noise_std
            + cfg.drift_amp * cfg.noise_std * (2.0 * std::f64::consts::PI * t as f64 / cfg.drift_period + phase).sin();
        for c in 0..cfg.num_features {
            let mut v = noise.sample(&mut rng);
            if channels.contains(&c) {
                v += drift;
            }
            values.push(v);
        }
    }
    RawSeries::from_parts(
        values,
        rows,
        cfg.num_features,
        SeriesLabel::Constant(class),
        &format!("synth/{split}/class{class:02}"),
    )
}

/// Generates per-class train and test series from disjoint noise streams.
pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<SynthOutput> {
    cfg.validate()?;
    let mut train = Vec::with_capacity(cfg.num_classes);
    let mut test = Vec::with_capacity(cfg.num_classes);
    for class in 0..cfg.num_classes {
        train.push(series_for(cfg, class, "train", cfg.windows_per_class, seed)?);
        test.push(series_for(cfg, class, "test", cfg.test_windows(), seed)?);
    }
    let manifest = SynthManifest {
        seed,
        config: cfg.clone(),
        signature_channels: (0..cfg.num_classes).map(|k| signature_channels(k, cfg.num_features)).collect(),
    };
    Ok(SynthOutput { train, test, manifest })
}

// Included here so callers with a plain Rng can also draw window-shaped noise
// (used by capacity checks and benches).
pub fn random_windows<R: Rng>(
    count: usize,
    seq_len: usize,
    num_features: usize,
    num_classes: usize,
    rng: &mut R,
) -> Vec<super::Window> {
    (0..count)
        .map(|i| super::Window {
            values: (0..seq_len * num_features).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            label: i % num_classes,
            seq_len,
            num_features,
        })
        .collect()
}
