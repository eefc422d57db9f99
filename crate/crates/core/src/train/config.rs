use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::WarpConfig;
use crate::error::{Error, Result};
use crate::geometry::HarrisConfig;
use crate::net::{NetworkConfig, SIZE_MULTIPLE};

/// Keypoints used to form training correspondences.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Detector {
    /// Round-trip-consistent grid points.
    Grid,
    /// Harris corners paired by ground-truth proximity.
    Harris,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub eta_max: f64,
    pub eta_min: f64,
    pub warmup_steps: u64,
    pub decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub adam_epsilon: f64,
    pub margin: f64,
    pub gamma_init: f64,
    pub gamma_decay: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub crop_size: usize,
    /// Degrees.
    pub rotation_range: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub translation_frac: f64,
    pub perspective_frac: f64,
    pub photometric: f64,
    pub seed: u64,
    pub detector: Detector,
    pub grid_stride: usize,
    /// Round-trip tolerance of grid correspondences, pixels.
    pub tau: f64,
    /// Largest ground-truth distance of a Harris correspondence, pixels.
    pub match_radius: f64,
    pub harris: HarrisConfig,
    pub n_sources: usize,
    pub source_size: usize,
    pub val_pairs: usize,
    pub val_every: u64,
    /// Reprojection threshold of the held-out accuracy, pixels.
    pub val_threshold: f64,
    pub log_every: u64,
    pub network: NetworkConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let warp = WarpConfig::default();
        TrainConfig {
            eta_max: 0.005,
            eta_min: 0.0001,
            warmup_steps: 2048,
            decay: 0.99996,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            adam_epsilon: 1e-8,
            margin: 0.5,
            gamma_init: 1.0,
            gamma_decay: 0.9993,
            batch_size: 4,
            steps: 2000,
            crop_size: 96,
            rotation_range: warp.rotation_range,
            scale_min: warp.scale_min,
            scale_max: warp.scale_max,
            translation_frac: warp.translation_frac,
            perspective_frac: warp.perspective_frac,
            photometric: warp.photometric,
            seed: 0,
            detector: Detector::Grid,
            grid_stride: 8,
            tau: 1.0,
            match_radius: 3.0,
            harris: HarrisConfig {
                top_n: 256,
                ..HarrisConfig::default()
            },
            n_sources: 8,
            source_size: 192,
            val_pairs: 32,
            val_every: 100,
            val_threshold: 3.0,
            log_every: 10,
            network: NetworkConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TrainConfig::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn warp(&self) -> WarpConfig {
        WarpConfig {
            rotation_range: self.rotation_range,
            scale_min: self.scale_min,
            scale_max: self.scale_max,
            translation_frac: self.translation_frac,
            perspective_frac: self.perspective_frac,
            photometric: self.photometric,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.eta_min > 0.0 && self.eta_min <= self.eta_max) {
            return fail(format!(
                "need 0 < eta_min <= eta_max, got {} and {}",
                self.eta_min, self.eta_max
            ));
        }
        for (name, v) in [("decay", self.decay), ("gamma_decay", self.gamma_decay)] {
            if !(v > 0.0 && v < 1.0) {
                return fail(format!("{name} must lie in (0, 1), got {v}"));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return fail(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.gamma_init) {
            return fail(format!("gamma_init must lie in [0, 1], got {}", self.gamma_init));
        }
        if self.crop_size == 0 || !self.crop_size.is_multiple_of(SIZE_MULTIPLE) {
            return fail(format!(
                "crop_size must be a positive multiple of {SIZE_MULTIPLE}, got {}",
                self.crop_size
            ));
        }
        if self.source_size < self.crop_size {
            return fail(format!(
                "source_size {} is smaller than crop_size {}",
                self.source_size, self.crop_size
            ));
        }
        if self.batch_size == 0 || self.grid_stride == 0 || self.n_sources == 0 {
            return fail("batch_size, grid_stride and n_sources must be positive".into());
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return fail(format!(
                "need 0 < scale_min <= scale_max, got {} and {}",
                self.scale_min, self.scale_max
            ));
        }
        if self.weight_decay < 0.0 || self.adam_epsilon <= 0.0 || self.tau <= 0.0 {
            return fail("weight_decay must be >= 0, adam_epsilon and tau > 0".into());
        }
        self.network.validate()
    }
}
