//! Sensor response model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed per-camera response characteristics. Exposure and gain are commanded
/// per frame via [`CameraParams`](super::CameraParams); everything here stays
/// constant over an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraModel {
    /// Radiance * exposure * linear gain is divided by this before clipping;
    /// it sets where "well exposed" sits in the parameter range.
    pub full_well_scale: f64,
    /// Gaussian read noise std on the [0, 1] linear scale, multiplied by
    /// linear gain.
    pub read_noise_sigma: f64,
    /// Signal-dependent noise std coefficient: scale * sqrt(x) * linear gain.
    pub shot_noise_scale: f64,
    /// Camera response: y = clip(x)^(1/gamma).
    pub crf_gamma: f64,
    /// Output bit depth, 1..=16.
    pub quantization_bits: u8,
    /// Disables motion blur when false (useful for controlled tests).
    pub blur_enabled: bool,
}

impl Default for CameraModel {
    fn default() -> Self {
        Self {
            full_well_scale: 1.7e-3,
            read_noise_sigma: 6e-4,
            shot_noise_scale: 1.5e-3,
            crf_gamma: 2.2,
            quantization_bits: 8,
            blur_enabled: true,
        }
    }
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.full_well_scale.is_finite() && self.full_well_scale > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "full_well_scale {} must be finite and positive",
                self.full_well_scale
            )));
        }
        for (name, v) in
            [("read_noise_sigma", self.read_noise_sigma), ("shot_noise_scale", self.shot_noise_scale)]
        {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!("{name} {v} must be finite and >= 0")));
            }
        }
        if !(self.crf_gamma.is_finite() && self.crf_gamma > 0.0) {
            return Err(Error::InvalidConfig(format!("crf_gamma {} must be positive", self.crf_gamma)));
        }
        if self.quantization_bits == 0 || self.quantization_bits > 16 {
            return Err(Error::InvalidConfig(format!(
                "quantization_bits {} outside 1..=16",
                self.quantization_bits
            )));
        }
        Ok(())
    }

    /// Noise-free variant, for controlled comparisons.
    pub fn without_noise(&self) -> Self {
        Self { read_noise_sigma: 0.0, shot_noise_scale: 0.0, ..self.clone() }
    }
}
