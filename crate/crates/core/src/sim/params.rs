//! Camera gain/exposure parameters and their normalized form.

use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};

pub const GAIN_DB_MIN: f64 = 0.0;
pub const GAIN_DB_MAX: f64 = 30.0;
pub const EXPOSURE_S_MIN: f64 = 75e-6;
pub const EXPOSURE_S_MAX: f64 = 30e-3;

/// dB is the 20*log10 amplitude convention: 20 dB is a 10x linear gain.
pub fn gain_db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 20.0)
}

pub fn gain_linear_to_db(linear: f64) -> f64 {
    20.0 * linear.log10()
}

/// Commanded sensor settings. Always inside the allowed ranges: constructors
/// clamp finite values and reject non-finite ones.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CameraParams {
    gain_db: f64,
    exposure_s: f64,
}

impl CameraParams {
    pub fn new(gain_db: f64, exposure_s: f64) -> Result<Self> {
        if !gain_db.is_finite() || !exposure_s.is_finite() {
            return Err(Error::InvalidParams(format!(
                "non-finite gain {gain_db} dB / exposure {exposure_s} s"
            )));
        }
        Ok(Self {
            gain_db: gain_db.clamp(GAIN_DB_MIN, GAIN_DB_MAX),
            exposure_s: exposure_s.clamp(EXPOSURE_S_MIN, EXPOSURE_S_MAX),
        })
    }

    pub fn gain_db(&self) -> f64 {
        self.gain_db
    }

    pub fn exposure_s(&self) -> f64 {
        self.exposure_s
    }

    pub fn gain_linear(&self) -> f64 {
        gain_db_to_linear(self.gain_db)
    }

    /// Both parameters mapped linearly onto [0, 1].
    pub fn normalized(&self) -> (f64, f64) {
        (
            (self.gain_db - GAIN_DB_MIN) / (GAIN_DB_MAX - GAIN_DB_MIN),
            (self.exposure_s - EXPOSURE_S_MIN) / (EXPOSURE_S_MAX - EXPOSURE_S_MIN),
        )
    }

    /// Inverse of [`normalized`](Self::normalized). Inputs are clamped to
    /// [0, 1] first, so any finite pair maps to legal parameters.
    pub fn from_normalized(gain_norm: f64, exposure_norm: f64) -> Self {
        let g = gain_norm.clamp(0.0, 1.0);
        let e = exposure_norm.clamp(0.0, 1.0);
        Self {
            gain_db: GAIN_DB_MIN + g * (GAIN_DB_MAX - GAIN_DB_MIN),
            exposure_s: EXPOSURE_S_MIN + e * (EXPOSURE_S_MAX - EXPOSURE_S_MIN),
        }
    }
}

impl<'de> Deserialize<'de> for CameraParams {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            gain_db: f64,
            exposure_s: f64,
        }
        let raw = Raw::deserialize(d)?;
        CameraParams::new(raw.gain_db, raw.exposure_s).map_err(serde::de::Error::custom)
    }
}
