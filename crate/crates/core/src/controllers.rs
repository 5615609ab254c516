//! Camera parameter controllers.
//!
//! Everything that decides the next frame's gain and exposure implements
//! [`Controller`]: it sees the frames captured so far (oldest first, each
//! carrying the params it was shot with) and emits the params for the next
//! frame. The reactive baselines only look at the latest frame.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::FloatImage;
use crate::sim::{
    gain_linear_to_db, CameraParams, EXPOSURE_S_MAX, EXPOSURE_S_MIN,
};

pub trait Controller {
    /// Stable identity, recorded in traces and episode manifests.
    fn id(&self) -> &'static str;

    /// Command for the first frame, before any history exists.
    fn initial_params(&self) -> CameraParams;

    /// Command for the frame after the last one in `frames`. Needs at least
    /// one frame of history.
    fn next_params(&mut self, frames: &[crate::sim::Frame]) -> Result<CameraParams>;
}

fn latest(frames: &[crate::sim::Frame]) -> Result<&crate::sim::Frame> {
    frames.last().ok_or_else(|| {
        Error::InvalidConfig("controller stepped with empty frame history".into())
    })
}

/// Splits a desired brightness factor across exposure and gain: exposure
/// absorbs as much of it as its range allows, gain takes the remainder.
/// The factor is a brightness ratio, so gain moves on the linear scale.
pub fn exposure_priority_update(current: CameraParams, factor: f64) -> Result<CameraParams> {
    if !(factor.is_finite() && factor > 0.0) {
        return Err(Error::InvalidParams(format!("brightness factor {factor} must be positive")));
    }
    if factor == 1.0 {
        return Ok(current);
    }
    let e = current.exposure_s();
    let e_next = (e * factor).clamp(EXPOSURE_S_MIN, EXPOSURE_S_MAX);
    let remainder = factor / (e_next / e);
    let g_next = current.gain_linear() * remainder;
    // Sub-unity linear gain falls out of range and clamps back to 0 dB.
    CameraParams::new(gain_linear_to_db(g_next.max(1e-6)), e_next)
}

/// Always commands the same params.
#[derive(Debug, Clone)]
pub struct FixedController {
    params: CameraParams,
}

impl FixedController {
    pub fn new(params: CameraParams) -> Self {
        Self { params }
    }
}

impl Controller for FixedController {
    fn id(&self) -> &'static str {
        "fixed"
    }

    fn initial_params(&self) -> CameraParams {
        self.params
    }

    fn next_params(&mut self, _frames: &[crate::sim::Frame]) -> Result<CameraParams> {
        Ok(self.params)
    }
}

/// Mean-intensity servo standing in for a built-in AE+AG loop: one bounded
/// multiplicative correction per frame toward a target mean. The rate limit
/// is what makes it lag on fast lighting changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReactiveConfig {
    /// Target mean intensity, fraction of full scale.
    pub target_mean: f64,
    /// Per-frame correction bound: factor stays in [1 - rate, 1 + rate].
    pub rate_limit: f64,
    /// Mean is floored here before dividing, so black frames push the
    /// maximum correction instead of a division blow-up.
    pub mean_floor: f64,
    pub initial: CameraParams,
}

impl Default for ReactiveConfig {
    fn default() -> Self {
        Self {
            target_mean: 0.45,
            rate_limit: 0.15,
            mean_floor: 1e-4,
            initial: CameraParams::new(0.0, 3.0e-4).expect("static default"),
        }
    }
}

impl ReactiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_mean > 0.0 && self.target_mean < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "target_mean {} outside (0, 1)",
                self.target_mean
            )));
        }
        if !(self.rate_limit > 0.0 && self.rate_limit < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "rate_limit {} outside (0, 1)",
                self.rate_limit
            )));
        }
        if !(self.mean_floor > 0.0) {
            return Err(Error::InvalidConfig("mean_floor must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ReactiveAeAg {
    cfg: ReactiveConfig,
}

impl ReactiveAeAg {
    pub fn new(cfg: ReactiveConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }
}

impl Default for ReactiveAeAg {
    fn default() -> Self {
        Self { cfg: ReactiveConfig::default() }
    }
}

impl Controller for ReactiveAeAg {
    fn id(&self) -> &'static str {
        "reactive_ae_ag"
    }

    fn initial_params(&self) -> CameraParams {
        self.cfg.initial
    }

    fn next_params(&mut self, frames: &[crate::sim::Frame]) -> Result<CameraParams> {
        let last = latest(frames)?;
        let mu = last.image.mean_intensity().max(self.cfg.mean_floor);
        let factor = (self.cfg.target_mean / mu)
            .clamp(1.0 - self.cfg.rate_limit, 1.0 + self.cfg.rate_limit);
        exposure_priority_update(last.params, factor)
    }
}

/// Reactive baseline scoring gamma-remapped previews of the latest frame by
/// gradient content, then nudging brightness toward the winning gamma.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradientConfig {
    pub gamma_grid: Vec<f64>,
    pub rate_limit: f64,
    /// Gradient magnitudes enter the score as log(1 + scale * mag), so a
    /// few very strong edges cannot dominate the vote.
    pub saturation_scale: f64,
    pub initial: CameraParams,
}

impl Default for GradientConfig {
    fn default() -> Self {
        Self {
            gamma_grid: vec![0.5, 0.67, 0.8, 1.0, 1.25, 1.5, 2.0],
            rate_limit: 0.15,
            saturation_scale: 10.0,
            initial: CameraParams::new(0.0, 3.0e-4).expect("static default"),
        }
    }
}

impl GradientConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma_grid.is_empty() || self.gamma_grid.iter().any(|g| !(g.is_finite() && *g > 0.0))
        {
            return Err(Error::InvalidConfig("gamma_grid must be positive and non-empty".into()));
        }
        if !(self.rate_limit > 0.0 && self.rate_limit < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "rate_limit {} outside (0, 1)",
                self.rate_limit
            )));
        }
        if !(self.saturation_scale > 0.0) {
            return Err(Error::InvalidConfig("saturation_scale must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GradientMetricController {
    cfg: GradientConfig,
}

impl GradientMetricController {
    pub fn new(cfg: GradientConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }
}

impl Default for GradientMetricController {
    fn default() -> Self {
        Self { cfg: GradientConfig::default() }
    }
}

/// Mean saturating log-gradient magnitude of `img` remapped by `gamma`.
pub fn gamma_gradient_score(img: &FloatImage, gamma: f64, saturation_scale: f64) -> f64 {
    if img.width < 3 || img.height < 3 {
        return 0.0;
    }
    let mapped: Vec<f64> =
        img.data.iter().map(|&v| f64::from(v.clamp(0.0, 1.0)).powf(gamma)).collect();
    let w = img.width;
    let mut sum = 0.0;
    for y in 1..img.height - 1 {
        for x in 1..w - 1 {
            let gx = (mapped[y * w + x + 1] - mapped[y * w + x - 1]) * 0.5;
            let gy = (mapped[(y + 1) * w + x] - mapped[(y - 1) * w + x]) * 0.5;
            sum += (1.0 + saturation_scale * (gx * gx + gy * gy).sqrt()).ln();
        }
    }
    sum / ((img.width - 2) * (img.height - 2)) as f64
}

impl Controller for GradientMetricController {
    fn id(&self) -> &'static str {
        "gradient_metric"
    }

    fn initial_params(&self) -> CameraParams {
        self.cfg.initial
    }

    fn next_params(&mut self, frames: &[crate::sim::Frame]) -> Result<CameraParams> {
        let last = latest(frames)?;
        let img = last.image.normalized();
        // Ties (score, distance from gamma 1, gamma) resolve toward gamma 1,
        // so a flat frame leaves the params alone.
        let mut best_gamma = 1.0;
        let mut best_key = (f64::NEG_INFINITY, f64::INFINITY, f64::INFINITY);
        for &gamma in &self.cfg.gamma_grid {
            let score = gamma_gradient_score(&img, gamma, self.cfg.saturation_scale);
            let key = (score, -gamma.ln().abs(), -gamma);
            if key > best_key {
                best_key = key;
                best_gamma = gamma;
            }
        }
        let factor = (1.0 / best_gamma)
            .clamp(1.0 - self.cfg.rate_limit, 1.0 + self.cfg.rate_limit);
        exposure_priority_update(last.params, factor)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::GrayImage;
    use crate::sim::Frame;
    use proptest::prelude::*;

    fn frame_with(data: Vec<u16>, side: usize, params: CameraParams) -> Frame {
        Frame {
            image: GrayImage::new(side, side, 8, data).unwrap(),
            time_index: 0,
            camera_id: 1,
            params,
        }
    }

    fn uniform_frame(value: u16, params: CameraParams) -> Frame {
        frame_with(vec![value; 64 * 64], 64, params)
    }

    #[test]
    fn fixed_controller_repeats_its_params() {
        let p = CameraParams::new(7.0, 2e-3).unwrap();
        let mut c = FixedController::new(p);
        assert_eq!(c.initial_params(), p);
        let f = uniform_frame(10, CameraParams::new(0.0, 1e-3).unwrap());
        assert_eq!(c.next_params(&[f]).unwrap(), p);
        assert_eq!(c.id(), "fixed");
    }

    #[test]
    fn reactive_is_a_fixed_point_at_the_target_mean() {
        // 459 / (4 * 255) is exactly the default target of 0.45.
        let p = CameraParams::new(10.0, 1e-3).unwrap();
        let f = frame_with(vec![114, 115, 115, 115], 2, p);
        let mut c = ReactiveAeAg::default();
        assert_eq!(c.next_params(&[f]).unwrap(), p);
    }

    #[test]
    fn dark_frame_at_max_exposure_moves_gain_only() {
        let p = CameraParams::new(5.0, EXPOSURE_S_MAX).unwrap();
        let f = uniform_frame(10, p);
        let mut c = ReactiveAeAg::default();
        let next = c.next_params(&[f]).unwrap();
        assert_eq!(next.exposure_s(), EXPOSURE_S_MAX);
        let expected_db = gain_linear_to_db(p.gain_linear() * 1.15);
        assert!((next.gain_db() - expected_db).abs() < 1e-9);
    }

    #[test]
    fn bright_frame_shortens_exposure_first() {
        let p = CameraParams::new(5.0, 1e-3).unwrap();
        let f = uniform_frame(250, p);
        let mut c = ReactiveAeAg::default();
        let next = c.next_params(&[f]).unwrap();
        assert!((next.exposure_s() - 0.85e-3).abs() < 1e-12);
        assert!((next.gain_db() - 5.0).abs() < 1e-9);
    }

    #[test]
    fn stepping_with_no_history_is_an_error() {
        let mut c = ReactiveAeAg::default();
        assert!(c.next_params(&[]).is_err());
    }

    #[test]
    fn flat_frame_leaves_gradient_controller_unchanged() {
        let p = CameraParams::new(12.0, 4e-3).unwrap();
        let f = uniform_frame(128, p);
        let mut c = GradientMetricController::default();
        assert_eq!(c.next_params(&[f]).unwrap(), p);
    }

    #[test]
    fn underexposed_frame_brightens_under_gradient_controller() {
        // Dim checkerboard: gamma < 1 stretches dark contrast, so the
        // controller should push brightness up.
        let side = 64;
        let mut data = vec![0u16; side * side];
        for y in 0..side {
            for x in 0..side {
                data[y * side + x] = if (x / 8 + y / 8) % 2 == 0 { 20 } else { 45 };
            }
        }
        let p = CameraParams::new(3.0, 1e-3).unwrap();
        let f = frame_with(data, side, p);

        let img = f.image.normalized();
        let cfg = GradientConfig::default();
        let dark_score = gamma_gradient_score(&img, 0.5, cfg.saturation_scale);
        let neutral_score = gamma_gradient_score(&img, 1.0, cfg.saturation_scale);
        assert!(dark_score > neutral_score);

        let mut c = GradientMetricController::default();
        let next = c.next_params(&[f]).unwrap();
        assert!(next.exposure_s() > p.exposure_s());
    }

    #[test]
    fn brightness_factor_splits_across_exposure_then_gain() {
        // Factor 4 from near-max exposure: exposure can only absorb 1.5x,
        // gain takes the remaining 2.667x.
        let p = CameraParams::new(0.0, 20e-3).unwrap();
        let next = exposure_priority_update(p, 4.0).unwrap();
        assert_eq!(next.exposure_s(), EXPOSURE_S_MAX);
        let expected = gain_linear_to_db(4.0 / (EXPOSURE_S_MAX / 20e-3));
        assert!((next.gain_db() - expected).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn reactive_rate_limit_holds_off_the_clamps(
            value in 0u16..=255,
            gain_db in 0.0f64..30.0,
            exposure_ms in 0.075f64..30.0,
        ) {
            let p = CameraParams::new(gain_db, exposure_ms * 1e-3).unwrap();
            let f = uniform_frame(value, p);
            let mut c = ReactiveAeAg::default();
            let next = c.next_params(&[f]).unwrap();

            let e_ratio = next.exposure_s() / p.exposure_s();
            let interior_e = next.exposure_s() > EXPOSURE_S_MIN && next.exposure_s() < EXPOSURE_S_MAX;
            if interior_e {
                prop_assert!(e_ratio >= 0.85 - 1e-12 && e_ratio <= 1.15 + 1e-12);
            }
            let g_ratio = next.gain_linear() / p.gain_linear();
            let interior_g = next.gain_db() > 0.0 && next.gain_db() < 30.0;
            if interior_g {
                prop_assert!(g_ratio >= 0.85 - 1e-9 && g_ratio <= 1.15 + 1e-9);
            }
        }
    }
}
