//! Procedural radiance scenes.
//!
//! A scene is a static radiance field plus a per-step viewport trajectory and
//! a per-step global illumination multiplier. The tunnel generator produces
//! the canonical benchmark: textured field, smooth wandering viewport, and a
//! sigmoidal dip of configurable depth in the illumination profile.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::FloatImage;
use crate::rng::{stream, tag};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    /// Viewport center in field pixels.
    pub x: f64,
    pub y: f64,
    /// Instantaneous velocity in field pixels per second.
    pub vx: f64,
    pub vy: f64,
}

#[derive(Debug, Clone)]
pub struct RadianceScene {
    pub field: FloatImage,
    /// Square viewport side in pixels.
    pub viewport: usize,
    pub trajectory: Vec<TrajectoryPoint>,
    /// Per-step radiance multiplier; this is what carries lighting changes.
    pub illumination: Vec<f64>,
    /// Seconds between steps.
    pub dt: f64,
}

impl RadianceScene {
    pub fn len(&self) -> usize {
        self.trajectory.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectory.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.trajectory.len() != self.illumination.len() {
            return Err(Error::InvalidConfig(format!(
                "trajectory has {} steps but illumination has {}",
                self.trajectory.len(),
                self.illumination.len()
            )));
        }
        if self.field.width < self.viewport || self.field.height < self.viewport {
            return Err(Error::InvalidConfig(format!(
                "field {}x{} smaller than viewport {}",
                self.field.width, self.field.height, self.viewport
            )));
        }
        if self.illumination.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidConfig("illumination must be finite and >= 0".into()));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::InvalidConfig(format!("dt {} must be positive", self.dt)));
        }
        Ok(())
    }
}

/// Tunnel benchmark configuration. Frame counts are per phase; the episode
/// length is their sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TunnelSceneConfig {
    pub viewport: usize,
    /// Field side as a multiple of the viewport side (>= 4 keeps the
    /// trajectory away from borders).
    pub field_scale: usize,
    pub static_before: usize,
    pub transition: usize,
    pub plateau: usize,
    pub static_after: usize,
    /// Depth of the illumination dip, 20*log10 convention: 60 dB is a 10^3
    /// radiance ratio. 0 disables the dip entirely.
    pub attenuation_db: f64,
    /// Sigmoid time constant in frames; smaller is sharper. <= 0 snaps to a
    /// hard step.
    pub transition_sharpness: f64,
    /// Illumination level outside the tunnel.
    pub outdoor_level: f64,
    /// Viewport speed over the field, pixels per second.
    pub speed_px_s: f64,
    /// Std of the per-step heading change, radians.
    pub heading_drift: f64,
    pub dt: f64,
    /// Scales the density of texture structure in the radiance field.
    pub texture_density: f64,
}

impl Default for TunnelSceneConfig {
    fn default() -> Self {
        Self {
            viewport: 256,
            field_scale: 4,
            static_before: 90,
            transition: 25,
            plateau: 130,
            static_after: 130,
            attenuation_db: 60.0,
            transition_sharpness: 4.0,
            outdoor_level: 1.0,
            speed_px_s: 120.0,
            heading_drift: 0.08,
            dt: 1.0 / 15.0,
            texture_density: 1.0,
        }
    }
}

impl TunnelSceneConfig {
    pub fn frames(&self) -> usize {
        self.static_before + self.transition + self.plateau + self.static_after
    }

    pub fn validate(&self) -> Result<()> {
        if self.viewport < 32 {
            return Err(Error::InvalidConfig(format!("viewport {} below 32", self.viewport)));
        }
        if self.field_scale < 1 {
            return Err(Error::InvalidConfig("field_scale must be >= 1".into()));
        }
        if self.frames() == 0 {
            return Err(Error::InvalidConfig("scene must have at least one frame".into()));
        }
        if !(self.attenuation_db.is_finite() && self.attenuation_db >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "attenuation_db {} must be finite and >= 0",
                self.attenuation_db
            )));
        }
        if !(self.outdoor_level.is_finite() && self.outdoor_level > 0.0) {
            return Err(Error::InvalidConfig("outdoor_level must be positive".into()));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::InvalidConfig("dt must be positive".into()));
        }
        if !(self.speed_px_s.is_finite() && self.speed_px_s >= 0.0) {
            return Err(Error::InvalidConfig("speed_px_s must be finite and >= 0".into()));
        }
        if !(self.texture_density.is_finite() && self.texture_density > 0.0) {
            return Err(Error::InvalidConfig("texture_density must be positive".into()));
        }
        Ok(())
    }

    /// Same scene shape with a flat illumination profile.
    pub fn constant_light(mut self) -> Self {
        self.attenuation_db = 0.0;
        self
    }
}

/// Margin the trajectory keeps from the field border, beyond the viewport
/// half-side. Covers the blur pad used by the renderer.
const TRAJECTORY_MARGIN: f64 = 16.0;

pub fn make_tunnel_scene(cfg: &TunnelSceneConfig, seed: u64) -> Result<RadianceScene> {
    cfg.validate()?;
    let side = cfg.viewport * cfg.field_scale;
    let field = texture_field(side, cfg.texture_density, seed);
    let trajectory = wander_trajectory(cfg, side, seed)?;
    let illumination = tunnel_profile(cfg);
    let scene =
        RadianceScene { field, viewport: cfg.viewport, trajectory, illumination, dt: cfg.dt };
    scene.validate()?;
    Ok(scene)
}

/// Multi-octave value noise with rotated-rectangle multipliers, normalized to
/// unit mean. The rectangles put step edges and corners everywhere so the
/// feature detector has structure to find at any viewport position.
fn texture_field(side: usize, density: f64, seed: u64) -> FloatImage {
    let mut rng = stream(seed, tag::SCENE_FIELD, &[]);
    let mut field = FloatImage::zeros(side, side);

    // cell size in px, weight
    let octaves: [(usize, f32); 3] = [(64, 0.5), (16, 0.3), (5, 0.2)];
    for (cell, weight) in octaves {
        let n = side / cell + 2;
        let grid: Vec<f32> = (0..n * n).map(|_| rng.gen::<f32>()).collect();
        for y in 0..side {
            let gy = y as f32 / cell as f32;
            let y0 = gy.floor() as usize;
            let fy = gy - y0 as f32;
            for x in 0..side {
                let gx = x as f32 / cell as f32;
                let x0 = gx.floor() as usize;
                let fx = gx - x0 as f32;
                let a = grid[y0 * n + x0];
                let b = grid[y0 * n + x0 + 1];
                let c = grid[(y0 + 1) * n + x0];
                let d = grid[(y0 + 1) * n + x0 + 1];
                let v = a * (1.0 - fx) * (1.0 - fy)
                    + b * fx * (1.0 - fy)
                    + c * (1.0 - fx) * fy
                    + d * fx * fy;
                field.data[y * side + x] += weight * v;
            }
        }
    }
    for v in &mut field.data {
        *v = 0.15 + 0.85 * *v;
    }

    let area_scale = (side * side) as f64 / (1024.0 * 1024.0);
    let n_rects = (3000.0 * density * area_scale).round().max(1.0) as usize;
    for _ in 0..n_rects {
        let cx = rng.gen_range(0.0..side as f32);
        let cy = rng.gen_range(0.0..side as f32);
        let hw = rng.gen_range(3.0..24.0f32);
        let hh = rng.gen_range(3.0..24.0f32);
        let angle = rng.gen_range(0.0..std::f32::consts::PI);
        let mult = (rng.gen_range(0.22f32.ln()..4.5f32.ln())).exp();
        let (sin, cos) = angle.sin_cos();
        let extent = (hw * hw + hh * hh).sqrt().ceil();
        let x_lo = (cx - extent).floor().max(0.0) as usize;
        let x_hi = (cx + extent).ceil().min((side - 1) as f32) as usize;
        let y_lo = (cy - extent).floor().max(0.0) as usize;
        let y_hi = (cy + extent).ceil().min((side - 1) as f32) as usize;
        for y in y_lo..=y_hi {
            let dy = y as f32 - cy;
            for x in x_lo..=x_hi {
                let dx = x as f32 - cx;
                let u = dx * cos + dy * sin;
                let v = -dx * sin + dy * cos;
                if u.abs() <= hw && v.abs() <= hh {
                    field.data[y * side + x] *= mult;
                }
            }
        }
    }

    let mean: f64 = field.data.iter().map(|&v| f64::from(v)).sum::<f64>() / (side * side) as f64;
    let inv = (1.0 / mean) as f32;
    for v in &mut field.data {
        *v *= inv;
    }
    field
}

fn wander_trajectory(
    cfg: &TunnelSceneConfig,
    side: usize,
    seed: u64,
) -> Result<Vec<TrajectoryPoint>> {
    let margin = cfg.viewport as f64 / 2.0 + TRAJECTORY_MARGIN;
    let lo = margin;
    let hi = side as f64 - margin;
    if hi <= lo {
        return Err(Error::InvalidConfig(format!(
            "field side {side} leaves no room for viewport {} plus margin",
            cfg.viewport
        )));
    }
    let mut rng = stream(seed, tag::TRAJECTORY, &[]);
    let mut heading: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut x = (lo + hi) / 2.0 + rng.gen_range(-0.25..0.25) * (hi - lo);
    let mut y = (lo + hi) / 2.0 + rng.gen_range(-0.25..0.25) * (hi - lo);
    let mut out = Vec::with_capacity(cfg.frames());
    for _ in 0..cfg.frames() {
        let vx = cfg.speed_px_s * heading.cos();
        let vy = cfg.speed_px_s * heading.sin();
        out.push(TrajectoryPoint { x, y, vx, vy });
        let z: f64 = rng.sample(StandardNormal);
        heading += cfg.heading_drift * z;
        let mut nx = x + vx * cfg.dt;
        let mut ny = y + vy * cfg.dt;
        // Reflect off the margins.
        if nx < lo || nx > hi {
            heading = std::f64::consts::PI - heading;
            nx = nx.clamp(lo, hi);
        }
        if ny < lo || ny > hi {
            heading = -heading;
            ny = ny.clamp(lo, hi);
        }
        x = nx;
        y = ny;
    }
    Ok(out)
}

/// Illumination in log10 space: outdoor level minus a sigmoid dip of
/// `attenuation_db / 20` decades between the two transition centers.
fn tunnel_profile(cfg: &TunnelSceneConfig) -> Vec<f64> {
    let decades = cfg.attenuation_db / 20.0;
    let c1 = cfg.static_before as f64 + cfg.transition as f64 / 2.0 - 0.5;
    let c2 = cfg.static_before as f64
        + cfg.transition as f64
        + cfg.plateau as f64
        + cfg.transition as f64 / 2.0
        - 0.5;
    let sig = |t: f64, c: f64| -> f64 {
        if cfg.transition_sharpness <= 0.0 {
            return if t >= c { 1.0 } else { 0.0 };
        }
        1.0 / (1.0 + (-(t - c) / cfg.transition_sharpness).exp())
    };
    (0..cfg.frames())
        .map(|t| {
            let t = t as f64;
            let dip = decades * (sig(t, c1) - sig(t, c2));
            cfg.outdoor_level * 10f64.powf(-dip)
        })
        .collect()
}
