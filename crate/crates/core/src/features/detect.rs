//! Corner detection and binary description.
//!
//! Corners are minima-eigenvalue responses of the smoothed structure tensor,
//! non-max suppressed over a fixed radius and capped at a feature budget.
//! Descriptors are 256-bit strings of pairwise smoothed-intensity
//! comparisons over a seed-derived offset pattern; the pattern is fixed per
//! detector instance so metric values are comparable across a run.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::image::{FloatImage, GrayImage};
use crate::rng::{stream, tag};

pub const DESCRIPTOR_BITS: usize = 256;
pub const DESCRIPTOR_WORDS: usize = DESCRIPTOR_BITS / 64;

/// Half-side of the square patch the descriptor pattern is drawn from.
const PATTERN_RADIUS: i32 = 15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    /// Minimum structure-tensor min-eigenvalue response.
    pub threshold: f32,
    /// Non-max suppression radius in pixels.
    pub nms_radius: f32,
    /// Feature budget per image.
    pub max_features: usize,
    /// Keypoints keep this distance from the image border so descriptor
    /// support never leaves the image.
    pub border_margin: usize,
    /// Smoothing applied before gradients; also the main noise suppressor.
    pub gradient_sigma: f32,
    /// Structure-tensor window smoothing. Kept tight so the response of an
    /// X-junction peaks inside the NMS radius instead of on side lobes.
    pub window_sigma: f32,
    /// Patch smoothing for descriptor samples.
    pub descriptor_sigma: f32,
    /// Seeds the descriptor comparison pattern.
    pub descriptor_seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            threshold: 1.5e-4,
            nms_radius: 7.0,
            max_features: 500,
            border_margin: 10,
            gradient_sigma: 1.0,
            window_sigma: 1.0,
            descriptor_sigma: 2.0,
            descriptor_seed: 7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: f32,
    pub y: f32,
    pub response: f32,
}

pub type Descriptor = [u64; DESCRIPTOR_WORDS];

#[derive(Debug, Clone, Default)]
pub struct Features {
    pub keypoints: Vec<Keypoint>,
    pub descriptors: Vec<Descriptor>,
}

impl Features {
    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }
}

pub struct Detector {
    cfg: DetectorConfig,
    /// (p, q) offset pairs; bit k is I(kp+p_k) < I(kp+q_k).
    pattern: Vec<(i32, i32, i32, i32)>,
}

impl Detector {
    pub fn new(cfg: DetectorConfig) -> Self {
        let mut rng = stream(cfg.descriptor_seed, tag::DESC_PATTERN, &[]);
        let mut pattern = Vec::with_capacity(DESCRIPTOR_BITS);
        while pattern.len() < DESCRIPTOR_BITS {
            let p = (
                rng.gen_range(-PATTERN_RADIUS..=PATTERN_RADIUS),
                rng.gen_range(-PATTERN_RADIUS..=PATTERN_RADIUS),
                rng.gen_range(-PATTERN_RADIUS..=PATTERN_RADIUS),
                rng.gen_range(-PATTERN_RADIUS..=PATTERN_RADIUS),
            );
            if (p.0, p.1) != (p.2, p.3) {
                pattern.push(p);
            }
        }
        Self { cfg, pattern }
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    /// Detects corners and computes their descriptors.
    pub fn features(&self, image: &GrayImage) -> Features {
        let img = image.normalized();
        let keypoints = self.detect(&img);
        let smoothed = img.gaussian_blur(self.cfg.descriptor_sigma);
        let descriptors = keypoints.iter().map(|kp| self.describe(&smoothed, kp)).collect();
        Features { keypoints, descriptors }
    }

    /// Feature-count metric: the number of detected corners.
    pub fn m_feat(&self, image: &GrayImage) -> usize {
        self.detect(&image.normalized()).len()
    }

    fn detect(&self, img: &FloatImage) -> Vec<Keypoint> {
        let (w, h) = (img.width, img.height);
        let margin = self.cfg.border_margin.max(1);
        if w <= 2 * margin || h <= 2 * margin {
            return Vec::new();
        }
        let g = img.gaussian_blur(self.cfg.gradient_sigma);

        let mut ixx = FloatImage::zeros(w, h);
        let mut ixy = FloatImage::zeros(w, h);
        let mut iyy = FloatImage::zeros(w, h);
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let gx = (g.get(x + 1, y) - g.get(x - 1, y)) * 0.5;
                let gy = (g.get(x, y + 1) - g.get(x, y - 1)) * 0.5;
                ixx.set(x, y, gx * gx);
                ixy.set(x, y, gx * gy);
                iyy.set(x, y, gy * gy);
            }
        }
        let sxx = ixx.gaussian_blur(self.cfg.window_sigma);
        let sxy = ixy.gaussian_blur(self.cfg.window_sigma);
        let syy = iyy.gaussian_blur(self.cfg.window_sigma);

        let mut candidates: Vec<Keypoint> = Vec::new();
        for y in margin..h - margin {
            for x in margin..w - margin {
                let a = sxx.get(x, y);
                let b = sxy.get(x, y);
                let c = syy.get(x, y);
                let half_trace = (a + c) * 0.5;
                let det_term = ((a - c) * 0.5).powi(2) + b * b;
                let min_eig = half_trace - det_term.sqrt();
                if min_eig > self.cfg.threshold {
                    candidates.push(Keypoint { x: x as f32, y: y as f32, response: min_eig });
                }
            }
        }
        // Strongest-first with a total order so suppression is deterministic.
        candidates.sort_by(|p, q| {
            q.response
                .partial_cmp(&p.response)
                .unwrap()
                .then((p.y as u32, p.x as u32).cmp(&(q.y as u32, q.x as u32)))
        });

        // Greedy NMS over a coarse grid of accepted points.
        let r = self.cfg.nms_radius.max(0.0);
        let r2 = r * r;
        let cell = r.max(1.0) as usize;
        let gw = w / cell + 1;
        let gh = h / cell + 1;
        let mut grid: Vec<Vec<(f32, f32)>> = vec![Vec::new(); gw * gh];
        let mut accepted = Vec::new();
        'next: for kp in candidates {
            let cx = kp.x as usize / cell;
            let cy = kp.y as usize / cell;
            let x0 = cx.saturating_sub(1);
            let y0 = cy.saturating_sub(1);
            for gy in y0..=(cy + 1).min(gh - 1) {
                for gx in x0..=(cx + 1).min(gw - 1) {
                    for &(px, py) in &grid[gy * gw + gx] {
                        let dx = px - kp.x;
                        let dy = py - kp.y;
                        if dx * dx + dy * dy <= r2 {
                            continue 'next;
                        }
                    }
                }
            }
            grid[cy * gw + cx].push((kp.x, kp.y));
            accepted.push(kp);
            if accepted.len() >= self.cfg.max_features {
                break;
            }
        }
        accepted
    }

    fn describe(&self, smoothed: &FloatImage, kp: &Keypoint) -> Descriptor {
        let mut desc = [0u64; DESCRIPTOR_WORDS];
        let x = kp.x as i32;
        let y = kp.y as i32;
        let w = smoothed.width as i32;
        let h = smoothed.height as i32;
        let at = |dx: i32, dy: i32| -> f32 {
            let sx = (x + dx).clamp(0, w - 1) as usize;
            let sy = (y + dy).clamp(0, h - 1) as usize;
            smoothed.get(sx, sy)
        };
        for (bit, &(px, py, qx, qy)) in self.pattern.iter().enumerate() {
            if at(px, py) < at(qx, qy) {
                desc[bit / 64] |= 1u64 << (bit % 64);
            }
        }
        desc
    }
}

#[inline]
pub fn hamming(a: &Descriptor, b: &Descriptor) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn checkerboard(cells_x: usize, cells_y: usize, cell: usize) -> GrayImage {
        let w = cells_x * cell;
        let h = cells_y * cell;
        let mut data = vec![0u16; w * h];
        for y in 0..h {
            for x in 0..w {
                if (x / cell + y / cell) % 2 == 0 {
                    data[y * w + x] = 220;
                } else {
                    data[y * w + x] = 30;
                }
            }
        }
        GrayImage::new(w, h, 8, data).unwrap()
    }

    #[test]
    fn flat_image_has_no_features() {
        let det = Detector::new(DetectorConfig::default());
        let img = GrayImage::filled(128, 128, 8, 128).unwrap();
        assert_eq!(det.m_feat(&img), 0);
    }

    #[test]
    fn saturated_image_has_no_features() {
        let det = Detector::new(DetectorConfig::default());
        let img = GrayImage::filled(128, 128, 8, 255).unwrap();
        assert_eq!(det.m_feat(&img), 0);
    }

    #[test]
    fn checkerboard_yields_exactly_the_interior_corners() {
        // An n x m board has (n-1)(m-1) interior corners; edges and the
        // image border must contribute nothing.
        let det = Detector::new(DetectorConfig::default());
        for (cx, cy) in [(8usize, 8usize), (6, 4)] {
            let img = checkerboard(cx, cy, 32);
            let n = det.m_feat(&img);
            assert_eq!(n, (cx - 1) * (cy - 1), "{cx}x{cy} board gave {n} corners");
        }
    }

    #[test]
    fn feature_budget_caps_detection() {
        let cfg = DetectorConfig { max_features: 10, ..Default::default() };
        let det = Detector::new(cfg);
        let img = checkerboard(10, 10, 24);
        assert_eq!(det.m_feat(&img), 10);
    }

    #[test]
    fn keypoints_respect_margin_and_nms_radius() {
        let cfg = DetectorConfig::default();
        let det = Detector::new(cfg.clone());
        let img = checkerboard(8, 8, 32);
        let feats = det.features(&img);
        let w = img.width() as f32;
        for kp in &feats.keypoints {
            assert!(kp.x >= cfg.border_margin as f32 && kp.x < w - cfg.border_margin as f32);
            assert!(kp.y >= cfg.border_margin as f32 && kp.y < w - cfg.border_margin as f32);
        }
        for (i, a) in feats.keypoints.iter().enumerate() {
            for b in feats.keypoints.iter().skip(i + 1) {
                let d2 = (a.x - b.x).powi(2) + (a.y - b.y).powi(2);
                assert!(d2 > cfg.nms_radius * cfg.nms_radius);
            }
        }
    }

    #[test]
    fn detection_is_deterministic() {
        let det = Detector::new(DetectorConfig::default());
        let img = checkerboard(8, 8, 32);
        let a = det.features(&img);
        let b = det.features(&img);
        assert_eq!(a.keypoints, b.keypoints);
        assert_eq!(a.descriptors, b.descriptors);
    }

    #[test]
    fn pattern_depends_on_seed_only() {
        let a = Detector::new(DetectorConfig::default());
        let b = Detector::new(DetectorConfig::default());
        let c = Detector::new(DetectorConfig { descriptor_seed: 8, ..Default::default() });
        assert_eq!(a.pattern, b.pattern);
        assert_ne!(a.pattern, c.pattern);
    }

    #[test]
    fn hamming_counts_differing_bits() {
        let mut a: Descriptor = [0; DESCRIPTOR_WORDS];
        let b: Descriptor = [0; DESCRIPTOR_WORDS];
        assert_eq!(hamming(&a, &b), 0);
        a[0] = 0b1011;
        a[3] = 1 << 63;
        assert_eq!(hamming(&a, &b), 4);
    }
}
