//! Descriptor matching and robust geometric verification.
//!
//! Matching is mutual nearest-neighbor under Hamming distance with a
//! distance ceiling. Verification fits a 2-D similarity transform by
//! seeded-budget RANSAC and counts reprojection inliers; the inlier count is
//! the match metric used for labeling and evaluation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::detect::{hamming, Features};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatcherConfig {
    /// Hamming ceiling; candidate pairs above it are discarded.
    pub max_hamming: u32,
    /// Fixed RANSAC iteration budget.
    pub ransac_iters: usize,
    /// Inlier reprojection tolerance in pixels.
    pub pixel_tol: f32,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self { max_hamming: 64, ransac_iters: 200, pixel_tol: 2.0 }
    }
}

/// 2-D similarity p' = s R p + t, stored as the complex pair (a, t) with
/// a = s e^{i theta}.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub a_re: f64,
    pub a_im: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Similarity {
    pub const IDENTITY: Similarity = Similarity { a_re: 1.0, a_im: 0.0, tx: 0.0, ty: 0.0 };

    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (self.a_re * x - self.a_im * y + self.tx, self.a_im * x + self.a_re * y + self.ty)
    }

    pub fn scale(&self) -> f64 {
        self.a_re.hypot(self.a_im)
    }

    pub fn rotation(&self) -> f64 {
        self.a_im.atan2(self.a_re)
    }
}

#[derive(Debug, Clone)]
pub struct MatchSet {
    /// (index in first feature set, index in second, hamming distance).
    pub pairs: Vec<(u32, u32, u32)>,
    /// Parallel to `pairs`.
    pub inlier_mask: Vec<bool>,
    pub num_inliers: usize,
    pub model: Option<Similarity>,
}

impl MatchSet {
    fn empty(pairs: Vec<(u32, u32, u32)>) -> Self {
        let n = pairs.len();
        Self { pairs, inlier_mask: vec![false; n], num_inliers: 0, model: None }
    }
}

/// Mutual nearest neighbors under the Hamming ceiling. Ties resolve to the
/// lowest index, so the result is deterministic.
fn mutual_matches(a: &Features, b: &Features, max_hamming: u32) -> Vec<(u32, u32, u32)> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let best_in_b: Vec<Option<(u32, u32)>> = a
        .descriptors
        .iter()
        .map(|da| {
            let mut best: Option<(u32, u32)> = None;
            for (j, db) in b.descriptors.iter().enumerate() {
                let d = hamming(da, db);
                if d <= max_hamming && best.map_or(true, |(bd, _)| d < bd) {
                    best = Some((d, j as u32));
                }
            }
            best
        })
        .collect();
    let best_in_a: Vec<Option<u32>> = b
        .descriptors
        .iter()
        .map(|db| {
            let mut best: Option<(u32, u32)> = None;
            for (i, da) in a.descriptors.iter().enumerate() {
                let d = hamming(da, db);
                if d <= max_hamming && best.map_or(true, |(bd, _)| d < bd) {
                    best = Some((d, i as u32));
                }
            }
            best.map(|(_, i)| i)
        })
        .collect();
    let mut pairs = Vec::new();
    for (i, best) in best_in_b.iter().enumerate() {
        if let Some((d, j)) = best {
            if best_in_a[*j as usize] == Some(i as u32) {
                pairs.push((i as u32, *j, *d));
            }
        }
    }
    pairs
}

fn fit_two_points(p1: (f64, f64), p2: (f64, f64), q1: (f64, f64), q2: (f64, f64)) -> Option<Similarity> {
    let dp = (p2.0 - p1.0, p2.1 - p1.1);
    let dq = (q2.0 - q1.0, q2.1 - q1.1);
    let norm2 = dp.0 * dp.0 + dp.1 * dp.1;
    if norm2 < 1e-9 {
        return None;
    }
    // a = dq / dp in complex arithmetic.
    let a_re = (dq.0 * dp.0 + dq.1 * dp.1) / norm2;
    let a_im = (dq.1 * dp.0 - dq.0 * dp.1) / norm2;
    let tx = q1.0 - (a_re * p1.0 - a_im * p1.1);
    let ty = q1.1 - (a_im * p1.0 + a_re * p1.1);
    Some(Similarity { a_re, a_im, tx, ty })
}

/// Least-squares similarity over a point subset (complex 1-D regression).
fn fit_least_squares(
    src: &[(f64, f64)],
    dst: &[(f64, f64)],
    subset: impl Iterator<Item = usize> + Clone,
) -> Option<Similarity> {
    let n = subset.clone().count();
    if n < 2 {
        return None;
    }
    let nf = n as f64;
    let (mut mp_x, mut mp_y, mut mq_x, mut mq_y) = (0.0, 0.0, 0.0, 0.0);
    for i in subset.clone() {
        mp_x += src[i].0;
        mp_y += src[i].1;
        mq_x += dst[i].0;
        mq_y += dst[i].1;
    }
    mp_x /= nf;
    mp_y /= nf;
    mq_x /= nf;
    mq_y /= nf;
    let mut num_re = 0.0;
    let mut num_im = 0.0;
    let mut den = 0.0;
    for i in subset {
        let px = src[i].0 - mp_x;
        let py = src[i].1 - mp_y;
        let qx = dst[i].0 - mq_x;
        let qy = dst[i].1 - mq_y;
        num_re += qx * px + qy * py;
        num_im += qy * px - qx * py;
        den += px * px + py * py;
    }
    if den < 1e-9 {
        return None;
    }
    let a_re = num_re / den;
    let a_im = num_im / den;
    let tx = mq_x - (a_re * mp_x - a_im * mp_y);
    let ty = mq_y - (a_im * mp_x + a_re * mp_y);
    Some(Similarity { a_re, a_im, tx, ty })
}

fn count_inliers(
    model: &Similarity,
    src: &[(f64, f64)],
    dst: &[(f64, f64)],
    tol2: f64,
    mask: &mut [bool],
) -> usize {
    let mut n = 0;
    for i in 0..src.len() {
        let (px, py) = model.apply(src[i].0, src[i].1);
        let dx = px - dst[i].0;
        let dy = py - dst[i].1;
        let inlier = dx * dx + dy * dy <= tol2;
        mask[i] = inlier;
        n += usize::from(inlier);
    }
    n
}

/// Matches two feature sets and verifies geometry. The returned inlier count
/// is the match metric; fewer than two candidate pairs yields zero.
pub fn match_and_count_inliers(
    a: &Features,
    b: &Features,
    cfg: &MatcherConfig,
    rng: &mut ChaCha8Rng,
) -> MatchSet {
    let pairs = mutual_matches(a, b, cfg.max_hamming);
    if pairs.len() < 2 {
        return MatchSet::empty(pairs);
    }
    let src: Vec<(f64, f64)> = pairs
        .iter()
        .map(|&(i, _, _)| {
            let kp = a.keypoints[i as usize];
            (f64::from(kp.x), f64::from(kp.y))
        })
        .collect();
    let dst: Vec<(f64, f64)> = pairs
        .iter()
        .map(|&(_, j, _)| {
            let kp = b.keypoints[j as usize];
            (f64::from(kp.x), f64::from(kp.y))
        })
        .collect();
    let tol2 = f64::from(cfg.pixel_tol) * f64::from(cfg.pixel_tol);
    let n = pairs.len();
    let mut best_model: Option<Similarity> = None;
    let mut best_count = 0usize;
    let mut best_mask = vec![false; n];
    let mut mask = vec![false; n];
    for _ in 0..cfg.ransac_iters {
        let i = rng.gen_range(0..n);
        let j = rng.gen_range(0..n);
        if i == j {
            continue;
        }
        let Some(model) = fit_two_points(src[i], src[j], dst[i], dst[j]) else {
            continue;
        };
        let count = count_inliers(&model, &src, &dst, tol2, &mut mask);
        if count > best_count {
            best_count = count;
            best_model = Some(model);
            best_mask.copy_from_slice(&mask);
        }
    }
    let Some(minimal) = best_model else {
        return MatchSet::empty(pairs);
    };
    // Refine on the consensus set; keep the refit only if it does not lose
    // inliers.
    let inlier_idx: Vec<usize> =
        best_mask.iter().enumerate().filter_map(|(i, &m)| m.then_some(i)).collect();
    if let Some(refined) = fit_least_squares(&src, &dst, inlier_idx.iter().copied()) {
        let count = count_inliers(&refined, &src, &dst, tol2, &mut mask);
        if count >= best_count {
            return MatchSet {
                pairs,
                inlier_mask: mask,
                num_inliers: count,
                model: Some(refined),
            };
        }
    }
    MatchSet { pairs, inlier_mask: best_mask, num_inliers: best_count, model: Some(minimal) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::detect::{Detector, DetectorConfig};
    use crate::image::GrayImage;
    use crate::rng::{stream, tag};
    use crate::sim::{make_tunnel_scene, render_frame, CameraModel, CameraParams, TunnelSceneConfig};

    fn textured_frame(seed: u64) -> GrayImage {
        let cfg = TunnelSceneConfig { viewport: 128, field_scale: 4, ..Default::default() };
        let scene = make_tunnel_scene(&cfg, seed).unwrap();
        let model = CameraModel::default().without_noise();
        let p = CameraParams::new(0.0, 0.3e-3).unwrap();
        render_frame(&scene, 0, p, &model, 1, None).unwrap().image
    }

    /// Two crops of one larger board, offset by (dx, dy): pure translation
    /// with no new content.
    fn translated_pair(dx: usize, dy: usize) -> (GrayImage, GrayImage) {
        let big = textured_frame(42);
        let side = 96;
        let crop = |ox: usize, oy: usize| {
            let mut data = Vec::with_capacity(side * side);
            for y in 0..side {
                for x in 0..side {
                    data.push(big.get(x + ox, y + oy));
                }
            }
            GrayImage::new(side, side, 8, data).unwrap()
        };
        (crop(dx, dy), crop(0, 0))
    }

    #[test]
    fn image_matches_itself_with_identity_model() {
        let det = Detector::new(DetectorConfig::default());
        let img = textured_frame(1);
        let feats = det.features(&img);
        assert!(feats.len() > 50, "expected a well-textured frame, got {}", feats.len());
        let mut rng = stream(1, tag::RANSAC, &[0]);
        let ms = match_and_count_inliers(&feats, &feats, &MatcherConfig::default(), &mut rng);
        assert_eq!(ms.num_inliers, feats.len());
        let m = ms.model.unwrap();
        assert!((m.scale() - 1.0).abs() < 1e-6);
        assert!(m.rotation().abs() < 1e-6);
        assert!(m.tx.abs() < 1e-6 && m.ty.abs() < 1e-6);
    }

    #[test]
    fn translation_is_recovered_within_tolerance() {
        let (a, b) = translated_pair(5, 3);
        let det = Detector::new(DetectorConfig::default());
        let fa = det.features(&a);
        let fb = det.features(&b);
        let cfg = MatcherConfig::default();
        let mut rng = stream(2, tag::RANSAC, &[0]);
        let ms = match_and_count_inliers(&fa, &fb, &cfg, &mut rng);
        assert!(ms.num_inliers >= 8, "only {} inliers", ms.num_inliers);
        let m = ms.model.unwrap();
        assert!((m.tx - 5.0).abs() <= f64::from(cfg.pixel_tol), "tx {}", m.tx);
        assert!((m.ty - 3.0).abs() <= f64::from(cfg.pixel_tol), "ty {}", m.ty);
        assert!((m.scale() - 1.0).abs() < 0.05);
    }

    #[test]
    fn unrelated_content_produces_no_inliers() {
        let det = Detector::new(DetectorConfig::default());
        let textured = det.features(&textured_frame(3));
        let flat = det.features(&GrayImage::filled(96, 96, 8, 128).unwrap());
        let mut rng = stream(3, tag::RANSAC, &[0]);
        let ms = match_and_count_inliers(&textured, &flat, &MatcherConfig::default(), &mut rng);
        assert_eq!(ms.num_inliers, 0);
        assert!(ms.model.is_none());
    }

    #[test]
    fn inlier_count_never_exceeds_pair_or_feature_counts() {
        let det = Detector::new(DetectorConfig::default());
        for seed in 0..4 {
            let fa = det.features(&textured_frame(10 + seed));
            let fb = det.features(&textured_frame(20 + seed));
            let mut rng = stream(seed, tag::RANSAC, &[1]);
            let ms = match_and_count_inliers(&fa, &fb, &MatcherConfig::default(), &mut rng);
            assert!(ms.num_inliers <= ms.pairs.len());
            assert!(ms.pairs.len() <= fa.len().min(fb.len()));
            assert_eq!(ms.inlier_mask.iter().filter(|&&m| m).count(), ms.num_inliers);
        }
    }

    #[test]
    fn each_keypoint_appears_in_at_most_one_pair() {
        let det = Detector::new(DetectorConfig::default());
        let (a, b) = translated_pair(4, 7);
        let fa = det.features(&a);
        let fb = det.features(&b);
        let mut rng = stream(5, tag::RANSAC, &[0]);
        let ms = match_and_count_inliers(&fa, &fb, &MatcherConfig::default(), &mut rng);
        let mut seen_a = std::collections::HashSet::new();
        let mut seen_b = std::collections::HashSet::new();
        for &(i, j, _) in &ms.pairs {
            assert!(seen_a.insert(i));
            assert!(seen_b.insert(j));
        }
    }

    #[test]
    fn matching_is_deterministic_for_equal_streams() {
        let det = Detector::new(DetectorConfig::default());
        let fa = det.features(&textured_frame(30));
        let fb = det.features(&textured_frame(31));
        let cfg = MatcherConfig::default();
        let mut r1 = stream(9, tag::RANSAC, &[7]);
        let mut r2 = stream(9, tag::RANSAC, &[7]);
        let a = match_and_count_inliers(&fa, &fb, &cfg, &mut r1);
        let b = match_and_count_inliers(&fa, &fb, &cfg, &mut r2);
        assert_eq!(a.num_inliers, b.num_inliers);
        assert_eq!(a.pairs, b.pairs);
        assert_eq!(a.inlier_mask, b.inlier_mask);
    }

    #[test]
    fn well_exposed_beats_saturated_on_feature_count() {
        let cfg = TunnelSceneConfig { viewport: 128, field_scale: 4, ..Default::default() };
        let scene = make_tunnel_scene(&cfg, 9).unwrap();
        let model = CameraModel::default().without_noise();
        let det = Detector::new(DetectorConfig::default());
        let good = render_frame(&scene, 0, CameraParams::new(0.0, 0.3e-3).unwrap(), &model, 1, None)
            .unwrap();
        let blown = render_frame(&scene, 0, CameraParams::new(30.0, 30e-3).unwrap(), &model, 1, None)
            .unwrap();
        assert!(det.m_feat(&good.image) > det.m_feat(&blown.image));
        assert_eq!(det.m_feat(&blown.image), 0);
    }

    #[test]
    fn mild_brightness_scaling_keeps_most_features() {
        // Affine intensity robustness: a 15% linear scale without clipping
        // moves m_feat by less than 20%.
        let det = Detector::new(DetectorConfig::default());
        let mut failures = 0;
        for seed in 0..5u64 {
            let img = textured_frame(50 + seed);
            let scaled_data: Vec<u16> = img
                .data()
                .iter()
                .map(|&v| ((f32::from(v) * 0.85).round() as u16).min(255))
                .collect();
            let scaled = GrayImage::new(img.width(), img.height(), 8, scaled_data).unwrap();
            let n0 = det.m_feat(&img) as f64;
            let n1 = det.m_feat(&scaled) as f64;
            if (n1 - n0).abs() / n0 >= 0.2 {
                failures += 1;
            }
        }
        assert!(failures <= 1, "feature count unstable under brightness scaling in {failures}/5 scenes");
    }
}
