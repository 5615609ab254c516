//! Self-supervised target generation.
//!
//! Scans four-step future windows of a collected dataset: the params of
//! whichever candidate image (or image pair) scores best become the training
//! target for time t. No human labels anywhere; the metrics are feature
//! count, verified match count, or a weighted blend of the two winners.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{match_and_count_inliers, Detector, DetectorConfig, Features, MatcherConfig};
use crate::rng::{stream, tag};
use crate::sampler::CollectedDataset;
use crate::sim::{CameraParams, Frame};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMetric {
    Feat,
    Match,
    Hybrid,
}

impl fmt::Display for LabelMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LabelMetric::Feat => "feat",
            LabelMetric::Match => "match",
            LabelMetric::Hybrid => "hybrid",
        };
        f.write_str(s)
    }
}

impl FromStr for LabelMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "feat" => Ok(LabelMetric::Feat),
            "match" => Ok(LabelMetric::Match),
            "hybrid" => Ok(LabelMetric::Hybrid),
            other => Err(Error::InvalidConfig(format!(
                "unknown metric '{other}' (expected feat, match, or hybrid)"
            ))),
        }
    }
}

/// One training sample: a three-frame input window (one camera chosen per
/// timestep) and its normalized parameter target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub episode_index: u64,
    /// Timestep of the newest input frame; inputs cover t-2, t-1, t.
    pub t: usize,
    /// Camera choice (1 or 2) for each of t-2, t-1, t, oldest first.
    pub cameras: [u8; 3],
    /// Params of the chosen frames, oldest first.
    pub input_params: [CameraParams; 3],
    /// Normalized (gain, exposure) target in the unit square.
    pub target: (f64, f64),
    pub metric: LabelMetric,
    /// Blend weight used when metric is hybrid.
    pub weight: f64,
}

impl LabeledSample {
    /// Resolves the three input frames, oldest first.
    pub fn frames<'a>(&self, data: &'a CollectedDataset) -> Result<[&'a Frame; 3]> {
        if self.t < 2 || self.t >= data.len() {
            return Err(Error::FrameOutOfRange { index: self.t, len: data.len() });
        }
        let mut out = Vec::with_capacity(3);
        for (k, &cam) in self.cameras.iter().enumerate() {
            let rec = &data.records[self.t - 2 + k];
            out.push(if cam == 1 { &rec.reference } else { &rec.perturbed });
        }
        Ok([out[0], out[1], out[2]])
    }
}

/// Label generator with per-image and per-pair metric caches. One instance
/// per dataset; the caches key on timestep and camera so windows that share
/// frames never recompute a detection or a match.
pub struct Labeler {
    detector: Detector,
    matcher: MatcherConfig,
    seed: u64,
    features: HashMap<(usize, u8), Features>,
    pair_inliers: HashMap<(usize, u8, u8), usize>,
}

/// Cameras in tie-break order.
const CAMS: [u8; 2] = [1, 2];

impl Labeler {
    pub fn new(detector_cfg: DetectorConfig, matcher: MatcherConfig, seed: u64) -> Self {
        Self {
            detector: Detector::new(detector_cfg),
            matcher,
            seed,
            features: HashMap::new(),
            pair_inliers: HashMap::new(),
        }
    }

    fn frame<'a>(data: &'a CollectedDataset, t: usize, cam: u8) -> &'a Frame {
        let rec = &data.records[t];
        if cam == 1 {
            &rec.reference
        } else {
            &rec.perturbed
        }
    }

    fn features_at(&mut self, data: &CollectedDataset, t: usize, cam: u8) -> &Features {
        if !self.features.contains_key(&(t, cam)) {
            let f = self.detector.features(&Self::frame(data, t, cam).image);
            self.features.insert((t, cam), f);
        }
        &self.features[&(t, cam)]
    }

    /// Verified match count for the sequential pair starting at `t`
    /// (camera `i` at t, camera `j` at t+1). The RANSAC stream is addressed
    /// by (episode, t, i, j), so the score of a pair is independent of which
    /// window asked for it.
    pub fn pair_score(&mut self, data: &CollectedDataset, t: usize, i: u8, j: u8) -> usize {
        if let Some(&n) = self.pair_inliers.get(&(t, i, j)) {
            return n;
        }
        self.features_at(data, t, i);
        self.features_at(data, t + 1, j);
        let fa = &self.features[&(t, i)];
        let fb = &self.features[&(t + 1, j)];
        let mut rng = stream(
            self.seed,
            tag::LABEL_MATCH,
            &[data.episode_index, t as u64, u64::from(i), u64::from(j)],
        );
        let n = match_and_count_inliers(fa, fb, &self.matcher, &mut rng).num_inliers;
        self.pair_inliers.insert((t, i, j), n);
        n
    }

    fn check_window(data: &CollectedDataset, t: usize) -> Result<()> {
        if t + 4 >= data.len() {
            return Err(Error::Labeling(format!(
                "window at t={t} needs steps through {} but episode has {}",
                t + 4,
                data.len()
            )));
        }
        Ok(())
    }

    /// Params of the single future image with the most detected corners.
    /// Candidates run a = 1..4 then camera 1 before 2; ties keep the
    /// earliest.
    pub fn label_feat(&mut self, data: &CollectedDataset, t: usize) -> Result<CameraParams> {
        Self::check_window(data, t)?;
        let mut best: Option<(usize, CameraParams)> = None;
        for a in 1..=4usize {
            for cam in CAMS {
                let count = self.features_at(data, t + a, cam).len();
                if best.as_ref().map_or(true, |&(b, _)| count > b) {
                    best = Some((count, Self::frame(data, t + a, cam).params));
                }
            }
        }
        Ok(best.expect("window checked non-empty").1)
    }

    /// Params of the second image of the best-matching sequential pair.
    /// Pairs run b = 0..3 then (i, j) with camera 1 first; ties keep the
    /// earliest.
    pub fn label_match(&mut self, data: &CollectedDataset, t: usize) -> Result<CameraParams> {
        Self::check_window(data, t)?;
        let mut best: Option<(usize, CameraParams)> = None;
        for b in 0..4usize {
            for i in CAMS {
                for j in CAMS {
                    let score = self.pair_score(data, t + b, i, j);
                    if best.as_ref().map_or(true, |&(s, _)| score > s) {
                        best = Some((score, Self::frame(data, t + b + 1, j).params));
                    }
                }
            }
        }
        Ok(best.expect("window checked non-empty").1)
    }

    pub fn label_hybrid(
        &mut self,
        data: &CollectedDataset,
        t: usize,
        w: f64,
    ) -> Result<CameraParams> {
        let feat = self.label_feat(data, t)?;
        let matched = self.label_match(data, t)?;
        combine_normalized(feat, matched, w)
    }

    /// Labels every timestep with both a two-step history and a four-step
    /// future, then expands each into the 8 camera-choice combinations.
    pub fn build_training_set(
        &mut self,
        data: &CollectedDataset,
        metric: LabelMetric,
        w: f64,
    ) -> Result<Vec<LabeledSample>> {
        if !(0.0..=1.0).contains(&w) {
            return Err(Error::Labeling(format!("hybrid weight {w} outside [0, 1]")));
        }
        let mut out = Vec::new();
        if data.len() < 7 {
            return Ok(out);
        }
        for t in 2..=data.len() - 5 {
            let target_params = match metric {
                LabelMetric::Feat => self.label_feat(data, t)?,
                LabelMetric::Match => self.label_match(data, t)?,
                LabelMetric::Hybrid => self.label_hybrid(data, t, w)?,
            };
            let target = target_params.normalized();
            for combo in 0..8u8 {
                // Oldest frame on the high bit; bit 0 -> camera 1.
                let cameras = [
                    1 + ((combo >> 2) & 1),
                    1 + ((combo >> 1) & 1),
                    1 + (combo & 1),
                ];
                let input_params = [
                    Self::frame(data, t - 2, cameras[0]).params,
                    Self::frame(data, t - 1, cameras[1]).params,
                    Self::frame(data, t, cameras[2]).params,
                ];
                out.push(LabeledSample {
                    episode_index: data.episode_index,
                    t,
                    cameras,
                    input_params,
                    target,
                    metric,
                    weight: w,
                });
            }
        }
        Ok(out)
    }
}

/// Blends two parameter sets in normalized units; both axes are linear maps,
/// so the blend is also the raw-unit weighted average.
pub fn combine_normalized(a: CameraParams, b: CameraParams, w: f64) -> Result<CameraParams> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Labeling(format!("hybrid weight {w} outside [0, 1]")));
    }
    let (ga, ea) = a.normalized();
    let (gb, eb) = b.normalized();
    Ok(CameraParams::from_normalized(w * ga + (1.0 - w) * gb, w * ea + (1.0 - w) * eb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampler::{collect_episode, CollectedRecord};
    use crate::sim::{
        make_tunnel_scene, render_frame, CameraModel, RadianceScene, TrajectoryPoint,
        TunnelSceneConfig,
    };

    fn textured_scene(frames: usize, seed: u64) -> RadianceScene {
        let cfg = TunnelSceneConfig {
            viewport: 64,
            static_before: frames,
            transition: 0,
            plateau: 0,
            static_after: 0,
            attenuation_db: 0.0,
            ..TunnelSceneConfig::default()
        };
        make_tunnel_scene(&cfg, seed).unwrap()
    }

    /// Static-pose scene so every timestep sees the same pixels.
    fn frozen_scene(frames: usize, seed: u64) -> RadianceScene {
        frozen_scene_sized(frames, seed, 64)
    }

    fn frozen_scene_sized(frames: usize, seed: u64, viewport: usize) -> RadianceScene {
        let cfg = TunnelSceneConfig {
            viewport,
            static_before: frames,
            transition: 0,
            plateau: 0,
            static_after: 0,
            attenuation_db: 0.0,
            ..TunnelSceneConfig::default()
        };
        let mut scene = make_tunnel_scene(&cfg, seed).unwrap();
        let center = (viewport * 2) as f64;
        let p0 = TrajectoryPoint { x: center, y: center, vx: 0.0, vy: 0.0 };
        scene.trajectory = vec![p0; frames];
        scene
    }

    fn manual_dataset(
        scene: &RadianceScene,
        model: &CameraModel,
        params: &[(CameraParams, CameraParams)],
    ) -> CollectedDataset {
        let records: Vec<CollectedRecord> = params
            .iter()
            .enumerate()
            .map(|(t, &(p1, p2))| CollectedRecord {
                reference: render_frame(scene, t, p1, model, 1, None).unwrap(),
                perturbed: render_frame(scene, t, p2, model, 2, None).unwrap(),
                quadrant_index: (t % 4) as u8,
            })
            .collect();
        CollectedDataset {
            records,
            round: 1,
            controller_id: "fixed".into(),
            seed: 0,
            episode_index: 0,
        }
    }

    #[test]
    fn identical_candidates_tie_break_to_first_future_reference() {
        let scene = frozen_scene(8, 3);
        let model = CameraModel::default().without_noise();
        let p = CameraParams::new(5.0, 1e-3).unwrap();
        let data = manual_dataset(&scene, &model, &vec![(p, p); 8]);
        let mut labeler = Labeler::new(DetectorConfig::default(), MatcherConfig::default(), 1);
        // All 8 candidates are pixel-identical, so the label must be the
        // a=1, camera-1 frame's params. All params are equal here; assert
        // against the tie-break slot explicitly via the match label too.
        assert_eq!(labeler.label_feat(&data, 2).unwrap(), p);
        assert_eq!(labeler.label_match(&data, 2).unwrap(), p);
    }

    #[test]
    fn single_well_exposed_candidate_wins() {
        let scene = frozen_scene(8, 4);
        let model = CameraModel::default().without_noise();
        let sat = CameraParams::new(30.0, 30e-3).unwrap();
        let good = CameraParams::new(0.0, 3e-4).unwrap();
        // Window at t=2 looks at steps 3..=6. Step 5's perturbed camera is
        // the only image that is not blown out.
        let mut params = vec![(sat, sat); 8];
        params[5].1 = good;
        let data = manual_dataset(&scene, &model, &params);
        let mut labeler = Labeler::new(DetectorConfig::default(), MatcherConfig::default(), 1);
        assert_eq!(labeler.label_feat(&data, 2).unwrap(), good);
    }

    #[test]
    fn best_matching_pair_sets_the_match_label() {
        let scene = frozen_scene_sized(8, 5, 128);
        let model = CameraModel::default().without_noise();
        let sat = CameraParams::new(30.0, 30e-3).unwrap();
        let good = CameraParams::new(0.0, 3e-4).unwrap();
        // Only the pair (camera 2 at step 4, camera 2 at step 5) has two
        // usable images; every other pairing includes a saturated frame.
        let mut params = vec![(sat, sat); 8];
        params[4].1 = good;
        params[5].1 = CameraParams::new(1.0, 3.2e-4).unwrap();
        let data = manual_dataset(&scene, &model, &params);
        let mut labeler = Labeler::new(DetectorConfig::default(), MatcherConfig::default(), 1);
        assert_eq!(labeler.label_match(&data, 2).unwrap(), params[5].1);
    }

    #[test]
    fn labels_match_exhaustive_enumeration() {
        let cfg = TunnelSceneConfig {
            viewport: 64,
            static_before: 14,
            transition: 0,
            plateau: 0,
            static_after: 0,
            attenuation_db: 0.0,
            ..TunnelSceneConfig::default()
        };
        let scene = make_tunnel_scene(&cfg, 17).unwrap();
        let model = CameraModel::default();
        let mut reference = crate::controllers::ReactiveAeAg::default();
        let seed = 23;
        let data = collect_episode(&scene, &model, &mut reference, seed, 6).unwrap();
        let det = Detector::new(DetectorConfig::default());
        let mcfg = MatcherConfig::default();

        let mut labeler = Labeler::new(DetectorConfig::default(), mcfg.clone(), seed);
        for t in 2..=data.len() - 5 {
            // feat oracle: flat argmax in tie-break order
            let mut best_count = usize::MAX;
            let mut best_params = None;
            for a in 1..=4 {
                for cam in [1u8, 2] {
                    let f = Labeler::frame(&data, t + a, cam);
                    let count = det.features(&f.image).len();
                    if best_params.is_none() || count > best_count {
                        best_count = count;
                        best_params = Some(f.params);
                    }
                }
            }
            assert_eq!(labeler.label_feat(&data, t).unwrap(), best_params.unwrap());

            // match oracle: recompute every pair from scratch
            let mut best_score = usize::MAX;
            let mut best_match = None;
            for b in 0..4 {
                for i in [1u8, 2] {
                    for j in [1u8, 2] {
                        let fa = det.features(&Labeler::frame(&data, t + b, i).image);
                        let fb = det.features(&Labeler::frame(&data, t + b + 1, j).image);
                        let mut rng = stream(
                            seed,
                            tag::LABEL_MATCH,
                            &[data.episode_index, (t + b) as u64, u64::from(i), u64::from(j)],
                        );
                        let n = match_and_count_inliers(&fa, &fb, &mcfg, &mut rng).num_inliers;
                        if best_match.is_none() || n > best_score {
                            best_score = n;
                            best_match = Some(Labeler::frame(&data, t + b + 1, j).params);
                        }
                    }
                }
            }
            assert_eq!(labeler.label_match(&data, t).unwrap(), best_match.unwrap());
        }
    }

    #[test]
    fn hybrid_endpoints_equal_the_pure_metrics() {
        let scene = textured_scene(10, 9);
        let model = CameraModel::default();
        let mut reference = crate::controllers::ReactiveAeAg::default();
        let data = collect_episode(&scene, &model, &mut reference, 31, 0).unwrap();
        let mut labeler = Labeler::new(DetectorConfig::default(), MatcherConfig::default(), 31);
        let feat = labeler.label_feat(&data, 3).unwrap();
        let matched = labeler.label_match(&data, 3).unwrap();
        assert_eq!(labeler.label_hybrid(&data, 3, 1.0).unwrap(), feat);
        assert_eq!(labeler.label_hybrid(&data, 3, 0.0).unwrap(), matched);
    }

    #[test]
    fn hybrid_blend_is_the_componentwise_average() {
        let a = CameraParams::new(10.0, 2e-3).unwrap();
        let b = CameraParams::new(20.0, 4e-3).unwrap();
        let mid = combine_normalized(a, b, 0.5).unwrap();
        assert!((mid.gain_db() - 15.0).abs() < 1e-12);
        assert!((mid.exposure_s() - 3e-3).abs() < 1e-15);
        assert!(combine_normalized(a, b, 1.5).is_err());
    }

    #[test]
    fn sample_counts_follow_the_window_arithmetic() {
        let model = CameraModel::default().without_noise();
        let p = CameraParams::new(5.0, 1e-3).unwrap();
        for (frames, expect) in [(6usize, 0usize), (7, 8), (10, 32)] {
            let scene = frozen_scene(frames, 2);
            let data = manual_dataset(&scene, &model, &vec![(p, p); frames]);
            let mut labeler =
                Labeler::new(DetectorConfig::default(), MatcherConfig::default(), 1);
            let set = labeler.build_training_set(&data, LabelMetric::Feat, 0.5).unwrap();
            assert_eq!(set.len(), expect, "frames {frames}");
        }
    }

    #[test]
    fn samples_expand_all_camera_combinations_with_shared_target() {
        let scene = textured_scene(7, 6);
        let model = CameraModel::default();
        let mut reference = crate::controllers::ReactiveAeAg::default();
        let data = collect_episode(&scene, &model, &mut reference, 5, 0).unwrap();
        let mut labeler = Labeler::new(DetectorConfig::default(), MatcherConfig::default(), 5);
        let set = labeler.build_training_set(&data, LabelMetric::Hybrid, 0.5).unwrap();
        assert_eq!(set.len(), 8);
        let combos: std::collections::HashSet<[u8; 3]> =
            set.iter().map(|s| s.cameras).collect();
        assert_eq!(combos.len(), 8);
        for s in &set {
            assert_eq!(s.target, set[0].target);
            assert!(s.target.0 >= 0.0 && s.target.0 <= 1.0);
            assert!(s.target.1 >= 0.0 && s.target.1 <= 1.0);
            let frames = s.frames(&data).unwrap();
            for (k, f) in frames.iter().enumerate() {
                assert_eq!(f.time_index, s.t - 2 + k);
                assert_eq!(f.params, s.input_params[k]);
            }
        }
    }

    #[test]
    fn dark_windows_label_brighter_than_an_underexposed_reference() {
        // Static dim scene, reference pinned below proper exposure: the
        // labeller should mostly pick candidates with more light.
        let mut scene = frozen_scene(40, 8);
        for v in &mut scene.illumination {
            *v = 0.05;
        }
        let model = CameraModel::default();
        let dim = CameraParams::new(0.0, 1.2e-3).unwrap();
        let mut c = crate::controllers::FixedController::new(dim);
        let data = collect_episode(&scene, &model, &mut c, 77, 0).unwrap();
        let mut labeler = Labeler::new(DetectorConfig::default(), MatcherConfig::default(), 77);
        let mut brighter = 0;
        let mut total = 0;
        for t in 2..=data.len() - 5 {
            let label = labeler.label_feat(&data, t).unwrap();
            let ref_product = dim.exposure_s() * dim.gain_linear();
            if label.exposure_s() * label.gain_linear() >= ref_product {
                brighter += 1;
            }
            total += 1;
        }
        assert!(
            brighter * 10 >= total * 7,
            "label brighter than reference in only {brighter}/{total} windows"
        );
    }

    #[test]
    fn truncated_windows_are_rejected_and_skipped() {
        let scene = frozen_scene(8, 3);
        let model = CameraModel::default().without_noise();
        let p = CameraParams::new(5.0, 1e-3).unwrap();
        let data = manual_dataset(&scene, &model, &vec![(p, p); 8]);
        let mut labeler = Labeler::new(DetectorConfig::default(), MatcherConfig::default(), 1);
        assert!(labeler.label_feat(&data, 4).is_err());
        assert!(labeler.label_match(&data, 4).is_err());
        let set = labeler.build_training_set(&data, LabelMetric::Feat, 0.5).unwrap();
        assert_eq!(set.iter().map(|s| s.t).max().unwrap(), 3);
    }

    #[test]
    fn metric_names_round_trip() {
        for m in [LabelMetric::Feat, LabelMetric::Match, LabelMetric::Hybrid] {
            assert_eq!(m.to_string().parse::<LabelMetric>().unwrap(), m);
        }
        assert!("corner".parse::<LabelMetric>().is_err());
    }
}
