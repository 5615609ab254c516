//! Closed-loop evaluation: run a controller through an episode with a
//! single camera, score every frame by how well it matches into the
//! previous one, and summarize per lighting segment.
//!
//! The quality signal is NFM, the number of RANSAC inlier feature matches
//! between consecutive frames. Frames near an illumination transition are
//! tagged dynamic; the rest are static. An episode section counts as a
//! tracking failure when NFM stays below a floor for several consecutive
//! frames, standing in for a visual odometry system losing its map.

use crate::controllers::Controller;
use crate::error::{Error, Result};
use crate::features::{match_and_count_inliers, Detector, DetectorConfig, MatcherConfig};
use crate::rng::{stream, tag};
use crate::sim::{render_frame, CameraModel, CameraParams, Frame, RadianceScene};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentTag {
    Static,
    Dynamic,
}

impl std::fmt::Display for SegmentTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SegmentTag::Static => "static",
            SegmentTag::Dynamic => "dynamic",
        })
    }
}

#[derive(Debug, Clone)]
pub struct TraceRow {
    pub time_index: usize,
    pub params: CameraParams,
    /// Features detected in this frame alone.
    pub m_feat: usize,
    /// Inlier matches against the previous frame; undefined for frame 0.
    pub nfm: Option<usize>,
    pub tag: SegmentTag,
}

#[derive(Debug, Clone)]
pub struct EpisodeTrace {
    pub controller_id: String,
    pub seed: u64,
    pub episode_index: u64,
    pub rows: Vec<TraceRow>,
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub detector: DetectorConfig,
    pub matcher: MatcherConfig,
    /// Frames within this distance of an illumination transition are
    /// tagged dynamic.
    pub dynamic_margin: usize,
    /// NFM floor for the tracking-failure criterion.
    pub failure_nfm_floor: usize,
    /// Consecutive sub-floor frames that constitute a failure.
    pub failure_run: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            detector: DetectorConfig::default(),
            matcher: MatcherConfig::default(),
            dynamic_margin: 15,
            failure_nfm_floor: 20,
            failure_run: 3,
        }
    }
}

/// Tags each timestep from the illumination profile: a step is a
/// transition when the log-brightness changes by more than 0.01 decades,
/// and transitions are dilated by `margin` frames on both sides.
pub fn segment_tags(illumination: &[f64], margin: usize) -> Vec<SegmentTag> {
    let log = |v: f64| v.max(1e-12).log10();
    let mut tags = vec![SegmentTag::Static; illumination.len()];
    for t in 1..illumination.len() {
        if (log(illumination[t]) - log(illumination[t - 1])).abs() > 0.01 {
            let lo = t.saturating_sub(margin + 1);
            let hi = (t + margin).min(illumination.len() - 1);
            for tag in &mut tags[lo..=hi] {
                *tag = SegmentTag::Dynamic;
            }
        }
    }
    tags
}

/// Runs one closed-loop episode. Only the reference camera exists here; no
/// perturbed twin is rendered. Frame noise comes from the same addressed
/// streams the collection stage uses, so a controller commanding the same
/// parameters sees the same pixels regardless of which stage renders them.
pub fn run_episode(
    controller: &mut dyn Controller,
    scene: &RadianceScene,
    camera: &CameraModel,
    cfg: &EvalConfig,
    seed: u64,
    episode_index: u64,
) -> Result<EpisodeTrace> {
    if scene.is_empty() {
        return Err(Error::InvalidConfig("empty scene".into()));
    }
    let detector = Detector::new(cfg.detector.clone());
    let tags = segment_tags(&scene.illumination, cfg.dynamic_margin);
    let mut rows = Vec::with_capacity(scene.len());
    let mut history: Vec<Frame> = Vec::with_capacity(scene.len());
    let mut prev_features = None;
    let mut params = controller.initial_params();
    for t in 0..scene.len() {
        if t > 0 {
            params = controller.next_params(&history)?;
        }
        let mut noise = stream(seed, tag::FRAME_NOISE, &[episode_index, 1, t as u64]);
        let frame = render_frame(scene, t, params, camera, 1, Some(&mut noise))?;
        let feats = detector.features(&frame.image);
        let nfm = prev_features.as_ref().map(|prev| {
            let mut rng = stream(seed, tag::EVAL_MATCH, &[episode_index, t as u64]);
            match_and_count_inliers(prev, &feats, &cfg.matcher, &mut rng).num_inliers
        });
        rows.push(TraceRow {
            time_index: t,
            params,
            m_feat: feats.keypoints.len(),
            nfm,
            tag: tags[t],
        });
        prev_features = Some(feats);
        history.push(frame);
    }
    Ok(EpisodeTrace {
        controller_id: controller.id().to_string(),
        seed,
        episode_index,
        rows,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SegmentStats {
    pub tag: SegmentTag,
    pub frames: usize,
    /// Frames with a defined NFM.
    pub defined: usize,
    pub median_nfm: Option<f64>,
    pub min_nfm: Option<usize>,
    pub tracking_failed: bool,
}

impl SegmentStats {
    /// True when the segment had no scoreable frame at all.
    pub fn is_empty(&self) -> bool {
        self.defined == 0
    }
}

fn median_of(mut values: Vec<usize>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_unstable();
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2] as f64
    } else {
        (values[n / 2 - 1] + values[n / 2]) as f64 / 2.0
    })
}

/// Per-tag summary over a trace. A failure run must be consecutive in time
/// and within one tag; a frame of the other tag or an undefined NFM breaks
/// it.
pub fn segment_stats(trace: &EpisodeTrace, floor: usize, run: usize) -> Vec<SegmentStats> {
    let mut out = Vec::new();
    for tag in [SegmentTag::Static, SegmentTag::Dynamic] {
        let frames = trace.rows.iter().filter(|r| r.tag == tag).count();
        if frames == 0 {
            continue;
        }
        let values: Vec<usize> =
            trace.rows.iter().filter(|r| r.tag == tag).filter_map(|r| r.nfm).collect();
        let mut failed = false;
        let mut streak = 0usize;
        for row in &trace.rows {
            match (row.tag == tag, row.nfm) {
                (true, Some(nfm)) if nfm < floor => {
                    streak += 1;
                    if streak >= run {
                        failed = true;
                    }
                }
                _ => streak = 0,
            }
        }
        out.push(SegmentStats {
            tag,
            frames,
            defined: values.len(),
            median_nfm: median_of(values.clone()),
            min_nfm: values.iter().copied().min(),
            tracking_failed: failed,
        });
    }
    out
}

/// Aggregate over several episodes of one controller and one tag.
#[derive(Debug, Clone, Serialize)]
pub struct ComparisonRow {
    pub controller_id: String,
    pub tag: SegmentTag,
    pub episodes: usize,
    /// Median over all defined NFM values pooled across episodes.
    pub median_nfm: Option<f64>,
    /// Minimum over all episodes.
    pub min_nfm: Option<usize>,
    /// Episodes whose segment did not hit the failure criterion.
    pub successes: usize,
}

#[derive(Debug)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
    pub traces: Vec<EpisodeTrace>,
}

/// Builds fresh controller instances, one per episode, under a stable id.
pub trait ControllerProvider {
    fn id(&self) -> &str;
    fn build(&self) -> Result<Box<dyn Controller>>;
}

/// Runs every provider over the same `episodes` scenes. Scene seeds derive
/// from (seed, episode), and frame noise is addressed by commanded
/// parameters' stream only, so two controllers issuing identical commands
/// on the same episode receive identical frames.
pub fn compare_controllers(
    providers: &[&dyn ControllerProvider],
    scenes: &[RadianceScene],
    camera: &CameraModel,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<ComparisonReport> {
    if providers.len() < 2 {
        return Err(Error::InvalidConfig("comparison needs at least two controllers".into()));
    }
    if scenes.is_empty() {
        return Err(Error::InvalidConfig("comparison needs at least one scene".into()));
    }
    let mut traces = Vec::new();
    let mut rows = Vec::new();
    for provider in providers {
        let mut per_tag: std::collections::BTreeMap<String, (usize, Vec<usize>, Vec<usize>, usize)> =
            std::collections::BTreeMap::new();
        for (e, scene) in scenes.iter().enumerate() {
            let mut controller = provider.build()?;
            let trace = run_episode(controller.as_mut(), scene, camera, cfg, seed, e as u64)?;
            for stats in segment_stats(&trace, cfg.failure_nfm_floor, cfg.failure_run) {
                let entry = per_tag.entry(stats.tag.to_string()).or_default();
                entry.0 += 1;
                if let Some(m) = stats.min_nfm {
                    entry.2.push(m);
                }
                let pooled: Vec<usize> = trace
                    .rows
                    .iter()
                    .filter(|r| r.tag == stats.tag)
                    .filter_map(|r| r.nfm)
                    .collect();
                entry.1.extend(pooled);
                if !stats.tracking_failed {
                    entry.3 += 1;
                }
            }
            traces.push(trace);
        }
        for tag in [SegmentTag::Static, SegmentTag::Dynamic] {
            if let Some((episodes, pooled, mins, successes)) = per_tag.remove(&tag.to_string()) {
                rows.push(ComparisonRow {
                    controller_id: provider.id().to_string(),
                    tag,
                    episodes,
                    median_nfm: median_of(pooled),
                    min_nfm: mins.into_iter().min(),
                    successes,
                });
            }
        }
    }
    Ok(ComparisonReport { rows, traces })
}
