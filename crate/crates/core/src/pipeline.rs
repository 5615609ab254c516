//! Stage orchestration: collect episodes, label them, train per round, and
//! compare controllers, with all artifacts rooted in one output directory.
//!
//! Layout under the output root:
//!   round1/episodes/ep0000/...   collected frames + manifests
//!   round1/labels/ep0000.csv     labeled windows per episode
//!   round1/model.ckpt            trained on round-1 data
//!   round1/curves.csv            training curves
//!   round2/...                   same, model trained on rounds 1+2 pooled
//!   compare/trace_*.csv          evaluation traces
//!   compare/report.{txt,json}    comparison summary
//!
//! Round 1 collects with the reactive baseline; round 2 collects with the
//! round-1 network driving and retrains from a fresh initialization on the
//! pooled data. Training seeds, scene seeds, and noise streams are all
//! derived from the experiment seed, so a rerun reproduces every artifact.

use crate::config::ExperimentConfig;
use crate::controllers::{
    Controller, FixedController, GradientMetricController, ReactiveAeAg,
};
use crate::error::{Error, Result};
use crate::eval::{compare_controllers, ComparisonReport, ControllerProvider};
use crate::io;
use crate::labeler::{LabeledSample, Labeler};
use crate::model::{
    load_checkpoint, predict_next, prepare_training_set, save_checkpoint, train,
    LearnedController, TrainedModel,
};
use crate::rng::{derive_seed, tag};
use crate::sampler::{collect_episode, CollectedDataset};
use crate::sim::{make_tunnel_scene, RadianceScene};
use std::path::{Path, PathBuf};

/// Global episode index: unique across rounds so every stream address is
/// distinct.
fn global_episode_index(cfg: &ExperimentConfig, round: u8, e: usize) -> u64 {
    (round as u64 - 1) * cfg.sampling.episodes as u64 + e as u64
}

/// The scene an episode is collected from, derived from the experiment
/// seed and the global episode index.
pub fn collection_scene(cfg: &ExperimentConfig, index: u64) -> Result<RadianceScene> {
    make_tunnel_scene(&cfg.scene, derive_seed(cfg.seed, tag::EPISODE, &[index]))
}

/// Held-out scenes for evaluation, disjoint from the collection scenes by
/// stream tag.
pub fn evaluation_scene(cfg: &ExperimentConfig, e: u64) -> Result<RadianceScene> {
    make_tunnel_scene(&cfg.scene, derive_seed(cfg.seed, tag::EVAL_SCENE, &[e]))
}

fn round_dir(out_dir: &Path, round: u8) -> PathBuf {
    out_dir.join(format!("round{round}"))
}

pub fn checkpoint_path(out_dir: &Path, round: u8) -> PathBuf {
    round_dir(out_dir, round).join("model.ckpt")
}

/// Builds the collection controller for a round: the reactive baseline in
/// round 1, the previous round's network afterwards.
fn collection_controller(
    cfg: &ExperimentConfig,
    round: u8,
    checkpoint: Option<&Path>,
) -> Result<Box<dyn Controller>> {
    if round == 0 {
        return Err(Error::Collection("round must be >= 1".into()));
    }
    if round == 1 {
        return Ok(Box::new(ReactiveAeAg::new(cfg.reactive.clone())?));
    }
    let path = checkpoint.ok_or_else(|| {
        Error::Collection(format!(
            "round {round} collection needs a trained controller checkpoint"
        ))
    })?;
    let (net, _) = load_checkpoint(path)?;
    Ok(Box::new(LearnedController::new(net, cfg.reactive.initial)))
}

/// Collects one round of episodes and writes them under
/// `round{N}/episodes/`. Returns the episode directories.
pub fn collect_round(
    cfg: &ExperimentConfig,
    round: u8,
    checkpoint: Option<&Path>,
    out_dir: &Path,
    mut progress: impl FnMut(&str),
) -> Result<Vec<PathBuf>> {
    let episodes_dir = round_dir(out_dir, round).join("episodes");
    std::fs::create_dir_all(&episodes_dir)?;
    let mut dirs = Vec::with_capacity(cfg.sampling.episodes);
    for e in 0..cfg.sampling.episodes {
        let index = global_episode_index(cfg, round, e);
        let scene = collection_scene(cfg, index)?;
        let scene_seed = derive_seed(cfg.seed, tag::EPISODE, &[index]);
        let mut controller = collection_controller(cfg, round, checkpoint)?;
        let mut dataset =
            collect_episode(&scene, &cfg.camera, controller.as_mut(), cfg.seed, index)?;
        dataset.round = round;
        let dir = episodes_dir.join(io::episode_dir_name(index));
        let fingerprint = io::scene_fingerprint(&cfg.scene, scene_seed)?;
        io::save_episode(&dir, &dataset, &fingerprint)?;
        progress(&format!(
            "collected episode {index} ({} frames, controller {})",
            dataset.len(),
            dataset.controller_id
        ));
        dirs.push(dir);
    }
    Ok(dirs)
}

/// Labels every episode directory of a round, writing one CSV per episode
/// under `round{N}/labels/`. Returns the datasets paired with their labels.
pub fn label_round(
    cfg: &ExperimentConfig,
    round: u8,
    out_dir: &Path,
    mut progress: impl FnMut(&str),
) -> Result<Vec<(CollectedDataset, Vec<LabeledSample>)>> {
    let episodes_dir = round_dir(out_dir, round).join("episodes");
    let labels_dir = round_dir(out_dir, round).join("labels");
    std::fs::create_dir_all(&labels_dir)?;
    let mut entries: Vec<PathBuf> = std::fs::read_dir(&episodes_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(Error::Labeling(format!(
            "no episodes found under {}",
            episodes_dir.display()
        )));
    }
    let mut out = Vec::with_capacity(entries.len());
    for dir in entries {
        let dataset = io::load_episode(&dir)?;
        let mut labeler =
            Labeler::new(cfg.detector.clone(), cfg.matcher.clone(), cfg.seed);
        let samples =
            labeler.build_training_set(&dataset, cfg.sampling.metric, cfg.sampling.weight)?;
        let csv_path = labels_dir.join(format!(
            "{}.csv",
            dir.file_name().and_then(|n| n.to_str()).unwrap_or("episode")
        ));
        io::save_labels(&csv_path, &samples)?;
        progress(&format!(
            "labeled episode {} ({} windows)",
            dataset.episode_index,
            samples.len()
        ));
        out.push((dataset, samples));
    }
    Ok(out)
}

/// Reloads a round's collected episodes together with their label CSVs.
/// Every episode directory must have a matching labels file.
pub fn load_labeled_round(
    out_dir: &Path,
    round: u8,
) -> Result<Vec<(CollectedDataset, Vec<LabeledSample>)>> {
    let episodes_dir = round_dir(out_dir, round).join("episodes");
    let labels_dir = round_dir(out_dir, round).join("labels");
    let mut entries: Vec<PathBuf> = std::fs::read_dir(&episodes_dir)
        .map_err(|e| {
            Error::Labeling(format!(
                "no collected episodes under {} ({e}); run the collect stage first",
                episodes_dir.display()
            ))
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    entries.sort();
    let mut out = Vec::with_capacity(entries.len());
    for dir in entries {
        let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or("episode");
        let csv_path = labels_dir.join(format!("{name}.csv"));
        if !csv_path.is_file() {
            return Err(Error::Labeling(format!(
                "no labels at {}; run the label stage for round {round} first",
                csv_path.display()
            )));
        }
        let dataset = io::load_episode(&dir)?;
        let samples = io::load_labels(&csv_path)?;
        out.push((dataset, samples));
    }
    Ok(out)
}

/// Trains a round's model from a fresh initialization on the given data
/// and writes `model.ckpt` plus `curves.csv`. For round 2 the caller pools
/// round-1 and round-2 data.
pub fn train_round(
    cfg: &ExperimentConfig,
    round: u8,
    data: &[(CollectedDataset, Vec<LabeledSample>)],
    out_dir: &Path,
    mut progress: impl FnMut(&str),
) -> Result<TrainedModel> {
    let pairs: Vec<(&CollectedDataset, &[LabeledSample])> =
        data.iter().map(|(d, s)| (d, s.as_slice())).collect();
    let set = prepare_training_set(&pairs, cfg.network.input_resolution)?;
    progress(&format!("training on {} windows", set.len()));
    let train_seed = derive_seed(cfg.seed, tag::MISC, &[round as u64]);
    let mut model = train(&set, &cfg.network, &cfg.training, train_seed, |stats| {
        progress(&format!(
            "epoch {}: train loss {:.5}{}",
            stats.epoch,
            stats.train_loss,
            stats
                .holdout_loss
                .map(|v| format!(", holdout loss {v:.5}"))
                .unwrap_or_default()
        ));
    })?;
    let dir = round_dir(out_dir, round);
    std::fs::create_dir_all(&dir)?;
    save_checkpoint(&mut model.net, round as u32, &dir.join("model.ckpt"))?;
    io::save_curves(&dir.join("curves.csv"), &model.history)?;
    Ok(model)
}

/// The full two-round procedure: reactive collection, training, collection
/// driven by the learned controller, and a retrain on the pooled data.
/// Returns the round-2 checkpoint path.
pub fn run_two_rounds(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    mut progress: impl FnMut(&str),
) -> Result<PathBuf> {
    collect_round(cfg, 1, None, out_dir, &mut progress)?;
    let round1 = label_round(cfg, 1, out_dir, &mut progress)?;
    train_round(cfg, 1, &round1, out_dir, &mut progress)?;
    let ckpt1 = checkpoint_path(out_dir, 1);
    collect_round(cfg, 2, Some(&ckpt1), out_dir, &mut progress)?;
    let round2 = label_round(cfg, 2, out_dir, &mut progress)?;
    let pooled: Vec<_> = round1.into_iter().chain(round2).collect();
    train_round(cfg, 2, &pooled, out_dir, &mut progress)?;
    Ok(checkpoint_path(out_dir, 2))
}

struct FixedProvider(crate::sim::CameraParams);

impl ControllerProvider for FixedProvider {
    fn id(&self) -> &str {
        "fixed"
    }
    fn build(&self) -> Result<Box<dyn Controller>> {
        Ok(Box::new(FixedController::new(self.0)))
    }
}

struct ReactiveProvider(crate::controllers::ReactiveConfig);

impl ControllerProvider for ReactiveProvider {
    fn id(&self) -> &str {
        "reactive_ae_ag"
    }
    fn build(&self) -> Result<Box<dyn Controller>> {
        Ok(Box::new(ReactiveAeAg::new(self.0.clone())?))
    }
}

struct GradientProvider(crate::controllers::GradientConfig);

impl ControllerProvider for GradientProvider {
    fn id(&self) -> &str {
        "gradient_metric"
    }
    fn build(&self) -> Result<Box<dyn Controller>> {
        Ok(Box::new(GradientMetricController::new(self.0.clone())?))
    }
}

struct LearnedProvider {
    checkpoint: PathBuf,
    initial: crate::sim::CameraParams,
}

impl ControllerProvider for LearnedProvider {
    fn id(&self) -> &str {
        "learned"
    }
    fn build(&self) -> Result<Box<dyn Controller>> {
        let (net, _) = load_checkpoint(&self.checkpoint)?;
        Ok(Box::new(LearnedController::new(net, self.initial)))
    }
}

/// Builds a provider by controller id. "learned" needs a checkpoint.
pub fn provider_for(
    cfg: &ExperimentConfig,
    id: &str,
    checkpoint: Option<&Path>,
) -> Result<Box<dyn ControllerProvider>> {
    match id {
        "fixed" => Ok(Box::new(FixedProvider(cfg.reactive.initial))),
        "reactive_ae_ag" => Ok(Box::new(ReactiveProvider(cfg.reactive.clone()))),
        "gradient_metric" => Ok(Box::new(GradientProvider(cfg.gradient.clone()))),
        "learned" => {
            let path = checkpoint.ok_or_else(|| {
                Error::InvalidConfig(
                    "the learned controller needs a checkpoint (--checkpoint)".into(),
                )
            })?;
            // Surface a bad path now rather than mid-comparison.
            let (net, _) = load_checkpoint(path)?;
            drop(net);
            Ok(Box::new(LearnedProvider {
                checkpoint: path.to_path_buf(),
                initial: cfg.reactive.initial,
            }))
        }
        other => Err(Error::InvalidConfig(format!(
            "unknown controller '{other}' (expected fixed, reactive_ae_ag, gradient_metric, or learned)"
        ))),
    }
}

/// Runs one controller over the held-out evaluation scenes and writes one
/// trace per episode. Returns the traces.
pub fn run_eval(
    cfg: &ExperimentConfig,
    provider: &dyn ControllerProvider,
    out_dir: &Path,
    mut progress: impl FnMut(&str),
) -> Result<Vec<crate::eval::EpisodeTrace>> {
    std::fs::create_dir_all(out_dir)?;
    let eval_cfg = cfg.eval_config();
    let mut traces = Vec::new();
    for e in 0..cfg.evaluation.episodes {
        let scene = evaluation_scene(cfg, e as u64)?;
        let mut controller = provider.build()?;
        let trace = crate::eval::run_episode(
            controller.as_mut(),
            &scene,
            &cfg.camera,
            &eval_cfg,
            cfg.seed,
            e as u64,
        )?;
        let path = out_dir.join(format!("trace_{}_{e:02}.csv", provider.id()));
        io::save_trace(&path, &trace)?;
        progress(&format!("evaluated {} on episode {e}", provider.id()));
        traces.push(trace);
    }
    Ok(traces)
}

/// Runs the configured comparison over shared scenes, writing traces and
/// the report under `compare/`.
pub fn run_comparison(
    cfg: &ExperimentConfig,
    controller_ids: &[String],
    checkpoint: Option<&Path>,
    out_dir: &Path,
    mut progress: impl FnMut(&str),
) -> Result<ComparisonReport> {
    let compare_dir = out_dir.join("compare");
    std::fs::create_dir_all(&compare_dir)?;
    let providers: Vec<Box<dyn ControllerProvider>> = controller_ids
        .iter()
        .map(|id| provider_for(cfg, id, checkpoint))
        .collect::<Result<_>>()?;
    let provider_refs: Vec<&dyn ControllerProvider> =
        providers.iter().map(|p| p.as_ref()).collect();
    let scenes: Vec<RadianceScene> = (0..cfg.evaluation.episodes)
        .map(|e| evaluation_scene(cfg, e as u64))
        .collect::<Result<_>>()?;
    progress(&format!(
        "comparing {} controllers over {} episodes",
        providers.len(),
        scenes.len()
    ));
    let report = compare_controllers(
        &provider_refs,
        &scenes,
        &cfg.camera,
        &cfg.eval_config(),
        cfg.seed,
    )?;
    for trace in &report.traces {
        let path = compare_dir.join(format!(
            "trace_{}_{:02}.csv",
            trace.controller_id, trace.episode_index
        ));
        io::save_trace(&path, trace)?;
    }
    io::save_report(&compare_dir, &report)?;
    Ok(report)
}

/// Sanity probe used by tests and the CLI `eval` path: a learned
/// controller must produce legal parameters from a bare frame history.
pub fn probe_checkpoint(path: &Path) -> Result<()> {
    let (net, round) = load_checkpoint(path)?;
    if round == 0 {
        return Err(Error::Checkpoint("checkpoint carries round 0".into()));
    }
    let frame = crate::sim::Frame {
        image: crate::image::GrayImage::new(16, 16, 8, vec![128; 256])?,
        time_index: 0,
        camera_id: 1,
        params: crate::sim::CameraParams::new(0.0, 1e-3)?,
    };
    predict_next(&net, &[frame]).map(|_| ())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labeler::LabelMetric;

    /// A configuration small enough for unit tests to run a full round.
    pub(crate) fn desk_test_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = 77;
        cfg.scene.viewport = 64;
        cfg.scene.static_before = 10;
        cfg.scene.transition = 0;
        cfg.scene.plateau = 0;
        cfg.scene.static_after = 0;
        cfg.scene.attenuation_db = 0.0;
        cfg.sampling.episodes = 1;
        cfg.sampling.metric = LabelMetric::Hybrid;
        cfg.network.input_resolution = 8;
        cfg.network.conv_channels = [2, 2, 2, 2];
        cfg.network.fc_widths = [4, 4];
        cfg.network.dropout_p = 0.1;
        cfg.training.epochs = 2;
        cfg.training.batch_size = 8;
        cfg.training.learning_rate = 1e-3;
        cfg.evaluation.episodes = 2;
        cfg
    }

    #[test]
    fn round_one_collects_labels_and_trains() {
        let cfg = desk_test_config();
        let dir = tempfile::tempdir().unwrap();
        let dirs = collect_round(&cfg, 1, None, dir.path(), |_| {}).unwrap();
        assert_eq!(dirs.len(), 1);
        assert!(dirs[0].join("manifest.toml").is_file());
        let labeled = label_round(&cfg, 1, dir.path(), |_| {}).unwrap();
        assert_eq!(labeled.len(), 1);
        assert!(!labeled[0].1.is_empty());
        train_round(&cfg, 1, &labeled, dir.path(), |_| {}).unwrap();
        let ckpt = checkpoint_path(dir.path(), 1);
        assert!(ckpt.is_file());
        probe_checkpoint(&ckpt).unwrap();
    }

    #[test]
    fn round_two_without_checkpoint_is_rejected() {
        let cfg = desk_test_config();
        let dir = tempfile::tempdir().unwrap();
        let err = collect_round(&cfg, 2, None, dir.path(), |_| {}).unwrap_err();
        assert!(err.to_string().contains("checkpoint"), "{err}");
    }

    #[test]
    fn unknown_controller_ids_are_rejected() {
        let cfg = desk_test_config();
        let err = match provider_for(&cfg, "slam", None) {
            Ok(_) => panic!("unknown id accepted"),
            Err(e) => e,
        };
        assert!(err.to_string().contains("unknown controller"), "{err}");
        let err = match provider_for(&cfg, "learned", None) {
            Ok(_) => panic!("learned without checkpoint accepted"),
            Err(e) => e,
        };
        assert!(err.to_string().contains("checkpoint"), "{err}");
    }

    #[test]
    fn comparison_writes_traces_and_reports() {
        let cfg = desk_test_config();
        let dir = tempfile::tempdir().unwrap();
        let ids = vec!["reactive_ae_ag".to_string(), "gradient_metric".to_string()];
        let report = run_comparison(&cfg, &ids, None, dir.path(), |_| {}).unwrap();
        assert_eq!(report.traces.len(), 4);
        assert!(dir.path().join("compare/report.txt").is_file());
        assert!(dir.path().join("compare/report.json").is_file());
        let trace_path = dir.path().join("compare/trace_reactive_ae_ag_00.csv");
        let trace = io::load_trace(&trace_path).unwrap();
        assert_eq!(trace.rows.len(), cfg.scene.frames());
        // Report numbers recompute exactly from the persisted traces.
        let stats = crate::eval::segment_stats(
            &trace,
            cfg.evaluation.failure_nfm_floor,
            cfg.evaluation.failure_run,
        );
        assert!(!stats.is_empty());
    }
}
