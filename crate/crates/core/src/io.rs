//! On-disk artifact formats: episode directories with per-frame images and
//! sidecars, label manifests, evaluation traces, training curves, and
//! comparison reports. Each writer has a reader (or the format is plain
//! enough to diff), and floats round-trip exactly through the shortest
//! decimal representation, so artifacts hash identically across runs.

use crate::error::{Error, Result};
use crate::eval::{ComparisonReport, ComparisonRow, EpisodeTrace, SegmentTag, TraceRow};
use crate::image::GrayImage;
use crate::labeler::{LabelMetric, LabeledSample};
use crate::model::EpochStats;
use crate::sampler::{CollectedDataset, CollectedRecord};
use crate::sim::{CameraParams, Frame, TunnelSceneConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};

/// Hash of the scene configuration and its generation seed; episodes
/// collected from different scenes can never be silently mixed.
pub fn scene_fingerprint(cfg: &TunnelSceneConfig, scene_seed: u64) -> Result<String> {
    let text = toml::to_string(cfg)
        .map_err(|e| Error::InvalidConfig(format!("scene config serialization: {e}")))?;
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    hasher.update(scene_seed.to_le_bytes());
    Ok(format!("{:x}", hasher.finalize()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeManifest {
    pub episode_index: u64,
    pub round: u8,
    pub controller_id: String,
    pub seed: u64,
    pub frames: usize,
    pub scene_sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FrameSidecar {
    time_index: usize,
    camera_id: u8,
    gain_db: f64,
    exposure_s: f64,
    seed: u64,
}

pub fn frame_file_name(t: usize, camera_id: u8) -> String {
    format!("t{t:04}_cam{camera_id}.pgm")
}

fn sidecar_name(t: usize, camera_id: u8) -> String {
    format!("t{t:04}_cam{camera_id}.toml")
}

fn write_frame(dir: &Path, frame: &Frame, seed: u64) -> Result<()> {
    frame.image.write_pgm(&dir.join(frame_file_name(frame.time_index, frame.camera_id)))?;
    let sidecar = FrameSidecar {
        time_index: frame.time_index,
        camera_id: frame.camera_id,
        gain_db: frame.params.gain_db(),
        exposure_s: frame.params.exposure_s(),
        seed,
    };
    let text = toml::to_string(&sidecar)
        .map_err(|e| Error::Format { what: "sidecar".into(), detail: e.to_string() })?;
    fs::write(dir.join(sidecar_name(frame.time_index, frame.camera_id)), text)?;
    Ok(())
}

fn read_frame(dir: &Path, t: usize, camera_id: u8) -> Result<Frame> {
    let image = GrayImage::read_pgm(&dir.join(frame_file_name(t, camera_id)))?;
    let text = fs::read_to_string(dir.join(sidecar_name(t, camera_id)))?;
    let sidecar: FrameSidecar = toml::from_str(&text)
        .map_err(|e| Error::Format { what: "sidecar".into(), detail: e.to_string() })?;
    if sidecar.time_index != t || sidecar.camera_id != camera_id {
        return Err(Error::Format {
            what: "sidecar".into(),
            detail: format!(
                "file for t {t} cam {camera_id} describes t {} cam {}",
                sidecar.time_index, sidecar.camera_id
            ),
        });
    }
    Ok(Frame {
        image,
        time_index: t,
        camera_id,
        params: CameraParams::new(sidecar.gain_db, sidecar.exposure_s)?,
    })
}

/// Writes one collected episode: `manifest.toml` plus a `frames/` directory
/// holding a PGM and a sidecar per (timestep, camera).
pub fn save_episode(
    dir: &Path,
    dataset: &CollectedDataset,
    scene_sha256: &str,
) -> Result<()> {
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir)?;
    let manifest = EpisodeManifest {
        episode_index: dataset.episode_index,
        round: dataset.round,
        controller_id: dataset.controller_id.clone(),
        seed: dataset.seed,
        frames: dataset.len(),
        scene_sha256: scene_sha256.to_string(),
    };
    let text = toml::to_string(&manifest)
        .map_err(|e| Error::Format { what: "manifest".into(), detail: e.to_string() })?;
    fs::write(dir.join("manifest.toml"), text)?;
    for record in &dataset.records {
        write_frame(&frames_dir, &record.reference, dataset.seed)?;
        write_frame(&frames_dir, &record.perturbed, dataset.seed)?;
    }
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<EpisodeManifest> {
    let text = fs::read_to_string(dir.join("manifest.toml"))?;
    toml::from_str(&text)
        .map_err(|e| Error::Format { what: "manifest".into(), detail: e.to_string() })
}

/// Reads an episode back. The perturbation quadrant is reconstructed from
/// the timestep since the cycle is fixed at collection time.
pub fn load_episode(dir: &Path) -> Result<CollectedDataset> {
    let manifest = load_manifest(dir)?;
    let frames_dir = dir.join("frames");
    let mut records = Vec::with_capacity(manifest.frames);
    for t in 0..manifest.frames {
        records.push(CollectedRecord {
            reference: read_frame(&frames_dir, t, 1)?,
            perturbed: read_frame(&frames_dir, t, 2)?,
            quadrant_index: (t % 4) as u8,
        });
    }
    Ok(CollectedDataset {
        records,
        round: manifest.round,
        controller_id: manifest.controller_id,
        seed: manifest.seed,
        episode_index: manifest.episode_index,
    })
}

/// Directory name for an episode within a round.
pub fn episode_dir_name(episode_index: u64) -> String {
    format!("ep{episode_index:04}")
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    episode_index: u64,
    t: usize,
    cam0: u8,
    cam1: u8,
    cam2: u8,
    frame0: String,
    frame1: String,
    frame2: String,
    gain0_db: f64,
    exposure0_s: f64,
    gain1_db: f64,
    exposure1_s: f64,
    gain2_db: f64,
    exposure2_s: f64,
    target_gain: f64,
    target_exposure: f64,
    metric: LabelMetric,
    weight: f64,
}

/// Labeled windows as CSV, one row per window, frame references relative to
/// the episode directory.
pub fn save_labels(path: &Path, samples: &[LabeledSample]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    for s in samples {
        let p = &s.input_params;
        writer.serialize(LabelRow {
            episode_index: s.episode_index,
            t: s.t,
            cam0: s.cameras[0],
            cam1: s.cameras[1],
            cam2: s.cameras[2],
            frame0: format!("frames/{}", frame_file_name(s.t - 2, s.cameras[0])),
            frame1: format!("frames/{}", frame_file_name(s.t - 1, s.cameras[1])),
            frame2: format!("frames/{}", frame_file_name(s.t, s.cameras[2])),
            gain0_db: p[0].gain_db(),
            exposure0_s: p[0].exposure_s(),
            gain1_db: p[1].gain_db(),
            exposure1_s: p[1].exposure_s(),
            gain2_db: p[2].gain_db(),
            exposure2_s: p[2].exposure_s(),
            target_gain: s.target.0,
            target_exposure: s.target.1,
            metric: s.metric,
            weight: s.weight,
        })?;
    }
    writer.flush()?;
    Ok(())
}

pub fn load_labels(path: &Path) -> Result<Vec<LabeledSample>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in reader.deserialize() {
        let row: LabelRow = row?;
        out.push(LabeledSample {
            episode_index: row.episode_index,
            t: row.t,
            cameras: [row.cam0, row.cam1, row.cam2],
            input_params: [
                CameraParams::new(row.gain0_db, row.exposure0_s)?,
                CameraParams::new(row.gain1_db, row.exposure1_s)?,
                CameraParams::new(row.gain2_db, row.exposure2_s)?,
            ],
            target: (row.target_gain, row.target_exposure),
            metric: row.metric,
            weight: row.weight,
        });
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceCsvRow {
    controller_id: String,
    seed: u64,
    episode_index: u64,
    time_index: usize,
    gain_db: f64,
    exposure_s: f64,
    m_feat: usize,
    /// Empty for frames without a previous frame to match against.
    nfm: Option<usize>,
    segment: SegmentTag,
}

/// Trace CSV: controller_id, seed, episode_index, time_index, gain_db,
/// exposure_s, m_feat, nfm (empty when undefined), segment.
pub fn save_trace(path: &Path, trace: &EpisodeTrace) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    for row in &trace.rows {
        writer.serialize(TraceCsvRow {
            controller_id: trace.controller_id.clone(),
            seed: trace.seed,
            episode_index: trace.episode_index,
            time_index: row.time_index,
            gain_db: row.params.gain_db(),
            exposure_s: row.params.exposure_s(),
            m_feat: row.m_feat,
            nfm: row.nfm,
            segment: row.tag,
        })?;
    }
    writer.flush()?;
    Ok(())
}

pub fn load_trace(path: &Path) -> Result<EpisodeTrace> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    let mut header: Option<(String, u64, u64)> = None;
    for row in reader.deserialize() {
        let row: TraceCsvRow = row?;
        let key = (row.controller_id.clone(), row.seed, row.episode_index);
        match &header {
            None => header = Some(key),
            Some(h) if *h != key => {
                return Err(Error::Format {
                    what: "trace".into(),
                    detail: "mixed episodes in one trace file".into(),
                })
            }
            _ => {}
        }
        rows.push(TraceRow {
            time_index: row.time_index,
            params: CameraParams::new(row.gain_db, row.exposure_s)?,
            m_feat: row.m_feat,
            nfm: row.nfm,
            tag: row.segment,
        });
    }
    let (controller_id, seed, episode_index) = header.ok_or_else(|| Error::Format {
        what: "trace".into(),
        detail: "empty trace file".into(),
    })?;
    Ok(EpisodeTrace { controller_id, seed, episode_index, rows })
}

/// Training curves as CSV: epoch, train_loss, holdout_loss (empty when no
/// holdout existed).
pub fn save_curves(path: &Path, history: &[EpochStats]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["epoch", "train_loss", "holdout_loss"])?;
    for s in history {
        writer.write_record([
            s.epoch.to_string(),
            s.train_loss.to_string(),
            s.holdout_loss.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

/// Comparison report: a human-readable table and machine-readable JSON
/// rows. Trace files are written separately and remain the source of truth.
pub fn save_report(dir: &Path, report: &ComparisonReport) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir)?;
    let json_path = dir.join("report.json");
    let json = serde_json::to_string_pretty(&report.rows)
        .map_err(|e| Error::Format { what: "report".into(), detail: e.to_string() })?;
    fs::write(&json_path, json)?;
    let text_path = dir.join("report.txt");
    fs::write(&text_path, render_report_table(&report.rows))?;
    Ok((text_path, json_path))
}

pub fn render_report_table(rows: &[ComparisonRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<16} {:<8} {:>9} {:>12} {:>9} {:>11}\n",
        "controller", "segment", "episodes", "median_nfm", "min_nfm", "successes"
    ));
    for r in rows {
        let median = r
            .median_nfm
            .map(|v| format!("{v:.1}"))
            .unwrap_or_else(|| "-".to_string());
        let min = r.min_nfm.map(|v| v.to_string()).unwrap_or_else(|| "-".to_string());
        out.push_str(&format!(
            "{:<16} {:<8} {:>9} {:>12} {:>9} {:>11}\n",
            r.controller_id,
            r.tag.to_string(),
            r.episodes,
            median,
            min,
            format!("{}/{}", r.successes, r.episodes),
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controllers::FixedController;
    use crate::sampler::collect_episode;
    use crate::sim::{make_tunnel_scene, CameraModel};

    fn tiny_scene_cfg() -> TunnelSceneConfig {
        TunnelSceneConfig {
            viewport: 64,
            static_before: 8,
            transition: 0,
            plateau: 0,
            static_after: 0,
            attenuation_db: 0.0,
            ..TunnelSceneConfig::default()
        }
    }

    fn tiny_dataset(seed: u64) -> CollectedDataset {
        let cfg = tiny_scene_cfg();
        let scene = make_tunnel_scene(&cfg, seed).unwrap();
        let camera = CameraModel::default();
        let mut controller = FixedController::new(CameraParams::new(5.0, 1e-3).unwrap());
        collect_episode(&scene, &camera, &mut controller, seed, 3).unwrap()
    }

    #[test]
    fn episode_round_trips_bit_exactly() {
        let dataset = tiny_dataset(51);
        let dir = tempfile::tempdir().unwrap();
        let fp = scene_fingerprint(&tiny_scene_cfg(), 51).unwrap();
        save_episode(dir.path(), &dataset, &fp).unwrap();
        let back = load_episode(dir.path()).unwrap();
        assert_eq!(back.len(), dataset.len());
        assert_eq!(back.round, dataset.round);
        assert_eq!(back.controller_id, dataset.controller_id);
        assert_eq!(back.episode_index, dataset.episode_index);
        for (a, b) in dataset.records.iter().zip(&back.records) {
            assert_eq!(a.quadrant_index, b.quadrant_index);
            for (fa, fb) in [(&a.reference, &b.reference), (&a.perturbed, &b.perturbed)] {
                assert_eq!(fa.image.data(), fb.image.data());
                assert_eq!(fa.params.gain_db().to_bits(), fb.params.gain_db().to_bits());
                assert_eq!(
                    fa.params.exposure_s().to_bits(),
                    fb.params.exposure_s().to_bits()
                );
            }
        }
        let manifest = load_manifest(dir.path()).unwrap();
        assert_eq!(manifest.scene_sha256, fp);
    }

    #[test]
    fn fingerprint_tracks_config_and_seed() {
        let cfg = tiny_scene_cfg();
        let a = scene_fingerprint(&cfg, 1).unwrap();
        let b = scene_fingerprint(&cfg, 2).unwrap();
        assert_ne!(a, b);
        let mut cfg2 = cfg.clone();
        cfg2.attenuation_db = 60.0;
        assert_ne!(a, scene_fingerprint(&cfg2, 1).unwrap());
        assert_eq!(a, scene_fingerprint(&cfg, 1).unwrap());
    }

    #[test]
    fn labels_round_trip_through_csv() {
        let samples = vec![LabeledSample {
            episode_index: 2,
            t: 5,
            cameras: [1, 2, 1],
            input_params: [
                CameraParams::new(3.0, 1e-3).unwrap(),
                CameraParams::new(4.5, 2e-3).unwrap(),
                CameraParams::new(0.0, 3.3e-4).unwrap(),
            ],
            target: (0.25, 0.75),
            metric: LabelMetric::Hybrid,
            weight: 0.5,
        }];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.csv");
        save_labels(&path, &samples).unwrap();
        let back = load_labels(&path).unwrap();
        assert_eq!(back.len(), 1);
        let s = &back[0];
        assert_eq!(s.t, 5);
        assert_eq!(s.cameras, [1, 2, 1]);
        assert_eq!(s.target, (0.25, 0.75));
        assert_eq!(s.metric, LabelMetric::Hybrid);
        for (a, b) in samples[0].input_params.iter().zip(&s.input_params) {
            assert_eq!(a.gain_db().to_bits(), b.gain_db().to_bits());
            assert_eq!(a.exposure_s().to_bits(), b.exposure_s().to_bits());
        }
    }

    #[test]
    fn traces_round_trip_and_reject_mixed_files() {
        use crate::eval::{EpisodeTrace, TraceRow};
        let trace = EpisodeTrace {
            controller_id: "fixed".into(),
            seed: 4,
            episode_index: 1,
            rows: vec![
                TraceRow {
                    time_index: 0,
                    params: CameraParams::new(1.0, 1e-3).unwrap(),
                    m_feat: 42,
                    nfm: None,
                    tag: SegmentTag::Static,
                },
                TraceRow {
                    time_index: 1,
                    params: CameraParams::new(1.5, 1.1e-3).unwrap(),
                    m_feat: 40,
                    nfm: Some(33),
                    tag: SegmentTag::Dynamic,
                },
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        save_trace(&path, &trace).unwrap();
        let back = load_trace(&path).unwrap();
        assert_eq!(back.controller_id, "fixed");
        assert_eq!(back.rows.len(), 2);
        assert_eq!(back.rows[0].nfm, None);
        assert_eq!(back.rows[1].nfm, Some(33));
        assert_eq!(back.rows[1].tag, SegmentTag::Dynamic);

        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str("other,4,1,2,1.0,0.001,10,5,static\n");
        std::fs::write(&path, text).unwrap();
        assert!(load_trace(&path).is_err());
    }

    #[test]
    fn report_table_includes_success_ratios() {
        let rows = vec![ComparisonRow {
            controller_id: "learned".into(),
            tag: SegmentTag::Dynamic,
            episodes: 6,
            median_nfm: Some(421.0),
            min_nfm: Some(301),
            successes: 6,
        }];
        let table = render_report_table(&rows);
        assert!(table.contains("learned"));
        assert!(table.contains("6/6"));
        assert!(table.contains("421.0"));
    }

    #[test]
    fn curves_write_epoch_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curves.csv");
        save_curves(
            &path,
            &[
                EpochStats { epoch: 0, train_loss: 0.5, holdout_loss: Some(0.6) },
                EpochStats { epoch: 1, train_loss: 0.25, holdout_loss: None },
            ],
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("epoch,train_loss,holdout_loss"));
        assert!(text.contains("0,0.5,0.6"));
        assert!(text.contains("1,0.25,"));
    }
}
