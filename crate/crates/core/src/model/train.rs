//! Dataset materialization and the training loop.
//!
//! Frames are resampled once into shared planes; batches are stacked from
//! plane references on the fly, so memory stays proportional to the number
//! of distinct frames rather than the number of labeled windows.

use super::{assemble_batch, blended_l1, Act2, Adam, ControlNet, InputWindow, NetworkConfig};
use crate::error::{Error, Result};
use crate::labeler::LabeledSample;
use crate::rng::{stream, tag};
use crate::sampler::CollectedDataset;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { batch_size: 64, learning_rate: 1e-4, epochs: 30 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidConfig("batch_size and epochs must be positive".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// One labeled window, referencing planes by index.
#[derive(Debug, Clone)]
pub struct TrainingItem {
    pub episode: u64,
    /// Timestep of the newest input frame.
    pub t: usize,
    /// Plane indices, oldest first.
    pub planes: [usize; 3],
    /// Normalized capture parameters, oldest first.
    pub params: [(f64, f64); 3],
    /// Normalized target.
    pub target: (f64, f64),
}

/// Materialized training data: deduplicated image planes plus windows.
pub struct TrainingSet {
    pub resolution: usize,
    planes: Vec<Vec<f32>>,
    items: Vec<TrainingItem>,
}

impl TrainingSet {
    pub fn from_parts(
        resolution: usize,
        planes: Vec<Vec<f32>>,
        items: Vec<TrainingItem>,
    ) -> Result<Self> {
        let plane_len = resolution * resolution;
        if planes.iter().any(|p| p.len() != plane_len) {
            return Err(Error::Training("plane size does not match resolution".into()));
        }
        if items
            .iter()
            .any(|it| it.planes.iter().any(|&p| p >= planes.len()))
        {
            return Err(Error::Training("item references missing plane".into()));
        }
        Ok(Self { resolution, planes, items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[TrainingItem] {
        &self.items
    }

    fn window(&self, item: &TrainingItem) -> InputWindow<'_> {
        InputWindow {
            planes: [
                &self.planes[item.planes[0]],
                &self.planes[item.planes[1]],
                &self.planes[item.planes[2]],
            ],
            params: item.params,
        }
    }

    fn batch(&self, indices: &[usize]) -> (super::Act4, Vec<(f64, f64)>) {
        let windows: Vec<InputWindow<'_>> =
            indices.iter().map(|&i| self.window(&self.items[i])).collect();
        let targets = indices.iter().map(|&i| self.items[i].target).collect();
        (assemble_batch(&windows, self.resolution), targets)
    }
}

/// Resamples every referenced frame once and indexes the labeled windows
/// against the shared plane pool. Datasets from several episodes (and
/// several collection rounds) can be concatenated here.
pub fn prepare_training_set(
    data: &[(&CollectedDataset, &[LabeledSample])],
    resolution: usize,
) -> Result<TrainingSet> {
    let mut planes: Vec<Vec<f32>> = Vec::new();
    let mut index: HashMap<(u64, u8, usize, u8), usize> = HashMap::new();
    let mut items = Vec::new();
    for (dataset, samples) in data {
        for sample in *samples {
            if sample.episode_index != dataset.episode_index {
                return Err(Error::Training(format!(
                    "sample from episode {} paired with dataset for episode {}",
                    sample.episode_index, dataset.episode_index
                )));
            }
            let frames = sample.frames(dataset)?;
            let mut plane_ids = [0usize; 3];
            for (k, frame) in frames.iter().enumerate() {
                let key = (
                    dataset.episode_index,
                    dataset.round,
                    frame.time_index,
                    frame.camera_id,
                );
                plane_ids[k] = match index.get(&key) {
                    Some(&id) => id,
                    None => {
                        let id = planes.len();
                        planes.push(frame.image.resample_normalized(resolution));
                        index.insert(key, id);
                        id
                    }
                };
            }
            let mut params = [(0.0, 0.0); 3];
            for (k, p) in sample.input_params.iter().enumerate() {
                params[k] = p.normalized();
            }
            items.push(TrainingItem {
                episode: sample.episode_index,
                t: sample.t,
                planes: plane_ids,
                params,
                target: sample.target,
            });
        }
    }
    TrainingSet::from_parts(resolution, planes, items)
}

/// Splits item indices into (train, holdout). With three or more episodes
/// the holdout is whole episodes, about a tenth of them (the highest ids),
/// so no window is seen in both halves. With fewer, the last tenth of each
/// episode's timesteps is held out instead.
fn split_holdout(items: &[TrainingItem]) -> (Vec<usize>, Vec<usize>) {
    let mut episodes: Vec<u64> = items.iter().map(|it| it.episode).collect();
    episodes.sort_unstable();
    episodes.dedup();
    if episodes.len() >= 3 {
        let k = (episodes.len() / 10).max(1);
        let held: Vec<u64> = episodes[episodes.len() - k..].to_vec();
        let (mut train, mut hold) = (Vec::new(), Vec::new());
        for (i, it) in items.iter().enumerate() {
            if held.contains(&it.episode) {
                hold.push(i);
            } else {
                train.push(i);
            }
        }
        return (train, hold);
    }
    let mut train = Vec::new();
    let mut hold = Vec::new();
    for &ep in &episodes {
        let mut ts: Vec<usize> =
            items.iter().filter(|it| it.episode == ep).map(|it| it.t).collect();
        ts.sort_unstable();
        ts.dedup();
        let k = if ts.len() >= 2 { (ts.len() / 10).max(1) } else { 0 };
        let cut = ts.len() - k;
        for (i, it) in items.iter().enumerate() {
            if it.episode != ep {
                continue;
            }
            let rank = ts.binary_search(&it.t).expect("t present");
            if rank < cut {
                train.push(i);
            } else {
                hold.push(i);
            }
        }
    }
    (train, hold)
}

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub holdout_loss: Option<f64>,
}

pub struct TrainedModel {
    pub net: ControlNet,
    pub history: Vec<EpochStats>,
}

/// Trains a freshly initialized network. Deterministic in `seed`: weight
/// init, epoch shuffles, and dropout masks all come from addressed streams.
/// A non-finite loss aborts with an error rather than continuing.
pub fn train(
    set: &TrainingSet,
    net_config: &NetworkConfig,
    train_config: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainedModel> {
    train_config.validate()?;
    if set.is_empty() {
        return Err(Error::Training("empty training set".into()));
    }
    if set.resolution != net_config.input_resolution {
        return Err(Error::Training(format!(
            "training set resolution {} does not match network input {}",
            set.resolution, net_config.input_resolution
        )));
    }
    let mut net = ControlNet::new(net_config.clone(), seed)?;
    let mut adam = Adam::new(train_config.learning_rate);
    let (train_idx, hold_idx) = split_holdout(&set.items);
    if train_idx.is_empty() {
        return Err(Error::Training("holdout split left no training items".into()));
    }
    let mut history = Vec::with_capacity(train_config.epochs);
    let mut step: u64 = 0;
    for epoch in 0..train_config.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut stream(seed, tag::SHUFFLE, &[epoch as u64]));
        let mut loss_sum = 0.0;
        for chunk in order.chunks(train_config.batch_size) {
            let (x, targets) = set.batch(chunk);
            let mut drop_rng = stream(seed, tag::DROPOUT, &[step]);
            let out = net.forward_train(x, &mut drop_rng);
            let preds: Vec<(f64, f64)> =
                (0..out.n).map(|i| (out.data[2 * i], out.data[2 * i + 1])).collect();
            let (loss, grad_pairs) = blended_l1(&preds, &targets, net_config.epsilon);
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "loss diverged at epoch {epoch}, step {step}"
                )));
            }
            let mut grad = Act2::zeros(out.n, 2);
            for (i, (gg, ge)) in grad_pairs.into_iter().enumerate() {
                grad.data[2 * i] = gg;
                grad.data[2 * i + 1] = ge;
            }
            net.zero_grads();
            net.backward(grad);
            adam.step(|f| net.visit_params(f));
            loss_sum += loss * chunk.len() as f64;
            step += 1;
        }
        let train_loss = loss_sum / train_idx.len() as f64;
        let holdout_loss = if hold_idx.is_empty() {
            None
        } else {
            Some(evaluate(&net, set, &hold_idx, net_config.epsilon)?)
        };
        let stats = EpochStats { epoch, train_loss, holdout_loss };
        on_epoch(&stats);
        history.push(stats);
    }
    Ok(TrainedModel { net, history })
}

/// Mean blended loss over the given items, inference mode.
pub fn evaluate(
    net: &ControlNet,
    set: &TrainingSet,
    indices: &[usize],
    epsilon: f64,
) -> Result<f64> {
    let mut sum = 0.0;
    for chunk in indices.chunks(64) {
        let (x, targets) = set.batch(chunk);
        let preds = net.predict_raw(&x);
        let (loss, _) = blended_l1(&preds, &targets, epsilon);
        if !loss.is_finite() {
            return Err(Error::Training("evaluation loss diverged (non-finite)".into()));
        }
        sum += loss * chunk.len() as f64;
    }
    Ok(sum / indices.len() as f64)
}
