//! Learned exposure controller: a small convolutional network that maps the
//! last three frames plus their capture parameters to the parameters for the
//! next frame.
//!
//! The input tensor has 15 channels at a configurable square resolution:
//! the three most recent images (newest first), each replicated over three
//! channels, then three constant gain channels and three constant exposure
//! channels, all in normalized [0, 1] units. Replicating the grayscale
//! frames keeps the stem identical to a three-channel-per-image layout, so
//! channel widths transfer unchanged.
//!
//! The trunk is four conv blocks (3x3 conv, batch norm, ReLU, 2x2 max pool,
//! dropout) followed by three fully connected layers with batch norm and
//! ReLU between them. The two outputs are normalized gain and exposure,
//! clamped to [0, 1] before de-normalization. The network regresses
//! absolute parameter values, not corrections to the current ones.

mod checkpoint;
mod layers;
mod loss;
mod optim;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use layers::{Act2, Act4};
pub use loss::blended_l1;
pub use optim::Adam;
pub use train::{
    prepare_training_set, train, EpochStats, TrainConfig, TrainedModel, TrainingSet,
};

use crate::controllers::Controller;
use crate::error::{Error, Result};
use crate::rng::{stream, tag};
use crate::sim::{CameraParams, Frame};
use layers::{BatchNorm, Conv2d, Dropout, Linear, MaxPool2, Relu};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const INPUT_CHANNELS: usize = 15;
const HISTORY: usize = 3;

/// Architecture hyperparameters. The shape is fixed at four conv blocks and
/// three fully connected layers; only widths and resolution vary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Square side length frames are resampled to before stacking.
    pub input_resolution: usize,
    /// Output channels of the four conv blocks.
    pub conv_channels: [usize; 4],
    /// Widths of the two hidden fully connected layers; the output layer is
    /// always two wide.
    pub fc_widths: [usize; 2],
    pub dropout_p: f64,
    /// Loss blend weight on the gain term.
    pub epsilon: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_resolution: 64,
            conv_channels: [16, 32, 64, 64],
            fc_widths: [128, 64],
            dropout_p: 0.4,
            epsilon: 0.5,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_resolution < 4 || self.input_resolution > 512 {
            return Err(Error::InvalidConfig(format!(
                "input_resolution {} outside [4, 512]",
                self.input_resolution
            )));
        }
        if self.conv_channels.iter().any(|&c| c == 0) || self.fc_widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidConfig("zero-width layer".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::InvalidConfig(format!(
                "dropout_p {} outside [0, 1)",
                self.dropout_p
            )));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::InvalidConfig(format!(
                "epsilon {} outside [0, 1]",
                self.epsilon
            )));
        }
        Ok(())
    }

    /// Spatial side length after the four ceil-mode pools.
    pub fn pooled_resolution(&self) -> usize {
        let mut r = self.input_resolution;
        for _ in 0..4 {
            r = layers::pooled_size(r);
        }
        r
    }

    /// Input width of the first fully connected layer.
    pub fn flattened_len(&self) -> usize {
        let r = self.pooled_resolution();
        self.conv_channels[3] * r * r
    }
}

/// The network with all trainable state. Construction is deterministic in
/// the seed; see [`ControlNet::new`].
pub struct ControlNet {
    pub config: NetworkConfig,
    conv: Vec<Conv2d>,
    conv_bn: Vec<BatchNorm>,
    conv_relu: Vec<Relu>,
    pool: Vec<MaxPool2>,
    conv_drop: Vec<Dropout>,
    fc: Vec<Linear>,
    fc_bn: Vec<BatchNorm>,
    fc_relu: Vec<Relu>,
    fc_drop: Vec<Dropout>,
}

impl ControlNet {
    /// He-initialized weights drawn from a seed-addressed stream, one
    /// substream per layer so widening one layer leaves the others' draws
    /// unchanged.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut conv = Vec::new();
        let mut conv_bn = Vec::new();
        let mut in_c = INPUT_CHANNELS;
        for (i, &out_c) in config.conv_channels.iter().enumerate() {
            let mut rng = stream(seed, tag::NET_INIT, &[i as u64]);
            conv.push(Conv2d::new(in_c, out_c, &mut rng));
            conv_bn.push(BatchNorm::new(out_c));
            in_c = out_c;
        }
        let widths = [config.fc_widths[0], config.fc_widths[1], 2];
        let mut fc = Vec::new();
        let mut fc_bn = Vec::new();
        let mut in_d = config.flattened_len();
        for (i, &out_d) in widths.iter().enumerate() {
            let mut rng = stream(seed, tag::NET_INIT, &[4 + i as u64]);
            fc.push(Linear::new(in_d, out_d, &mut rng));
            if i < 2 {
                fc_bn.push(BatchNorm::new(out_d));
            }
            in_d = out_d;
        }
        let p = config.dropout_p;
        Ok(Self {
            conv,
            conv_bn,
            conv_relu: vec![Relu::default(); 4],
            pool: vec![MaxPool2::default(); 4],
            conv_drop: vec![Dropout::new(p); 4],
            fc,
            fc_bn,
            fc_relu: vec![Relu::default(); 2],
            fc_drop: vec![Dropout::new(p); 2],
            config,
        })
    }

    /// Training-mode forward: batch statistics, dropout drawn from `rng`.
    /// Caches intermediates for [`backward`](Self::backward).
    pub fn forward_train(&mut self, x: Act4, rng: &mut ChaCha8Rng) -> Act2 {
        assert_eq!(x.c, INPUT_CHANNELS);
        let mut a = x;
        for i in 0..4 {
            a = self.conv[i].forward_train(a);
            a = self.conv_bn[i].forward_train(a);
            a = self.conv_relu[i].forward_train(a);
            a = self.pool[i].forward_train(a);
            a = self.conv_drop[i].forward_train(a, rng);
        }
        let mut f = a.into_act2();
        for i in 0..2 {
            f = self.fc[i].forward_train(f);
            let a4 = self.fc_bn[i].forward_train(f.into_act4());
            let a4 = self.fc_relu[i].forward_train(a4);
            let a4 = self.fc_drop[i].forward_train(a4, rng);
            f = a4.into_act2();
        }
        self.fc[2].forward_train(f)
    }

    /// Inference forward: running statistics, no dropout, no caching.
    /// Deterministic for a given input and parameter state.
    pub fn forward_eval(&self, x: &Act4) -> Act2 {
        assert_eq!(x.c, INPUT_CHANNELS);
        let mut a = x.clone();
        for i in 0..4 {
            a = self.conv[i].forward_eval(&a);
            a = self.conv_bn[i].forward_eval(&a);
            a = self.conv_relu[i].forward_eval(&a);
            a = self.pool[i].forward_eval(&a);
        }
        let mut f = a.into_act2();
        for i in 0..2 {
            f = self.fc[i].forward_eval(&f);
            let a4 = self.fc_bn[i].forward_eval(&f.into_act4());
            let a4 = self.fc_relu[i].forward_eval(&a4);
            f = a4.into_act2();
        }
        self.fc[2].forward_eval(&f)
    }

    /// Backpropagates `grad` (dLoss/dOutput) through the cached forward,
    /// accumulating parameter gradients.
    pub fn backward(&mut self, grad: Act2) {
        let mut g = self.fc[2].backward(&grad);
        for i in (0..2).rev() {
            let g4 = self.fc_drop[i].backward(&g.into_act4());
            let g4 = self.fc_relu[i].backward(&g4);
            let g4 = self.fc_bn[i].backward(&g4);
            g = self.fc[i].backward(&g4.into_act2());
        }
        let r = dims_after(self.config.input_resolution, 4);
        let mut g4 = reshape_to_maps(g, self.config.conv_channels[3], r);
        for i in (0..4).rev() {
            g4 = self.conv_drop[i].backward(&g4);
            g4 = self.pool[i].backward(&g4);
            g4 = self.conv_relu[i].backward(&g4);
            g4 = self.conv_bn[i].backward(&g4);
            g4 = self.conv[i].backward(&g4);
        }
    }

    pub fn zero_grads(&mut self) {
        self.visit_params(&mut |_, grads| {
            for g in grads.iter_mut() {
                *g = 0.0;
            }
        });
    }

    /// Visits every trainable tensor in serialization order.
    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f32], &mut [f64])) {
        for i in 0..4 {
            self.conv[i].visit_params(f);
            self.conv_bn[i].visit_params(f);
        }
        for i in 0..3 {
            self.fc[i].visit_params(f);
            if i < 2 {
                self.fc_bn[i].visit_params(f);
            }
        }
    }

    /// Named tensors in serialization order, including the batch norm
    /// running statistics that inference depends on.
    pub(crate) fn named_tensors(&mut self) -> Vec<(String, &mut Vec<f32>)> {
        let mut out: Vec<(String, &mut Vec<f32>)> = Vec::new();
        for (i, (c, bn)) in self.conv.iter_mut().zip(self.conv_bn.iter_mut()).enumerate() {
            out.push((format!("conv{i}.weight"), &mut c.w));
            out.push((format!("conv{i}.bias"), &mut c.b));
            out.push((format!("conv{i}.bn.gamma"), &mut bn.gamma));
            out.push((format!("conv{i}.bn.beta"), &mut bn.beta));
            out.push((format!("conv{i}.bn.running_mean"), &mut bn.running_mean));
            out.push((format!("conv{i}.bn.running_var"), &mut bn.running_var));
        }
        for (i, l) in self.fc.iter_mut().enumerate() {
            out.push((format!("fc{i}.weight"), &mut l.w));
            out.push((format!("fc{i}.bias"), &mut l.b));
        }
        for (i, bn) in self.fc_bn.iter_mut().enumerate() {
            out.push((format!("fc{i}.bn.gamma"), &mut bn.gamma));
            out.push((format!("fc{i}.bn.beta"), &mut bn.beta));
            out.push((format!("fc{i}.bn.running_mean"), &mut bn.running_mean));
            out.push((format!("fc{i}.bn.running_var"), &mut bn.running_var));
        }
        out
    }

    /// Raw normalized predictions for a batch, before clamping.
    pub fn predict_raw(&self, x: &Act4) -> Vec<(f64, f64)> {
        let out = self.forward_eval(x);
        (0..out.n).map(|i| (out.data[2 * i], out.data[2 * i + 1])).collect()
    }
}

fn dims_after(r: usize, pools: usize) -> usize {
    let mut v = r;
    for _ in 0..pools {
        v = layers::pooled_size(v);
    }
    v
}

fn reshape_to_maps(a: Act2, c: usize, r: usize) -> Act4 {
    assert_eq!(a.d, c * r * r);
    Act4 { n: a.n, c, h: r, w: r, data: a.data }
}

/// One network input: three resampled frames (oldest first) and the
/// normalized capture parameters they were taken with.
pub struct InputWindow<'a> {
    pub planes: [&'a [f32]; HISTORY],
    pub params: [(f64, f64); HISTORY],
}

/// Stacks windows into the 15-channel batch tensor. Channel order: the
/// newest image replicated over channels 0-2, the middle over 3-5, the
/// oldest over 6-8; then gain (newest to oldest) on 9-11 and exposure on
/// 12-14 as constant planes.
pub fn assemble_batch(windows: &[InputWindow<'_>], resolution: usize) -> Act4 {
    let plane = resolution * resolution;
    let mut x = Act4::zeros(windows.len(), INPUT_CHANNELS, resolution, resolution);
    for (n, win) in windows.iter().enumerate() {
        let base = n * INPUT_CHANNELS * plane;
        for age in 0..HISTORY {
            let src = win.planes[HISTORY - 1 - age];
            assert_eq!(src.len(), plane);
            for rep in 0..3 {
                let dst = base + (age * 3 + rep) * plane;
                for (d, &s) in x.data[dst..dst + plane].iter_mut().zip(src) {
                    *d = f64::from(s);
                }
            }
        }
        for age in 0..HISTORY {
            let (g, e) = win.params[HISTORY - 1 - age];
            let gdst = base + (9 + age) * plane;
            x.data[gdst..gdst + plane].fill(g);
            let edst = base + (12 + age) * plane;
            x.data[edst..edst + plane].fill(e);
        }
    }
    x
}

/// Maps a raw network output to camera parameters: clamp each axis to
/// [0, 1], then de-normalize. (-0.2, 1.3) lands on the range corners,
/// (0.5, 0.5) on the midpoints.
pub fn output_to_params(raw: (f64, f64)) -> CameraParams {
    CameraParams::from_normalized(raw.0, raw.1)
}

/// Predicts parameters for the next frame from up to the last three frames.
/// With fewer than three, the earliest available frame is repeated to fill
/// the window.
pub fn predict_next(net: &ControlNet, frames: &[Frame]) -> Result<CameraParams> {
    if frames.is_empty() {
        return Err(Error::InvalidParams("prediction needs at least one frame".into()));
    }
    let res = net.config.input_resolution;
    let recent: Vec<&Frame> = frames.iter().rev().take(HISTORY).rev().collect();
    let mut planes: Vec<Vec<f32>> = Vec::with_capacity(HISTORY);
    let mut params = [(0.0, 0.0); HISTORY];
    for slot in 0..HISTORY {
        let idx = (slot + recent.len()).saturating_sub(HISTORY).min(recent.len() - 1);
        planes.push(recent[idx].image.resample_normalized(res));
        params[slot] = recent[idx].params.normalized();
    }
    let window = InputWindow {
        planes: [&planes[0], &planes[1], &planes[2]],
        params,
    };
    let raw = net.predict_raw(&assemble_batch(&[window], res))[0];
    if !raw.0.is_finite() || !raw.1.is_finite() {
        return Err(Error::Training(format!("non-finite prediction {raw:?}")));
    }
    Ok(output_to_params(raw))
}

/// Closed-loop controller wrapping a trained network.
pub struct LearnedController {
    net: ControlNet,
    initial: CameraParams,
}

impl LearnedController {
    pub fn new(net: ControlNet, initial: CameraParams) -> Self {
        Self { net, initial }
    }

    pub fn network(&self) -> &ControlNet {
        &self.net
    }
}

impl Controller for LearnedController {
    fn id(&self) -> &'static str {
        "learned"
    }

    fn initial_params(&self) -> CameraParams {
        self.initial
    }

    fn next_params(&mut self, frames: &[Frame]) -> Result<CameraParams> {
        predict_next(&self.net, frames)
    }
}
