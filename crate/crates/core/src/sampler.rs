//! Dual-camera data collection.
//!
//! Camera 1 follows a reference controller; camera 2 shoots the same pose
//! with multiplicatively perturbed params, cycling through the four sign
//! quadrants of (gain, exposure) so each 4-frame window explores every
//! direction around the reference. The collected pairs are the raw material
//! for label generation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::controllers::{Controller, ReactiveAeAg};
use crate::error::{Error, Result};
use crate::rng::{stream, tag};
use crate::sim::{render_frame, CameraModel, CameraParams, Frame, RadianceScene};

/// Sign quadrants in cycle order: (+,+), (+,-), (-,+), (-,-) on
/// (gain, exposure).
pub const QUADRANT_SIGNS: [(f64, f64); 4] = [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)];

/// Upper bound of the additive gain bump used when the reference sits at
/// 0 dB and a multiplicative perturbation would have no effect.
pub const ZERO_GAIN_DELTA_DB: f64 = 3.0;

/// Quadrant cursor plus the draw stream for perturbation magnitudes.
#[derive(Debug, Clone)]
pub struct PerturbationState {
    quadrant_index: usize,
    rng: ChaCha8Rng,
}

impl PerturbationState {
    pub fn new(seed: u64, episode_index: u64) -> Self {
        Self { quadrant_index: 0, rng: stream(seed, tag::PERTURB, &[episode_index]) }
    }

    pub fn quadrant_index(&self) -> usize {
        self.quadrant_index
    }

    pub fn signs(&self) -> (f64, f64) {
        QUADRANT_SIGNS[self.quadrant_index]
    }
}

/// Pure arithmetic core of the perturbation, taking the magnitudes as
/// arguments. Gain scales in dB; exposure scales in seconds. A reference at
/// exactly 0 dB cannot be scaled, so the positive-gain quadrants add
/// `delta_db` instead and the negative ones leave gain at 0.
pub fn apply_perturbation(
    reference: CameraParams,
    signs: (f64, f64),
    u_gain: f64,
    u_exposure: f64,
    delta_db: f64,
) -> Result<CameraParams> {
    let (s_g, s_e) = signs;
    let gain_db = if reference.gain_db() == 0.0 {
        if s_g > 0.0 {
            delta_db
        } else {
            0.0
        }
    } else {
        reference.gain_db() * (1.0 + s_g * u_gain)
    };
    let exposure_s = reference.exposure_s() * (1.0 + s_e * u_exposure);
    CameraParams::new(gain_db, exposure_s)
}

/// Draws magnitudes, applies the current quadrant, and advances the cycle.
pub fn perturb_params(
    reference: CameraParams,
    state: &mut PerturbationState,
) -> Result<CameraParams> {
    let signs = state.signs();
    let u_gain: f64 = state.rng.gen_range(0.0..=0.5);
    let u_exposure: f64 = state.rng.gen_range(0.0..=0.5);
    // (0, max]: flipping the half-open unit draw keeps zero out.
    let delta_db = ZERO_GAIN_DELTA_DB * (1.0 - state.rng.gen::<f64>());
    let out = apply_perturbation(reference, signs, u_gain, u_exposure, delta_db)?;
    state.quadrant_index = (state.quadrant_index + 1) % 4;
    Ok(out)
}

/// One timestep of a collection episode: the same pose shot by both cameras.
#[derive(Debug, Clone)]
pub struct CollectedRecord {
    pub reference: Frame,
    pub perturbed: Frame,
    pub quadrant_index: u8,
}

#[derive(Debug, Clone)]
pub struct CollectedDataset {
    pub records: Vec<CollectedRecord>,
    pub round: u8,
    pub controller_id: String,
    pub seed: u64,
    pub episode_index: u64,
}

impl CollectedDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Runs the closed loop over the whole scene: render both cameras, record,
/// then let the reference controller see camera 1's history to command the
/// next step. Noise streams are addressed by (episode, camera, timestep), so
/// the two cameras and every timestep are independent, and a re-run with the
/// same seed reproduces the dataset bit for bit.
pub fn collect_episode(
    scene: &RadianceScene,
    model: &CameraModel,
    controller: &mut dyn Controller,
    seed: u64,
    episode_index: u64,
) -> Result<CollectedDataset> {
    scene.validate()?;
    model.validate()?;
    let mut state = PerturbationState::new(seed, episode_index);
    let mut records = Vec::with_capacity(scene.len());
    let mut history: Vec<Frame> = Vec::with_capacity(scene.len());
    let mut params = controller.initial_params();
    for t in 0..scene.len() {
        let perturbed_params = perturb_params(params, &mut state)?;
        let mut rng1 = stream(seed, tag::FRAME_NOISE, &[episode_index, 1, t as u64]);
        let mut rng2 = stream(seed, tag::FRAME_NOISE, &[episode_index, 2, t as u64]);
        let reference = render_frame(scene, t, params, model, 1, Some(&mut rng1))?;
        let perturbed = render_frame(scene, t, perturbed_params, model, 2, Some(&mut rng2))?;
        records.push(CollectedRecord {
            reference: reference.clone(),
            perturbed,
            quadrant_index: ((t % 4) as u8),
        });
        history.push(reference);
        params = controller.next_params(&history)?;
    }
    Ok(CollectedDataset {
        records,
        round: 0,
        controller_id: controller.id().to_string(),
        seed,
        episode_index,
    })
}

/// Round-tagged collection. Round 1 runs the reactive servo as the
/// reference; later rounds run the caller-supplied trained controller.
/// Rounds beyond 2 are allowed (returns diminish quickly, two is the
/// intended schedule).
pub fn iterative_collection(
    scene: &RadianceScene,
    model: &CameraModel,
    round: u8,
    learned: Option<&mut dyn Controller>,
    seed: u64,
    episode_index: u64,
) -> Result<CollectedDataset> {
    if round == 0 {
        return Err(Error::Collection("round must be >= 1".into()));
    }
    let mut dataset = if round == 1 {
        let mut reference = ReactiveAeAg::default();
        collect_episode(scene, model, &mut reference, seed, episode_index)?
    } else {
        let reference = learned.ok_or_else(|| {
            Error::Collection(format!(
                "round {round} needs a trained controller from the previous round"
            ))
        })?;
        collect_episode(scene, model, reference, seed, episode_index)?
    };
    dataset.round = round;
    Ok(dataset)
}
