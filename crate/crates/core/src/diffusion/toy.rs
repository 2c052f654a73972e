//! Two-condition 8×8 toy problem for checking conditional fidelity: condition
//! 0 images are bright on the left half, condition 1 on the right half.

use crate::csi::ConditionLabel;
use crate::error::Result;
use crate::manifest::Vocab;

use super::{
    to_model_range, DataStats, DenoiserConfig, DiffusionModel, DiffusionSettings, SampleRequest, ScheduleKind,
    TrainConfig, TrainingExample, DEFAULT_COND_DROP, DEFAULT_GUIDANCE,
};
use gda_autodiff::rng::derive_seed_indexed;

pub const TOY_SIZE: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct ToyConfig {
    pub schedule: ScheduleKind,
    pub steps: usize,
    pub train: TrainConfig,
    pub n_samples: usize,
    pub guidance_weight: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            schedule: ScheduleKind::Linear,
            steps: 100,
            train: TrainConfig {
                steps: 400,
                batch_size: 16,
                lr: 1e-3,
                seed: crate::DEFAULT_SEED,
            },
            n_samples: 200,
            guidance_weight: DEFAULT_GUIDANCE,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyOutcome {
    /// Samples whose brighter half matches the requested condition.
    pub consistent: usize,
    pub total: usize,
    pub losses: Vec<f64>,
}

impl ToyOutcome {
    pub fn fraction(&self) -> f64 {
        self.consistent as f64 / self.total as f64
    }
}

pub fn toy_vocab() -> Vocab {
    Vocab {
        gestures: 2,
        locations: 1,
        orientations: 1,
        users: 1,
        rooms: 1,
    }
}

pub fn toy_label(side: u16) -> ConditionLabel {
    ConditionLabel {
        gesture: side,
        ..ConditionLabel::default()
    }
}

/// `[0, 1]` toy image: 0.9 on the bright half, 0.1 elsewhere.
pub fn toy_image(side: u16) -> Vec<f32> {
    (0..TOY_SIZE * TOY_SIZE)
        .map(|i| {
            let left = i % TOY_SIZE < TOY_SIZE / 2;
            if left == (side == 0) {
                0.9
            } else {
                0.1
            }
        })
        .collect()
}

/// 0 when the left half carries more pixel mass, 1 otherwise.
pub fn mass_side(pixels: &[f32], width: usize) -> u16 {
    let (mut left, mut right) = (0.0f64, 0.0f64);
    for (i, &p) in pixels.iter().enumerate() {
        if i % width < width / 2 {
            left += p as f64;
        } else {
            right += p as f64;
        }
    }
    u16::from(right >= left)
}

/// Train on the toy set and count condition-consistent samples, alternating
/// the requested condition.
pub fn run_toy(cfg: &ToyConfig) -> Result<ToyOutcome> {
    let settings = DiffusionSettings {
        schedule: cfg.schedule,
        steps: cfg.steps,
        cond_drop_prob: DEFAULT_COND_DROP,
        model: DenoiserConfig {
            height: TOY_SIZE,
            width: TOY_SIZE,
            base_channels: 8,
            emb_dim: 32,
        },
        vocab: toy_vocab(),
        f_max_hz: 1.0,
        data: DataStats::default(),
    };
    let mut model = DiffusionModel::new(settings, cfg.train.seed)?;
    let data: Vec<TrainingExample> = (0..2u16)
        .map(|side| TrainingExample {
            x0: to_model_range(&toy_image(side)),
            cond: super::CondIds::from_label(&toy_label(side)),
        })
        .collect();
    let losses = model.train(&data, &cfg.train)?;
    let requests: Vec<SampleRequest> = (0..cfg.n_samples)
        .map(|i| SampleRequest {
            condition: toy_label((i % 2) as u16),
            seed: derive_seed_indexed(cfg.train.seed, "toy/sample", &[i as u64]),
        })
        .collect();
    let samples = model.sample_requests(&requests, cfg.guidance_weight)?;
    let consistent = samples
        .iter()
        .zip(&requests)
        .filter(|(s, r)| mass_side(s.pixels(), TOY_SIZE) == r.condition.gesture)
        .count();
    Ok(ToyOutcome {
        consistent,
        total: samples.len(),
        losses,
    })
}
