//! Conditional denoising diffusion: forward process, noise-prediction
//! training, ancestral sampling, fine-tuning, and checkpointing.

mod checkpoint;
mod sample;
mod schedule;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use sample::sample;
pub use schedule::{forward_noise, make_schedule, NoiseSchedule, ScheduleConfig};
pub use train::{
    fine_tune, noise_prediction_mse, train, training_loss, EpochLoss, TrainConfig, TrainEvent,
};

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{AdamW, CondUnet, NetworkSpec, Parameterized};
use crate::rng::substream;

/// One entry per optimization run applied to the parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProvenanceEntry {
    pub phase: String,
    pub epochs: usize,
    pub steps: u64,
    pub dataset_total: usize,
    pub dataset_classes: BTreeMap<String, usize>,
    pub learning_rate: f32,
    pub seed: u64,
}

/// The trainable model: network parameters, optimizer moments, schedule,
/// step counter, and the RNG stream that training noise draws consume.
pub struct ModelState {
    pub net: CondUnet,
    pub opt: AdamW,
    pub schedule: NoiseSchedule,
    pub image_size: usize,
    pub step_count: u64,
    pub rng: ChaCha8Rng,
    pub provenance: Vec<ProvenanceEntry>,
}

impl ModelState {
    /// Fresh model with seeded weight initialization.
    pub fn new(
        spec: NetworkSpec,
        schedule: NoiseSchedule,
        cond_width: usize,
        image_size: usize,
        seed: u64,
    ) -> Self {
        let mut init_rng = substream(seed, "model.init", 0);
        let net = CondUnet::new(spec, cond_width, &mut init_rng);
        ModelState {
            net,
            opt: AdamW::new(1e-4, 0.9, 0.99, 0.0),
            schedule,
            image_size,
            step_count: 0,
            rng: substream(seed, "model.noise", 0),
            provenance: Vec::new(),
        }
    }

    pub fn param_count(&mut self) -> usize {
        self.net.param_count()
    }
}
