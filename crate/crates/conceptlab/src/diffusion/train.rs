//! The noise-prediction training loop.

use std::path::PathBuf;

use ndarray::{Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{ModelState, NoiseSchedule, ProvenanceEntry};
use crate::error::{Error, Result};
use crate::nn::{AdamW, CondUnet, Parameterized};
use crate::rng::substream;
use crate::shapegen::Dataset;

fn default_lr() -> f32 {
    2e-4
}
fn default_batch() -> usize {
    128
}
fn default_epochs() -> usize {
    100
}
fn default_beta1() -> f32 {
    0.9
}
fn default_beta2() -> f32 {
    0.99
}
fn default_wd() -> f32 {
    1e-5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f32,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f32,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f32,
    #[serde(default = "default_wd")]
    pub weight_decay: f32,
    #[serde(default)]
    pub seed: u64,
    /// where to write a diagnostic state dump if the loss goes non-finite
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dump_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: default_lr(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            weight_decay: default_wd(),
            seed: 0,
            dump_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate < 1.0) {
            return Err(Error::Config(format!(
                "learning rate {} outside (0, 1)",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
}

/// Callback events emitted by [`train`]. `EpochEnd` fires after the
/// optimizer step that completes each epoch; callbacks get mutable access
/// to the model so they can run sampling-based evaluation.
pub enum TrainEvent {
    EpochEnd { epoch: usize, step: u64, mean_loss: f64 },
}

/// Convert dataset images to the model's input layout: channel-first,
/// values mapped from [0, 1] to [-1, 1].
pub(crate) fn dataset_to_model_inputs(dataset: &Dataset) -> Result<(Array4<f32>, Array2<f32>)> {
    if dataset.is_empty() {
        return Err(Error::Argument("dataset is empty".into()));
    }
    let side = dataset.image_size();
    let n = dataset.len();
    let space = &dataset.spec.space;
    let width = space.encoding_width();
    let mut images = Array4::<f32>::zeros((n, 3, side, side));
    let mut conds = Array2::<f32>::zeros((n, width));
    for (i, s) in dataset.samples.iter().enumerate() {
        for row in 0..side {
            for col in 0..side {
                for ch in 0..3 {
                    images[(i, ch, row, col)] = s.image[(row, col, ch)] * 2.0 - 1.0;
                }
            }
        }
        let enc = space.encode_class(&s.class)?;
        for (j, v) in enc.iter().enumerate() {
            conds[(i, j)] = *v;
        }
    }
    Ok((images, conds))
}

/// Draw per-sample timesteps and unit-Gaussian noise; fixed consumption
/// order (t then the noise block, sample by sample).
pub(crate) fn draw_ts_eps(
    rng: &mut ChaCha8Rng,
    bsz: usize,
    shape: (usize, usize, usize),
    t_max: usize,
) -> (Vec<usize>, Array4<f32>) {
    let (c, h, w) = shape;
    let mut ts = Vec::with_capacity(bsz);
    let mut eps = Array4::<f32>::zeros((bsz, c, h, w));
    for b in 0..bsz {
        ts.push(rng.gen_range(1..=t_max));
        let mut view = eps.index_axis_mut(Axis(0), b);
        for v in view.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
    }
    (ts, eps)
}

/// Per-element MSE between two arrays, plus the gradient w.r.t. the first.
pub(crate) fn mse_and_grad(pred: &Array4<f32>, target: &Array4<f32>) -> (f64, Array4<f32>) {
    let diff = pred - target;
    let numel = diff.len() as f64;
    let loss = diff.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>() / numel;
    let scale = 2.0 / numel as f32;
    (loss, diff.mapv(|v| v * scale))
}

/// Per-element mean-squared error between predicted and true noise, with
/// gradient accumulation when `with_grad` is set. Public so that gradient
/// verification can drive the full objective with fixed (t, eps) draws.
pub fn noise_prediction_mse(
    net: &mut CondUnet,
    schedule: &NoiseSchedule,
    x0: &Array4<f32>,
    conds: &Array2<f32>,
    ts: &[usize],
    eps: &Array4<f32>,
    with_grad: bool,
) -> f64 {
    let (bsz, c, h, w) = x0.dim();
    let mut xt = Array4::<f32>::zeros((bsz, c, h, w));
    for b in 0..bsz {
        let ab = schedule.alpha_bar(ts[b]);
        let sa = ab.sqrt();
        let sb = (1.0 - ab).sqrt();
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    xt[(b, ch, y, x)] = sa * x0[(b, ch, y, x)] + sb * eps[(b, ch, y, x)];
                }
            }
        }
    }
    let pred = net.forward(&xt, ts, conds, with_grad);
    let (loss, dout) = mse_and_grad(&pred, eps);
    if with_grad {
        net.backward(&dout);
    }
    loss
}

/// The training objective as a standalone operation: draws t uniformly in
/// [1, T] and unit-Gaussian noise per sample, returns the per-element MSE.
pub fn training_loss(
    state: &mut ModelState,
    images: &Array4<f32>,
    conds: &Array2<f32>,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let (bsz, c, h, w) = images.dim();
    if bsz == 0 {
        return Err(Error::Argument("batch is empty".into()));
    }
    if conds.dim() != (bsz, state.net.cond_width) {
        return Err(Error::Schema(format!(
            "conditioning shape {:?} != ({bsz}, {})",
            conds.dim(),
            state.net.cond_width
        )));
    }
    let (ts, eps) = draw_ts_eps(rng, bsz, (c, h, w), state.schedule.t_max());
    Ok(noise_prediction_mse(
        &mut state.net,
        &state.schedule,
        images,
        conds,
        &ts,
        &eps,
        false,
    ))
}

fn dump_diagnostics(
    state: &mut ModelState,
    config: &TrainConfig,
    epoch: usize,
    recent: &[f64],
) -> Option<PathBuf> {
    let dir = config.dump_dir.clone()?;
    std::fs::create_dir_all(&dir).ok()?;
    let mut norms = serde_json::Map::new();
    state.net.visit_params(&mut |p| {
        let l2 = p.data.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt();
        let gl2 = p.grad.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt();
        norms.insert(
            p.name.clone(),
            serde_json::json!({"param_l2": l2, "grad_l2": gl2}),
        );
    });
    let doc = serde_json::json!({
        "event": "non_finite_loss",
        "epoch": epoch,
        "step": state.step_count,
        "recent_losses": recent,
        "config": config,
        "tensor_norms": norms,
    });
    let path = dir.join(format!("nan_dump_step{}.json", state.step_count));
    std::fs::write(&path, serde_json::to_vec_pretty(&doc).ok()?).ok()?;
    Some(path)
}

fn run_epochs(
    state: &mut ModelState,
    images: &Array4<f32>,
    conds: &Array2<f32>,
    config: &TrainConfig,
    phase: &str,
    hook: &mut dyn FnMut(TrainEvent, &mut ModelState) -> Result<()>,
) -> Result<Vec<EpochLoss>> {
    config.validate()?;
    let n = images.dim().0;
    let (c, h, w) = (images.dim().1, images.dim().2, images.dim().3);
    let width = conds.dim().1;
    let mut curve = Vec::with_capacity(config.epochs);
    let mut recent = Vec::new();

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut substream(config.seed, "train.shuffle", epoch as u64));

        let mut epoch_sum = 0.0f64;
        let mut epoch_count = 0usize;
        for batch_idx in order.chunks(config.batch_size) {
            let bsz = batch_idx.len();
            let mut xb = Array4::<f32>::zeros((bsz, c, h, w));
            let mut cb = Array2::<f32>::zeros((bsz, width));
            for (row, &src) in batch_idx.iter().enumerate() {
                xb.index_axis_mut(Axis(0), row)
                    .assign(&images.index_axis(Axis(0), src));
                cb.index_axis_mut(Axis(0), row)
                    .assign(&conds.index_axis(Axis(0), src));
            }
            let (ts, eps) = draw_ts_eps(&mut state.rng, bsz, (c, h, w), state.schedule.t_max());
            state.net.zero_grad();
            let loss = noise_prediction_mse(&mut state.net, &state.schedule, &xb, &cb, &ts, &eps, true);
            if !loss.is_finite() {
                let dump = dump_diagnostics(state, config, epoch, &recent);
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step: state.step_count,
                    dump,
                });
            }
            state.opt.step(&mut state.net);
            state.step_count += 1;
            epoch_sum += loss * bsz as f64;
            epoch_count += bsz;
            recent.push(loss);
            if recent.len() > 16 {
                recent.remove(0);
            }
        }
        let mean_loss = epoch_sum / epoch_count as f64;
        curve.push(EpochLoss {
            epoch,
            step: state.step_count,
            loss: mean_loss,
        });
        hook(
            TrainEvent::EpochEnd {
                epoch,
                step: state.step_count,
                mean_loss,
            },
            state,
        )?;
    }
    state.provenance.push(ProvenanceEntry {
        phase: phase.to_string(),
        epochs: config.epochs,
        steps: state.step_count,
        dataset_total: n,
        dataset_classes: Default::default(),
        learning_rate: config.learning_rate,
        seed: config.seed,
    });
    Ok(curve)
}

/// Train from the dataset with AdamW and seeded per-epoch shuffles. The
/// hook fires at every epoch end with the current model, so callers control
/// their own evaluation cadence.
pub fn train(
    state: &mut ModelState,
    dataset: &Dataset,
    config: &TrainConfig,
    hook: &mut dyn FnMut(TrainEvent, &mut ModelState) -> Result<()>,
) -> Result<Vec<EpochLoss>> {
    let (images, conds) = dataset_to_model_inputs(dataset)?;
    if conds.dim().1 != state.net.cond_width {
        return Err(Error::Compatibility(format!(
            "dataset conditioning width {} != model width {}",
            conds.dim().1,
            state.net.cond_width
        )));
    }
    if dataset.image_size() != state.image_size {
        return Err(Error::Compatibility(format!(
            "dataset image size {} != model image size {}",
            dataset.image_size(),
            state.image_size
        )));
    }
    state.opt = AdamW::new(
        config.learning_rate,
        config.adam_beta1,
        config.adam_beta2,
        config.weight_decay,
    );
    state.rng = substream(config.seed, "train.noise", 0);
    let mut curve = run_epochs(state, &images, &conds, config, "train", hook)?;
    if let Some(last) = state.provenance.last_mut() {
        last.dataset_classes = dataset.manifest.clone();
    }
    // curve epochs are absolute from this run's start
    Ok(std::mem::take(&mut curve))
}

/// Continue optimization from trained parameters with fresh optimizer
/// moments, recording a fine-tune provenance entry.
pub fn fine_tune(
    state: &mut ModelState,
    dataset: &Dataset,
    config: &TrainConfig,
    hook: &mut dyn FnMut(TrainEvent, &mut ModelState) -> Result<()>,
) -> Result<Vec<EpochLoss>> {
    if state.step_count == 0 {
        return Err(Error::Argument(
            "fine_tune requires an already-trained model".into(),
        ));
    }
    let (images, conds) = dataset_to_model_inputs(dataset)?;
    if conds.dim().1 != state.net.cond_width {
        return Err(Error::Compatibility(format!(
            "fine-tune dataset conditioning width {} != model width {}",
            conds.dim().1,
            state.net.cond_width
        )));
    }
    if dataset.image_size() != state.image_size {
        return Err(Error::Compatibility(format!(
            "fine-tune dataset image size {} != model image size {}",
            dataset.image_size(),
            state.image_size
        )));
    }
    state.opt = AdamW::new(
        config.learning_rate,
        config.adam_beta1,
        config.adam_beta2,
        config.weight_decay,
    );
    state.rng = substream(config.seed, "finetune.noise", 0);
    let mut curve = run_epochs(state, &images, &conds, config, "fine-tune", hook)?;
    if let Some(last) = state.provenance.last_mut() {
        last.dataset_classes = dataset.manifest.clone();
    }
    Ok(std::mem::take(&mut curve))
}
