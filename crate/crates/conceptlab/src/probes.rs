//! Per-attribute linear probes over flattened pixels, and the accuracy
//! measures used to score generated images.
//!
//! One probe per concept variable, trained with cross-entropy on the
//! diffusion model's training data and frozen afterwards. Scoring offers
//! three views: hard multiplicative accuracy (the product of per-attribute
//! correctness indicators, averaged over samples), additive accuracy (the
//! unweighted mean of per-attribute accuracies), and soft accuracy (the
//! averaged product of predicted probabilities of the target values).

use std::path::Path;

use ndarray::{Array1, Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::concept::{ConceptClass, ConceptSpace};
use crate::container::{read_container, write_container};
use crate::error::{Error, Result};
use crate::nn::{AdamW, Linear, Parameterized};
use crate::rng::substream;
use crate::shapegen::Dataset;

/// Softmax classifier for one concept variable: `weights` is
/// [num_values, H*W*3] over flattened channel-last [0,1] pixels.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    pub attribute_index: usize,
    pub weights: Array2<f32>,
    pub bias: Array1<f32>,
}

impl LinearProbe {
    /// Value probabilities for one flattened image.
    pub fn probabilities(&self, flat: &[f32]) -> Vec<f32> {
        let k = self.bias.len();
        let d = self.weights.dim().1;
        debug_assert_eq!(flat.len(), d);
        let mut logits = vec![0.0f32; k];
        for j in 0..k {
            let row = self.weights.row(j);
            let row = row.as_slice().expect("layout");
            let mut acc = self.bias[j];
            for i in 0..d {
                acc += row[i] * flat[i];
            }
            logits[j] = acc;
        }
        softmax_inplace(&mut logits);
        logits
    }
}

fn softmax_inplace(logits: &mut [f32]) {
    let m = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
    let mut z = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in logits.iter_mut() {
        *v /= z;
    }
}

/// Ties break toward the lower value index.
fn argmax(probs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// One frozen probe per concept variable.
#[derive(Debug, Clone)]
pub struct ProbeSet {
    pub probes: Vec<LinearProbe>,
    pub space: ConceptSpace,
    /// held-out accuracy per variable, recorded at train time
    pub training_report: Vec<f64>,
    pub image_size: usize,
}

/// Scores of one node's generated samples against its target class.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub node: String,
    pub n_samples: usize,
    pub per_attribute_accuracy: Vec<f64>,
    pub multiplicative_accuracy: f64,
    pub additive_accuracy: f64,
    pub soft_accuracy: f64,
}

/// Flatten a channel-first sample into the channel-last pixel order probes
/// are trained on.
fn chw_to_flat_hwc(images: &Array4<f32>, b: usize, side: usize) -> Vec<f32> {
    let mut flat = vec![0.0f32; side * side * 3];
    for row in 0..side {
        for col in 0..side {
            for ch in 0..3 {
                flat[(row * side + col) * 3 + ch] = images[(b, ch, row, col)];
            }
        }
    }
    flat
}

fn flatten_hwc(image: &Array3<f32>) -> Vec<f32> {
    image.iter().copied().collect()
}

const PROBE_WEIGHT_DECAY: f32 = 2e-3;

/// Train one probe per concept variable by minibatch gradient descent on
/// cross-entropy over an 80/20 split.
///
/// Every value of every variable must appear in the dataset; otherwise the
/// offending probe is untrainable and the error names the variable.
pub fn train_probes(dataset: &Dataset, epochs: usize, lr: f32, seed: u64) -> Result<ProbeSet> {
    if dataset.is_empty() {
        return Err(Error::Argument("cannot train probes on an empty dataset".into()));
    }
    let space = dataset.spec.space.clone();
    let side = dataset.image_size();
    let d = side * side * 3;
    let n = dataset.len();

    // value coverage per variable
    for (vi, var) in space.variables().iter().enumerate() {
        for (val_idx, val) in var.values.iter().enumerate() {
            let covered = dataset
                .samples
                .iter()
                .any(|s| s.class.value_index(vi) == val_idx);
            if !covered {
                return Err(Error::UntrainableProbe {
                    variable: var.name.clone(),
                    value: val.clone(),
                });
            }
        }
    }

    let mut features = Array2::<f32>::zeros((n, d));
    for (i, s) in dataset.samples.iter().enumerate() {
        let flat = flatten_hwc(&s.image);
        features.row_mut(i).assign(&Array1::from_vec(flat));
    }

    let mut split: Vec<usize> = (0..n).collect();
    split.shuffle(&mut substream(seed, "probes.split", 0));
    let n_train = ((n as f64) * 0.8).round() as usize;
    let n_train = n_train.clamp(1, n.saturating_sub(1).max(1));
    let (train_idx, held_idx) = split.split_at(n_train.min(n));

    let mut probes = Vec::new();
    let mut report = Vec::new();
    for (vi, var) in space.variables().iter().enumerate() {
        let k = var.values.len();
        let mut layer = Linear::new(
            format!("probe{vi}"),
            d,
            k,
            &mut substream(seed, "probes.init", vi as u64),
        );
        // small decoupled weight decay: the probes must generalize from
        // few samples in a 2352-dim feature space
        let mut opt = AdamW::new(lr, 0.9, 0.999, PROBE_WEIGHT_DECAY);
        let batch = 256usize;
        for epoch in 0..epochs {
            let mut order = train_idx.to_vec();
            order.shuffle(&mut substream(
                seed,
                "probes.shuffle",
                (vi * 100_000 + epoch) as u64,
            ));
            for chunk in order.chunks(batch) {
                let bsz = chunk.len();
                let mut xb = Array2::<f32>::zeros((bsz, d));
                for (row, &src) in chunk.iter().enumerate() {
                    xb.row_mut(row).assign(&features.row(src));
                }
                let logits = layer.forward(&xb, true);
                // softmax + cross-entropy gradient: (p - onehot) / batch
                let mut dy = logits;
                for (row, &src) in chunk.iter().enumerate() {
                    let target = dataset.samples[src].class.value_index(vi);
                    let mut lrow: Vec<f32> = dy.row(row).to_vec();
                    softmax_inplace(&mut lrow);
                    for j in 0..k {
                        let p = lrow[j];
                        dy[(row, j)] = (p - if j == target { 1.0 } else { 0.0 }) / bsz as f32;
                    }
                }
                layer.zero_grad();
                let _ = layer.backward(&dy);
                opt.step(&mut layer);
            }
        }

        let weights =
            Array2::from_shape_vec((k, d), layer.w.clone()).expect("weight shape");
        let bias = Array1::from_vec(layer.b.clone());
        let probe = LinearProbe {
            attribute_index: vi,
            weights,
            bias,
        };

        let eval_idx = if held_idx.is_empty() { train_idx } else { held_idx };
        let mut correct = 0usize;
        for &i in eval_idx {
            let flat: Vec<f32> = features.row(i).to_vec();
            let probs = probe.probabilities(&flat);
            if argmax(&probs) == dataset.samples[i].class.value_index(vi) {
                correct += 1;
            }
        }
        report.push(correct as f64 / eval_idx.len() as f64);
        probes.push(probe);
    }

    Ok(ProbeSet {
        probes,
        space,
        training_report: report,
        image_size: side,
    })
}

impl ProbeSet {
    /// Predict the class of one channel-last [0,1] image; returns the
    /// composed class and the per-attribute probability vectors.
    pub fn predict(&self, image: &Array3<f32>) -> Result<(ConceptClass, Vec<Vec<f32>>)> {
        let (h, w, c) = image.dim();
        if h != self.image_size || w != self.image_size || c != 3 {
            return Err(Error::Schema(format!(
                "image shape ({h}, {w}, {c}) != ({0}, {0}, 3)",
                self.image_size
            )));
        }
        let flat = flatten_hwc(image);
        let mut indices = Vec::with_capacity(self.probes.len());
        let mut all_probs = Vec::with_capacity(self.probes.len());
        for probe in &self.probes {
            let probs = probe.probabilities(&flat);
            indices.push(argmax(&probs) as u8);
            all_probs.push(probs);
        }
        Ok((ConceptClass::from_indices(&indices), all_probs))
    }

    /// Score a batch of generated images (channel-first, [0,1]) against a
    /// target class.
    pub fn evaluate_class(&self, images: &Array4<f32>, target: &ConceptClass) -> Result<EvalReport> {
        let (n, c, h, w) = images.dim();
        if n == 0 {
            return Err(Error::Argument("evaluate_class needs at least one sample".into()));
        }
        if c != 3 || h != self.image_size || w != self.image_size {
            return Err(Error::Schema(format!(
                "image batch shape ({c}, {h}, {w}) != (3, {0}, {0})",
                self.image_size
            )));
        }
        if !self.space.contains(target) {
            return Err(Error::Schema(format!("target {target} not in probe space")));
        }

        let p = self.probes.len();
        let mut preds = vec![vec![0usize; p]; n];
        let mut probs = vec![vec![Vec::new(); p]; n];
        for b in 0..n {
            let flat = chw_to_flat_hwc(images, b, self.image_size);
            for (vi, probe) in self.probes.iter().enumerate() {
                let pp = probe.probabilities(&flat);
                preds[b][vi] = argmax(&pp);
                probs[b][vi] = pp;
            }
        }
        let targets: Vec<usize> = (0..p).map(|vi| target.value_index(vi)).collect();
        Ok(scores_from_predictions(
            &target.to_string(),
            &preds,
            &probs,
            &targets,
        ))
    }
}

/// The metric core, separated so it can be checked against brute-force
/// oracles on constructed predictions.
pub(crate) fn scores_from_predictions(
    node: &str,
    preds: &[Vec<usize>],
    probs: &[Vec<Vec<f32>>],
    targets: &[usize],
) -> EvalReport {
    let n = preds.len();
    let p = targets.len();
    let mut attr_hits = vec![0usize; p];
    let mut mult_sum = 0.0f64;
    let mut soft_sum = 0.0f64;
    for b in 0..n {
        let mut all = true;
        let mut soft = 1.0f64;
        for vi in 0..p {
            let hit = preds[b][vi] == targets[vi];
            if hit {
                attr_hits[vi] += 1;
            }
            all &= hit;
            soft *= probs[b][vi][targets[vi]] as f64;
        }
        if all {
            mult_sum += 1.0;
        }
        soft_sum += soft;
    }
    let per_attribute_accuracy: Vec<f64> =
        attr_hits.iter().map(|&h| h as f64 / n as f64).collect();
    let multiplicative_accuracy = mult_sum / n as f64;
    let additive_accuracy =
        per_attribute_accuracy.iter().sum::<f64>() / per_attribute_accuracy.len() as f64;
    let soft_accuracy = soft_sum / n as f64;

    // always-on analytic invariant: multiplicative <= min per-attribute <= additive
    let min_attr = per_attribute_accuracy
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    assert!(
        multiplicative_accuracy <= min_attr + 1e-12,
        "metric violation: multiplicative {multiplicative_accuracy} > min per-attribute {min_attr}"
    );
    assert!(
        min_attr <= additive_accuracy + 1e-12,
        "metric violation: min per-attribute {min_attr} > additive {additive_accuracy}"
    );

    EvalReport {
        node: node.to_string(),
        n_samples: n,
        per_attribute_accuracy,
        multiplicative_accuracy,
        additive_accuracy,
        soft_accuracy,
    }
}

#[derive(Serialize, Deserialize)]
struct ProbeMeta {
    space: ConceptSpace,
    training_report: Vec<f64>,
    image_size: usize,
}

pub fn save_probes(set: &ProbeSet, path: &Path) -> Result<()> {
    let meta = ProbeMeta {
        space: set.space.clone(),
        training_report: set.training_report.clone(),
        image_size: set.image_size,
    };
    let mut tensors = Vec::new();
    for (vi, probe) in set.probes.iter().enumerate() {
        let (k, d) = probe.weights.dim();
        tensors.push((
            format!("probe{vi}.w"),
            vec![k, d],
            probe.weights.iter().copied().collect::<Vec<f32>>(),
        ));
        tensors.push((
            format!("probe{vi}.b"),
            vec![k],
            probe.bias.to_vec(),
        ));
    }
    write_container(
        path,
        *b"PROB",
        serde_json::to_value(&meta).expect("meta serializes"),
        &tensors,
    )
}

pub fn load_probes(path: &Path) -> Result<ProbeSet> {
    let container = read_container(path)?;
    if &container.section != b"PROB" {
        return Err(Error::Format(format!(
            "{}: expected PROB section, found {:?}",
            path.display(),
            String::from_utf8_lossy(&container.section)
        )));
    }
    let meta: ProbeMeta = serde_json::from_value(container.meta.clone())
        .map_err(|e| Error::Format(format!("probe meta: {e}")))?;
    let mut probes = Vec::new();
    for vi in 0..meta.space.num_variables() {
        let (we, wd) = container
            .tensor(&format!("probe{vi}.w"))
            .ok_or_else(|| Error::Format(format!("probe{vi}.w missing")))?;
        let (_, bd) = container
            .tensor(&format!("probe{vi}.b"))
            .ok_or_else(|| Error::Format(format!("probe{vi}.b missing")))?;
        let weights = Array2::from_shape_vec((we.shape[0], we.shape[1]), wd.to_vec())
            .map_err(|e| Error::Format(format!("probe{vi}.w shape: {e}")))?;
        probes.push(LinearProbe {
            attribute_index: vi,
            weights,
            bias: Array1::from_vec(bd.to_vec()),
        });
    }
    Ok(ProbeSet {
        probes,
        space: meta.space,
        training_report: meta.training_report,
        image_size: meta.image_size,
    })
}
