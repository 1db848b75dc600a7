//! Ancestral sampling, with an optional evaluation-time step stride.

use ndarray::{Array2, Array4, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use super::ModelState;
use crate::concept::{ConceptClass, ConceptSpace};
use crate::error::{Error, Result};
use crate::rng::substream;

/// The descending timestep subsequence visited by the sampler: T, T-s, ...
/// always ending at 1. Stride 1 visits every step.
fn timestep_path(t_max: usize, stride: usize) -> Vec<usize> {
    let stride = stride.max(1);
    let mut ts = Vec::new();
    let mut t = t_max;
    loop {
        ts.push(t);
        if t == 1 {
            break;
        }
        t = t.saturating_sub(stride).max(1);
    }
    ts
}

/// Generate `n` images of `class` by reverse diffusion from x_T ~ N(0, I).
///
/// Each sample draws from its own RNG substream keyed on (`seed`, sample
/// index): x_T first, then one noise block per visited step. Output is
/// (n, 3, H, W) rescaled to [0, 1] and clamped.
pub fn sample(
    state: &mut ModelState,
    space: &ConceptSpace,
    class: &ConceptClass,
    n: usize,
    seed: u64,
    stride: usize,
) -> Result<Array4<f32>> {
    if n == 0 {
        return Err(Error::Argument("sample count must be >= 1".into()));
    }
    let enc = space.encode_class(class)?;
    if enc.len() != state.net.cond_width {
        return Err(Error::Compatibility(format!(
            "class encoding width {} != model conditioning width {}",
            enc.len(),
            state.net.cond_width
        )));
    }
    let side = state.image_size;
    let mut conds = Array2::<f32>::zeros((n, enc.len()));
    for b in 0..n {
        for (j, v) in enc.iter().enumerate() {
            conds[(b, j)] = *v;
        }
    }

    let mut rngs: Vec<_> = (0..n as u64)
        .map(|i| substream(seed, "sample.stream", i))
        .collect();

    let mut x = Array4::<f32>::zeros((n, 3, side, side));
    for (b, rng) in rngs.iter_mut().enumerate() {
        let mut view = x.index_axis_mut(Axis(0), b);
        for v in view.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
    }

    let path = timestep_path(state.schedule.t_max(), stride);
    for (k, &t) in path.iter().enumerate() {
        let t_prev = path.get(k + 1).copied().unwrap_or(0);
        let ab_t = state.schedule.alpha_bar(t);
        let ab_prev = if t_prev == 0 {
            1.0
        } else {
            state.schedule.alpha_bar(t_prev)
        };
        // effective one-step constants over the (possibly coarsened) chain
        let beta_eff = if t_prev + 1 == t {
            state.schedule.betas[t - 1]
        } else {
            1.0 - ab_t / ab_prev
        };
        let alpha_eff = 1.0 - beta_eff;

        let ts = vec![t; n];
        let pred = state.net.forward(&x, &ts, &conds, false);

        let coef = beta_eff / (1.0 - ab_t).sqrt();
        let inv_sqrt_alpha = 1.0 / alpha_eff.sqrt();
        let sigma = beta_eff.sqrt();
        let last = t_prev == 0;
        for b in 0..n {
            let rng = &mut rngs[b];
            for ch in 0..3 {
                for row in 0..side {
                    for col in 0..side {
                        let idx = (b, ch, row, col);
                        let mean = inv_sqrt_alpha * (x[idx] - coef * pred[idx]);
                        x[idx] = if last {
                            mean
                        } else {
                            let z: f32 = rng.sample(StandardNormal);
                            mean + sigma * z
                        };
                    }
                }
            }
        }
    }

    // [-1, 1] -> [0, 1], clamped
    Ok(x.mapv(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)))
}
