//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::Parameterized;

/// Optimizer state: first/second moment accumulators per parameter tensor,
/// registered lazily in visit order on the first step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    step: u64,
    moments: Vec<MomentPair>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MomentPair {
    name: String,
    m: Vec<f32>,
    v: Vec<f32>,
}

impl AdamW {
    pub fn new(lr: f32, beta1: f32, beta2: f32, weight_decay: f32) -> Self {
        AdamW {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update from the gradients currently accumulated in `net`.
    pub fn step(&mut self, net: &mut dyn Parameterized) {
        self.step += 1;
        let bc1 = 1.0 - (self.beta1 as f64).powi(self.step as i32);
        let bc2 = 1.0 - (self.beta2 as f64).powi(self.step as i32);
        let (lr, b1, b2, eps, wd) = (self.lr, self.beta1, self.beta2, self.eps, self.weight_decay);
        let moments = &mut self.moments;
        let mut idx = 0usize;
        net.visit_params(&mut |p| {
            if moments.len() == idx {
                moments.push(MomentPair {
                    name: p.name.clone(),
                    m: vec![0.0; p.data.len()],
                    v: vec![0.0; p.data.len()],
                });
            }
            let slot = &mut moments[idx];
            assert_eq!(slot.name, p.name, "parameter visit order changed");
            assert_eq!(slot.m.len(), p.data.len());
            for i in 0..p.data.len() {
                let g = p.grad[i];
                slot.m[i] = b1 * slot.m[i] + (1.0 - b1) * g;
                slot.v[i] = b2 * slot.v[i] + (1.0 - b2) * g * g;
                let mhat = slot.m[i] / bc1 as f32;
                let vhat = slot.v[i] / bc2 as f32;
                // decoupled weight decay
                p.data[i] -= lr * (mhat / (vhat.sqrt() + eps) + wd * p.data[i]);
            }
            idx += 1;
        });
    }
}
