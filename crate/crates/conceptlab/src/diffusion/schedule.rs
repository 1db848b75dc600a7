//! Diffusion-process constants: the linear beta schedule and its cumulative
//! products.

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_timesteps() -> usize {
    100
}
// The canonical DDPM range (1e-4, 0.02) is calibrated for T = 1000; the
// variance-preserving rescaling to the default T = 100 multiplies both ends
// by 10 so the terminal signal level stays near zero.
fn default_beta_start() -> f64 {
    1e-3
}
fn default_beta_end() -> f64 {
    0.2
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    #[serde(default = "default_timesteps")]
    pub timesteps: usize,
    #[serde(default = "default_beta_start")]
    pub beta_start: f64,
    #[serde(default = "default_beta_end")]
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            timesteps: default_timesteps(),
            beta_start: default_beta_start(),
            beta_end: default_beta_end(),
        }
    }
}

/// beta_t, alpha_t = 1 - beta_t, and alpha_bar_t = prod_{s<=t} alpha_s for
/// t = 1..=T (index t-1 in the vectors).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub config: ScheduleConfig,
    pub betas: Vec<f32>,
    pub alphas: Vec<f32>,
    pub alpha_bars: Vec<f32>,
}

/// Linear interpolation from `beta_start` to `beta_end` over `timesteps`
/// steps; cumulative products computed in f64.
pub fn make_schedule(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if timesteps == 0 {
        return Err(Error::Argument("schedule needs at least one timestep".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Argument(format!(
            "invalid beta range [{beta_start}, {beta_end}]; need 0 < start <= end < 1"
        )));
    }
    let mut betas = Vec::with_capacity(timesteps);
    let mut alphas = Vec::with_capacity(timesteps);
    let mut alpha_bars = Vec::with_capacity(timesteps);
    let mut prod = 1.0f64;
    for i in 0..timesteps {
        let frac = if timesteps == 1 {
            0.0
        } else {
            i as f64 / (timesteps - 1) as f64
        };
        let beta = beta_start + (beta_end - beta_start) * frac;
        let alpha = 1.0 - beta;
        prod *= alpha;
        betas.push(beta as f32);
        alphas.push(alpha as f32);
        alpha_bars.push(prod as f32);
    }
    Ok(NoiseSchedule {
        config: ScheduleConfig {
            timesteps,
            beta_start,
            beta_end,
        },
        betas,
        alphas,
        alpha_bars,
    })
}

impl NoiseSchedule {
    pub fn from_config(c: &ScheduleConfig) -> Result<Self> {
        make_schedule(c.timesteps, c.beta_start, c.beta_end)
    }

    pub fn t_max(&self) -> usize {
        self.betas.len()
    }

    pub fn alpha_bar(&self, t: usize) -> f32 {
        self.alpha_bars[t - 1]
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_max() {
            return Err(Error::Argument(format!(
                "timestep {t} outside [1, {}]",
                self.t_max()
            )));
        }
        Ok(())
    }
}

/// Closed-form forward marginal: x_t = sqrt(a_bar_t) x0 + sqrt(1-a_bar_t) eps.
pub fn forward_noise(
    x0: &Array4<f32>,
    t: usize,
    eps: &Array4<f32>,
    schedule: &NoiseSchedule,
) -> Result<Array4<f32>> {
    schedule.check_t(t)?;
    if x0.dim() != eps.dim() {
        return Err(Error::Argument(format!(
            "eps shape {:?} != x0 shape {:?}",
            eps.dim(),
            x0.dim()
        )));
    }
    let ab = schedule.alpha_bar(t);
    let a = ab.sqrt();
    let b = (1.0 - ab).sqrt();
    Ok(x0.mapv(|v| v * a) + eps.mapv(|v| v * b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn single_step_product() {
        let s = make_schedule(1, 0.3, 0.3).unwrap();
        assert!((s.alpha_bars[0] - 0.7).abs() < 1e-7);
    }

    #[test]
    fn default_schedule_matches_bruteforce_product() {
        let c = ScheduleConfig::default();
        let s = NoiseSchedule::from_config(&c).unwrap();
        // independent cumulative-product oracle in f64
        let mut prod = 1.0f64;
        for i in 0..c.timesteps {
            let beta = c.beta_start
                + (c.beta_end - c.beta_start) * (i as f64 / (c.timesteps - 1) as f64);
            prod *= 1.0 - beta;
        }
        assert!((s.alpha_bars[c.timesteps - 1] as f64 - prod).abs() < 1e-6);
        // terminal signal level must be tiny for the default schedule
        assert!(s.alpha_bars[c.timesteps - 1] < 0.01);
    }

    #[test]
    fn alpha_bar_strictly_decreasing() {
        for (t, bs, be) in [(100usize, 1e-3, 0.2), (400, 1e-4, 0.02), (7, 0.01, 0.5)] {
            let s = make_schedule(t, bs, be).unwrap();
            for w in s.alpha_bars.windows(2) {
                assert!(w[1] < w[0]);
            }
            assert!(s.betas.iter().all(|&b| b > 0.0 && b < 1.0));
        }
    }

    #[test]
    fn invalid_ranges_rejected() {
        assert!(make_schedule(0, 1e-4, 0.02).is_err());
        assert!(make_schedule(10, 0.0, 0.02).is_err());
        assert!(make_schedule(10, 0.3, 0.2).is_err());
        assert!(make_schedule(10, 0.5, 1.0).is_err());
    }

    #[test]
    fn forward_noise_limits() {
        let s = make_schedule(100, 1e-10, 1e-10).unwrap();
        // alpha_bar ~ 1: x_t ~ x0
        let x0 = Array4::from_shape_fn((1, 3, 4, 4), |_| 0.5);
        let eps = Array4::from_shape_fn((1, 3, 4, 4), |_| 1.0);
        let xt = forward_noise(&x0, 100, &eps, &s).unwrap();
        for v in xt.iter() {
            assert!((v - 0.5).abs() < 1e-3);
        }
        assert!(forward_noise(&x0, 0, &eps, &s).is_err());
        assert!(forward_noise(&x0, 101, &eps, &s).is_err());
    }

    #[test]
    fn terminal_marginal_is_standard_normal() {
        // Monte Carlo at t = T over >= 10^4 draws: mean ~ 0, var ~ 1
        let s = NoiseSchedule::from_config(&ScheduleConfig::default()).unwrap();
        let x0 = Array4::from_shape_fn((1, 3, 4, 4), |(_, c, i, j)| {
            ((c + i + j) as f32 / 10.0).sin() * 0.8
        });
        let mut rng = substream(123, "fwdtest", 0);
        let mut sum = 0.0f64;
        let mut sumsq = 0.0f64;
        let mut count = 0usize;
        for _ in 0..250 {
            let eps = Array4::from_shape_fn((1, 3, 4, 4), |_| rng.sample::<f32, _>(StandardNormal));
            let xt = forward_noise(&x0, 100, &eps, &s).unwrap();
            for v in xt.iter() {
                sum += *v as f64;
                sumsq += (*v as f64) * (*v as f64);
                count += 1;
            }
        }
        assert!(count >= 10_000);
        let mean = sum / count as f64;
        let var = sumsq / count as f64 - mean * mean;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.1, "var {var}");
    }

    #[test]
    fn composing_single_steps_matches_closed_form() {
        // step-by-step simulation oracle: applying the single-step kernel
        // x_t = sqrt(alpha_t) x_{t-1} + sqrt(beta_t) z_t repeatedly yields
        // the same per-pixel mean and variance as the closed form
        let s = make_schedule(20, 1e-3, 0.1).unwrap();
        let x0v = 0.7f32;
        let trials = 20_000;
        let mut rng = substream(7, "compose", 0);
        let mut sum = 0.0f64;
        let mut sumsq = 0.0f64;
        for _ in 0..trials {
            let mut x = x0v;
            for t in 1..=20 {
                let z: f32 = rng.sample(StandardNormal);
                x = s.alphas[t - 1].sqrt() * x + s.betas[t - 1].sqrt() * z;
            }
            sum += x as f64;
            sumsq += (x as f64) * (x as f64);
        }
        let mean = sum / trials as f64;
        let var = sumsq / trials as f64 - mean * mean;
        let ab = s.alpha_bars[19] as f64;
        assert!((mean - ab.sqrt() * x0v as f64).abs() < 0.01, "mean {mean}");
        assert!((var - (1.0 - ab)).abs() < 0.02, "var {var}");
    }
}
