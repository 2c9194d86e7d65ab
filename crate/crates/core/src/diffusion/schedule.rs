use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleShape {
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub shape: ScheduleShape,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
            shape: ScheduleShape::Linear,
        }
    }
}

/// Variance schedule over steps `1..=J`. Vectors are indexed by step, with a
/// leading entry for step 0 (`alpha_bar[0] = 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(cfg: &ScheduleConfig) -> Result<Self> {
        make_schedule(cfg.steps, cfg.beta_start, cfg.beta_end, cfg.shape)
    }

    pub fn steps(&self) -> usize {
        self.betas.len() - 1
    }

    fn check_step(&self, j: usize) -> Result<()> {
        if j == 0 || j > self.steps() {
            return Err(Error::InvalidArgument(format!(
                "diffusion step {j} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    /// Coefficients of the reverse step from `j` to `j - 1` given a clean
    /// estimate: `mean = c0 * x0_hat + cj * x_j`, plus the posterior variance.
    pub fn posterior(&self, j: usize) -> Result<(f64, f64, f64)> {
        self.check_step(j)?;
        let ab = self.alpha_bar[j];
        let ab_prev = self.alpha_bar[j - 1];
        let beta = self.betas[j];
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let cj = self.alphas[j].sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let var = beta * (1.0 - ab_prev) / (1.0 - ab);
        Ok((c0, cj, var))
    }

    /// A schedule over an evenly spaced subset of steps for faster sampling.
    /// Returns the sub-schedule and the original step each new step maps to.
    pub fn respaced(&self, count: usize) -> Result<(NoiseSchedule, Vec<usize>)> {
        let j = self.steps();
        if count == 0 || count > j {
            return Err(Error::InvalidArgument(format!("cannot respace {j} steps to {count}")));
        }
        let mut used: Vec<usize> = (0..count)
            .map(|i| ((i as f64 + 1.0) * j as f64 / count as f64).round() as usize)
            .collect();
        used.dedup();
        let mut betas = vec![0.0];
        let mut alphas = vec![1.0];
        let mut alpha_bar = vec![1.0];
        let mut prev = 1.0;
        for &t in &used {
            let ab = self.alpha_bar[t];
            let a = ab / prev;
            betas.push(1.0 - a);
            alphas.push(a);
            alpha_bar.push(ab);
            prev = ab;
        }
        let mut map = vec![0];
        map.extend(used);
        Ok((NoiseSchedule { betas, alphas, alpha_bar }, map))
    }
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64, shape: ScheduleShape) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidArgument("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "beta range [{beta_start}, {beta_end}] must satisfy 0 < start <= end < 1"
        )));
    }
    let mut betas = vec![0.0];
    match shape {
        ScheduleShape::Linear => {
            for i in 0..steps {
                let f = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
                betas.push(beta_start + f * (beta_end - beta_start));
            }
        }
    }
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(steps + 1);
    let mut acc = 1.0;
    for a in &alphas {
        acc *= a;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule {
        betas,
        alphas,
        alpha_bar,
    })
}

/// Draw `theta_j ~ N(sqrt(abar_j) theta, (1 - abar_j) I)`.
pub fn forward_noise(theta: &[f32], j: usize, schedule: &NoiseSchedule, seed: u64) -> Result<Vec<f32>> {
    schedule.check_step(j)?;
    let mut r = rng::child_rng(seed, "forward_noise", j as u64);
    let ab = schedule.alpha_bar[j];
    let (s, n) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
    Ok(theta
        .iter()
        .map(|&x| {
            let e: f32 = StandardNormal.sample(&mut r);
            s * x + n * e
        })
        .collect())
}

/// Sinusoidal features `[sin(j w_0), cos(j w_0), sin(j w_1), ...]` with
/// frequencies log-spaced from 1 down to 1/10000.
pub fn timestep_embed(j: usize, dim: usize) -> Vec<f32> {
    assert!(dim.is_multiple_of(2), "timestep embedding width must be even");
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let a = j as f64 * freq;
        out.push(a.sin() as f32);
        out.push(a.cos() as f32);
    }
    out
}
