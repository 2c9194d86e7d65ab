//! Signal-prediction diffusion over tokenized parameter vectors.

mod dit;
mod schedule;

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use dit::{masked_mse, DiT, DiTConfig, DiTInput};
pub use schedule::{forward_noise, make_schedule, timestep_embed, NoiseSchedule, ScheduleConfig, ScheduleShape};

use crate::arch::ArchSpec;
use crate::codec::{self, FlatParams, TokenSeq};
use crate::encoder::PromptSeq;
use crate::error::{Error, Result};
use crate::rng;

/// One training pair: parameters padded to `c_max` classifier rows and the
/// encoded prompt.
#[derive(Debug, Clone)]
pub struct Example {
    pub theta: FlatParams,
    pub prompt: PromptSeq,
    /// Classifier rows that belong to real classes.
    pub rows: usize,
}

impl Example {
    /// Pads a `c`-row parameter vector to the prompt length.
    pub fn new(theta: &FlatParams, prompt: PromptSeq) -> Result<Self> {
        let rows = theta
            .classifier()
            .ok_or_else(|| Error::Layout("parameters have no classifier".into()))?
            .rows;
        let slots = vec![(); rows];
        let (theta, _, _) = codec::pad_task(theta, &slots, (), prompt.len())?;
        Ok(Self { theta, prompt, rows })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Global gradient-norm threshold.
    pub grad_clip: f64,
    /// Jointly permute prompt slots and classifier rows per sample.
    pub classifier_augment: bool,
    /// Randomly permute hidden units per sample.
    pub permute_neurons: bool,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iters: 4000,
            batch_size: 64,
            lr: 4e-4,
            weight_decay: 0.0,
            grad_clip: 0.1,
            classifier_augment: true,
            permute_neurons: false,
            log_every: 100,
        }
    }
}

pub struct TrainState {
    pub model: DiT,
    pub schedule: NoiseSchedule,
    pub config: TrainConfig,
    pub iteration: usize,
    pub losses: Vec<f32>,
    opt: AdamW,
}

/// Noised model inputs and clean targets for a batch of clean token buffers.
/// Each sample draws its step uniformly from `1..=J` unless `steps` is given.
pub fn noised_batch(
    model: &DiT,
    schedule: &NoiseSchedule,
    prompts: &[&PromptSeq],
    x0: &[f32],
    steps: Option<&[usize]>,
    seed: u64,
) -> Result<(DiTInput, Tensor)> {
    let n = model.dense_len();
    let bsz = prompts.len();
    let mut r = rng::child_rng(seed, "noise", 0);
    let js: Vec<usize> = match steps {
        Some(s) => s.to_vec(),
        None => (0..bsz).map(|_| r.random_range(1..=schedule.steps())).collect(),
    };
    let mut xj = Vec::with_capacity(x0.len());
    for (b, &j) in js.iter().enumerate() {
        let ab = schedule.alpha_bar[j];
        let (s, q) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
        for &v in &x0[b * n..(b + 1) * n] {
            let e: f32 = StandardNormal.sample(&mut r);
            xj.push(s * v + q * e);
        }
    }
    let input = model.input(prompts, &xj, &js)?;
    let target = Tensor::from_slice(x0, (bsz, model.num_tokens(), model.config.chunk_size), &Device::Cpu)?
        .to_dtype(model.dtype())?;
    Ok((input, target))
}

fn augment(ex: &Example, arch: Option<&ArchSpec>, cfg: &TrainConfig, seed: u64) -> Result<(FlatParams, PromptSeq)> {
    let mut theta = ex.theta.clone();
    let mut prompt = ex.prompt.clone();
    if cfg.classifier_augment {
        let mut r = rng::child_rng(seed, "classifier_augment", 0);
        let perm = codec::random_permutation(ex.rows, &mut r);
        let full: Vec<usize> = perm.iter().copied().chain(ex.rows..prompt.len()).collect();
        theta = codec::permute_rows(&theta, &full)?;
        if prompt.num_real() == ex.rows {
            prompt = prompt.permuted(&perm);
        }
    }
    if cfg.permute_neurons {
        let arch = arch.ok_or_else(|| Error::InvalidArgument("neuron permutation needs the architecture".into()))?;
        theta = codec::permute_neurons(&theta, arch, seed)?;
    }
    Ok((theta, prompt))
}

impl TrainState {
    pub fn new(model: DiT, schedule: NoiseSchedule, config: TrainConfig) -> Result<Self> {
        let opt = AdamW::new(
            model.vars().to_vec(),
            ParamsAdamW {
                lr: config.lr,
                weight_decay: config.weight_decay,
                ..ParamsAdamW::default()
            },
        )?;
        Ok(Self {
            model,
            schedule,
            config,
            iteration: 0,
            losses: Vec::new(),
            opt,
        })
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
        self.opt.set_learning_rate(lr);
    }

    /// One optimizer update on the given clean batch. Returns the loss.
    pub fn step(&mut self, prompts: &[&PromptSeq], x0: &[f32], seed: u64) -> Result<f32> {
        if prompts.is_empty() {
            return Err(Error::InvalidArgument("empty training batch".into()));
        }
        let (input, target) = noised_batch(&self.model, &self.schedule, prompts, x0, None, seed)?;
        let loss = self.model.loss(&input, &target)?;
        let lv = loss.to_dtype(DType::F64)?.to_scalar::<f64>()? as f32;
        if !lv.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss {lv} at iteration {} (batch of {})",
                self.iteration,
                prompts.len()
            )));
        }
        let mut grads = loss.backward()?;
        let mut sq = 0.0f64;
        for v in self.model.vars() {
            if let Some(g) = grads.get(v.as_tensor()) {
                sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm at iteration {}", self.iteration)));
        }
        if self.config.grad_clip > 0.0 && norm > self.config.grad_clip {
            let f = self.config.grad_clip / norm;
            for v in self.model.vars() {
                if let Some(g) = grads.get(v.as_tensor()) {
                    let scaled = (g * f)?;
                    grads.insert(v.as_tensor(), scaled);
                }
            }
        }
        self.opt.step(&grads)?;
        self.iteration += 1;
        self.losses.push(lv);
        Ok(lv)
    }

    /// Run `config.iters` updates: sample a batch with replacement, augment,
    /// noise at a uniform random step, regress the clean tokens.
    pub fn train(&mut self, examples: &[Example], arch: Option<&ArchSpec>, seed: u64, log: Option<&Path>) -> Result<()> {
        if self.config.iters > 0 && examples.is_empty() {
            return Err(Error::Dataset("no training examples".into()));
        }
        let m = self.model.config.chunk_size;
        let mut log_file = match log {
            Some(p) => Some(OpenOptions::new().create(true).append(true).open(p).map_err(|e| Error::io(p, e))?),
            None => None,
        };
        for _ in 0..self.config.iters {
            let it = self.iteration as u64;
            let mut r = rng::child_rng(seed, "batch", it);
            let mut prompts = Vec::with_capacity(self.config.batch_size);
            let mut x0 = Vec::with_capacity(self.config.batch_size * self.model.dense_len());
            for b in 0..self.config.batch_size {
                let ex = &examples[r.random_range(0..examples.len())];
                let (theta, prompt) = augment(ex, arch, &self.config, rng::derive_seed(seed, &format!("aug{it}"), b as u64))?;
                x0.extend(codec::tokenize(&theta, m)?.to_dense());
                prompts.push(prompt);
            }
            let refs: Vec<&PromptSeq> = prompts.iter().collect();
            let loss = self.step(&refs, &x0, rng::derive_seed(seed, "step", it))?;
            let every = self.config.log_every.max(1);
            if self.iteration.is_multiple_of(every) || self.iteration == 1 {
                log::debug!("iteration {} loss {loss:.6}", self.iteration);
                if let Some(f) = log_file.as_mut() {
                    let line = serde_json::json!({"iteration": self.iteration, "loss": loss});
                    writeln!(f, "{line}").map_err(|e| Error::io(log.expect("log path"), e))?;
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.model.save(
            path,
            serde_json::json!({"iteration": self.iteration, "losses": self.losses}),
        )
    }
}

/// Anything that predicts clean tokens from noised ones.
pub trait Denoiser {
    /// Values per sample in the dense token buffer.
    fn dense_len(&self) -> usize;
    fn predict(&self, prompts: &[&PromptSeq], xs: &[f32], steps: &[usize]) -> Result<Vec<f32>>;
}

impl Denoiser for DiT {
    fn dense_len(&self) -> usize {
        DiT::dense_len(self)
    }

    fn predict(&self, prompts: &[&PromptSeq], xs: &[f32], steps: &[usize]) -> Result<Vec<f32>> {
        let out = self.forward(&self.input(prompts, xs, steps)?)?;
        Ok(out.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?)
    }
}

/// Ancestral sampling from `x_J ~ N(0, I)`: at each step predict the clean
/// tokens and draw from the posterior `q(x_{j-1} | x_j, x0_hat)`; the last
/// step returns the prediction itself. `steps` optionally respaces the chain.
/// Each sample uses its own seed, so results do not depend on batching.
pub fn sample_dense(
    den: &dyn Denoiser,
    prompts: &[&PromptSeq],
    schedule: &NoiseSchedule,
    seeds: &[u64],
    steps: Option<usize>,
) -> Result<Vec<Vec<f32>>> {
    if seeds.len() != prompts.len() {
        return Err(Error::InvalidArgument("one seed per prompt is required".into()));
    }
    let (sched, map) = match steps {
        Some(k) if k != schedule.steps() => schedule.respaced(k)?,
        _ => (schedule.clone(), (0..=schedule.steps()).collect()),
    };
    let n = den.dense_len();
    let mut rngs: Vec<rng::Rng> = seeds.iter().map(|&s| rng::child_rng(s, "sample", 0)).collect();
    let mut x: Vec<f32> = Vec::with_capacity(n * prompts.len());
    for r in rngs.iter_mut() {
        x.extend((0..n).map(|_| Distribution::<f32>::sample(&StandardNormal, r)));
    }
    for j in (1..=sched.steps()).rev() {
        let model_step = vec![map[j]; prompts.len()];
        let pred = den.predict(prompts, &x, &model_step)?;
        if pred.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("prediction at sampling step {}", map[j])));
        }
        if j == 1 {
            x = pred;
            break;
        }
        let (c0, cj, var) = sched.posterior(j)?;
        let sd = var.sqrt() as f32;
        let (c0, cj) = (c0 as f32, cj as f32);
        for (b, r) in rngs.iter_mut().enumerate() {
            for i in b * n..(b + 1) * n {
                let z: f32 = StandardNormal.sample(r);
                x[i] = c0 * pred[i] + cj * x[i] + sd * z;
            }
        }
    }
    Ok(x.chunks(n).map(<[f32]>::to_vec).collect())
}

/// Sample parameter vectors in chunks of `batch` prompts.
pub fn sample_params(
    model: &DiT,
    prompts: &[&PromptSeq],
    schedule: &NoiseSchedule,
    seeds: &[u64],
    steps: Option<usize>,
    batch: usize,
) -> Result<Vec<FlatParams>> {
    if seeds.len() != prompts.len() {
        return Err(Error::InvalidArgument("one seed per prompt is required".into()));
    }
    let mut out = Vec::with_capacity(prompts.len());
    for (ps, ss) in prompts.chunks(batch.max(1)).zip(seeds.chunks(batch.max(1))) {
        for dense in sample_dense(model, ps, schedule, ss, steps)? {
            out.push(dense_to_flat(model, &dense)?);
        }
    }
    Ok(out)
}

pub fn sample(model: &DiT, prompt: &PromptSeq, schedule: &NoiseSchedule, seed: u64) -> Result<FlatParams> {
    Ok(sample_params(model, &[prompt], schedule, &[seed], None, 1)?.remove(0))
}

/// Dense token buffer back to a parameter vector in the model's layout.
pub fn dense_to_flat(model: &DiT, dense: &[f32]) -> Result<FlatParams> {
    let m = model.config.chunk_size;
    let seq = TokenSeq {
        chunk_size: m,
        tokens: dense.chunks(m).map(<[f32]>::to_vec).collect(),
        meta: model.token_meta().to_vec(),
        layout: model.layout.clone(),
    };
    codec::detokenize(&seq)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Returns the true clean vector regardless of input.
    struct Oracle(Vec<f32>);

    impl Denoiser for Oracle {
        fn dense_len(&self) -> usize {
            self.0.len()
        }
        fn predict(&self, prompts: &[&PromptSeq], _: &[f32], _: &[usize]) -> Result<Vec<f32>> {
            Ok(prompts.iter().flat_map(|_| self.0.iter().copied()).collect())
        }
    }

    fn empty_prompt() -> PromptSeq {
        PromptSeq {
            tokens: vec![],
            mask: vec![],
        }
    }

    #[test]
    fn oracle_sampling_recovers_signal() {
        let s = NoiseSchedule::new(&ScheduleConfig::default()).unwrap();
        let theta = vec![0.3, -1.2, 2.0];
        let p = empty_prompt();
        let out = sample_dense(&Oracle(theta.clone()), &[&p], &s, &[4], None).unwrap();
        assert_eq!(out[0], theta);
        let out = sample_dense(&Oracle(theta.clone()), &[&p], &s, &[4], Some(20)).unwrap();
        assert_eq!(out[0], theta);
    }

    #[test]
    fn sampling_is_seeded_per_sample() {
        struct Half;
        impl Denoiser for Half {
            fn dense_len(&self) -> usize {
                4
            }
            fn predict(&self, _: &[&PromptSeq], xs: &[f32], _: &[usize]) -> Result<Vec<f32>> {
                Ok(xs.iter().map(|x| 0.5 * x).collect())
            }
        }
        let s = NoiseSchedule::new(&ScheduleConfig::default()).unwrap();
        let p = empty_prompt();
        let a = sample_dense(&Half, &[&p, &p], &s, &[1, 2], Some(50)).unwrap();
        let b = sample_dense(&Half, &[&p], &s, &[2], Some(50)).unwrap();
        assert_eq!(a[1], b[0]);
        assert_ne!(a[0], a[1]);
    }
}
