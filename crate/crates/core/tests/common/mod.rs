//! Helpers and independent reference computations shared by the test targets.
#![allow(dead_code)]

use paramgen::arch::{ArchId, ArchSpec, ParamSet};
use paramgen::diffusion::DiTConfig;
use paramgen::eval::ExperimentConfig;
use paramgen::universe::PromptMode;
use rand::Rng;

/// A random architecture of any family with small random dimensions.
pub fn random_arch(r: &mut impl Rng) -> ArchSpec {
    let rows = r.random_range(1..=12);
    let bias = r.random_bool(0.5);
    match r.random_range(0..3) {
        0 => {
            let input = [r.random_range(1..=3), r.random_range(1..=6), r.random_range(1..=6)];
            ArchSpec::new(ArchId::ToyMlp, input, rows, r.random_range(1..=16), bias)
        }
        1 => {
            let input = [r.random_range(1..=3), r.random_range(4..=9), r.random_range(4..=9)];
            ArchSpec::new(ArchId::SmallCnn, input, rows, 0, bias)
        }
        _ => ArchSpec::new(ArchId::Resnet20Head, [r.random_range(1..=3), 8, 8], rows, 0, bias),
    }
}

/// Parameters with arbitrary bit patterns, NaNs and subnormals included.
pub fn random_bits_params(arch: &ArchSpec, r: &mut impl Rng) -> ParamSet {
    ParamSet {
        tensors: arch
            .layers
            .iter()
            .map(|l| (0..l.numel()).map(|_| f32::from_bits(r.random())).collect())
            .collect(),
    }
}

pub fn bits_equal(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

pub fn random_images(n: usize, dim: usize, r: &mut impl Rng) -> Vec<f32> {
    (0..n * dim).map(|_| r.random_range(-2.0f32..2.0)).collect()
}

/// Cumulative products of `1 - beta` for a linear schedule, computed from
/// the closed-form beta sequence.
pub fn linear_alpha_bar(steps: usize, beta_start: f64, beta_end: f64) -> Vec<f64> {
    let mut out = vec![1.0];
    for j in 1..=steps {
        let beta = beta_start + (beta_end - beta_start) * (j - 1) as f64 / (steps - 1).max(1) as f64;
        out.push(out[j - 1] * (1.0 - beta));
    }
    out
}

pub fn relative_l2(a: &[f32], b: &[f32]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum();
    let den: f64 = b.iter().map(|y| (*y as f64).powi(2)).sum();
    (num / den).sqrt()
}

pub fn tiny_dit() -> DiTConfig {
    DiTConfig {
        hidden: 32,
        layers: 1,
        heads: 2,
        chunk_size: 16,
        c_max: 3,
        embed_dim: 8,
        mlp_ratio: 2,
        mask_padding: true,
    }
}

/// A seconds-scale experiment touching every suite.
pub fn tiny_experiment() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.name = "tiny".into();
    c.seed = 3;
    c.universe.train_per_class = 40;
    c.universe.test_per_class = 20;
    c.tasks.train_tasks = 30;
    c.tasks.ood_tasks = 8;
    c.generic.epochs = 3;
    c.finetune.epochs = 2;
    c.dit.hidden = 32;
    c.dit.layers = 1;
    c.dit.heads = 2;
    c.train.iters = 20;
    c.train.batch_size = 8;
    c.sampling.steps = Some(10);
    c.taper.expert_epochs = 1;
    c.taper.mixer_epochs = 1;
    c.eval.suites = paramgen::eval::Suite::ALL.to_vec();
    c.eval.min_tasks = 8;
    c.eval.unseen_fractions = vec![0.0, 0.4, 1.0];
    c.eval.class_counts = vec![3, 5];
    c.eval.memorization_tasks = 3;
    c.eval.cross_modes = vec![PromptMode::Name, PromptMode::Description];
    c.eval.variant_iters = Some(10);
    c
}

/// Relative error between back-propagated and central finite-difference
/// gradients of the masked MSE, over 16 weights drawn from four different
/// tensors (condition input, attention, timestep MLP, output projection).
/// Runs in 64-bit precision.
pub fn dit_gradient_check(cfg: &DiTConfig, seed: u64) -> f64 {
    use candle_core::{DType, Tensor};
    use paramgen::codec;
    use paramgen::diffusion::{noised_batch, DiT, NoiseSchedule, ScheduleConfig};
    use paramgen::encoder::PromptSeq;

    let arch = ArchSpec::toy_mlp([1, 2, 3], 3, cfg.c_max);
    let model = DiT::new(cfg.clone(), codec::arch_layout(&arch), seed, DType::F64).unwrap();
    let schedule = NoiseSchedule::new(&ScheduleConfig {
        steps: 100,
        ..ScheduleConfig::default()
    })
    .unwrap();
    let mut r = paramgen::rng::rng(seed);
    let prompts: Vec<PromptSeq> = (0..2)
        .map(|b| PromptSeq {
            tokens: (0..cfg.c_max)
                .map(|_| (0..cfg.embed_dim).map(|_| r.random_range(-1.0f32..1.0)).collect())
                .collect(),
            mask: (0..cfg.c_max).map(|i| i + b < cfg.c_max).collect(),
        })
        .collect();
    let refs: Vec<&PromptSeq> = prompts.iter().collect();
    let x0: Vec<f32> = (0..2 * model.dense_len()).map(|_| r.random_range(-1.0f32..1.0)).collect();
    let (input, target) = noised_batch(&model, &schedule, &refs, &x0, Some(&[7, 60]), seed).unwrap();

    let loss_at = |m: &DiT| m.loss(&input, &target).unwrap().to_scalar::<f64>().unwrap();
    let grads = model.loss(&input, &target).unwrap().backward().unwrap();

    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    let h = 1e-6;
    for name in ["cond_in.weight", "block0.qkv.weight", "time.fc1.weight", "tok_out.weight"] {
        let vi = model.var_names().iter().position(|n| n == name).expect(name);
        let var = &model.vars()[vi];
        let shape = var.dims().to_vec();
        let base: Vec<f64> = var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        let g: Vec<f64> = grads.get(var).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        for _ in 0..4 {
            let k = r.random_range(0..base.len());
            let mut probe = base.clone();
            probe[k] = base[k] + h;
            var.set(&Tensor::from_vec(probe.clone(), shape.as_slice(), &candle_core::Device::Cpu).unwrap()).unwrap();
            let up = loss_at(&model);
            probe[k] = base[k] - h;
            var.set(&Tensor::from_vec(probe, shape.as_slice(), &candle_core::Device::Cpu).unwrap()).unwrap();
            let down = loss_at(&model);
            var.set(&Tensor::from_vec(base.clone(), shape.as_slice(), &candle_core::Device::Cpu).unwrap()).unwrap();
            analytic.push(g[k]);
            numeric.push((up - down) / (2.0 * h));
        }
    }
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
    diff / scale.max(1e-300)
}
