//! Reference methods: the generic model as-is, classifier-row selection, and
//! a mixer-weighted merge of shard experts.

use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::arch::{self, ArchSpec, Mode, ParamSet};
use crate::data::ImageSet;
use crate::encoder::PromptSeq;
use crate::error::{Error, Result};
use crate::pmodel::{self, GenericModel, SgdConfig};
use crate::rng;
use crate::universe::TaskSpec;

/// Accuracy of the generic model's full-head prediction: a sample counts
/// when the argmax over all known classes is the sample's class.
/// `test` is labeled with task positions.
pub fn generic_accuracy(generic: &GenericModel, task: &TaskSpec, test: &ImageSet) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Dataset("empty test set".into()));
    }
    let logits = pmodel::predict_logits(&generic.arch, &generic.params, test)?;
    let w = generic.arch.head_width;
    let correct = logits
        .chunks(w)
        .zip(&test.labels)
        .filter(|(row, &l)| generic.classes[pmodel::argmax(row)] == task.class_ids[l])
        .count();
    Ok(correct as f64 / test.len() as f64)
}

/// Compact `c`-way head built from the generic rows in task order.
pub fn classifier_select(generic: &GenericModel, task: &TaskSpec) -> Result<(ArchSpec, ParamSet)> {
    generic.task_model(task)
}

/// Full-width head with every non-task row (and bias) set to zero.
pub fn classifier_select_zeroed(generic: &GenericModel, task: &TaskSpec) -> Result<ParamSet> {
    let mut keep = vec![false; generic.num_classes()];
    for &c in &task.class_ids {
        let r = generic
            .row_of(c)
            .ok_or_else(|| Error::Task(format!("class {c} is unknown to the generic model")))?;
        keep[r] = true;
    }
    let rows: Vec<Option<usize>> = keep.iter().enumerate().map(|(r, &k)| k.then_some(r)).collect();
    Ok(pmodel::select_rows(&generic.arch, &generic.params, &rows))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaperConfig {
    pub experts: usize,
    pub expert_epochs: usize,
    pub mixer_epochs: usize,
    pub mixer_hidden: usize,
    pub mixer_lr: f64,
    /// Images per mixer update.
    pub mixer_batch: usize,
    /// Optimizer for expert finetuning; its epoch count is ignored.
    pub expert_sgd: SgdConfig,
}

impl Default for TaperConfig {
    fn default() -> Self {
        Self {
            experts: 2,
            expert_epochs: 5,
            mixer_epochs: 5,
            mixer_hidden: 64,
            mixer_lr: 1e-2,
            mixer_batch: 64,
            expert_sgd: SgdConfig::default(),
        }
    }
}

/// Two-layer network from a mean prompt embedding to softmax merge weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixer {
    pub dim: usize,
    pub hidden: usize,
    pub experts: usize,
    /// `w1 [dim, hidden]`, `b1 [hidden]`, `w2 [hidden, experts]`, `b2 [experts]`.
    pub tensors: [Vec<f32>; 4],
}

impl Mixer {
    pub fn new(dim: usize, hidden: usize, experts: usize, seed: u64) -> Self {
        let mut r = rng::child_rng(seed, "mixer_init", 0);
        let mut u = |n: usize, fan_in: usize| -> Vec<f32> {
            let b = 1.0 / (fan_in as f32).sqrt();
            (0..n).map(|_| r.random_range(-b..b)).collect()
        };
        let tensors = [u(dim * hidden, dim), u(hidden, dim), u(hidden * experts, hidden), u(experts, hidden)];
        Self {
            dim,
            hidden,
            experts,
            tensors,
        }
    }

    fn shapes(&self) -> [Vec<usize>; 4] {
        [
            vec![self.dim, self.hidden],
            vec![self.hidden],
            vec![self.hidden, self.experts],
            vec![self.experts],
        ]
    }

    fn forward(t: &[Tensor], emb: &Tensor) -> Result<Tensor> {
        let h = emb.matmul(&t[0])?.broadcast_add(&t[1])?.relu()?;
        let z = h.matmul(&t[2])?.broadcast_add(&t[3])?;
        Ok(candle_nn::ops::softmax(&z, D::Minus1)?)
    }

    /// Merge weights for one prompt embedding.
    pub fn weights(&self, emb: &[f32]) -> Result<Vec<f32>> {
        if emb.len() != self.dim {
            return Err(Error::Shape(format!("mixer expects width {}, got {}", self.dim, emb.len())));
        }
        let dev = Device::Cpu;
        let ts = self
            .tensors
            .iter()
            .zip(self.shapes())
            .map(|(v, s)| Ok(Tensor::from_slice(v, s.as_slice(), &dev)?))
            .collect::<Result<Vec<_>>>()?;
        let e = Tensor::from_slice(emb, (1, self.dim), &dev)?;
        Ok(Self::forward(&ts, &e)?.flatten_all()?.to_vec1::<f32>()?)
    }
}

/// Mean of the real (unmasked) prompt tokens.
pub fn mean_prompt_embedding(prompt: &PromptSeq) -> Vec<f32> {
    let dim = prompt.tokens.first().map_or(0, Vec::len);
    let n = prompt.num_real().max(1) as f32;
    let mut out = vec![0.0; dim];
    for (t, &m) in prompt.tokens.iter().zip(&prompt.mask) {
        if m {
            out.iter_mut().zip(t).for_each(|(o, x)| *o += x / n);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaperState {
    /// Architecture of every expert (the generic model's).
    pub arch: ArchSpec,
    /// Universe class per classifier row.
    pub classes: Vec<usize>,
    pub shards: Vec<Vec<usize>>,
    pub experts: Vec<ParamSet>,
    pub mixer: Mixer,
}

impl TaperState {
    /// `Σ_e w_e θ_e` over every layer.
    pub fn merge(&self, weights: &[f32]) -> Result<ParamSet> {
        if weights.len() != self.experts.len() {
            return Err(Error::InvalidArgument(format!(
                "{} weights for {} experts",
                weights.len(),
                self.experts.len()
            )));
        }
        let mut out = ParamSet::zeros(&self.arch);
        for (e, &w) in self.experts.iter().zip(weights) {
            for (o, t) in out.tensors.iter_mut().zip(&e.tensors) {
                o.iter_mut().zip(t).for_each(|(o, x)| *o += w * x);
            }
        }
        Ok(out)
    }

    fn row_of(&self, class: usize) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }
}

/// Shard the generic model's classes, finetune one expert per shard, then fit
/// the mixer so that merged-and-selected models minimize task cross-entropy.
pub fn taper_fit(
    generic: &GenericModel,
    data: &ImageSet,
    tasks: &[TaskSpec],
    prompts: &[PromptSeq],
    cfg: &TaperConfig,
    seed: u64,
) -> Result<TaperState> {
    let e = cfg.experts;
    if e == 0 || e > generic.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "cannot shard {} classes across {e} experts",
            generic.num_classes()
        )));
    }
    if tasks.len() != prompts.len() {
        return Err(Error::InvalidArgument("one prompt per training task is required".into()));
    }
    let mut order = generic.classes.clone();
    order.shuffle(&mut rng::child_rng(seed, "taper_shards", 0));
    let shards: Vec<Vec<usize>> = (0..e)
        .map(|i| order[i * order.len() / e..(i + 1) * order.len() / e].to_vec())
        .collect();

    let mut experts = Vec::with_capacity(e);
    for (i, shard) in shards.iter().enumerate() {
        let mut sub = data.filter_classes(shard);
        for l in sub.labels.iter_mut() {
            *l = generic.row_of(*l).expect("shard classes are known");
        }
        let mut params = generic.params.clone();
        let sgd = cfg.expert_sgd.with_epochs(cfg.expert_epochs);
        pmodel::train_all_layers(&generic.arch, &mut params, &sub, &sgd, rng::derive_seed(seed, "taper_expert", i as u64))?;
        experts.push(params);
    }

    let dim = prompts.first().and_then(|p| p.tokens.first()).map_or(1, Vec::len);
    let mut state = TaperState {
        arch: generic.arch.clone(),
        classes: generic.classes.clone(),
        shards,
        experts,
        mixer: Mixer::new(dim, cfg.mixer_hidden, e, rng::derive_seed(seed, "taper_mixer", 0)),
    };
    if cfg.mixer_epochs > 0 && !tasks.is_empty() {
        fit_mixer(&mut state, data, tasks, prompts, cfg, seed)?;
    }
    Ok(state)
}

fn fit_mixer(
    state: &mut TaperState,
    data: &ImageSet,
    tasks: &[TaskSpec],
    prompts: &[PromptSeq],
    cfg: &TaperConfig,
    seed: u64,
) -> Result<()> {
    let dev = Device::Cpu;
    let arch = &state.arch;
    let expert_t: Vec<Vec<Tensor>> = state
        .experts
        .iter()
        .map(|p| p.to_tensors(arch, DType::F32, &dev))
        .collect::<Result<_>>()?;
    let vars: Vec<Var> = state
        .mixer
        .tensors
        .iter()
        .zip(state.mixer.shapes())
        .map(|(v, s)| Ok(Var::from_tensor(&Tensor::from_slice(v, s.as_slice(), &dev)?)?))
        .collect::<Result<_>>()?;
    let mut opt = AdamW::new(
        vars.clone(),
        ParamsAdamW {
            lr: cfg.mixer_lr,
            weight_decay: 0.0,
            ..ParamsAdamW::default()
        },
    )?;
    let subsets: Vec<ImageSet> = tasks.iter().map(|t| data.task_subset(t)).collect::<Result<_>>()?;
    let wi = arch.classifier_weight();
    let bi = arch.classifier_bias();
    let [c, h, w] = arch.input;
    let mut order: Vec<usize> = (0..tasks.len()).collect();
    for epoch in 0..cfg.mixer_epochs {
        let mut r = rng::child_rng(seed, "taper_mixer_epoch", epoch as u64);
        order.shuffle(&mut r);
        for &k in &order {
            let task = &tasks[k];
            let rows: Vec<u32> = task
                .class_ids
                .iter()
                .map(|&cl| {
                    state
                        .row_of(cl)
                        .map(|r| r as u32)
                        .ok_or_else(|| Error::Task(format!("training class {cl} is unknown to the experts")))
                })
                .collect::<Result<_>>()?;
            let rows = Tensor::new(rows.as_slice(), &dev)?;
            let emb = Tensor::from_vec(mean_prompt_embedding(&prompts[k]), (1, state.mixer.dim), &dev)?;
            let var_t: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
            let weights = Mixer::forward(&var_t, &emb)?.squeeze(0)?;
            let mut merged = Vec::with_capacity(arch.layers.len());
            for layer in 0..arch.layers.len() {
                let mut acc: Option<Tensor> = None;
                for (ei, et) in expert_t.iter().enumerate() {
                    let term = et[layer].broadcast_mul(&weights.narrow(0, ei, 1)?.squeeze(0)?)?;
                    acc = Some(match acc {
                        Some(a) => (a + term)?,
                        None => term,
                    });
                }
                let mut t = acc.expect("at least one expert");
                if layer == wi || Some(layer) == bi {
                    t = t.index_select(&rows, 0)?;
                }
                merged.push(t);
            }
            let task_arch = arch.with_head_width(task.num_classes());
            let sub = &subsets[k];
            let n = cfg.mixer_batch.min(sub.len()).max(1);
            let idx: Vec<usize> = (0..n).map(|_| r.random_range(0..sub.len())).collect();
            let mut pix = Vec::with_capacity(n * sub.image_dim());
            for &i in &idx {
                pix.extend_from_slice(sub.image(i));
            }
            let x = Tensor::from_vec(pix, (n, c, h, w), &dev)?;
            let y: Vec<u32> = idx.iter().map(|&i| sub.labels[i] as u32).collect();
            let y = Tensor::new(y.as_slice(), &dev)?;
            let logits = arch::forward(&task_arch, &merged, &x, Mode::Eval)?.logits;
            let loss = candle_nn::loss::cross_entropy(&logits, &y)?;
            let lv = loss.to_scalar::<f32>()?;
            if !lv.is_finite() {
                return Err(Error::NonFinite(format!("mixer loss at epoch {epoch}")));
            }
            opt.step(&loss.backward()?)?;
        }
    }
    for (slot, v) in state.mixer.tensors.iter_mut().zip(&vars) {
        *slot = v.as_tensor().flatten_all()?.to_vec1::<f32>()?;
    }
    Ok(())
}

/// Merge the experts with mixer weights for the prompt, then select the task's
/// classifier rows. Classes the experts never saw get zero rows; a task made
/// only of such classes cannot be served.
pub fn taper_generate(state: &TaperState, prompt: &PromptSeq, task: &TaskSpec) -> Result<(ArchSpec, ParamSet)> {
    let rows: Vec<Option<usize>> = task.class_ids.iter().map(|&c| state.row_of(c)).collect();
    if rows.iter().all(Option::is_none) {
        return Err(Error::Unsupported(format!(
            "task {} has no class known to the experts",
            task.task_id
        )));
    }
    let weights = state.mixer.weights(&mean_prompt_embedding(prompt))?;
    let merged = state.merge(&weights)?;
    Ok((
        state.arch.with_head_width(task.num_classes()),
        pmodel::select_rows(&state.arch, &merged, &rows),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::universe::PromptMode;

    fn generic(k: usize) -> GenericModel {
        let arch = ArchSpec::toy_mlp([1, 2, 2], 3, k);
        GenericModel {
            params: ParamSet::init(&arch, 7),
            arch,
            classes: (0..k).collect(),
        }
    }

    #[test]
    fn selection_picks_rows_in_task_order() {
        let g = generic(4);
        let task = TaskSpec::new("t", vec![2, 0], PromptMode::Name).unwrap();
        let (a, p) = classifier_select(&g, &task).unwrap();
        let wi = a.classifier_weight();
        let w = &g.params.tensors[wi];
        assert_eq!(p.tensors[wi], [&w[6..9], &w[0..3]].concat());

        let all = TaskSpec::new("t", vec![0, 1, 2, 3], PromptMode::Name).unwrap();
        let (_, p) = classifier_select(&g, &all).unwrap();
        assert_eq!(p, g.params);

        let bad = TaskSpec::new("t", vec![9], PromptMode::Name).unwrap();
        assert!(classifier_select(&g, &bad).is_err());
    }

    #[test]
    fn merge_weights() {
        let g = generic(3);
        let mut other = g.params.clone();
        other.tensors.iter_mut().flatten().for_each(|v| *v += 1.0);
        let st = TaperState {
            arch: g.arch.clone(),
            classes: g.classes.clone(),
            shards: vec![vec![0], vec![1, 2]],
            experts: vec![g.params.clone(), other.clone()],
            mixer: Mixer::new(4, 5, 2, 0),
        };
        assert_eq!(st.merge(&[1.0, 0.0]).unwrap(), g.params);
        let half = st.merge(&[0.5, 0.5]).unwrap();
        for (h, (a, b)) in half.tensors.iter().flatten().zip(g.params.tensors.iter().flatten().zip(other.tensors.iter().flatten())) {
            assert!((h - 0.5 * (a + b)).abs() < 1e-6);
        }
        let w = st.mixer.weights(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(w.len(), 2);
        assert!((w.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn unseen_only_task_is_unsupported() {
        let g = generic(3);
        let st = TaperState {
            arch: g.arch.clone(),
            classes: g.classes.clone(),
            shards: vec![vec![0, 1, 2]],
            experts: vec![g.params.clone()],
            mixer: Mixer::new(2, 4, 1, 0),
        };
        let p = PromptSeq {
            tokens: vec![vec![0.5, 0.5]],
            mask: vec![true],
        };
        let t = TaskSpec::new("t", vec![5], PromptMode::Name).unwrap();
        assert!(matches!(taper_generate(&st, &p, &t), Err(Error::Unsupported(_))));
        let t = TaskSpec::new("t", vec![5, 1], PromptMode::Name).unwrap();
        assert!(taper_generate(&st, &p, &t).is_ok());
    }
}
