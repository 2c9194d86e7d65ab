use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use candle_core::DType;
use serde::Serialize;

use crate::baselines::{self, TaperState};
use crate::codec::{self, FlatParams};
use crate::data::{ImageSet, ToyUniverse};
use crate::diffusion::{self, DiT, Example, NoiseSchedule, TrainState};
use crate::encoder::{self, EncodeOptions, EncoderKind, PromptEncoder, PromptSeq, StubEncoder};
use crate::error::{Error, Result};
use crate::pmodel::{self, GenericModel, PModelRecord};
use crate::rng::derive_seed;
use crate::universe::{self, ClassEntry, PromptMode, TaskSpec, TaskSplit, Vocabulary};

use super::{write_reports, EvalReport, ExperimentConfig, Method, Suite};

/// One trained generator configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    /// Prompt mode of the training prompts.
    pub mode: PromptMode,
    /// Trained on mixed class counts instead of `tasks.classes`.
    pub padded: bool,
    pub classifier_augment: bool,
    pub permute_neurons: bool,
    pub merge: bool,
    pub iters: usize,
}

/// Per-sample row of the memorization analysis.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemorizationRow {
    pub task_id: String,
    pub sample: usize,
    pub accuracy: f64,
    pub finetuned_accuracy: f64,
    pub distance_to_finetuned: f32,
    /// Closest training p-model with the same parameter count.
    pub distance_to_nearest_train: f32,
}

/// A configured experiment with lazily built, disk-cached artifacts under
/// `<root>/<config hash>/`.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub hash: String,
    pub dir: PathBuf,
    pub universe: ToyUniverse,
    encoder: Box<dyn PromptEncoder>,
    /// Classes available to stage 1 and 2, and the held-out shard.
    seen: Vec<usize>,
    unseen: Vec<usize>,
    schedule: NoiseSchedule,
    generic: Option<Rc<GenericModel>>,
    split: Option<Rc<TaskSplit>>,
    records: HashMap<bool, Rc<Vec<PModelRecord>>>,
    dits: HashMap<String, Rc<DiT>>,
    taper: Option<Rc<TaperState>>,
}

fn sub_vocabulary(vocab: &Vocabulary, classes: &[usize]) -> Result<Vocabulary> {
    let entries: Vec<ClassEntry> = classes
        .iter()
        .map(|&c| vocab.get(c).cloned())
        .collect::<Result<_>>()?;
    Vocabulary::new(entries)
}

fn remap(task: &TaskSpec, classes: &[usize]) -> TaskSpec {
    TaskSpec {
        task_id: task.task_id.clone(),
        class_ids: task.class_ids.iter().map(|&i| classes[i]).collect(),
        prompt_mode: task.prompt_mode,
    }
}

impl Experiment {
    pub fn open(config: ExperimentConfig, root: &Path) -> Result<Self> {
        config.validate()?;
        let hash = config.hash();
        let dir = root.join(&hash);
        Self::build(config, dir, hash, false)
    }

    fn build(config: ExperimentConfig, dir: PathBuf, hash: String, holdout: bool) -> Result<Self> {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let cfg_path = dir.join("config.toml");
        if !cfg_path.exists() {
            fs::write(&cfg_path, config.to_toml()?).map_err(|e| Error::io(&cfg_path, e))?;
        }
        let universe = ToyUniverse::generate(&config.universe, derive_seed(config.seed, "universe", 0))?;
        let encoder: Box<dyn PromptEncoder> = match config.encoder.kind {
            EncoderKind::Pretrained => Box::new(universe.encoder.clone()),
            EncoderKind::DeterministicStub => Box::new(StubEncoder {
                dim: config.universe.embedding_dim,
                seed: config.encoder.seed,
                mode_salted: config.encoder.mode_salted,
            }),
        };
        let (seen, unseen) = if holdout {
            universe::split_shards(&universe.vocab, &[], derive_seed(config.seed, "shards", 0))?
        } else {
            ((0..universe.vocab.len()).collect(), Vec::new())
        };
        let schedule = NoiseSchedule::new(&config.schedule)?;
        Ok(Self {
            config,
            hash,
            dir,
            universe,
            encoder,
            seen,
            unseen,
            schedule,
            generic: None,
            split: None,
            records: HashMap::new(),
            dits: HashMap::new(),
            taper: None,
        })
    }

    /// Companion experiment for the unseen-class suite: a universe with twice
    /// the classes, split into a seen shard (trained on) and an unseen shard.
    pub fn unseen_child(&self) -> Result<Self> {
        let mut cfg = self.config.clone();
        cfg.seed = derive_seed(self.config.seed, "unseen_child", 0);
        cfg.universe.num_classes *= 2;
        cfg.train.iters = self.variant_iters();
        Self::build(cfg, self.dir.join("unseen"), self.hash.clone(), true)
    }

    pub fn encoder(&self) -> &dyn PromptEncoder {
        self.encoder.as_ref()
    }

    pub fn seen_classes(&self) -> &[usize] {
        &self.seen
    }

    pub fn unseen_classes(&self) -> &[usize] {
        &self.unseen
    }

    fn seed(&self, tag: &str, index: u64) -> u64 {
        derive_seed(self.config.seed, tag, index)
    }

    fn variant_iters(&self) -> usize {
        self.config.eval.variant_iters.unwrap_or(self.config.train.iters)
    }

    fn arch(&self) -> crate::arch::ArchSpec {
        let s = self.config.universe.image_size;
        self.config.arch.build([1, s, s], self.seen.len())
    }

    /// The stage-1 model over the seen classes.
    pub fn generic(&mut self) -> Result<Rc<GenericModel>> {
        if let Some(g) = &self.generic {
            return Ok(g.clone());
        }
        let path = self.dir.join("generic.ckpt");
        let g = if path.exists() {
            GenericModel::load(&path)?
        } else {
            log::info!("training the generic model on {} classes", self.seen.len());
            let g = pmodel::train_generic_subset(
                &self.universe.train,
                &self.seen,
                &self.arch(),
                &self.config.generic,
                self.seed("generic", 0),
            )?;
            g.save(&path)?;
            g
        };
        let g = Rc::new(g);
        self.generic = Some(g.clone());
        Ok(g)
    }

    /// Training tasks and OOD test tasks, all drawn from the seen classes.
    pub fn split(&mut self) -> Result<Rc<TaskSplit>> {
        if let Some(s) = &self.split {
            return Ok(s.clone());
        }
        let path = self.dir.join("split.json");
        let split = if path.exists() {
            TaskSplit::load(&path)?
        } else {
            let t = &self.config.tasks;
            let sub = sub_vocabulary(&self.universe.vocab, &self.seen)?;
            let tasks = universe::sample_tasks(&sub, t.train_tasks, t.classes, t.strategy, self.seed("tasks", 0))?;
            let local = universe::build_splits(&sub, tasks, t.ood_tasks, self.seed("split", 0))?;
            let map = |v: &[TaskSpec]| -> Vec<TaskSpec> {
                v.iter().map(|x| remap(x, &self.seen).with_mode(t.prompt_mode)).collect()
            };
            let split = TaskSplit {
                train_tasks: map(&local.train_tasks),
                id_test_tasks: map(&local.id_test_tasks),
                ood_test_tasks: map(&local.ood_test_tasks),
            };
            split.save(&path)?;
            split
        };
        let split = Rc::new(split);
        self.split = Some(split.clone());
        Ok(split)
    }

    /// Tasks of mixed class counts `2..=c_max` (all `c_max` if that is 1).
    fn padded_tasks(&self) -> Result<Vec<TaskSpec>> {
        let c_max = self.config.dit.c_max;
        let counts: Vec<usize> = if c_max == 1 { vec![1] } else { (2..=c_max).collect() };
        let sub = sub_vocabulary(&self.universe.vocab, &self.seen)?;
        let n = self.config.tasks.train_tasks;
        let mut out = Vec::with_capacity(n);
        for (k, &c) in counts.iter().enumerate() {
            let share = n / counts.len() + usize::from(k < n % counts.len());
            if share == 0 || c > sub.len() {
                continue;
            }
            let tasks = universe::sample_tasks(&sub, share, c, self.config.tasks.strategy, self.seed("padded_tasks", c as u64))?;
            for (i, t) in tasks.iter().enumerate() {
                let mut t = remap(t, &self.seen).with_mode(self.config.tasks.prompt_mode);
                t.task_id = format!("pad-c{c}-{i:04}");
                out.push(t);
            }
        }
        Ok(out)
    }

    /// Finetuned p-models: the training tasks, or the mixed-count set.
    pub fn records(&mut self, padded: bool) -> Result<Rc<Vec<PModelRecord>>> {
        if let Some(r) = self.records.get(&padded) {
            return Ok(r.clone());
        }
        let dir = self.dir.join(if padded { "pmodels_padded" } else { "pmodels" });
        let records = if dir.join(pmodel::MANIFEST_FILE).exists() {
            pmodel::load_dataset(&dir)?.1
        } else {
            let generic = self.generic()?;
            let split = if padded {
                TaskSplit {
                    train_tasks: self.padded_tasks()?,
                    id_test_tasks: Vec::new(),
                    ood_test_tasks: Vec::new(),
                }
            } else {
                (*self.split()?).clone()
            };
            log::info!("finetuning {} p-models", split.train_tasks.len());
            let tag = if padded { "finetune_padded" } else { "finetune" };
            pmodel::build_pmodel_dataset(
                &generic,
                &split,
                &self.universe.train,
                &self.config.finetune,
                self.seed(tag, 0),
                &dir,
            )?
        };
        let records = Rc::new(records);
        self.records.insert(padded, records.clone());
        Ok(records)
    }

    /// The main generator: trained on `tasks.prompt_mode` prompts with
    /// classifier augmentation for `train.iters` updates.
    pub fn main_variant(&self) -> Variant {
        Variant {
            name: "main".into(),
            mode: self.config.tasks.prompt_mode,
            padded: false,
            classifier_augment: self.config.train.classifier_augment,
            permute_neurons: self.config.train.permute_neurons,
            merge: false,
            iters: self.config.train.iters,
        }
    }

    fn aux_variant(&self, name: &str) -> Variant {
        Variant {
            name: name.into(),
            iters: self.variant_iters(),
            ..self.main_variant()
        }
    }

    /// Generator variants by name: `main`, `padded`, `no_classifier_aug`,
    /// `permute_neurons`, `merged_prompt` and `cross_<mode>`.
    pub fn variant(&self, name: &str) -> Result<Variant> {
        let aux = self.aux_variant(name);
        Ok(match name {
            "main" => self.main_variant(),
            "padded" => Variant { padded: true, ..aux },
            "no_classifier_aug" => Variant {
                classifier_augment: false,
                ..aux
            },
            "permute_neurons" => Variant {
                classifier_augment: false,
                permute_neurons: true,
                ..aux
            },
            "merged_prompt" => Variant { merge: true, ..aux },
            other => {
                let mode = match other.strip_prefix("cross_") {
                    Some("name") => PromptMode::Name,
                    Some("description") => PromptMode::Description,
                    Some("image") => PromptMode::Image,
                    _ => return Err(Error::InvalidArgument(format!("unknown generator variant `{other}`"))),
                };
                if mode == self.config.tasks.prompt_mode {
                    self.main_variant()
                } else {
                    Variant { mode, ..aux }
                }
            }
        })
    }

    /// Encode a task prompt in `mode`. Image prompts take one training image
    /// per class, fixed per task.
    pub fn prompt(&self, task: &TaskSpec, mode: PromptMode, merge: bool) -> Result<PromptSeq> {
        let task = task.clone().with_mode(mode);
        let images = match mode {
            PromptMode::Image => Some(encoder::pick_prompt_images(
                &task,
                &self.universe.train,
                self.seed("prompt_images", 0),
            )?),
            _ => None,
        };
        encoder::encode_prompt(
            &task,
            &self.universe.vocab,
            self.encoder.as_ref(),
            images.as_deref(),
            self.config.dit.c_max,
            EncodeOptions { merge },
        )
    }

    /// Train (or load) the generator for a variant.
    pub fn dit(&mut self, variant: &Variant) -> Result<Rc<DiT>> {
        if let Some(d) = self.dits.get(&variant.name) {
            return Ok(d.clone());
        }
        let dit_dir = self.dir.join("dit");
        fs::create_dir_all(&dit_dir).map_err(|e| Error::io(&dit_dir, e))?;
        let path = dit_dir.join(format!("{}.ckpt", variant.name));
        let model = if path.exists() {
            DiT::load(&path)?.0
        } else {
            let records = self.records(variant.padded)?;
            let examples: Vec<Example> = records
                .iter()
                .map(|r| Example::new(&r.theta, self.prompt(&r.task, variant.mode, variant.merge)?))
                .collect::<Result<_>>()?;
            let arch = self.generic()?.arch.with_head_width(self.config.dit.c_max);
            let model = DiT::new(
                self.config.dit.clone(),
                codec::arch_layout(&arch),
                self.seed("dit_init", 0),
                DType::F32,
            )?;
            let train_cfg = diffusion::TrainConfig {
                iters: variant.iters,
                classifier_augment: variant.classifier_augment,
                permute_neurons: variant.permute_neurons,
                ..self.config.train.clone()
            };
            log::info!(
                "training generator `{}` ({} parameters) for {} updates on {} p-models",
                variant.name,
                model.num_params(),
                variant.iters,
                examples.len()
            );
            let mut state = TrainState::new(model, self.schedule.clone(), train_cfg)?;
            let log_path = dit_dir.join(format!("{}.log.jsonl", variant.name));
            if log_path.exists() {
                fs::remove_file(&log_path).map_err(|e| Error::io(&log_path, e))?;
            }
            state.train(&examples, Some(&arch), self.seed("dit_train", 0), Some(&log_path))?;
            state.save(&path)?;
            state.model
        };
        let model = Rc::new(model);
        self.dits.insert(variant.name.clone(), model.clone());
        Ok(model)
    }

    /// Generate one model per task, each trimmed to the task's class count.
    /// `tag` keys the sampling seeds.
    pub fn generate(&mut self, variant: &Variant, tasks: &[TaskSpec], mode: PromptMode, tag: &str) -> Result<Vec<FlatParams>> {
        let model = self.dit(variant)?;
        let prompts: Vec<PromptSeq> = tasks
            .iter()
            .map(|t| self.prompt(t, mode, variant.merge))
            .collect::<Result<_>>()?;
        let refs: Vec<&PromptSeq> = prompts.iter().collect();
        let seeds: Vec<u64> = (0..tasks.len() as u64).map(|i| self.seed(tag, i)).collect();
        let flats = diffusion::sample_params(
            &model,
            &refs,
            &self.schedule,
            &seeds,
            self.config.sampling.steps,
            self.config.sampling.batch,
        )?;
        flats
            .iter()
            .zip(tasks)
            .map(|(f, t)| codec::unpad(f, t.num_classes()))
            .collect()
    }

    pub fn taper(&mut self) -> Result<Rc<TaperState>> {
        if let Some(t) = &self.taper {
            return Ok(t.clone());
        }
        let generic = self.generic()?;
        let split = self.split()?;
        let prompts: Vec<PromptSeq> = split
            .train_tasks
            .iter()
            .map(|t| self.prompt(t, self.config.tasks.prompt_mode, false))
            .collect::<Result<_>>()?;
        log::info!("fitting TAPER with {} experts", self.config.taper.experts);
        let state = baselines::taper_fit(
            &generic,
            &self.universe.train,
            &split.train_tasks,
            &prompts,
            &self.config.taper,
            self.seed("taper", 0),
        )?;
        let state = Rc::new(state);
        self.taper = Some(state.clone());
        Ok(state)
    }

    fn test_set(&self, task: &TaskSpec) -> Result<ImageSet> {
        self.universe.test.task_subset(task)
    }

    /// Test accuracy of a generated (or finetuned) parameter vector.
    pub fn score(&mut self, theta: &FlatParams, task: &TaskSpec) -> Result<f64> {
        let generic = self.generic()?;
        let (arch, params) = generic.assemble(theta)?;
        pmodel::eval_accuracy(&arch, &params, &self.test_set(task)?)
    }

    /// Score `methods` on `tasks`; diffusion samples come from `variant`
    /// prompted in `mode`.
    fn eval_methods(
        &mut self,
        suite: Suite,
        cell: &str,
        tasks: &[TaskSpec],
        methods: &[Method],
        variant: &Variant,
        mode: PromptMode,
    ) -> Result<Vec<EvalReport>> {
        let mut out = Vec::new();
        for &method in methods {
            let results: Option<Vec<(String, f64)>> = match method {
                Method::Generic => {
                    let g = self.generic()?;
                    let mut v = Vec::with_capacity(tasks.len());
                    for t in tasks {
                        v.push((t.task_id.clone(), baselines::generic_accuracy(&g, t, &self.test_set(t)?)?));
                    }
                    Some(v)
                }
                Method::Select => {
                    let g = self.generic()?;
                    let mut v = Vec::with_capacity(tasks.len());
                    for t in tasks {
                        let (arch, params, _) = g.task_model_partial(t)?;
                        v.push((t.task_id.clone(), pmodel::eval_accuracy(&arch, &params, &self.test_set(t)?)?));
                    }
                    Some(v)
                }
                Method::Taper => {
                    let state = self.taper()?;
                    let mut v = Vec::with_capacity(tasks.len());
                    let mut served = true;
                    for t in tasks {
                        let prompt = self.prompt(t, self.config.tasks.prompt_mode, false)?;
                        match baselines::taper_generate(&state, &prompt, t) {
                            Ok((arch, params)) => {
                                v.push((t.task_id.clone(), pmodel::eval_accuracy(&arch, &params, &self.test_set(t)?)?))
                            }
                            Err(Error::Unsupported(_)) => {
                                served = false;
                                break;
                            }
                            Err(e) => return Err(e),
                        }
                    }
                    served.then_some(v)
                }
                Method::Diffusion => {
                    let tag = format!("sample:{suite}:{cell}:{}", variant.name);
                    match self.generate(variant, tasks, mode, &tag) {
                        Ok(thetas) => {
                            let mut v = Vec::with_capacity(tasks.len());
                            for (t, th) in tasks.iter().zip(&thetas) {
                                v.push((t.task_id.clone(), self.score(th, t)?));
                            }
                            Some(v)
                        }
                        Err(Error::Unsupported(m)) => {
                            log::warn!("{suite}/{cell}: {m}");
                            None
                        }
                        Err(e) => return Err(e),
                    }
                }
            };
            out.push(match results {
                Some(r) => EvalReport::new(suite.as_str(), method.as_str(), cell, &self.hash, r)?,
                None => EvalReport::inapplicable(suite.as_str(), method.as_str(), cell, &self.hash),
            });
        }
        Ok(out)
    }

    fn ood_tasks(&mut self) -> Result<Vec<TaskSpec>> {
        let split = self.split()?;
        let need = self.config.eval.min_tasks;
        if split.ood_test_tasks.len() < need {
            return Err(Error::Config {
                path: "tasks.ood_tasks".into(),
                message: format!("{} OOD tasks but eval.min_tasks is {need}", split.ood_test_tasks.len()),
            });
        }
        Ok(split.ood_test_tasks[..need].to_vec())
    }

    /// Run one suite and return its reports.
    pub fn run_suite(&mut self, suite: Suite) -> Result<Vec<EvalReport>> {
        let methods = self.config.eval.methods.clone();
        self.run_suite_with(suite, &methods)
    }

    /// As [`Experiment::run_suite`] with an explicit method list; suites that
    /// only concern the generator ignore it.
    pub fn run_suite_with(&mut self, suite: Suite, methods: &[Method]) -> Result<Vec<EvalReport>> {
        log::info!("running suite {suite}");
        let methods = methods.to_vec();
        let main = self.main_variant();
        let mode = self.config.tasks.prompt_mode;
        match suite {
            Suite::Id => {
                let split = self.split()?;
                let n = self.config.eval.min_tasks.min(split.train_tasks.len());
                let tasks = split.train_tasks[..n].to_vec();
                self.eval_methods(suite, "all", &tasks, &methods, &main, mode)
            }
            Suite::Ood => {
                let tasks = self.ood_tasks()?;
                self.eval_methods(suite, "all", &tasks, &methods, &main, mode)
            }
            Suite::ClassCount => self.class_count_suite(&methods),
            Suite::Unseen => self.unseen_suite(&methods),
            Suite::Memorization => self.memorization_suite(),
            Suite::PromptCross => self.prompt_cross_suite(),
            Suite::Ablation => self.ablation_suite(),
        }
    }

    fn class_count_suite(&mut self, methods: &[Method]) -> Result<Vec<EvalReport>> {
        let variant = self.variant("padded")?;
        let sub = sub_vocabulary(&self.universe.vocab, &self.seen)?;
        let mut out = Vec::new();
        let methods: Vec<Method> = methods.iter().copied().filter(|&m| m != Method::Taper).collect();
        for c in self.config.eval.class_counts.clone() {
            let tasks: Vec<TaskSpec> = universe::sample_tasks(
                &sub,
                self.config.eval.min_tasks,
                c,
                self.config.tasks.strategy,
                self.seed("class_count_tasks", c as u64),
            )?
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut t = remap(t, &self.seen).with_mode(self.config.tasks.prompt_mode);
                t.task_id = format!("c{c}-{i:04}");
                t
            })
            .collect();
            out.extend(self.eval_methods(
                Suite::ClassCount,
                &format!("c={c}"),
                &tasks,
                &methods,
                &variant,
                self.config.tasks.prompt_mode,
            )?);
        }
        Ok(out)
    }

    fn unseen_suite(&mut self, methods: &[Method]) -> Result<Vec<EvalReport>> {
        let mut child = self.unseen_child()?;
        let split = child.split()?;
        let exclude: HashSet<Vec<usize>> = split.train_tasks.iter().map(TaskSpec::class_set).collect();
        let main = child.main_variant();
        let mut out = Vec::new();
        for f in self.config.eval.unseen_fractions.clone() {
            let tasks: Vec<TaskSpec> = universe::tasks_with_unseen_fraction(
                &child.seen,
                &child.unseen,
                self.config.tasks.classes,
                f,
                self.config.eval.min_tasks,
                &exclude,
                child.seed("unseen_tasks", 0),
            )?
            .into_iter()
            .map(|t| t.with_mode(self.config.tasks.prompt_mode))
            .collect();
            let cell = format!("unseen={}%", (f * 100.0).round() as usize);
            out.extend(child.eval_methods(Suite::Unseen, &cell, &tasks, methods, &main, main.mode)?);
        }
        Ok(out)
    }

    fn memorization_suite(&mut self) -> Result<Vec<EvalReport>> {
        let main = self.main_variant();
        let split = self.split()?;
        let n = self.config.eval.memorization_tasks.min(split.ood_test_tasks.len());
        let tasks = split.ood_test_tasks[..n].to_vec();
        let k = self.config.eval.memorization_samples;
        let generic = self.generic()?;
        let records = self.records(false)?;

        let samples: Vec<Vec<FlatParams>> = (0..k)
            .map(|s| self.generate(&main, &tasks, main.mode, &format!("memorization:{s}")))
            .collect::<Result<_>>()?;

        let mut rows = Vec::new();
        let mut finetuned = Vec::new();
        let mut per_sample: Vec<Vec<(String, f64)>> = vec![Vec::new(); k];
        let mut average = Vec::new();
        let mut ensemble = Vec::new();
        for (i, task) in tasks.iter().enumerate() {
            let train = self.universe.train.task_subset(task)?;
            let reference = pmodel::finetune_pmodel(
                &generic,
                task,
                &train,
                &self.config.finetune,
                self.seed("memorization_finetune", i as u64),
            )?;
            let test = self.test_set(task)?;
            let ft_acc = self.score(&reference.theta, task)?;
            finetuned.push((task.task_id.clone(), ft_acc));

            let c = task.num_classes();
            let mut mean_logits = vec![0.0f32; test.len() * c];
            let mut accs = Vec::with_capacity(k);
            for s in 0..k {
                let theta = &samples[s][i];
                let (arch, params) = generic.assemble(theta)?;
                let logits = pmodel::predict_logits(&arch, &params, &test)?;
                let acc = pmodel::accuracy_from_logits(&logits, c, &test.labels, c)?;
                mean_logits.iter_mut().zip(&logits).for_each(|(m, l)| *m += l / k as f32);
                let nearest = records
                    .iter()
                    .filter(|r| r.theta.len() == theta.len())
                    .map(|r| r.theta.distance(theta))
                    .fold(f32::INFINITY, f32::min);
                rows.push(MemorizationRow {
                    task_id: task.task_id.clone(),
                    sample: s,
                    accuracy: acc,
                    finetuned_accuracy: ft_acc,
                    distance_to_finetuned: theta.distance(&reference.theta),
                    distance_to_nearest_train: nearest,
                });
                per_sample[s].push((task.task_id.clone(), acc));
                accs.push(acc);
            }
            average.push((task.task_id.clone(), accs.iter().sum::<f64>() / k as f64));
            ensemble.push((
                task.task_id.clone(),
                pmodel::accuracy_from_logits(&mean_logits, c, &test.labels, c)?,
            ));
        }

        self.write_memorization_rows(&rows)?;
        let suite = Suite::Memorization.as_str();
        let mut out = vec![EvalReport::new(suite, "finetune", "reference", &self.hash, finetuned)?];
        for (s, r) in per_sample.into_iter().enumerate() {
            out.push(EvalReport::new(suite, "diffusion", &format!("sample={s}"), &self.hash, r)?);
        }
        out.push(EvalReport::new(suite, "diffusion", "average", &self.hash, average)?);
        out.push(EvalReport::new(suite, "diffusion", "ensemble", &self.hash, ensemble)?);
        Ok(out)
    }

    fn write_memorization_rows(&self, rows: &[MemorizationRow]) -> Result<()> {
        let dir = self.reports_dir();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join("memorization_distances.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Serde(e.to_string()))?;
        for r in rows {
            w.serialize(r).map_err(|e| Error::Serde(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }

    fn prompt_cross_suite(&mut self) -> Result<Vec<EvalReport>> {
        let tasks = self.ood_tasks()?;
        let mut out = Vec::new();
        for train_mode in self.config.eval.cross_train_modes.clone() {
            let variant = self.variant(&format!("cross_{}", train_mode.as_str()))?;
            for test_mode in self.config.eval.cross_modes.clone() {
                let cell = format!("train={},test={}", train_mode.as_str(), test_mode.as_str());
                out.extend(self.eval_methods(
                    Suite::PromptCross,
                    &cell,
                    &tasks,
                    &[Method::Diffusion],
                    &variant,
                    test_mode,
                )?);
            }
        }
        Ok(out)
    }

    fn ablation_suite(&mut self) -> Result<Vec<EvalReport>> {
        let tasks = self.ood_tasks()?;
        let has_hidden = !self.generic()?.arch.hidden_groups().is_empty();
        let variants: Vec<Variant> = ["main", "no_classifier_aug", "permute_neurons", "merged_prompt"]
            .into_iter()
            .map(|n| self.variant(n))
            .collect::<Result<_>>()?;
        let mut out = Vec::new();
        for v in &variants {
            if v.permute_neurons && !has_hidden {
                out.push(EvalReport::inapplicable("ablation", "diffusion", &v.name, &self.hash));
                continue;
            }
            out.extend(self.eval_methods(Suite::Ablation, &v.name, &tasks, &[Method::Diffusion], v, v.mode)?);
        }
        Ok(out)
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.dir.join("reports")
    }

    /// Run a suite and write its reports under `reports/`.
    pub fn run_and_write(&mut self, suite: Suite) -> Result<Vec<EvalReport>> {
        let reports = self.run_suite(suite)?;
        write_reports(&self.reports_dir(), suite.as_str(), &self.hash, &reports)?;
        Ok(reports)
    }
}

/// Run every configured suite under `<root>/<config hash>/` and return the
/// reports in suite order.
pub fn run_experiment(config: &ExperimentConfig, root: &Path) -> Result<Vec<EvalReport>> {
    let mut exp = Experiment::open(config.clone(), root)?;
    let mut all = Vec::new();
    for suite in config.eval.suites.clone() {
        all.extend(exp.run_and_write(suite)?);
    }
    Ok(all)
}
