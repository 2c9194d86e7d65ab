//! Stage-1 generic training, stage-2 per-task finetuning and the on-disk
//! dataset of finetuned per-task models.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::arch::{self, ArchId, ArchSpec, LayerRole, Mode, ParamSet};
use crate::codec::{self, FlatParams};
use crate::data::ImageSet;
use crate::error::{Error, Result};
use crate::rng;
use crate::universe::{PromptMode, TaskSpec, TaskSplit};

/// SGD with momentum. Weight decay applies to weight matrices only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 64,
        }
    }
}

impl SgdConfig {
    pub fn with_epochs(&self, epochs: usize) -> Self {
        Self { epochs, ..self.clone() }
    }
}

const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct GenericModel {
    /// Architecture with one classifier row per known class.
    pub arch: ArchSpec,
    pub params: ParamSet,
    /// Universe class id predicted by each classifier row.
    pub classes: Vec<usize>,
}

impl GenericModel {
    pub fn num_classes(&self) -> usize {
        self.arch.head_width
    }

    pub fn row_of(&self, class: usize) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }

    /// The task's `c`-way model: backbone unchanged, classifier rows (and
    /// biases) picked from the generic head in task order.
    pub fn task_model(&self, task: &TaskSpec) -> Result<(ArchSpec, ParamSet)> {
        let (arch, params, known) = self.task_model_partial(task)?;
        if let Some(p) = known.iter().position(|&k| !k) {
            return Err(Error::Task(format!(
                "class {} of task {} is unknown to the generic model",
                task.class_ids[p], task.task_id
            )));
        }
        Ok((arch, params))
    }

    /// As [`GenericModel::task_model`], but rows of unknown classes are zero.
    /// Also returns which positions have a known class.
    pub fn task_model_partial(&self, task: &TaskSpec) -> Result<(ArchSpec, ParamSet, Vec<bool>)> {
        task.validate(None)?;
        let arch = self.arch.with_head_width(task.num_classes());
        let rows: Vec<Option<usize>> = task.class_ids.iter().map(|&c| self.row_of(c)).collect();
        let params = select_rows(&self.arch, &self.params, &rows);
        Ok((arch, params, rows.iter().map(Option::is_some).collect()))
    }

    /// Full parameter set for a generated vector; layers outside the
    /// generated subset come from this model's backbone.
    pub fn assemble(&self, theta: &FlatParams) -> Result<(ArchSpec, ParamSet)> {
        let rows = theta
            .classifier()
            .ok_or_else(|| Error::Layout("generated parameters have no classifier".into()))?
            .rows;
        let arch = self.arch.with_head_width(rows);
        let base = resize_head(&self.arch, &self.params, rows);
        let params = codec::unflatten(theta, &arch, Some(&base))?;
        Ok((arch, params))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::json!({ "kind": "generic", "arch": self.arch, "classes": self.classes });
        crate::checkpoint::write(path, &header, &self.params.tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, tensors) = crate::checkpoint::read(path)?;
        if header["kind"] != "generic" {
            return Err(Error::Serde(format!("{} is not a generic-model checkpoint", path.display())));
        }
        let arch: ArchSpec = serde_json::from_value(header["arch"].clone())?;
        let classes: Vec<usize> = serde_json::from_value(header["classes"].clone())?;
        let params = ParamSet { tensors };
        params.check(&arch)?;
        if classes.len() != arch.head_width {
            return Err(Error::Serde("class map does not match the classifier".into()));
        }
        Ok(Self { arch, params, classes })
    }
}

/// Classifier with the given generic rows in order; `None` gives a zero row.
pub fn select_rows(arch: &ArchSpec, params: &ParamSet, rows: &[Option<usize>]) -> ParamSet {
    let mut out = params.clone();
    let wi = arch.classifier_weight();
    let f = arch.feature_dim();
    out.tensors[wi] = rows
        .iter()
        .flat_map(|r| match r {
            Some(r) => params.tensors[wi][r * f..(r + 1) * f].to_vec(),
            None => vec![0.0; f],
        })
        .collect();
    if let Some(bi) = arch.classifier_bias() {
        out.tensors[bi] = rows.iter().map(|r| r.map_or(0.0, |r| params.tensors[bi][r])).collect();
    }
    out
}

fn resize_head(arch: &ArchSpec, params: &ParamSet, rows: usize) -> ParamSet {
    let mut p = params.clone();
    let f = arch.feature_dim();
    p.tensors[arch.classifier_weight()].resize(rows * f, 0.0);
    if let Some(bi) = arch.classifier_bias() {
        p.tensors[bi].resize(rows, 0.0);
    }
    p
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub epochs: usize,
}

/// A finetuned per-task model: generated-subset parameters only.
#[derive(Debug, Clone, PartialEq)]
pub struct PModelRecord {
    pub task: TaskSpec,
    pub arch: ArchSpec,
    pub theta: FlatParams,
    /// Accuracy on the task's finetuning data.
    pub accuracy: f64,
    pub provenance: Provenance,
}

enum Inputs<'a> {
    Images(&'a ImageSet),
    /// Frozen penultimate features, `[n, dim]` row-major.
    Features { feats: Vec<f32>, dim: usize, labels: &'a [usize] },
}

impl Inputs<'_> {
    fn len(&self) -> usize {
        match self {
            Inputs::Images(d) => d.len(),
            Inputs::Features { labels, .. } => labels.len(),
        }
    }

    fn labels(&self) -> &[usize] {
        match self {
            Inputs::Images(d) => &d.labels,
            Inputs::Features { labels, .. } => labels,
        }
    }
}

fn gather(src: &[f32], dim: usize, idx: &[usize]) -> Vec<f32> {
    let mut out = Vec::with_capacity(idx.len() * dim);
    for &i in idx {
        out.extend_from_slice(&src[i * dim..(i + 1) * dim]);
    }
    out
}

/// Minibatch SGD over the layers flagged in `trainable`. Returns the mean
/// training loss per epoch.
fn sgd(
    arch: &ArchSpec,
    params: &mut ParamSet,
    inputs: &Inputs,
    trainable: &[bool],
    cfg: &SgdConfig,
    seed: u64,
) -> Result<Vec<f32>> {
    if cfg.epochs == 0 {
        return Ok(Vec::new());
    }
    if inputs.len() == 0 {
        return Err(Error::Dataset("no training samples".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    let dev = Device::Cpu;
    let mut tensors = params.to_tensors(arch, DType::F32, &dev)?;
    let vars: Vec<Option<Var>> = tensors
        .iter()
        .zip(trainable)
        .map(|(t, &on)| on.then(|| Var::from_tensor(t)).transpose())
        .collect::<candle_core::Result<_>>()?;
    for (t, v) in tensors.iter_mut().zip(&vars) {
        if let Some(v) = v {
            *t = v.as_tensor().clone();
        }
    }
    let mut velocity: Vec<Option<Tensor>> = vars.iter().map(|_| None).collect();
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    let [c, h, w] = arch.input;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::child_rng(seed, "sgd_epoch", epoch as u64));
        let mut total = 0.0f64;
        let mut count = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let labels: Vec<u32> = batch.iter().map(|&i| inputs.labels()[i] as u32).collect();
            let y = Tensor::new(labels.as_slice(), &dev)?;
            let (logits, stats) = match inputs {
                Inputs::Images(d) => {
                    let x = Tensor::from_vec(gather(&d.pixels, d.image_dim(), batch), (batch.len(), c, h, w), &dev)?;
                    let out = arch::forward(arch, &tensors, &x, Mode::Train)?;
                    (out.logits, out.norm_stats)
                }
                Inputs::Features { feats, dim, .. } => {
                    let x = Tensor::from_vec(gather(feats, *dim, batch), (batch.len(), *dim), &dev)?;
                    (arch::head(arch, &tensors, &x)?, Vec::new())
                }
            };
            let loss = candle_nn::loss::cross_entropy(&logits, &y)?;
            let lv = loss.to_scalar::<f32>()?;
            if !lv.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
            }
            total += lv as f64 * batch.len() as f64;
            count += batch.len();
            let grads = loss.backward()?;
            for (i, v) in vars.iter().enumerate() {
                let Some(v) = v else { continue };
                let Some(g) = grads.get(v.as_tensor()) else { continue };
                let mut g = g.clone();
                if matches!(arch.layers[i].role, LayerRole::Weight | LayerRole::ClassifierWeight) && cfg.weight_decay > 0.0 {
                    g = (g + (v.as_tensor() * cfg.weight_decay)?)?;
                }
                let m = match &velocity[i] {
                    Some(prev) => ((prev * cfg.momentum)? + g)?,
                    None => g,
                };
                v.set(&(v.as_tensor() - (&m * cfg.lr)?)?)?;
                velocity[i] = Some(m);
            }
            for s in stats {
                for (slot, batch_stat) in [(s.running_mean, s.mean), (s.running_mean + 1, s.var)] {
                    let updated = ((&tensors[slot] * (1.0 - BN_MOMENTUM))? + (batch_stat * BN_MOMENTUM)?)?;
                    tensors[slot] = updated.detach();
                }
            }
        }
        losses.push((total / count as f64) as f32);
    }
    *params = ParamSet::from_tensors(&tensors)?;
    Ok(losses)
}

/// Stage 1 restricted to `classes`: images of other classes are dropped and
/// classifier row `r` learns `classes[r]`.
pub fn train_generic_subset(
    data: &ImageSet,
    classes: &[usize],
    arch: &ArchSpec,
    cfg: &SgdConfig,
    seed: u64,
) -> Result<GenericModel> {
    if classes.len() != arch.head_width {
        return Err(Error::InvalidArgument(format!(
            "{} classes for a {}-row classifier",
            classes.len(),
            arch.head_width
        )));
    }
    let mut sub = data.filter_classes(classes);
    for l in sub.labels.iter_mut() {
        *l = classes.iter().position(|c| c == l).expect("filtered");
    }
    let mut g = train_generic(&sub, arch, cfg, seed)?;
    g.classes = classes.to_vec();
    Ok(g)
}

/// Stage 1: train every trainable layer on the full label space.
pub fn train_generic(data: &ImageSet, arch: &ArchSpec, cfg: &SgdConfig, seed: u64) -> Result<GenericModel> {
    let counts = data.class_counts(arch.head_width);
    if let Some(missing) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Dataset(format!("class {missing} has no training images")));
    }
    if data.labels.iter().any(|&l| l >= arch.head_width) {
        return Err(Error::Dataset("label outside the classifier range".into()));
    }
    check_input(arch, data)?;
    let mut params = ParamSet::init(arch, rng::derive_seed(seed, "generic_init", 0));
    let trainable: Vec<bool> = arch.layers.iter().map(|l| l.role.trainable()).collect();
    let losses = sgd(arch, &mut params, &Inputs::Images(data), &trainable, cfg, rng::derive_seed(seed, "generic", 0))?;
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        log::info!("generic model: loss {first:.4} -> {last:.4} over {} epochs", losses.len());
    }
    Ok(GenericModel {
        arch: arch.clone(),
        params,
        classes: (0..arch.head_width).collect(),
    })
}

/// Continue training every trainable layer of `params` on `data`, whose
/// labels index classifier rows. Returns per-epoch mean losses.
pub fn train_all_layers(arch: &ArchSpec, params: &mut ParamSet, data: &ImageSet, cfg: &SgdConfig, seed: u64) -> Result<Vec<f32>> {
    check_input(arch, data)?;
    if data.labels.iter().any(|&l| l >= arch.head_width) {
        return Err(Error::Dataset("label outside the classifier range".into()));
    }
    let trainable: Vec<bool> = arch.layers.iter().map(|l| l.role.trainable()).collect();
    sgd(arch, params, &Inputs::Images(data), &trainable, cfg, seed)
}

fn check_input(arch: &ArchSpec, data: &ImageSet) -> Result<()> {
    if [data.channels, data.height, data.width] != arch.input {
        return Err(Error::Shape(format!(
            "images are {}x{}x{}, architecture expects {:?}",
            data.channels, data.height, data.width, arch.input
        )));
    }
    Ok(())
}

/// Penultimate features in eval mode, `[n, feature_dim]` row-major.
pub fn extract_features(arch: &ArchSpec, params: &ParamSet, data: &ImageSet) -> Result<Vec<f32>> {
    let dev = Device::Cpu;
    let ts = params.to_tensors(arch, DType::F32, &dev)?;
    let [c, h, w] = arch.input;
    let mut out = Vec::with_capacity(data.len() * arch.feature_dim());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(256) {
        let x = Tensor::from_vec(gather(&data.pixels, data.image_dim(), chunk), (chunk.len(), c, h, w), &dev)?;
        let (f, _) = arch::features(arch, &ts, &x, Mode::Eval)?;
        out.extend(f.flatten_all()?.to_vec1::<f32>()?);
    }
    Ok(out)
}

/// Stage 2: finetune the task's slice of the generic model on `data`, whose
/// labels are task positions `0..c`. For `resnet20_head` only the classifier
/// trains.
pub fn finetune_pmodel(
    generic: &GenericModel,
    task: &TaskSpec,
    data: &ImageSet,
    cfg: &SgdConfig,
    seed: u64,
) -> Result<PModelRecord> {
    let c = task.num_classes();
    let counts = data.class_counts(c);
    if let Some(p) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Dataset(format!(
            "no finetuning images for class {} of task {}",
            task.class_ids[p], task.task_id
        )));
    }
    if data.labels.iter().any(|&l| l >= c) {
        return Err(Error::Dataset("finetuning labels must be task positions".into()));
    }
    check_input(&generic.arch, data)?;
    let (arch, mut params) = generic.task_model(task)?;
    let frozen_backbone = arch.id == ArchId::Resnet20Head;
    let trainable: Vec<bool> = arch
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| l.role.trainable() && (!frozen_backbone || arch.generated.contains(&i)))
        .collect();
    let feats;
    let inputs = if frozen_backbone {
        feats = extract_features(&arch, &params, data)?;
        Inputs::Features {
            feats,
            dim: arch.feature_dim(),
            labels: &data.labels,
        }
    } else {
        Inputs::Images(data)
    };
    sgd(&arch, &mut params, &inputs, &trainable, cfg, seed)?;
    let accuracy = match &inputs {
        Inputs::Features { feats, dim, labels } => {
            let logits = head_logits(&arch, &params, feats, *dim)?;
            accuracy_from_logits(&logits, c, labels, c)?
        }
        Inputs::Images(d) => eval_accuracy(&arch, &params, d)?,
    };
    let theta = codec::flatten(&params, &arch)?;
    Ok(PModelRecord {
        task: task.clone(),
        arch,
        theta,
        accuracy,
        provenance: Provenance {
            seed,
            epochs: cfg.epochs,
        },
    })
}

fn head_logits(arch: &ArchSpec, params: &ParamSet, feats: &[f32], dim: usize) -> Result<Vec<f32>> {
    let dev = Device::Cpu;
    let ts = params.to_tensors(arch, DType::F32, &dev)?;
    let x = Tensor::from_slice(feats, (feats.len() / dim, dim), &dev)?;
    Ok(arch::head(arch, &ts, &x)?.flatten_all()?.to_vec1::<f32>()?)
}

/// Fraction of rows whose argmax over the first `valid` of `width` logits
/// equals the label.
pub fn accuracy_from_logits(logits: &[f32], width: usize, labels: &[usize], valid: usize) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Dataset("empty test set".into()));
    }
    if valid == 0 || valid > width || logits.len() != labels.len() * width {
        return Err(Error::Shape("logit buffer does not match the labels".into()));
    }
    let correct = logits
        .chunks(width)
        .zip(labels)
        .filter(|(row, &l)| argmax(&row[..valid]) == l)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode logits for a whole image set, batched.
pub fn predict_logits(arch: &ArchSpec, params: &ParamSet, data: &ImageSet) -> Result<Vec<f32>> {
    check_input(arch, data)?;
    let d = data.image_dim();
    let mut out = Vec::with_capacity(data.len() * arch.head_width);
    for start in (0..data.len()).step_by(512) {
        let n = (data.len() - start).min(512);
        out.extend(arch::logits(arch, params, &data.pixels[start * d..(start + n) * d], n)?);
    }
    Ok(out)
}

/// Accuracy of a model on a test set labeled with task positions.
pub fn eval_accuracy(arch: &ArchSpec, params: &ParamSet, testset: &ImageSet) -> Result<f64> {
    eval_accuracy_masked(arch, params, testset, arch.head_width)
}

/// As [`eval_accuracy`] but only the first `valid` logits compete.
pub fn eval_accuracy_masked(arch: &ArchSpec, params: &ParamSet, testset: &ImageSet, valid: usize) -> Result<f64> {
    if testset.is_empty() {
        return Err(Error::Dataset("empty test set".into()));
    }
    let logits = predict_logits(arch, params, testset)?;
    accuracy_from_logits(&logits, arch.head_width, &testset.labels, valid)
}

pub const MANIFEST_FILE: &str = "manifest";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestRecord {
    task_id: String,
    class_ids: Vec<usize>,
    prompt_mode: PromptMode,
    arch_id: ArchId,
    head_width: usize,
    offset: usize,
    length: usize,
    accuracy: f64,
    seed: u64,
    epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    /// Architecture the records were derived from (generic head width).
    arch: ArchSpec,
    records: Vec<ManifestRecord>,
}

/// Finetune one model per train task and persist them under `dir`.
pub fn build_pmodel_dataset(
    generic: &GenericModel,
    split: &TaskSplit,
    data: &ImageSet,
    cfg: &SgdConfig,
    seed: u64,
    dir: &Path,
) -> Result<Vec<PModelRecord>> {
    let mut records = Vec::with_capacity(split.train_tasks.len());
    for (k, task) in split.train_tasks.iter().enumerate() {
        let subset = data.task_subset(task)?;
        let rec = finetune_pmodel(generic, task, &subset, cfg, rng::derive_seed(seed, "finetune", k as u64))?;
        if (k + 1) % 100 == 0 {
            log::info!("finetuned {} / {} task models", k + 1, split.train_tasks.len());
        }
        records.push(rec);
    }
    save_dataset(dir, &generic.arch, &records)?;
    Ok(records)
}

/// Write `manifest` + `params.bin`; on failure, files created here are removed.
pub fn save_dataset(dir: &Path, arch: &ArchSpec, records: &[PModelRecord]) -> Result<()> {
    let created_dir = !dir.exists();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let params_path = dir.join(PARAMS_FILE);
    let res = write_dataset_files(&manifest_path, &params_path, arch, records);
    if res.is_err() {
        let _ = fs::remove_file(&manifest_path);
        let _ = fs::remove_file(&params_path);
        if created_dir {
            let _ = fs::remove_dir(dir);
        }
    }
    res
}

fn write_dataset_files(manifest_path: &PathBuf, params_path: &PathBuf, arch: &ArchSpec, records: &[PModelRecord]) -> Result<()> {
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(records.len());
    for r in records {
        let offset = blob.len() / 4;
        for v in &r.theta.values {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(ManifestRecord {
            task_id: r.task.task_id.clone(),
            class_ids: r.task.class_ids.clone(),
            prompt_mode: r.task.prompt_mode,
            arch_id: r.arch.id,
            head_width: r.arch.head_width,
            offset,
            length: r.theta.len(),
            accuracy: r.accuracy,
            seed: r.provenance.seed,
            epochs: r.provenance.epochs,
        });
    }
    let manifest = Manifest {
        arch: arch.clone(),
        records: entries,
    };
    let mut f = fs::File::create(params_path).map_err(|e| Error::io(params_path, e))?;
    f.write_all(&blob).map_err(|e| Error::io(params_path, e))?;
    f.sync_all().map_err(|e| Error::io(params_path, e))?;
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(manifest_path, text).map_err(|e| Error::io(manifest_path, e))
}

pub fn load_dataset(dir: &Path) -> Result<(ArchSpec, Vec<PModelRecord>)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let params_path = dir.join(PARAMS_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let bytes = fs::read(&params_path).map_err(|e| Error::io(&params_path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Dataset("parameter blob is not a whole number of floats".into()));
    }
    let floats: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let mut records = Vec::with_capacity(manifest.records.len());
    for m in manifest.records {
        if m.arch_id != manifest.arch.id {
            return Err(Error::Dataset(format!("record {} has a foreign architecture", m.task_id)));
        }
        let arch = manifest.arch.with_head_width(m.head_width);
        let end = m.offset + m.length;
        if end > floats.len() || m.length != arch.num_generated() {
            return Err(Error::Dataset(format!("record {} points outside the blob", m.task_id)));
        }
        let theta = FlatParams::new(floats[m.offset..end].to_vec(), codec::arch_layout(&arch))?;
        let task = TaskSpec::new(m.task_id, m.class_ids, m.prompt_mode)?;
        records.push(PModelRecord {
            task,
            arch,
            theta,
            accuracy: m.accuracy,
            provenance: Provenance {
                seed: m.seed,
                epochs: m.epochs,
            },
        });
    }
    Ok((manifest.arch, records))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two well-separated classes on a 1x2x2 input.
    fn separable(n: usize) -> ImageSet {
        let mut d = ImageSet::new(1, 2, 2);
        for i in 0..n {
            let l = i % 2;
            let s = if l == 0 { 1.0 } else { -1.0 };
            let j = (i as f32 * 0.1).sin() * 0.1;
            d.push(&[s + j, s, -s, 0.5 * s - j], l);
        }
        d
    }

    #[test]
    fn separable_data_is_learned() {
        let arch = ArchSpec::toy_mlp([1, 2, 2], 6, 2);
        let cfg = SgdConfig {
            epochs: 20,
            ..SgdConfig::default()
        };
        let g = train_generic(&separable(64), &arch, &cfg, 0).unwrap();
        assert_eq!(eval_accuracy(&g.arch, &g.params, &separable(40)).unwrap(), 1.0);
    }

    #[test]
    fn zero_epochs_is_initialization() {
        let arch = ArchSpec::toy_mlp([1, 2, 2], 6, 2);
        let g = train_generic(&separable(8), &arch, &SgdConfig::default().with_epochs(0), 3).unwrap();
        assert_eq!(g.params, ParamSet::init(&arch, rng::derive_seed(3, "generic_init", 0)));
    }

    #[test]
    fn missing_class_is_rejected() {
        let arch = ArchSpec::toy_mlp([1, 2, 2], 6, 3);
        assert!(train_generic(&separable(8), &arch, &SgdConfig::default(), 0).is_err());
    }

    #[test]
    fn accuracy_requires_samples() {
        let arch = ArchSpec::toy_mlp([1, 2, 2], 6, 2);
        let p = ParamSet::init(&arch, 0);
        assert!(eval_accuracy(&arch, &p, &ImageSet::new(1, 2, 2)).is_err());
    }

    #[test]
    fn masked_accuracy_ignores_trailing_logits() {
        let logits = [0.0, 1.0, 9.0, 2.0, 0.0, 9.0];
        assert_eq!(accuracy_from_logits(&logits, 3, &[1, 0], 2).unwrap(), 1.0);
        assert_eq!(accuracy_from_logits(&logits, 3, &[1, 0], 3).unwrap(), 0.0);
    }
}
