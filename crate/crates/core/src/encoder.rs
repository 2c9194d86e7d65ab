//! Per-class prompt conditioning: one frozen-encoder embedding per class
//! position, padded to a fixed length with the reserved `<->` token.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::ImageSet;
use crate::error::{Error, Result};
use crate::rng;
use crate::universe::{render_prompt, PromptMode, TaskSpec, Vocabulary};

/// Literal pad token used by classification sequence padding.
pub const PAD_TOKEN: &str = "<->";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    DeterministicStub,
    /// Frozen text/image encoder with a shared embedding space, loaded from disk.
    Pretrained,
}

/// A frozen prompt encoder. Implementations hold no trainable state.
pub trait PromptEncoder: Send + Sync {
    fn kind(&self) -> EncoderKind;
    fn dim(&self) -> usize;
    fn encode_text(&self, text: &str, mode: PromptMode) -> Vec<f32>;
    fn encode_image(&self, pixels: &[f32]) -> Result<Vec<f32>>;
    /// Digest of the encoder weights.
    fn fingerprint(&self) -> String;
}

fn normalize(v: &mut [f32]) {
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// The reserved pad embedding: the constant unit vector.
pub fn pad_embedding(dim: usize) -> Vec<f32> {
    vec![1.0 / (dim as f32).sqrt(); dim]
}

/// Hash-seeded unit-norm embedding of a string.
pub fn stub_embedding(text: &str, dim: usize, seed: u64) -> Vec<f32> {
    if text == PAD_TOKEN {
        return pad_embedding(dim);
    }
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(text.as_bytes());
    let d = h.finalize();
    let mut s = [0u8; 8];
    s.copy_from_slice(&d[..8]);
    let mut r = rng::rng(u64::from_le_bytes(s));
    let mut v: Vec<f32> = (0..dim).map(|_| StandardNormal.sample(&mut r)).collect();
    normalize(&mut v);
    v
}

pub fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let dot: f32 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f32>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f32>().sqrt();
    dot / (na * nb).max(f32::MIN_POSITIVE)
}

/// Offline deterministic encoder. With `mode_salted`, name and description
/// prompts live in unrelated regions of the embedding space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StubEncoder {
    pub dim: usize,
    pub seed: u64,
    pub mode_salted: bool,
}

impl StubEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self {
            dim,
            seed,
            mode_salted: false,
        }
    }
}

impl PromptEncoder for StubEncoder {
    fn kind(&self) -> EncoderKind {
        EncoderKind::DeterministicStub
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode_text(&self, text: &str, mode: PromptMode) -> Vec<f32> {
        if self.mode_salted && text != PAD_TOKEN {
            stub_embedding(&format!("{}\u{1f}{text}", mode.as_str()), self.dim, self.seed)
        } else {
            stub_embedding(text, self.dim, self.seed)
        }
    }

    fn encode_image(&self, _pixels: &[f32]) -> Result<Vec<f32>> {
        Err(Error::Unsupported("the stub encoder has no image tower".into()))
    }

    fn fingerprint(&self) -> String {
        format!("stub:{}:{}:{}", self.dim, self.seed, self.mode_salted)
    }
}

/// Frozen aligned encoder: a text embedding table plus a linear image tower
/// mapping pixels into the same space. Unknown strings fall back to the stub.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TableEncoder {
    pub dim: usize,
    pub fallback_seed: u64,
    pub text: BTreeMap<String, Vec<f32>>,
    /// Row-major `(pixels + 1) x dim`; the last row is the bias.
    pub image_weights: Vec<f32>,
    pub pixels: usize,
}

impl TableEncoder {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let enc: Self = serde_json::from_str(&text)?;
        if enc.image_weights.len() != (enc.pixels + 1) * enc.dim {
            return Err(Error::Shape("image tower weights do not match dims".into()));
        }
        if enc.text.values().any(|v| v.len() != enc.dim) {
            return Err(Error::Shape("text table entry has the wrong width".into()));
        }
        Ok(enc)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }
}

impl PromptEncoder for TableEncoder {
    fn kind(&self) -> EncoderKind {
        EncoderKind::Pretrained
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode_text(&self, text: &str, _mode: PromptMode) -> Vec<f32> {
        match self.text.get(text) {
            Some(v) => v.clone(),
            None => stub_embedding(text, self.dim, self.fallback_seed),
        }
    }

    fn encode_image(&self, pixels: &[f32]) -> Result<Vec<f32>> {
        if pixels.len() != self.pixels {
            return Err(Error::Shape(format!(
                "image has {} pixels, encoder expects {}",
                pixels.len(),
                self.pixels
            )));
        }
        let mut out = self.image_weights[self.pixels * self.dim..].to_vec();
        for (p, &x) in pixels.iter().enumerate() {
            let row = &self.image_weights[p * self.dim..(p + 1) * self.dim];
            out.iter_mut().zip(row).for_each(|(o, w)| *o += x * w);
        }
        normalize(&mut out);
        Ok(out)
    }

    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.text {
            h.update(k.as_bytes());
            v.iter().for_each(|x| h.update(x.to_le_bytes()));
        }
        self.image_weights.iter().for_each(|x| h.update(x.to_le_bytes()));
        hex::encode(h.finalize())
    }
}

/// Ordered condition tokens for one task; `mask[i]` is false at pad slots.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSeq {
    pub tokens: Vec<Vec<f32>>,
    pub mask: Vec<bool>,
}

impl PromptSeq {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn num_real(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Reorder the real positions: new position `i` takes old position `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut out = self.clone();
        for (i, &p) in perm.iter().enumerate() {
            out.tokens[i] = self.tokens[p].clone();
            out.mask[i] = self.mask[p];
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EncodeOptions {
    /// Replace per-class tokens by their mean in a single slot (ablation).
    pub merge: bool,
}

/// Encode a task prompt into `c_max` condition tokens.
///
/// Image mode needs exactly one image per class position.
pub fn encode_prompt(
    task: &TaskSpec,
    vocab: &Vocabulary,
    encoder: &dyn PromptEncoder,
    images: Option<&[Vec<f32>]>,
    c_max: usize,
    opts: EncodeOptions,
) -> Result<PromptSeq> {
    let c = task.num_classes();
    if c > c_max {
        return Err(Error::Task(format!(
            "task {} has {c} classes but prompts hold at most {c_max}",
            task.task_id
        )));
    }
    let mut tokens: Vec<Vec<f32>> = match task.prompt_mode {
        PromptMode::Image => {
            let images = images.ok_or_else(|| Error::MissingPromptInput {
                what: "image",
                class: format!("{}", task.class_ids[0]),
            })?;
            if images.len() != c {
                let missing = task.class_ids.get(images.len()).copied().unwrap_or(0);
                return Err(Error::MissingPromptInput {
                    what: "image",
                    class: vocab.get(missing).map(|e| e.name.clone()).unwrap_or_default(),
                });
            }
            images
                .iter()
                .map(|img| encoder.encode_image(img))
                .collect::<Result<_>>()?
        }
        mode => render_prompt(task, vocab)?
            .iter()
            .map(|s| encoder.encode_text(s, mode))
            .collect(),
    };
    let mut mask = vec![true; c];
    if opts.merge {
        let dim = encoder.dim();
        let mut mean = vec![0.0f32; dim];
        for t in &tokens {
            mean.iter_mut().zip(t).for_each(|(m, x)| *m += x / c as f32);
        }
        tokens = vec![mean];
        mask = vec![true];
    }
    let pad = encoder.encode_text(PAD_TOKEN, task.prompt_mode);
    while tokens.len() < c_max {
        tokens.push(pad.clone());
        mask.push(false);
    }
    Ok(PromptSeq { tokens, mask })
}

/// One randomly chosen image per class position.
pub fn pick_prompt_images(task: &TaskSpec, images: &ImageSet, seed: u64) -> Result<Vec<Vec<f32>>> {
    use rand::Rng as _;
    let mut r = rng::child_rng(seed, &task.task_id, 0);
    task.class_ids
        .iter()
        .map(|&cls| {
            let idx = images.indices_of_class(cls);
            if idx.is_empty() {
                return Err(Error::MissingPromptInput {
                    what: "image",
                    class: cls.to_string(),
                });
            }
            Ok(images.image(idx[r.random_range(0..idx.len())]).to_vec())
        })
        .collect()
}
