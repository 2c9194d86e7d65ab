//! Labeled image sets, the synthetic toy universe, and a CIFAR-100 binary reader.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoder::{stub_embedding, TableEncoder};
use crate::error::{Error, Result};
use crate::rng;
use crate::universe::{ClassEntry, TaskSpec, Vocabulary};

/// Images stored as a dense `[n, channels, height, width]` buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
    pub labels: Vec<usize>,
}

impl ImageSet {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            pixels: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn image_dim(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let d = self.image_dim();
        &self.pixels[i * d..(i + 1) * d]
    }

    pub fn push(&mut self, image: &[f32], label: usize) {
        debug_assert_eq!(image.len(), self.image_dim());
        self.pixels.extend_from_slice(image);
        self.labels.push(label);
    }

    pub fn indices_of_class(&self, class: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for &l in &self.labels {
            if l < num_classes {
                counts[l] += 1;
            }
        }
        counts
    }

    /// Images of the task's classes with labels remapped to task positions.
    pub fn task_subset(&self, task: &TaskSpec) -> Result<ImageSet> {
        let mut position = BTreeMap::new();
        for (i, &c) in task.class_ids.iter().enumerate() {
            position.insert(c, i);
        }
        let mut out = ImageSet::new(self.channels, self.height, self.width);
        let mut seen = vec![0usize; task.num_classes()];
        for i in 0..self.len() {
            if let Some(&p) = position.get(&self.labels[i]) {
                out.push(self.image(i), p);
                seen[p] += 1;
            }
        }
        if let Some(p) = seen.iter().position(|&n| n == 0) {
            return Err(Error::Dataset(format!(
                "no images for class {} of task {}",
                task.class_ids[p], task.task_id
            )));
        }
        Ok(out)
    }

    /// Images whose label is in `classes`, labels unchanged.
    pub fn filter_classes(&self, classes: &[usize]) -> ImageSet {
        let mut out = ImageSet::new(self.channels, self.height, self.width);
        for i in 0..self.len() {
            if classes.contains(&self.labels[i]) {
                out.push(self.image(i), self.labels[i]);
            }
        }
        out
    }
}

/// Parameters of the synthetic universe: classes are points in a small latent
/// space; images are latent-weighted mixtures of Gaussian blobs plus pixel
/// noise, and the aligned encoder embeds the same latents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyUniverseConfig {
    pub num_classes: usize,
    pub num_superclasses: usize,
    pub latent_dim: usize,
    pub image_size: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub pixel_noise: f32,
    pub superclass_spread: f32,
    pub embedding_dim: usize,
    /// String-specific jitter of aligned text embeddings for names.
    pub name_jitter: f32,
    /// Same for descriptions, which are a noisier view of the class.
    pub description_jitter: f32,
}

impl Default for ToyUniverseConfig {
    fn default() -> Self {
        Self {
            num_classes: 12,
            num_superclasses: 4,
            latent_dim: 6,
            image_size: 8,
            train_per_class: 200,
            test_per_class: 100,
            pixel_noise: 2.0,
            superclass_spread: 0.6,
            embedding_dim: 64,
            name_jitter: 0.15,
            description_jitter: 0.5,
        }
    }
}

const NAMES: [&str; 26] = [
    "alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel", "india", "juliett",
    "kilo", "lima", "mike", "november", "oscar", "papa", "quebec", "romeo", "sierra", "tango",
    "uniform", "victor", "whiskey", "xray", "yankee", "zulu",
];

fn region(cx: f32, cy: f32, size: usize) -> &'static str {
    let third = size as f32 / 3.0;
    let row = if cy < third { 0 } else if cy < 2.0 * third { 1 } else { 2 };
    let col = if cx < third { 0 } else if cx < 2.0 * third { 1 } else { 2 };
    [
        ["upper left", "top", "upper right"],
        ["left", "middle", "right"],
        ["lower left", "bottom", "lower right"],
    ][row][col]
}

#[derive(Debug, Clone)]
pub struct ToyUniverse {
    pub config: ToyUniverseConfig,
    pub vocab: Vocabulary,
    pub latents: Vec<Vec<f32>>,
    pub train: ImageSet,
    pub test: ImageSet,
    pub encoder: TableEncoder,
}

impl ToyUniverse {
    pub fn generate(config: &ToyUniverseConfig, seed: u64) -> Result<Self> {
        let k = config.num_classes;
        let d = config.latent_dim;
        let s = config.image_size;
        if k == 0 || d == 0 || s < 2 || config.num_superclasses == 0 {
            return Err(Error::InvalidArgument("degenerate toy universe".into()));
        }
        let mut r = rng::child_rng(seed, "toy_universe", 0);

        let centers: Vec<Vec<f32>> = (0..config.num_superclasses)
            .map(|_| (0..d).map(|_| StandardNormal.sample(&mut r)).collect())
            .collect();
        let superclass: Vec<usize> = (0..k).map(|i| i % config.num_superclasses).collect();
        let latents: Vec<Vec<f32>> = (0..k)
            .map(|i| {
                centers[superclass[i]]
                    .iter()
                    .map(|&c| c + config.superclass_spread * Distribution::<f32>::sample(&StandardNormal, &mut r))
                    .collect()
            })
            .collect();

        // One Gaussian blob per latent dimension.
        let blobs: Vec<(f32, f32, f32)> = (0..d)
            .map(|_| {
                let cx = r.random_range(0.5..s as f32 - 0.5);
                let cy = r.random_range(0.5..s as f32 - 0.5);
                let w = r.random_range(0.8..1.8f32);
                (cx, cy, w)
            })
            .collect();
        let basis: Vec<Vec<f32>> = blobs
            .iter()
            .map(|&(cx, cy, w)| {
                (0..s * s)
                    .map(|p| {
                        let (x, y) = ((p % s) as f32, (p / s) as f32);
                        (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * w * w)).exp()
                    })
                    .collect()
            })
            .collect();
        let prototypes: Vec<Vec<f32>> = latents
            .iter()
            .map(|z| {
                let mut img = vec![0.0f32; s * s];
                for (b, &zb) in basis.iter().zip(z) {
                    img.iter_mut().zip(b).for_each(|(p, v)| *p += zb * v);
                }
                img
            })
            .collect();

        let mut entries = Vec::with_capacity(k);
        let mut used = BTreeMap::new();
        for i in 0..k {
            let name = if i < NAMES.len() {
                NAMES[i].to_string()
            } else {
                format!("{}{}", NAMES[i % NAMES.len()], i / NAMES.len() + 1)
            };
            let mut parts: Vec<(f32, String)> = latents[i]
                .iter()
                .zip(&blobs)
                .map(|(&z, &(cx, cy, _))| {
                    let tone = if z > 0.8 {
                        "bright"
                    } else if z > 0.0 {
                        "pale"
                    } else if z > -0.8 {
                        "dim"
                    } else {
                        "dark"
                    };
                    (z.abs(), format!("{tone} {} spot", region(cx, cy, s)))
                })
                .collect();
            parts.sort_by(|a, b| b.0.total_cmp(&a.0));
            let mut desc = format!(
                "a pattern with a {} and a {}",
                parts[0].1,
                parts.get(1).map(|p| p.1.as_str()).unwrap_or("plain background")
            );
            let n = used.entry(desc.clone()).or_insert(0usize);
            *n += 1;
            if *n > 1 {
                desc = format!("{desc}, variant {n}");
            }
            entries.push(ClassEntry {
                id: i,
                name,
                description: Some(desc),
                superclass: Some(superclass[i]),
            });
        }
        let vocab = Vocabulary::new(entries)?;

        let noise = Normal::new(0.0f32, config.pixel_noise)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let draw = |per_class: usize, tag: &str| {
            let mut set = ImageSet::new(1, s, s);
            let mut r = rng::child_rng(seed, tag, 0);
            for _ in 0..per_class {
                for (c, proto) in prototypes.iter().enumerate() {
                    let img: Vec<f32> = proto.iter().map(|&p| p + noise.sample(&mut r)).collect();
                    set.push(&img, c);
                }
            }
            set
        };
        let train = draw(config.train_per_class, "toy_train");
        let test = draw(config.test_per_class, "toy_test");

        let encoder = build_aligned_encoder(config, &vocab, &latents, &train, seed)?;
        Ok(Self {
            config: config.clone(),
            vocab,
            latents,
            train,
            test,
            encoder,
        })
    }
}

/// Text embeddings are a fixed random projection of the class latent plus a
/// per-string jitter; the image tower is a ridge regression from pixels onto
/// the name embeddings of the training labels.
fn build_aligned_encoder(
    config: &ToyUniverseConfig,
    vocab: &Vocabulary,
    latents: &[Vec<f32>],
    train: &ImageSet,
    seed: u64,
) -> Result<TableEncoder> {
    let dim = config.embedding_dim;
    let d = config.latent_dim;
    let mut r = rng::child_rng(seed, "aligned_encoder", 0);
    let proj: Vec<f32> = (0..dim * d)
        .map(|_| StandardNormal.sample(&mut r))
        .collect();
    let embed = |z: &[f32], text: &str, jitter: f32| {
        let j = stub_embedding(text, dim, seed ^ 0x5eed);
        let mut v: Vec<f32> = (0..dim)
            .map(|o| {
                let base: f32 = (0..d).map(|i| proj[o * d + i] * z[i]).sum::<f32>() / (d as f32).sqrt();
                base + jitter * j[o] * (dim as f32).sqrt() * 0.5
            })
            .collect();
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        v.iter_mut().for_each(|x| *x /= n.max(f32::MIN_POSITIVE));
        v
    };
    let mut text = BTreeMap::new();
    for c in vocab.classes() {
        text.insert(c.name.clone(), embed(&latents[c.id], &c.name, config.name_jitter));
        if let Some(desc) = &c.description {
            text.insert(desc.clone(), embed(&latents[c.id], desc, config.description_jitter));
        }
    }

    let p = train.image_dim();
    let n = train.len();
    let x = DMatrix::from_fn(n, p + 1, |i, j| if j < p { train.image(i)[j] as f64 } else { 1.0 });
    let y = DMatrix::from_fn(n, dim, |i, j| text[&vocab.classes()[train.labels[i]].name][j] as f64);
    let mut gram = x.transpose() * &x;
    for i in 0..p {
        gram[(i, i)] += 1.0 * n as f64 * 1e-2;
    }
    let rhs = x.transpose() * y;
    let w = gram
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("image tower system is singular".into()))?
        .solve(&rhs);
    let mut image_weights = Vec::with_capacity((p + 1) * dim);
    for i in 0..=p {
        for j in 0..dim {
            image_weights.push(w[(i, j)] as f32);
        }
    }
    Ok(TableEncoder {
        dim,
        fallback_seed: seed,
        text,
        image_weights,
        pixels: p,
    })
}

/// Read a CIFAR-100 binary batch (`train.bin` / `test.bin`): each record is a
/// coarse label byte, a fine label byte and 3072 channel-planar pixels.
/// Pixels are scaled to [0, 1] then standardized per channel.
pub fn load_cifar100_bin(path: &Path) -> Result<(ImageSet, Vec<usize>)> {
    const REC: usize = 2 + 3072;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() || bytes.len() % REC != 0 {
        return Err(Error::Dataset(format!(
            "{} is not a CIFAR-100 binary file",
            path.display()
        )));
    }
    const MEAN: [f32; 3] = [0.5071, 0.4865, 0.4409];
    const STD: [f32; 3] = [0.2673, 0.2564, 0.2762];
    let mut set = ImageSet::new(3, 32, 32);
    let mut coarse = Vec::with_capacity(bytes.len() / REC);
    for rec in bytes.chunks_exact(REC) {
        coarse.push(rec[0] as usize);
        let img: Vec<f32> = rec[2..]
            .iter()
            .enumerate()
            .map(|(i, &b)| {
                let ch = i / 1024;
                (b as f32 / 255.0 - MEAN[ch]) / STD[ch]
            })
            .collect();
        set.push(&img, rec[1] as usize);
    }
    Ok((set, coarse))
}
