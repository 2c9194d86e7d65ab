//! Personalized-model architectures, their parameter layouts and forward passes.
//!
//! Weights follow the `[out, in, ...]` convention. A parameter set is a list of
//! dense buffers aligned with [`ArchSpec::layers`]; batch-norm running
//! statistics ride along as non-trainable buffers.

use candle_core::{DType, Device, Tensor, D};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchId {
    ToyMlp,
    SmallCnn,
    Resnet20Head,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerRole {
    Weight,
    Bias,
    ClassifierWeight,
    ClassifierBias,
    NormScale,
    NormShift,
    RunningMean,
    RunningVar,
}

impl LayerRole {
    pub fn trainable(self) -> bool {
        !matches!(self, LayerRole::RunningMean | LayerRole::RunningVar)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: LayerRole,
}

impl LayerSpec {
    fn new(name: impl Into<String>, shape: &[usize], role: LayerRole) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            role,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// One permutable hidden dimension: `producers` own the units along an axis,
/// `consumers` read them along another.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenGroup {
    pub width: usize,
    pub producers: Vec<(usize, usize)>,
    pub consumers: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub id: ArchId,
    /// `[channels, height, width]`.
    pub input: [usize; 3],
    /// Classifier rows.
    pub head_width: usize,
    pub head_bias: bool,
    /// Hidden width for `toy_mlp`.
    pub hidden: usize,
    pub layers: Vec<LayerSpec>,
    /// Indices of the layers the generator produces.
    pub generated: Vec<usize>,
}

impl ArchSpec {
    pub fn new(id: ArchId, input: [usize; 3], head_width: usize, hidden: usize, head_bias: bool) -> Self {
        let mut spec = Self {
            id,
            input,
            head_width,
            head_bias,
            hidden,
            layers: Vec::new(),
            generated: Vec::new(),
        };
        spec.layers = spec.build_layers();
        spec.generated = match id {
            ArchId::ToyMlp | ArchId::SmallCnn => (0..spec.layers.len()).collect(),
            ArchId::Resnet20Head => spec
                .layers
                .iter()
                .enumerate()
                .filter(|(_, l)| matches!(l.role, LayerRole::ClassifierWeight | LayerRole::ClassifierBias))
                .map(|(i, _)| i)
                .collect(),
        };
        spec
    }

    pub fn toy_mlp(input: [usize; 3], hidden: usize, head_width: usize) -> Self {
        Self::new(ArchId::ToyMlp, input, head_width, hidden, true)
    }

    pub fn small_cnn(input: [usize; 3], head_width: usize) -> Self {
        Self::new(ArchId::SmallCnn, input, head_width, 0, true)
    }

    pub fn resnet20_head(input: [usize; 3], head_width: usize, head_bias: bool) -> Self {
        Self::new(ArchId::Resnet20Head, input, head_width, 0, head_bias)
    }

    /// Same architecture with a different number of classifier rows.
    pub fn with_head_width(&self, rows: usize) -> Self {
        Self::new(self.id, self.input, rows, self.hidden, self.head_bias)
    }

    fn build_layers(&self) -> Vec<LayerSpec> {
        use LayerRole::*;
        let [c, h, w] = self.input;
        let rows = self.head_width;
        let mut v = Vec::new();
        match self.id {
            ArchId::ToyMlp => {
                v.push(LayerSpec::new("fc1.weight", &[self.hidden, c * h * w], Weight));
                v.push(LayerSpec::new("fc1.bias", &[self.hidden], Bias));
                v.push(LayerSpec::new("head.weight", &[rows, self.hidden], ClassifierWeight));
                if self.head_bias {
                    v.push(LayerSpec::new("head.bias", &[rows], ClassifierBias));
                }
            }
            ArchId::SmallCnn => {
                v.push(LayerSpec::new("conv1.weight", &[16, c, 3, 3], Weight));
                v.push(LayerSpec::new("conv1.bias", &[16], Bias));
                v.push(LayerSpec::new("conv2.weight", &[32, 16, 3, 3], Weight));
                v.push(LayerSpec::new("conv2.bias", &[32], Bias));
                v.push(LayerSpec::new("head.weight", &[rows, 32], ClassifierWeight));
                if self.head_bias {
                    v.push(LayerSpec::new("head.bias", &[rows], ClassifierBias));
                }
            }
            ArchId::Resnet20Head => {
                let bn = |v: &mut Vec<LayerSpec>, name: &str, ch: usize| {
                    v.push(LayerSpec::new(format!("{name}.scale"), &[ch], NormScale));
                    v.push(LayerSpec::new(format!("{name}.shift"), &[ch], NormShift));
                    v.push(LayerSpec::new(format!("{name}.running_mean"), &[ch], RunningMean));
                    v.push(LayerSpec::new(format!("{name}.running_var"), &[ch], RunningVar));
                };
                v.push(LayerSpec::new("conv1.weight", &[16, c, 3, 3], Weight));
                bn(&mut v, "bn1", 16);
                let mut in_ch = 16;
                for (stage, out_ch) in [16usize, 32, 64].into_iter().enumerate() {
                    for block in 0..3 {
                        let p = format!("layer{}.{}", stage + 1, block);
                        v.push(LayerSpec::new(format!("{p}.conv_a.weight"), &[out_ch, in_ch, 3, 3], Weight));
                        bn(&mut v, &format!("{p}.bn_a"), out_ch);
                        v.push(LayerSpec::new(format!("{p}.conv_b.weight"), &[out_ch, out_ch, 3, 3], Weight));
                        bn(&mut v, &format!("{p}.bn_b"), out_ch);
                        in_ch = out_ch;
                    }
                }
                v.push(LayerSpec::new("head.weight", &[rows, 64], ClassifierWeight));
                if self.head_bias {
                    v.push(LayerSpec::new("head.bias", &[rows], ClassifierBias));
                }
            }
        }
        v
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    pub fn classifier_weight(&self) -> usize {
        self.layers
            .iter()
            .position(|l| l.role == LayerRole::ClassifierWeight)
            .expect("every architecture has a classifier")
    }

    pub fn classifier_bias(&self) -> Option<usize> {
        self.layers.iter().position(|l| l.role == LayerRole::ClassifierBias)
    }

    /// Trainable parameter count over all layers.
    pub fn num_params(&self) -> usize {
        self.layers.iter().filter(|l| l.role.trainable()).map(LayerSpec::numel).sum()
    }

    pub fn num_generated(&self) -> usize {
        self.generated.iter().map(|&i| self.layers[i].numel()).sum()
    }

    pub fn feature_dim(&self) -> usize {
        self.layers[self.classifier_weight()].shape[1]
    }

    pub fn input_dim(&self) -> usize {
        self.input.iter().product()
    }

    /// Hidden dimensions inside the generated subset that can be permuted
    /// without changing the network function.
    pub fn hidden_groups(&self) -> Vec<HiddenGroup> {
        let idx = |n: &str| self.layer_index(n).expect("layer exists");
        let head = self.classifier_weight();
        match self.id {
            ArchId::ToyMlp => vec![HiddenGroup {
                width: self.hidden,
                producers: vec![(idx("fc1.weight"), 0), (idx("fc1.bias"), 0)],
                consumers: vec![(head, 1)],
            }],
            ArchId::SmallCnn => vec![
                HiddenGroup {
                    width: 16,
                    producers: vec![(idx("conv1.weight"), 0), (idx("conv1.bias"), 0)],
                    consumers: vec![(idx("conv2.weight"), 1)],
                },
                HiddenGroup {
                    width: 32,
                    producers: vec![(idx("conv2.weight"), 0), (idx("conv2.bias"), 0)],
                    consumers: vec![(head, 1)],
                },
            ],
            ArchId::Resnet20Head => Vec::new(),
        }
    }
}

/// Parameter buffers aligned with an [`ArchSpec`]'s layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub tensors: Vec<Vec<f32>>,
}

impl ParamSet {
    pub fn zeros(arch: &ArchSpec) -> Self {
        Self {
            tensors: arch.layers.iter().map(|l| vec![0.0; l.numel()]).collect(),
        }
    }

    /// Uniform fan-in initialization; norm scales start at one, running
    /// variances at one.
    pub fn init(arch: &ArchSpec, seed: u64) -> Self {
        let mut r = rng::child_rng(seed, "init", 0);
        let mut fan_in = 1usize;
        let tensors = arch
            .layers
            .iter()
            .map(|l| match l.role {
                LayerRole::Weight | LayerRole::ClassifierWeight => {
                    fan_in = l.shape[1..].iter().product();
                    let b = 1.0 / (fan_in as f32).sqrt();
                    (0..l.numel()).map(|_| r.random_range(-b..b)).collect()
                }
                LayerRole::Bias | LayerRole::ClassifierBias => {
                    let b = 1.0 / (fan_in as f32).sqrt();
                    (0..l.numel()).map(|_| r.random_range(-b..b)).collect()
                }
                LayerRole::NormScale | LayerRole::RunningVar => vec![1.0; l.numel()],
                LayerRole::NormShift | LayerRole::RunningMean => vec![0.0; l.numel()],
            })
            .collect();
        Self { tensors }
    }

    pub fn check(&self, arch: &ArchSpec) -> Result<()> {
        if self.tensors.len() != arch.layers.len() {
            return Err(Error::Shape(format!(
                "{} parameter tensors for {} layers",
                self.tensors.len(),
                arch.layers.len()
            )));
        }
        for (t, l) in self.tensors.iter().zip(&arch.layers) {
            if t.len() != l.numel() {
                return Err(Error::Shape(format!(
                    "layer {} has {} values, expected {}",
                    l.name,
                    t.len(),
                    l.numel()
                )));
            }
        }
        Ok(())
    }

    pub fn to_tensors(&self, arch: &ArchSpec, dtype: DType, dev: &Device) -> Result<Vec<Tensor>> {
        self.tensors
            .iter()
            .zip(&arch.layers)
            .map(|(t, l)| Ok(Tensor::from_slice(t, l.shape.as_slice(), dev)?.to_dtype(dtype)?))
            .collect()
    }

    pub fn from_tensors(tensors: &[Tensor]) -> Result<Self> {
        Ok(Self {
            tensors: tensors
                .iter()
                .map(|t| Ok(t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?))
                .collect::<Result<_>>()?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization layers.
    Train,
    Eval,
}

/// Batch statistics observed in training mode, keyed by the running-mean layer.
pub struct NormStats {
    pub running_mean: usize,
    pub mean: Tensor,
    pub var: Tensor,
}

pub struct Forward {
    pub logits: Tensor,
    pub norm_stats: Vec<NormStats>,
}

fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let y = x.matmul(&w.t()?)?;
    Ok(match b {
        Some(b) => y.broadcast_add(b)?,
        None => y,
    })
}

fn conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize) -> Result<Tensor> {
    let y = x.conv2d(w, 1, stride, 1, 1)?;
    Ok(match b {
        Some(b) => y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?,
        None => y,
    })
}

struct NormCtx<'a> {
    params: &'a [Tensor],
    mode: Mode,
    stats: Vec<NormStats>,
}

impl NormCtx<'_> {
    /// Batch norm whose scale sits at layer `first`, followed by shift and running stats.
    fn batch_norm(&mut self, x: &Tensor, first: usize) -> Result<Tensor> {
        let ch = x.dim(1)?;
        let (mean, var) = match self.mode {
            Mode::Train => {
                let mean = x.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
                let centered = x.broadcast_sub(&mean)?;
                let var = centered.sqr()?.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
                self.stats.push(NormStats {
                    running_mean: first + 2,
                    mean: mean.flatten_all()?.detach(),
                    var: var.flatten_all()?.detach(),
                });
                (mean, var)
            }
            Mode::Eval => (
                self.params[first + 2].reshape((1, ch, 1, 1))?,
                self.params[first + 3].reshape((1, ch, 1, 1))?,
            ),
        };
        let xhat = x.broadcast_sub(&mean)?.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        let scale = self.params[first].reshape((1, ch, 1, 1))?;
        let shift = self.params[first + 1].reshape((1, ch, 1, 1))?;
        Ok(xhat.broadcast_mul(&scale)?.broadcast_add(&shift)?)
    }
}

/// Parameter-free residual shortcut: stride-2 subsampling plus zero channel padding.
fn shortcut(x: &Tensor, out_ch: usize, stride: usize) -> Result<Tensor> {
    let in_ch = x.dim(1)?;
    let mut y = x.clone();
    if stride == 2 {
        let (b, c, h, w) = y.dims4()?;
        y = y
            .reshape((b, c, h / 2, 2, w / 2, 2))?
            .narrow(3, 0, 1)?
            .narrow(5, 0, 1)?
            .reshape((b, c, h / 2, w / 2))?;
    }
    if out_ch > in_ch {
        let (b, _, h, w) = y.dims4()?;
        let pad = out_ch - in_ch;
        let zeros = Tensor::zeros((b, pad / 2, h, w), y.dtype(), y.device())?;
        let zeros2 = Tensor::zeros((b, pad - pad / 2, h, w), y.dtype(), y.device())?;
        y = Tensor::cat(&[&zeros, &y, &zeros2], 1)?;
    }
    Ok(y)
}

/// Penultimate features (the classifier input).
pub fn features(arch: &ArchSpec, params: &[Tensor], x: &Tensor, mode: Mode) -> Result<(Tensor, Vec<NormStats>)> {
    let p = |n: &str| -> Result<&Tensor> {
        arch.layer_index(n)
            .map(|i| &params[i])
            .ok_or_else(|| Error::Shape(format!("missing layer {n}")))
    };
    let b = x.dim(0)?;
    let [c, h, w] = arch.input;
    match arch.id {
        ArchId::ToyMlp => {
            let x = x.reshape((b, c * h * w))?;
            Ok((linear(&x, p("fc1.weight")?, Some(p("fc1.bias")?))?.relu()?, Vec::new()))
        }
        ArchId::SmallCnn => {
            let x = x.reshape((b, c, h, w))?;
            let y = conv(&x, p("conv1.weight")?, Some(p("conv1.bias")?), 1)?.relu()?;
            let y = if y.dim(2)? >= 2 { y.max_pool2d(2)? } else { y };
            let y = conv(&y, p("conv2.weight")?, Some(p("conv2.bias")?), 1)?.relu()?;
            Ok((y.mean(D::Minus1)?.mean(D::Minus1)?, Vec::new()))
        }
        ArchId::Resnet20Head => {
            let mut ctx = NormCtx {
                params,
                mode,
                stats: Vec::new(),
            };
            let idx = |n: &str| arch.layer_index(n).expect("layer exists");
            let x = x.reshape((b, c, h, w))?;
            let mut y = conv(&x, p("conv1.weight")?, None, 1)?;
            y = ctx.batch_norm(&y, idx("bn1.scale"))?.relu()?;
            for (stage, out_ch) in [16usize, 32, 64].into_iter().enumerate() {
                for block in 0..3 {
                    let pre = format!("layer{}.{}", stage + 1, block);
                    let stride = if stage > 0 && block == 0 { 2 } else { 1 };
                    let mut z = conv(&y, p(&format!("{pre}.conv_a.weight"))?, None, stride)?;
                    z = ctx.batch_norm(&z, idx(&format!("{pre}.bn_a.scale")))?.relu()?;
                    z = conv(&z, p(&format!("{pre}.conv_b.weight"))?, None, 1)?;
                    z = ctx.batch_norm(&z, idx(&format!("{pre}.bn_b.scale")))?;
                    y = (z + shortcut(&y, out_ch, stride)?)?.relu()?;
                }
            }
            Ok((y.mean(D::Minus1)?.mean(D::Minus1)?, ctx.stats))
        }
    }
}

/// Classifier logits from penultimate features.
pub fn head(arch: &ArchSpec, params: &[Tensor], feats: &Tensor) -> Result<Tensor> {
    let w = &params[arch.classifier_weight()];
    let b = arch.classifier_bias().map(|i| &params[i]);
    linear(feats, w, b)
}

pub fn forward(arch: &ArchSpec, params: &[Tensor], x: &Tensor, mode: Mode) -> Result<Forward> {
    let (f, norm_stats) = features(arch, params, x, mode)?;
    Ok(Forward {
        logits: head(arch, params, &f)?,
        norm_stats,
    })
}

/// Convenience eval-mode logits on host buffers: `[n, head_width]` row-major.
pub fn logits(arch: &ArchSpec, params: &ParamSet, images: &[f32], n: usize) -> Result<Vec<f32>> {
    let dev = Device::Cpu;
    let ts = params.to_tensors(arch, DType::F32, &dev)?;
    let [c, h, w] = arch.input;
    let x = Tensor::from_slice(images, (n, c, h, w), &dev)?;
    let out = forward(arch, &ts, &x, Mode::Eval)?.logits;
    Ok(out.flatten_all()?.to_vec1::<f32>()?)
}
