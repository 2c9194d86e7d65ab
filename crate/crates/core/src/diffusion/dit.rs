//! Transformer denoiser over parameter tokens conditioned on prompt tokens.
//!
//! Sequence layout: `[timestep, condition_0 .. condition_{c_max-1},
//! param_0 .. param_{P-1}]`. Every token attends to every other; only the
//! parameter tokens have output heads.

use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::schedule::timestep_embed;
use crate::codec::{self, LayerSlot, TokenMeta};
use crate::encoder::PromptSeq;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiTConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    /// Parameter values per token.
    pub chunk_size: usize,
    /// Condition slots.
    pub c_max: usize,
    /// Width of the prompt embeddings.
    pub embed_dim: usize,
    pub mlp_ratio: usize,
    /// Exclude pad condition slots from attention.
    pub mask_padding: bool,
}

impl Default for DiTConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            layers: 4,
            heads: 4,
            chunk_size: 64,
            c_max: 5,
            embed_dim: 64,
            mlp_ratio: 4,
            mask_padding: false,
        }
    }
}

impl DiTConfig {
    /// The full-size configuration used for the 10-way CIFAR-scale setting.
    pub fn large() -> Self {
        Self {
            hidden: 2048,
            layers: 12,
            heads: 16,
            chunk_size: 576,
            c_max: 10,
            embed_dim: 512,
            mlp_ratio: 4,
            mask_padding: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.hidden == 0 || !self.hidden.is_multiple_of(2) {
            return bad("hidden size must be even and positive");
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return bad("hidden size must be divisible by the head count");
        }
        if self.chunk_size == 0 || self.c_max == 0 || self.embed_dim == 0 || self.mlp_ratio == 0 {
            return bad("chunk size, c_max, embedding width and MLP ratio must be positive");
        }
        Ok(())
    }
}

struct Block {
    ln1: (usize, usize),
    qkv: (usize, usize),
    proj: (usize, usize),
    ln2: (usize, usize),
    fc: (usize, usize),
    fc2: (usize, usize),
}

struct Slots {
    tok_in: (usize, usize),
    cond_in: (usize, usize),
    t1: (usize, usize),
    t2: (usize, usize),
    pos: usize,
    blocks: Vec<Block>,
    ln_f: (usize, usize),
    tok_out: (usize, usize),
}

/// Model inputs for one batch, already on the device in the model dtype.
pub struct DiTInput {
    /// `[B, P, M]` noised parameter tokens.
    pub x: Tensor,
    /// `[B, c_max, D_e]`.
    pub cond: Tensor,
    /// `[B, 1, 1, T]` additive attention bias, when padding is masked.
    pub key_bias: Option<Tensor>,
    /// `[B, H]` timestep features.
    pub temb: Tensor,
}

pub struct DiT {
    pub config: DiTConfig,
    pub layout: Vec<LayerSlot>,
    meta: Vec<TokenMeta>,
    dtype: DType,
    names: Vec<String>,
    vars: Vec<Var>,
    slots: Slots,
    valid: Tensor,
}

struct Builder<'a> {
    dtype: DType,
    r: &'a mut rng::Rng,
    names: Vec<String>,
    vars: Vec<Var>,
}

impl Builder<'_> {
    fn add(&mut self, name: &str, shape: &[usize], std: f64, fill: f64) -> Result<usize> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = if std > 0.0 {
            let dist = Normal::new(0.0, std).expect("positive std");
            (0..n).map(|_| dist.sample(self.r)).collect()
        } else {
            vec![fill; n]
        };
        let t = Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        self.names.push(name.to_string());
        self.vars.push(Var::from_tensor(&t)?);
        Ok(self.vars.len() - 1)
    }

    fn linear(&mut self, name: &str, shape_w: &[usize], std: f64) -> Result<(usize, usize)> {
        let mut shape_b = shape_w.to_vec();
        let out = shape_b.pop().expect("weight has an output axis");
        shape_b.pop();
        shape_b.push(out);
        Ok((self.add(&format!("{name}.weight"), shape_w, std, 0.0)?, self.add(&format!("{name}.bias"), &shape_b, 0.0, 0.0)?))
    }

    fn norm(&mut self, name: &str, h: usize) -> Result<(usize, usize)> {
        Ok((self.add(&format!("{name}.gain"), &[h], 0.0, 1.0)?, self.add(&format!("{name}.shift"), &[h], 0.0, 0.0)?))
    }
}

fn lin(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let (inp, out) = w.dims2()?;
    let rows = x.elem_count() / inp;
    let y = x.reshape((rows, inp))?.matmul(w)?.broadcast_add(b)?;
    let mut od = dims;
    *od.last_mut().expect("nonempty shape") = out;
    Ok(y.reshape(od)?)
}

fn layer_norm(x: &Tensor, g: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let xc = x.broadcast_sub(&mean)?;
    let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
    let xn = xc.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
    Ok(xn.broadcast_mul(g)?.broadcast_add(b)?)
}

/// `[B, N, K] x [N, K, O] + [N, O] -> [B, N, O]`: a separate linear map per position.
fn per_position(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let y = x.transpose(0, 1)?.contiguous()?.matmul(w)?;
    let y = y.broadcast_add(&b.unsqueeze(1)?)?;
    Ok(y.transpose(0, 1)?.contiguous()?)
}

impl DiT {
    /// Fresh model for parameter vectors with the given layout.
    pub fn new(config: DiTConfig, layout: Vec<LayerSlot>, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let meta = codec::token_meta(&layout, config.chunk_size);
        let p = meta.len();
        let h = config.hidden;
        let m = config.chunk_size;
        let c = config.c_max;
        let t = 1 + c + p;
        let mut r = rng::child_rng(seed, "dit_init", 0);
        let mut b = Builder {
            dtype,
            r: &mut r,
            names: Vec::new(),
            vars: Vec::new(),
        };
        let std = 0.02;
        let resid_std = std / (2.0 * config.layers as f64).sqrt();
        let tok_in = b.linear("tok_in", &[p, m, h], std)?;
        let cond_in = b.linear("cond_in", &[c, config.embed_dim, h], std)?;
        let t1 = b.linear("time.fc1", &[h, h], std)?;
        let t2 = b.linear("time.fc2", &[h, h], std)?;
        let pos = b.add("pos", &[t, h], std, 0.0)?;
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let pre = format!("block{l}");
            blocks.push(Block {
                ln1: b.norm(&format!("{pre}.ln1"), h)?,
                qkv: b.linear(&format!("{pre}.qkv"), &[h, 3 * h], std)?,
                proj: b.linear(&format!("{pre}.proj"), &[h, h], resid_std)?,
                ln2: b.norm(&format!("{pre}.ln2"), h)?,
                fc: b.linear(&format!("{pre}.fc"), &[h, config.mlp_ratio * h], std)?,
                fc2: b.linear(&format!("{pre}.fc2"), &[config.mlp_ratio * h, h], resid_std)?,
            });
        }
        let ln_f = b.norm("ln_f", h)?;
        let tok_out = b.linear("tok_out", &[p, h, m], std)?;
        let slots = Slots {
            tok_in,
            cond_in,
            t1,
            t2,
            pos,
            blocks,
            ln_f,
            tok_out,
        };
        let (names, vars) = (b.names, b.vars);
        let valid = Tensor::from_vec(codec::dense_valid_mask(&meta, m), (1, p, m), &Device::Cpu)?.to_dtype(dtype)?;
        Ok(Self {
            config,
            layout,
            meta,
            dtype,
            names,
            vars,
            slots,
            valid,
        })
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn num_tokens(&self) -> usize {
        self.meta.len()
    }

    pub fn token_meta(&self) -> &[TokenMeta] {
        &self.meta
    }

    /// Values per sample in the dense token buffer.
    pub fn dense_len(&self) -> usize {
        self.meta.len() * self.config.chunk_size
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn var_names(&self) -> &[String] {
        &self.names
    }

    pub fn num_params(&self) -> usize {
        self.vars.iter().map(|v| v.elem_count()).sum()
    }

    /// `[1, P, M]` mask of token entries that carry parameters.
    pub fn valid_mask(&self) -> &Tensor {
        &self.valid
    }

    fn v(&self, i: usize) -> &Tensor {
        self.vars[i].as_tensor()
    }

    /// Assemble device inputs from host buffers: `xs` holds `B` dense token
    /// buffers back to back, one prompt and one step per sample.
    pub fn input(&self, prompts: &[&PromptSeq], xs: &[f32], steps: &[usize]) -> Result<DiTInput> {
        let bsz = prompts.len();
        let (p, m, c, de, h) = (
            self.num_tokens(),
            self.config.chunk_size,
            self.config.c_max,
            self.config.embed_dim,
            self.config.hidden,
        );
        if steps.len() != bsz || xs.len() != bsz * p * m {
            return Err(Error::Layout(format!(
                "batch of {bsz} prompts with {} steps and {} token values (expected {} per sample)",
                steps.len(),
                xs.len(),
                p * m
            )));
        }
        let mut cond = Vec::with_capacity(bsz * c * de);
        let mut bias = Vec::with_capacity(bsz * (1 + c + p));
        for pr in prompts {
            if pr.len() != c || pr.tokens.iter().any(|t| t.len() != de) {
                return Err(Error::Layout(format!(
                    "prompt must have {c} tokens of width {de}, got {}",
                    pr.len()
                )));
            }
            for t in &pr.tokens {
                cond.extend_from_slice(t);
            }
            bias.push(0.0f32);
            bias.extend(pr.mask.iter().map(|&on| if on { 0.0 } else { -1e9 }));
            bias.extend(std::iter::repeat_n(0.0, p));
        }
        let temb: Vec<f32> = steps.iter().flat_map(|&j| timestep_embed(j, h)).collect();
        let dev = Device::Cpu;
        let key_bias = if self.config.mask_padding {
            Some(Tensor::from_vec(bias, (bsz, 1, 1, 1 + c + p), &dev)?.to_dtype(self.dtype)?)
        } else {
            None
        };
        Ok(DiTInput {
            x: Tensor::from_slice(xs, (bsz, p, m), &dev)?.to_dtype(self.dtype)?,
            cond: Tensor::from_vec(cond, (bsz, c, de), &dev)?.to_dtype(self.dtype)?,
            key_bias,
            temb: Tensor::from_vec(temb, (bsz, h), &dev)?.to_dtype(self.dtype)?,
        })
    }

    /// Predicted clean tokens, `[B, P, M]`.
    pub fn forward(&self, input: &DiTInput) -> Result<Tensor> {
        let s = &self.slots;
        let (bsz, p, m) = input.x.dims3()?;
        if p != self.num_tokens() || m != self.config.chunk_size {
            return Err(Error::Layout(format!(
                "expected {} tokens of width {}, got {p} of width {m}",
                self.num_tokens(),
                self.config.chunk_size
            )));
        }
        let h = self.config.hidden;
        let c = self.config.c_max;
        let nh = self.config.heads;
        let hd = h / nh;
        let t = 1 + c + p;

        let xp = per_position(&input.x, self.v(s.tok_in.0), self.v(s.tok_in.1))?;
        let xc = per_position(&input.cond, self.v(s.cond_in.0), self.v(s.cond_in.1))?;
        let te = lin(&input.temb, self.v(s.t1.0), self.v(s.t1.1))?.silu()?;
        let te = lin(&te, self.v(s.t2.0), self.v(s.t2.1))?.unsqueeze(1)?;
        let mut x = Tensor::cat(&[&te, &xc, &xp], 1)?.broadcast_add(self.v(s.pos))?;

        let scale = 1.0 / (hd as f64).sqrt();
        for blk in &s.blocks {
            let a = layer_norm(&x, self.v(blk.ln1.0), self.v(blk.ln1.1))?;
            let qkv = lin(&a, self.v(blk.qkv.0), self.v(blk.qkv.1))?.reshape((bsz, t, 3, nh, hd))?;
            let part = |i: usize| -> Result<Tensor> {
                Ok(qkv.narrow(2, i, 1)?.squeeze(2)?.transpose(1, 2)?.contiguous()?)
            };
            let (q, k, v) = (part(0)?, part(1)?, part(2)?);
            let mut att = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
            if let Some(bias) = &input.key_bias {
                att = att.broadcast_add(bias)?;
            }
            let att = candle_nn::ops::softmax(&att, D::Minus1)?;
            let y = att.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((bsz, t, h))?;
            x = (x + lin(&y, self.v(blk.proj.0), self.v(blk.proj.1))?)?;
            let a = layer_norm(&x, self.v(blk.ln2.0), self.v(blk.ln2.1))?;
            let f = lin(&a, self.v(blk.fc.0), self.v(blk.fc.1))?.gelu()?;
            x = (x + lin(&f, self.v(blk.fc2.0), self.v(blk.fc2.1))?)?;
        }
        let x = layer_norm(&x, self.v(s.ln_f.0), self.v(s.ln_f.1))?;
        let xp = x.narrow(1, 1 + c, p)?;
        per_position(&xp, self.v(s.tok_out.0), self.v(s.tok_out.1))
    }

    /// Mean squared error over parameter-carrying entries.
    pub fn loss(&self, input: &DiTInput, target: &Tensor) -> Result<Tensor> {
        let pred = self.forward(input)?;
        masked_mse(&pred, target, &self.valid)
    }

    /// Write config, layout and weights to a checkpoint file.
    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "dit",
            "config": self.config,
            "layout": self.layout,
            "names": self.names,
            "shapes": self.vars.iter().map(|v| v.dims().to_vec()).collect::<Vec<_>>(),
            "extra": extra,
        });
        let tensors = self
            .vars
            .iter()
            .map(|v| Ok(v.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?))
            .collect::<Result<Vec<_>>>()?;
        crate::checkpoint::write(path, &meta, &tensors)
    }

    /// Load a checkpoint; returns the model and the `extra` header field.
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let (meta, tensors) = crate::checkpoint::read(path)?;
        if meta["kind"] != "dit" {
            return Err(Error::Serde(format!("{} is not a denoiser checkpoint", path.display())));
        }
        let config: DiTConfig = serde_json::from_value(meta["config"].clone())?;
        let layout: Vec<LayerSlot> = serde_json::from_value(meta["layout"].clone())?;
        let names: Vec<String> = serde_json::from_value(meta["names"].clone())?;
        let model = Self::new(config, layout, 0, DType::F32)?;
        if names != model.names || tensors.len() != model.vars.len() {
            return Err(Error::Serde("checkpoint parameters do not match the model".into()));
        }
        for (v, data) in model.vars.iter().zip(tensors) {
            if data.len() != v.elem_count() {
                return Err(Error::Serde("checkpoint tensor size mismatch".into()));
            }
            v.set(&Tensor::from_vec(data, v.dims(), &Device::Cpu)?)?;
        }
        Ok((model, meta["extra"].clone()))
    }
}

pub fn masked_mse(pred: &Tensor, target: &Tensor, valid: &Tensor) -> Result<Tensor> {
    let bsz = pred.dim(0)?;
    let n = valid.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    let diff = (pred - target)?.broadcast_mul(valid)?;
    Ok((diff.sqr()?.sum_all()? / (bsz as f64 * n))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::ArchSpec;

    fn small() -> DiT {
        let arch = ArchSpec::toy_mlp([1, 2, 2], 3, 2);
        let cfg = DiTConfig {
            hidden: 16,
            layers: 2,
            heads: 2,
            chunk_size: 4,
            c_max: 3,
            embed_dim: 5,
            mlp_ratio: 2,
            mask_padding: true,
        };
        DiT::new(cfg, codec::arch_layout(&arch.with_head_width(3)), 1, DType::F32).unwrap()
    }

    fn prompt(fill: f32) -> PromptSeq {
        PromptSeq {
            tokens: vec![vec![0.1; 5], vec![0.2; 5], vec![fill; 5]],
            mask: vec![true, true, false],
        }
    }

    #[test]
    fn shapes_and_batch_consistency() {
        let m = small();
        let n = m.dense_len();
        let xs: Vec<f32> = (0..n).map(|i| (i as f32).sin()).collect();
        let both: Vec<f32> = xs.iter().chain(&xs).copied().collect();
        let p = prompt(0.3);
        let out = m.forward(&m.input(&[&p, &p], &both, &[5, 5]).unwrap()).unwrap();
        assert_eq!(out.dims(), &[2, m.num_tokens(), 4]);
        let v = out.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|x| x.is_finite()));
        assert_eq!(v[..n], v[n..]);
    }

    #[test]
    fn masked_slots_do_not_matter() {
        let m = small();
        let xs = vec![0.5f32; m.dense_len()];
        let a = m.forward(&m.input(&[&prompt(0.3)], &xs, &[9]).unwrap()).unwrap();
        let b = m.forward(&m.input(&[&prompt(-4.0)], &xs, &[9]).unwrap()).unwrap();
        let d = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn layout_mismatch_is_rejected() {
        let m = small();
        assert!(m.input(&[&prompt(0.0)], &[0.0; 3], &[1]).is_err());
        let short = PromptSeq {
            tokens: vec![vec![0.0; 5]],
            mask: vec![true],
        };
        assert!(m.input(&[&short], &vec![0.0; m.dense_len()], &[1]).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let m = small();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dit.ckpt");
        m.save(&path, serde_json::json!({"iteration": 7})).unwrap();
        let (back, extra) = DiT::load(&path).unwrap();
        assert_eq!(extra["iteration"], 7);
        let xs = vec![0.25f32; m.dense_len()];
        let p = prompt(0.0);
        let a = m.forward(&m.input(&[&p], &xs, &[3]).unwrap()).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = back.forward(&back.input(&[&p], &xs, &[3]).unwrap()).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
    }
}
