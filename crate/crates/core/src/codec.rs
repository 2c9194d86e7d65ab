//! Parameter vectors <-> per-layer token chunks, plus the class-order
//! augmentation, classification sequence padding and hidden-unit permutation
//! transforms applied to them.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::arch::{ArchSpec, LayerRole, ParamSet};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: LayerRole,
    pub offset: usize,
    pub len: usize,
}

/// Row `i` of the classifier starts at `weight_offset + i * row_len`; its bias
/// (if any) sits at `bias_offset + i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierLayout {
    pub rows: usize,
    pub row_len: usize,
    pub weight_offset: usize,
    pub bias_offset: Option<usize>,
}

/// A flattened generated-parameter vector with its layer layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatParams {
    pub values: Vec<f32>,
    pub layout: Vec<LayerSlot>,
}

fn build_layout(layers: impl IntoIterator<Item = (String, Vec<usize>, LayerRole)>) -> Vec<LayerSlot> {
    let mut offset = 0;
    layers
        .into_iter()
        .map(|(name, shape, role)| {
            let len = shape.iter().product();
            let slot = LayerSlot {
                name,
                shape,
                role,
                offset,
                len,
            };
            offset += len;
            slot
        })
        .collect()
}

/// Layout of the generated subset of `arch`, in declaration order.
pub fn arch_layout(arch: &ArchSpec) -> Vec<LayerSlot> {
    build_layout(arch.generated.iter().map(|&i| {
        let l = &arch.layers[i];
        (l.name.clone(), l.shape.clone(), l.role)
    }))
}

impl FlatParams {
    pub fn new(values: Vec<f32>, layout: Vec<LayerSlot>) -> Result<Self> {
        let total: usize = layout.iter().map(|s| s.len).sum();
        let mut expect = 0;
        for s in &layout {
            if s.offset != expect || s.len != s.shape.iter().product::<usize>() {
                return Err(Error::Layout(format!("layer {} is not contiguous", s.name)));
            }
            expect += s.len;
        }
        if total != values.len() {
            return Err(Error::Shape(format!(
                "{} values for a layout of {total}",
                values.len()
            )));
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: Vec<LayerSlot>) -> Self {
        let n = layout.iter().map(|s| s.len).sum();
        Self {
            values: vec![0.0; n],
            layout,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn layer(&self, i: usize) -> &[f32] {
        let s = &self.layout[i];
        &self.values[s.offset..s.offset + s.len]
    }

    pub fn slot_index(&self, name: &str) -> Option<usize> {
        self.layout.iter().position(|s| s.name == name)
    }

    pub fn classifier(&self) -> Option<ClassifierLayout> {
        let w = self.layout.iter().find(|s| s.role == LayerRole::ClassifierWeight)?;
        let b = self.layout.iter().find(|s| s.role == LayerRole::ClassifierBias);
        Some(ClassifierLayout {
            rows: w.shape[0],
            row_len: w.shape[1],
            weight_offset: w.offset,
            bias_offset: b.map(|b| b.offset),
        })
    }

    fn layers_owned(&self) -> Vec<(String, Vec<usize>, LayerRole, Vec<f32>)> {
        self.layout
            .iter()
            .enumerate()
            .map(|(i, s)| (s.name.clone(), s.shape.clone(), s.role, self.layer(i).to_vec()))
            .collect()
    }

    fn from_layers(layers: Vec<(String, Vec<usize>, LayerRole, Vec<f32>)>) -> Self {
        let layout = build_layout(layers.iter().map(|(n, s, r, _)| (n.clone(), s.clone(), *r)));
        let values = layers.into_iter().flat_map(|l| l.3).collect();
        Self { values, layout }
    }

    /// Euclidean distance between two vectors of identical layout.
    pub fn distance(&self, other: &FlatParams) -> f32 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f32>()
            .sqrt()
    }
}

/// Flatten the generated layers of `params` into one vector.
pub fn flatten(params: &ParamSet, arch: &ArchSpec) -> Result<FlatParams> {
    params.check(arch)?;
    let layout = arch_layout(arch);
    let values = arch
        .generated
        .iter()
        .flat_map(|&i| params.tensors[i].iter().copied())
        .collect();
    FlatParams::new(values, layout)
}

/// Inverse of [`flatten`]. Layers outside the generated subset come from
/// `base`, or are zero when no base is given.
pub fn unflatten(flat: &FlatParams, arch: &ArchSpec, base: Option<&ParamSet>) -> Result<ParamSet> {
    let layout = arch_layout(arch);
    if flat.layout != layout {
        return Err(Error::Layout("flat layout does not match the architecture".into()));
    }
    if flat.values.len() != arch.num_generated() {
        return Err(Error::Shape(format!(
            "{} values for {} generated parameters",
            flat.values.len(),
            arch.num_generated()
        )));
    }
    let mut out = match base {
        Some(b) => {
            b.check(arch)?;
            b.clone()
        }
        None => ParamSet::zeros(arch),
    };
    for (slot_i, &layer_i) in arch.generated.iter().enumerate() {
        out.tensors[layer_i] = flat.layer(slot_i).to_vec();
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenMeta {
    pub layer: usize,
    pub chunk: usize,
    /// Leading entries that carry parameters; the rest is zero padding.
    pub valid: usize,
}

/// Per-layer chunking of a parameter vector into width-`chunk_size` tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSeq {
    pub chunk_size: usize,
    pub tokens: Vec<Vec<f32>>,
    pub meta: Vec<TokenMeta>,
    pub layout: Vec<LayerSlot>,
}

/// Token metadata for a layout: `ceil(N / M)` tokens per layer of `N` values.
pub fn token_meta(layout: &[LayerSlot], chunk_size: usize) -> Vec<TokenMeta> {
    let mut meta = Vec::new();
    for (li, s) in layout.iter().enumerate() {
        let n_tok = s.len.div_ceil(chunk_size).max(1);
        for k in 0..n_tok {
            let valid = (s.len - k * chunk_size).min(chunk_size);
            meta.push(TokenMeta {
                layer: li,
                chunk: k,
                valid,
            });
        }
    }
    meta
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Concatenated tokens, `len * chunk_size` values.
    pub fn to_dense(&self) -> Vec<f32> {
        self.tokens.iter().flatten().copied().collect()
    }

    /// 1.0 where a dense entry carries a parameter.
    pub fn valid_mask(&self) -> Vec<f32> {
        dense_valid_mask(&self.meta, self.chunk_size)
    }

    /// Rebuild from dense values using this sequence's metadata.
    pub fn with_dense(&self, dense: &[f32]) -> Result<Self> {
        if dense.len() != self.tokens.len() * self.chunk_size {
            return Err(Error::Layout("dense token buffer has the wrong size".into()));
        }
        Ok(Self {
            chunk_size: self.chunk_size,
            tokens: dense.chunks(self.chunk_size).map(<[f32]>::to_vec).collect(),
            meta: self.meta.clone(),
            layout: self.layout.clone(),
        })
    }
}

pub fn dense_valid_mask(meta: &[TokenMeta], chunk_size: usize) -> Vec<f32> {
    meta.iter()
        .flat_map(|m| (0..chunk_size).map(move |i| if i < m.valid { 1.0 } else { 0.0 }))
        .collect()
}

pub fn tokenize(flat: &FlatParams, chunk_size: usize) -> Result<TokenSeq> {
    if chunk_size == 0 {
        return Err(Error::InvalidArgument("chunk size must be at least 1".into()));
    }
    let meta = token_meta(&flat.layout, chunk_size);
    let tokens = meta
        .iter()
        .map(|m| {
            let s = &flat.layout[m.layer];
            let start = s.offset + m.chunk * chunk_size;
            let mut t = flat.values[start..start + m.valid].to_vec();
            t.resize(chunk_size, 0.0);
            t
        })
        .collect();
    Ok(TokenSeq {
        chunk_size,
        tokens,
        meta,
        layout: flat.layout.clone(),
    })
}

pub fn detokenize(seq: &TokenSeq) -> Result<FlatParams> {
    let m = seq.chunk_size;
    if seq.meta.len() != seq.tokens.len() {
        return Err(Error::Layout("token and metadata counts differ".into()));
    }
    if seq.meta != token_meta(&seq.layout, m) {
        return Err(Error::Layout("token metadata inconsistent with layout".into()));
    }
    let mut values = Vec::with_capacity(seq.layout.iter().map(|s| s.len).sum());
    for (t, meta) in seq.tokens.iter().zip(&seq.meta) {
        if t.len() != m {
            return Err(Error::Layout(format!("token of width {} in a width-{m} sequence", t.len())));
        }
        values.extend_from_slice(&t[..meta.valid]);
    }
    FlatParams::new(values, seq.layout.clone())
}

/// Reorder classifier rows (and biases): new row `i` is old row `perm[i]`.
pub fn permute_rows(flat: &FlatParams, perm: &[usize]) -> Result<FlatParams> {
    let cl = flat
        .classifier()
        .ok_or_else(|| Error::Layout("parameters have no classifier".into()))?;
    check_perm(perm, cl.rows)?;
    let mut out = flat.clone();
    for (i, &p) in perm.iter().enumerate() {
        let dst = cl.weight_offset + i * cl.row_len;
        let src = cl.weight_offset + p * cl.row_len;
        out.values[dst..dst + cl.row_len].copy_from_slice(&flat.values[src..src + cl.row_len]);
        if let Some(b) = cl.bias_offset {
            out.values[b + i] = flat.values[b + p];
        }
    }
    Ok(out)
}

fn check_perm(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n {
        return Err(Error::InvalidArgument(format!("permutation of length {} for {n} items", perm.len())));
    }
    for &p in perm {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(Error::InvalidArgument("not a permutation".into()));
        }
    }
    Ok(())
}

pub fn random_permutation(n: usize, r: &mut rng::Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(r);
    p
}

/// Apply one permutation jointly to the prompt list and the classifier rows.
pub fn classifier_augment_with<T: Clone>(
    flat: &FlatParams,
    prompt: &[T],
    perm: &[usize],
) -> Result<(FlatParams, Vec<T>)> {
    let cl = flat
        .classifier()
        .ok_or_else(|| Error::Layout("parameters have no classifier".into()))?;
    if prompt.len() != cl.rows {
        return Err(Error::InvalidArgument(format!(
            "prompt has {} entries but the classifier has {} rows",
            prompt.len(),
            cl.rows
        )));
    }
    let theta = permute_rows(flat, perm)?;
    let prompt = perm.iter().map(|&p| prompt[p].clone()).collect();
    Ok((theta, prompt))
}

/// Random joint class-order permutation of prompt and classifier.
pub fn classifier_augment<T: Clone>(
    flat: &FlatParams,
    prompt: &[T],
    seed: u64,
) -> Result<(FlatParams, Vec<T>, Vec<usize>)> {
    let mut r = rng::child_rng(seed, "classifier_augment", 0);
    let perm = random_permutation(prompt.len(), &mut r);
    let (theta, prompt) = classifier_augment_with(flat, prompt, &perm)?;
    Ok((theta, prompt, perm))
}

fn resize_classifier(flat: &FlatParams, rows: usize) -> Result<FlatParams> {
    let cl = flat
        .classifier()
        .ok_or_else(|| Error::Layout("parameters have no classifier".into()))?;
    let layers = flat
        .layers_owned()
        .into_iter()
        .map(|(name, mut shape, role, mut data)| {
            match role {
                LayerRole::ClassifierWeight => {
                    shape[0] = rows;
                    data.resize(rows * cl.row_len, 0.0);
                }
                LayerRole::ClassifierBias => {
                    shape[0] = rows;
                    data.resize(rows, 0.0);
                }
                _ => {}
            }
            (name, shape, role, data)
        })
        .collect();
    Ok(FlatParams::from_layers(layers))
}

/// Extend a `c`-row task to `c_max` rows: the prompt gets pad entries and the
/// extra classifier rows (and biases) are zero. Returns the real-position mask.
pub fn pad_task<T: Clone>(
    flat: &FlatParams,
    prompt: &[T],
    pad: T,
    c_max: usize,
) -> Result<(FlatParams, Vec<T>, Vec<bool>)> {
    let c = prompt.len();
    if c > c_max {
        return Err(Error::InvalidArgument(format!("{c} classes exceed the maximum {c_max}")));
    }
    let rows = flat.classifier().map(|cl| cl.rows);
    if rows != Some(c) {
        return Err(Error::InvalidArgument(format!(
            "prompt has {c} entries but the classifier has {rows:?} rows"
        )));
    }
    let theta = resize_classifier(flat, c_max)?;
    let mut p = prompt.to_vec();
    p.resize(c_max, pad);
    let mask = (0..c_max).map(|i| i < c).collect();
    Ok((theta, p, mask))
}

/// Keep the first `c` classifier rows.
pub fn unpad(flat: &FlatParams, c: usize) -> Result<FlatParams> {
    let rows = flat
        .classifier()
        .ok_or_else(|| Error::Layout("parameters have no classifier".into()))?
        .rows;
    if c > rows || c == 0 {
        return Err(Error::InvalidArgument(format!("cannot keep {c} of {rows} rows")));
    }
    resize_classifier(flat, c)
}

fn permute_axis(data: &[f32], shape: &[usize], axis: usize, perm: &[usize]) -> Vec<f32> {
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for (i, &p) in perm.iter().enumerate() {
            let dst = (o * n + i) * inner;
            let src = (o * n + p) * inner;
            out[dst..dst + inner].copy_from_slice(&data[src..src + inner]);
        }
    }
    out
}

/// Permute hidden units with explicit permutations, one per hidden group.
pub fn permute_neurons_with(flat: &FlatParams, arch: &ArchSpec, perms: &[Vec<usize>]) -> Result<FlatParams> {
    let groups = arch.hidden_groups();
    if groups.is_empty() {
        return Err(Error::Unsupported(format!(
            "{:?} has no hidden layer in its generated parameters",
            arch.id
        )));
    }
    if perms.len() != groups.len() {
        return Err(Error::InvalidArgument(format!(
            "{} permutations for {} hidden groups",
            perms.len(),
            groups.len()
        )));
    }
    let mut out = flat.clone();
    for (g, perm) in groups.iter().zip(perms) {
        check_perm(perm, g.width)?;
        for &(layer, axis) in g.producers.iter().chain(&g.consumers) {
            let name = &arch.layers[layer].name;
            let si = out
                .slot_index(name)
                .ok_or_else(|| Error::Layout(format!("layer {name} missing from parameters")))?;
            let s = out.layout[si].clone();
            let permuted = permute_axis(out.layer(si), &s.shape, axis, perm);
            out.values[s.offset..s.offset + s.len].copy_from_slice(&permuted);
        }
    }
    Ok(out)
}

/// Function-preserving random permutation of every hidden group.
pub fn permute_neurons(flat: &FlatParams, arch: &ArchSpec, seed: u64) -> Result<FlatParams> {
    let mut r = rng::child_rng(seed, "permute_neurons", 0);
    let perms: Vec<Vec<usize>> = arch
        .hidden_groups()
        .iter()
        .map(|g| random_permutation(g.width, &mut r))
        .collect();
    permute_neurons_with(flat, arch, &perms)
}
