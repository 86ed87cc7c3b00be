//! Vision-transformer building blocks: patch embedding, pre-norm blocks and
//! the split of a depth-`L` encoder into a local and a global stage.
//!
//! Parameters live in a flat [`ParamStore`]; modules hold [`ParamId`]s into
//! it. A forward pass first binds the store onto a tape ([`ParamStore::bind`])
//! and then threads the resulting [`Bound`] handles through the modules.

use crate::error::{Error, Result};
use crate::kv::{parse_flag, KvMap};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

pub const LAYER_NORM_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Pixels per side of the square input.
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    /// Fraction of the blocks that form the per-view local encoder.
    pub local_fraction: f64,
    /// One local encoder applied to both views, or twin copies.
    pub shared_local: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            channels: 1,
            dim: 32,
            depth: 4,
            heads: 4,
            mlp_ratio: 2.0,
            local_fraction: 0.75,
            shared_local: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("dim", self.dim),
            ("depth", self.depth),
            ("heads", self.heads),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!("dim {} is not divisible by {} heads", self.dim, self.heads)));
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return Err(Error::Config(format!("mlp ratio {} must be positive", self.mlp_ratio)));
        }
        if !(self.local_fraction > 0.0 && self.local_fraction < 1.0) {
            return Err(Error::Config(format!("local fraction {} must lie in (0, 1)", self.local_fraction)));
        }
        let local = self.local_blocks();
        if local < 1 || local >= self.depth {
            return Err(Error::Config(format!(
                "local fraction {} of depth {} gives {local} local blocks; need 1..={}",
                self.local_fraction,
                self.depth,
                self.depth.saturating_sub(1)
            )));
        }
        Ok(())
    }

    /// Spatial tokens per view, `N`.
    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// `N + 1`.
    pub fn tokens_per_view(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.mlp_ratio * self.dim as f64).round() as usize
    }

    pub fn local_blocks(&self) -> usize {
        (self.local_fraction * self.depth as f64).round() as usize
    }

    pub fn global_blocks(&self) -> usize {
        self.depth - self.local_blocks()
    }

    /// Parameters of one transformer block.
    pub fn block_params(&self) -> usize {
        let (d, m) = (self.dim, self.mlp_hidden());
        2 * d // norm1
            + d * 3 * d + 3 * d // qkv
            + d * d + d // attention output projection
            + 2 * d // norm2
            + d * m + m // fc1
            + m * d + d // fc2
    }

    /// Parameters of the patch embedding (projection, CLS token, positions).
    pub fn embed_params(&self) -> usize {
        self.patch_dim() * self.dim + self.dim + self.dim + self.tokens_per_view() * self.dim
    }

    /// Total parameters of a two-view model: embedding + `L` blocks + head
    /// (norm and `D -> 1` linear), with the local part doubled for twin encoders.
    pub fn param_count(&self) -> usize {
        let local = self.embed_params() + self.local_blocks() * self.block_params();
        let copies = if self.shared_local { 1 } else { 2 };
        copies * local + self.global_blocks() * self.block_params() + 2 * self.dim + self.dim + 1
    }

    pub fn to_kv(&self, prefix: &str) -> KvMap {
        let mut kv = KvMap::new();
        kv.set(format!("{prefix}image_size"), self.image_size);
        kv.set(format!("{prefix}patch_size"), self.patch_size);
        kv.set(format!("{prefix}channels"), self.channels);
        kv.set(format!("{prefix}dim"), self.dim);
        kv.set(format!("{prefix}depth"), self.depth);
        kv.set(format!("{prefix}heads"), self.heads);
        kv.set(format!("{prefix}mlp_ratio"), self.mlp_ratio);
        kv.set(format!("{prefix}local_fraction"), self.local_fraction);
        kv.set(format!("{prefix}shared_local"), self.shared_local);
        kv
    }

    /// Reads `prefix`-keyed fields, keeping current values for absent keys.
    pub fn update_from_kv(&mut self, kv: &KvMap, prefix: &str) -> Result<()> {
        let key = |k: &str| format!("{prefix}{k}");
        kv.update(&key("image_size"), &mut self.image_size)?;
        kv.update(&key("patch_size"), &mut self.patch_size)?;
        kv.update(&key("channels"), &mut self.channels)?;
        kv.update(&key("dim"), &mut self.dim)?;
        kv.update(&key("depth"), &mut self.depth)?;
        kv.update(&key("heads"), &mut self.heads)?;
        kv.update(&key("mlp_ratio"), &mut self.mlp_ratio)?;
        kv.update(&key("local_fraction"), &mut self.local_fraction)?;
        if let Some(v) = kv.get(&key("shared_local")) {
            self.shared_local = parse_flag(v)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// Whether weight decay applies.
    pub decay: bool,
}

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

/// Tape handles of a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

fn truncated_normal<T: Scalar, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break T::of(v);
        }
    })
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, decay: bool) -> ParamId {
        self.params.push(Param { name: name.into(), tensor, decay });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Records every parameter as a leaf: tracked for training, constant
    /// for inference.
    pub fn bind(&self, tape: &mut Tape<T>, tracked: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| if tracked { tape.param(&p.tensor) } else { tape.constant(p.tensor.clone()) })
            .collect();
        Bound { vars }
    }

    /// Copies the gradients of the last backward pass into the parameters.
    pub fn collect_grads(&mut self, tape: &Tape<T>, bound: &Bound) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            let g = tape.grad(v).map(|t| t.into_values());
            p.tensor.set_grad(g)?;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.take_grad();
        }
    }

    pub(crate) fn init_weight<R: Rng + ?Sized>(&mut self, name: String, shape: &[usize], rng: &mut R) -> ParamId {
        let t = truncated_normal(shape, INIT_STD, rng);
        self.add(name, t, true)
    }
}

/// Token matrix of a batch of views, shape `[B, T, D]`; row 0 of every
/// sample is the CLS token and rows `1..T` are spatial tokens in row-major
/// patch order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenSet {
    pub tokens: Var,
}

impl TokenSet {
    pub fn new<T: Scalar>(tape: &Tape<T>, tokens: Var) -> Result<Self> {
        if tape.shape(tokens).len() != 3 {
            return Err(Error::dim(format!("token sets are [B, T, D], got {:?}", tape.shape(tokens))));
        }
        Ok(Self { tokens })
    }

    pub fn batch<T: Scalar>(&self, tape: &Tape<T>) -> usize {
        tape.shape(self.tokens)[0]
    }

    pub fn count<T: Scalar>(&self, tape: &Tape<T>) -> usize {
        tape.shape(self.tokens)[1]
    }

    pub fn dim<T: Scalar>(&self, tape: &Tape<T>) -> usize {
        tape.shape(self.tokens)[2]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.init_weight(format!("{name}.weight"), &[input, output], rng);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[output]), false);
        Self { weight, bias }
    }

    /// Applies `x W + b` over the last axis of `x`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        let input = *shape.last().ok_or_else(|| Error::dim("linear of a scalar"))?;
        let rows = shape.iter().product::<usize>() / input;
        let flat = tape.reshape(x, &[rows, input])?;
        let y = tape.matmul(flat, bound.var(self.weight))?;
        let y = tape.add_broadcast(y, bound.var(self.bias))?;
        let output = tape.shape(y)[1];
        let mut out_shape = shape;
        *out_shape.last_mut().expect("rank >= 1") = output;
        tape.reshape(y, &out_shape)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::filled(&[dim], T::one()), false);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[dim]), false);
        Self { gain, bias }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, bound.var(self.gain), bound.var(self.bias), T::of(LAYER_NORM_EPS))
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub heads: usize,
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Self {
        let d = cfg.dim;
        Self {
            heads: cfg.heads,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
            qkv: Linear::new(store, &format!("{name}.qkv"), d, 3 * d, rng),
            proj: Linear::new(store, &format!("{name}.proj"), d, d, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
            fc1: Linear::new(store, &format!("{name}.fc1"), d, cfg.mlp_hidden(), rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), cfg.mlp_hidden(), d, rng),
        }
    }

    /// Returns the block output and its post-softmax attention `[B, H, T, T]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<(Var, Var)> {
        let shape = tape.shape(x).to_vec();
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let h = self.heads;
        let dh = d / h;

        let normed = self.norm1.forward(tape, bound, x)?;
        let qkv = self.qkv.forward(tape, bound, normed)?;
        let qkv = tape.reshape(qkv, &[b, t, 3, h, dh])?;
        let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
        let q = tape.slice_along(qkv, 0, 0..1)?;
        let k = tape.slice_along(qkv, 0, 1..2)?;
        let v = tape.slice_along(qkv, 0, 2..3)?;
        let q = tape.reshape(q, &[b, h, t, dh])?;
        let k = tape.reshape(k, &[b, h, t, dh])?;
        let v = tape.reshape(v, &[b, h, t, dh])?;

        let kt = tape.transpose_last2(k)?;
        let scores = tape.batch_matmul(q, kt)?;
        let scores = tape.mul_scalar(scores, T::of(1.0 / (dh as f64).sqrt()))?;
        let attn = tape.softmax_rows(scores)?;
        let mixed = tape.batch_matmul(attn, v)?;
        let mixed = tape.permute(mixed, &[0, 2, 1, 3])?;
        let mixed = tape.reshape(mixed, &[b, t, d])?;
        let mixed = self.proj.forward(tape, bound, mixed)?;
        let x = tape.add(x, mixed)?;

        let normed = self.norm2.forward(tape, bound, x)?;
        let hidden = self.fc1.forward(tape, bound, normed)?;
        let hidden = tape.gelu(hidden)?;
        let hidden = self.fc2.forward(tape, bound, hidden)?;
        let out = tape.add(x, hidden)?;
        Ok((out, attn))
    }

    /// Zeroes the attention and MLP output projections, turning the block
    /// into the identity map.
    pub fn zero_output_projections<T: Scalar>(&self, store: &mut ParamStore<T>) {
        for id in [self.proj.weight, self.proj.bias, self.fc2.weight, self.fc2.bias] {
            store.get_mut(id).values_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

/// A run of consecutive transformer blocks.
///
/// The stage keeps the attention of its most recent recorded forward pass
/// and counts its forward invocations.
#[derive(Debug)]
pub struct EncoderStage<T> {
    blocks: Vec<Block>,
    last_attention: Mutex<Option<Vec<Tensor<T>>>>,
    passes: AtomicUsize,
}

impl<T: Clone> Clone for EncoderStage<T> {
    fn clone(&self) -> Self {
        Self {
            blocks: self.blocks.clone(),
            last_attention: Mutex::new(self.last_attention.lock().expect("attention cache").clone()),
            passes: AtomicUsize::new(self.passes.load(Ordering::Relaxed)),
        }
    }
}

impl<T: Scalar> EncoderStage<T> {
    pub fn from_blocks(blocks: Vec<Block>) -> Self {
        Self { blocks, last_attention: Mutex::new(None), passes: AtomicUsize::new(0) }
    }

    /// Creates `depth` freshly initialized blocks named `{prefix}.{i}`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &ModelConfig,
        depth: usize,
        rng: &mut R,
    ) -> Self {
        let blocks = (0..depth).map(|i| Block::new(store, &format!("{prefix}.{i}"), cfg, rng)).collect();
        Self::from_blocks(blocks)
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn passes(&self) -> usize {
        self.passes.load(Ordering::Relaxed)
    }

    /// Maps `[B, T, D]` tokens to `[B, T, D]`. With `record`, the attention
    /// of every block replaces the stage's cache.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, z: TokenSet, record: bool) -> Result<TokenSet> {
        self.passes.fetch_add(1, Ordering::Relaxed);
        let mut x = z.tokens;
        let mut attention = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let width = tape.shape(bound.var(block.norm1.gain))[0];
            if tape.shape(x)[2] != width {
                return Err(Error::dim(format!("stage of dim {width} given tokens {:?}", tape.shape(x))));
            }
            let (out, attn) = block.forward(tape, bound, x)?;
            if record {
                attention.push(tape.tensor(attn));
            }
            x = out;
        }
        if record {
            *self.last_attention.lock().expect("attention cache") = Some(attention);
        }
        TokenSet::new(tape, x)
    }

    /// Post-softmax attention `[H, T, T]` of `block_index` for sample 0 of
    /// the last recorded forward pass.
    pub fn attention_weights(&self, block_index: usize) -> Result<Tensor<T>> {
        self.attention_weights_of(block_index, 0)
    }

    /// As [`EncoderStage::attention_weights`] for a given sample of the batch.
    pub fn attention_weights_of(&self, block_index: usize, sample: usize) -> Result<Tensor<T>> {
        if block_index >= self.blocks.len() {
            return Err(Error::dim(format!("block {block_index} of a {}-block stage", self.blocks.len())));
        }
        let cache = self.last_attention.lock().expect("attention cache");
        let all = cache.as_ref().ok_or_else(|| Error::State("no recorded forward pass".into()))?;
        let t = &all[block_index];
        let s = t.shape();
        if sample >= s[0] {
            return Err(Error::dim(format!("sample {sample} of a batch of {}", s[0])));
        }
        let per = s[1] * s[2] * s[3];
        Tensor::new(vec![s[1], s[2], s[3]], t.values()[sample * per..(sample + 1) * per].to_vec())
    }

    pub fn clear_attention(&self) {
        *self.last_attention.lock().expect("attention cache") = None;
    }
}

/// Splits `L` blocks into the first `round(local_fraction * L)` (local)
/// and the rest (global).
pub fn split_encoder<T: Scalar>(cfg: &ModelConfig, blocks: Vec<Block>) -> Result<(EncoderStage<T>, EncoderStage<T>)> {
    cfg.validate()?;
    if blocks.len() != cfg.depth {
        return Err(Error::Config(format!("expected {} blocks, got {}", cfg.depth, blocks.len())));
    }
    let mut local = blocks;
    let global = local.split_off(cfg.local_blocks());
    Ok((EncoderStage::from_blocks(local), EncoderStage::from_blocks(global)))
}

/// Cuts `[B, H, W, C]` images into `[B, N, P*P*C]` flattened patches in
/// row-major patch order, each patch flattened as (row, column, channel).
pub fn extract_patches<T: Scalar>(images: &Tensor<T>, cfg: &ModelConfig) -> Result<Tensor<T>> {
    let s = images.shape();
    if s.len() != 4 || s[1] != cfg.image_size || s[2] != cfg.image_size || s[3] != cfg.channels {
        return Err(Error::dim(format!(
            "expected [B, {}, {}, {}] images, got {s:?}",
            cfg.image_size, cfg.image_size, cfg.channels
        )));
    }
    let (b, size, c, p) = (s[0], cfg.image_size, cfg.channels, cfg.patch_size);
    let grid = size / p;
    let v = images.values();
    let mut out = Vec::with_capacity(v.len());
    for bi in 0..b {
        for gy in 0..grid {
            for gx in 0..grid {
                for py in 0..p {
                    let row = gy * p + py;
                    let start = ((bi * size + row) * size + gx * p) * c;
                    out.extend_from_slice(&v[start..start + p * c]);
                }
            }
        }
    }
    Tensor::new(vec![b, grid * grid, p * p * c], out)
}

/// Learned linear patch projection, CLS token and positional embeddings.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub cls: ParamId,
    pub pos: ParamId,
}

impl PatchEmbed {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Self {
        let proj = Linear::new(store, &format!("{prefix}.proj"), cfg.patch_dim(), cfg.dim, rng);
        let cls = store.init_weight(format!("{prefix}.cls"), &[1, cfg.dim], rng);
        let pos = store.init_weight(format!("{prefix}.pos"), &[cfg.tokens_per_view(), cfg.dim], rng);
        Self { proj, cls, pos }
    }

    /// `[B, H, W, C]` images to `[B, N + 1, D]` tokens.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        images: &Tensor<T>,
        cfg: &ModelConfig,
    ) -> Result<TokenSet> {
        let patches = extract_patches(images, cfg)?;
        let b = patches.shape()[0];
        let patches = tape.constant(patches);
        let spatial = self.proj.forward(tape, bound, patches)?;
        let cls = tape.reshape(bound.var(self.cls), &[1, 1, cfg.dim])?;
        let cls = if b == 1 { cls } else { tape.concat_along(&vec![cls; b], 0)? };
        let tokens = tape.concat_along(&[cls, spatial], 1)?;
        let tokens = tape.add_broadcast(tokens, bound.var(self.pos))?;
        TokenSet::new(tape, tokens)
    }
}
