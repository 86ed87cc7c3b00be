//! Two-view classifier: local encoder per view, fusion, shared global
//! encoder and a single logit head.
//!
//! Training runs two branches over the same local representations. The
//! global branch fuses with the configured [`FusionStrategy`]; the random
//! token fusion branch fuses with a fresh [`RtfMask`] per sample. Both go
//! through the same global encoder and head, and the loss is the sum of the
//! two binary cross-entropies. Inference runs the global branch only.

use crate::error::{Error, Result};
use crate::fusion::{rtf_fuse, sample_rtf_mask, FusionStrategy, RtfMask};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vit::{split_encoder, Bound, EncoderStage, LayerNorm, Linear, ModelConfig, ParamStore, PatchEmbed, TokenSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt;
use std::str::FromStr;

/// Which inputs the model consumes. Single-view models skip fusion entirely.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ViewMode {
    Both,
    Only1,
    Only2,
}

impl ViewMode {
    pub fn name(self) -> &'static str {
        match self {
            ViewMode::Both => "both",
            ViewMode::Only1 => "view1",
            ViewMode::Only2 => "view2",
        }
    }
}

impl fmt::Display for ViewMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ViewMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "both" => Ok(ViewMode::Both),
            "view1" => Ok(ViewMode::Only1),
            "view2" => Ok(ViewMode::Only2),
            other => Err(Error::Config(format!("unknown view mode '{other}'"))),
        }
    }
}

/// Patch embedding followed by the local blocks.
#[derive(Clone, Debug)]
pub struct LocalEncoder<T> {
    pub embed: PatchEmbed,
    pub stage: EncoderStage<T>,
}

impl<T: Scalar> LocalEncoder<T> {
    fn forward(&self, tape: &mut Tape<T>, bound: &Bound, images: &Tensor<T>, cfg: &ModelConfig) -> Result<TokenSet> {
        let z = self.embed.forward(tape, bound, images, cfg)?;
        self.stage.forward(tape, bound, z, false)
    }
}

/// Rows of the global-encoder output that feed the head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadInput {
    /// Row 0 (single CLS token).
    Cls,
    /// Mean of two CLS rows.
    MeanCls(usize, usize),
}

impl HeadInput {
    /// Head rows for the global branch of `strategy` with `tokens_per_view`
    /// tokens in view 1.
    pub fn for_strategy(strategy: FusionStrategy, tokens_per_view: usize) -> Self {
        match strategy {
            FusionStrategy::Average => HeadInput::Cls,
            FusionStrategy::ClsCat => HeadInput::MeanCls(0, 1),
            FusionStrategy::Concat => HeadInput::MeanCls(0, tokens_per_view),
        }
    }
}

pub struct BranchOutputs {
    /// Global-branch logits `[B, 1]`.
    pub y_hat: Var,
    /// Random-token-fusion logits `[B, 1]`, present only for training
    /// passes with fusion enabled.
    pub y_hat_rtf: Option<Var>,
    pub masks: Vec<RtfMask>,
}

#[derive(Clone, Debug)]
pub struct MultiViewModel<T> {
    cfg: ModelConfig,
    pub strategy: FusionStrategy,
    pub rtf_enabled: bool,
    pub views: ViewMode,
    params: ParamStore<T>,
    locals: Vec<LocalEncoder<T>>,
    global: EncoderStage<T>,
    head_norm: LayerNorm,
    head: Linear,
}

/// Stacks `[B, ...]` tensors along the batch axis.
fn stack_batches<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts[0].shape();
    if parts.iter().any(|p| p.shape()[1..] != first[1..]) {
        return Err(Error::dim("views differ in geometry"));
    }
    let batch = parts.iter().map(|p| p.shape()[0]).sum();
    let mut shape = first.to_vec();
    shape[0] = batch;
    let values = parts.iter().flat_map(|p| p.values().iter().copied()).collect();
    Tensor::new(shape, values)
}

fn as_batch<T: Scalar>(images: &Tensor<T>) -> Result<Tensor<T>> {
    match images.rank() {
        4 => Ok(images.clone()),
        3 => {
            let mut shape = vec![1];
            shape.extend_from_slice(images.shape());
            images.clone().reshaped(&shape)
        }
        _ => Err(Error::dim(format!("images must be [H, W, C] or [B, H, W, C], got {:?}", images.shape()))),
    }
}

impl<T: Scalar> MultiViewModel<T> {
    pub fn new(cfg: ModelConfig, strategy: FusionStrategy, rtf_enabled: bool, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_rng(cfg, strategy, rtf_enabled, &mut rng)
    }

    pub fn with_rng<R: Rng + ?Sized>(
        cfg: ModelConfig,
        strategy: FusionStrategy,
        rtf_enabled: bool,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let embed = PatchEmbed::new(&mut params, "embed", &cfg, rng);
        let blocks = EncoderStage::<T>::new(&mut params, "block", &cfg, cfg.depth, rng);
        let (local, global) = split_encoder::<T>(&cfg, blocks.blocks().to_vec())?;
        let mut locals = vec![LocalEncoder { embed, stage: local }];
        if !cfg.shared_local {
            let embed = PatchEmbed::new(&mut params, "view2.embed", &cfg, rng);
            let stage = EncoderStage::new(&mut params, "view2.block", &cfg, cfg.local_blocks(), rng);
            locals.push(LocalEncoder { embed, stage });
        }
        let head_norm = LayerNorm::new(&mut params, "head.norm", cfg.dim);
        let head = Linear::new(&mut params, "head", cfg.dim, 1, rng);
        Ok(Self { cfg, strategy, rtf_enabled, views: ViewMode::Both, params, locals, global, head_norm, head })
    }

    pub fn with_views(mut self, views: ViewMode) -> Self {
        self.views = views;
        self
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Local encoder applied to view `view` (1 or 2).
    pub fn local(&self, view: usize) -> &LocalEncoder<T> {
        if view == 2 && self.locals.len() == 2 {
            &self.locals[1]
        } else {
            &self.locals[0]
        }
    }

    pub fn global(&self) -> &EncoderStage<T> {
        &self.global
    }

    /// Total local-stage forward invocations so far, over all local encoders.
    pub fn local_passes(&self) -> usize {
        self.locals.iter().map(|l| l.stage.passes()).sum()
    }

    /// Local representations `z1`, `z2`. With a shared local encoder both
    /// views go through it in a single stacked pass.
    pub fn encode_views(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x1: &Tensor<T>,
        x2: &Tensor<T>,
    ) -> Result<(TokenSet, TokenSet)> {
        let (x1, x2) = (as_batch(x1)?, as_batch(x2)?);
        if x1.shape() != x2.shape() {
            return Err(Error::dim(format!("view shapes differ: {:?} vs {:?}", x1.shape(), x2.shape())));
        }
        if self.locals.len() == 1 {
            let b = x1.shape()[0];
            let both = stack_batches(&[&x1, &x2])?;
            let z = self.locals[0].forward(tape, bound, &both, &self.cfg)?;
            let z1 = tape.slice_along(z.tokens, 0, 0..b)?;
            let z2 = tape.slice_along(z.tokens, 0, b..2 * b)?;
            Ok((TokenSet::new(tape, z1)?, TokenSet::new(tape, z2)?))
        } else {
            let z1 = self.locals[0].forward(tape, bound, &x1, &self.cfg)?;
            let z2 = self.locals[1].forward(tape, bound, &x2, &self.cfg)?;
            Ok((z1, z2))
        }
    }

    /// Final norm and linear head over the selected CLS row(s): `[B, 1]` logits.
    pub fn head_forward(&self, tape: &mut Tape<T>, bound: &Bound, z: TokenSet, input: HeadInput) -> Result<Var> {
        let (b, d) = (z.batch(tape), z.dim(tape));
        let pooled = match input {
            HeadInput::Cls => tape.slice_tokens(z.tokens, 0..1)?,
            HeadInput::MeanCls(i, j) => {
                let a = tape.slice_tokens(z.tokens, i..i + 1)?;
                let c = tape.slice_tokens(z.tokens, j..j + 1)?;
                let s = tape.add(a, c)?;
                tape.mul_scalar(s, T::of(0.5))?
            }
        };
        let pooled = tape.reshape(pooled, &[b, d])?;
        let normed = self.head_norm.forward(tape, bound, pooled)?;
        self.head.forward(tape, bound, normed)
    }

    fn single_view(&self, tape: &mut Tape<T>, bound: &Bound, x: &Tensor<T>, view: usize, record: bool) -> Result<Var> {
        let x = as_batch(x)?;
        let z = self.local(view).forward(tape, bound, &x, &self.cfg)?;
        let out = self.global.forward(tape, bound, z, record)?;
        self.head_forward(tape, bound, out, HeadInput::Cls)
    }

    fn global_branch(&self, tape: &mut Tape<T>, bound: &Bound, z1: TokenSet, z2: TokenSet) -> Result<Var> {
        let input = HeadInput::for_strategy(self.strategy, z1.count(tape));
        let fused = self.strategy.fuse(tape, z1, z2)?;
        let out = self.global.forward(tape, bound, fused, true)?;
        self.head_forward(tape, bound, out, input)
    }

    /// Global-branch logits on an existing tape; shared by training and inference.
    pub fn infer_on_tape(&self, tape: &mut Tape<T>, bound: &Bound, x1: &Tensor<T>, x2: &Tensor<T>) -> Result<Var> {
        match self.views {
            ViewMode::Only1 => self.single_view(tape, bound, x1, 1, true),
            ViewMode::Only2 => self.single_view(tape, bound, x2, 2, true),
            ViewMode::Both => {
                let (z1, z2) = self.encode_views(tape, bound, x1, x2)?;
                self.global_branch(tape, bound, z1, z2)
            }
        }
    }

    /// Both branches over one set of local representations.
    pub fn forward_train<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x1: &Tensor<T>,
        x2: &Tensor<T>,
        rng: &mut R,
    ) -> Result<BranchOutputs> {
        if self.views != ViewMode::Both {
            let y_hat = self.infer_on_tape(tape, bound, x1, x2)?;
            return Ok(BranchOutputs { y_hat, y_hat_rtf: None, masks: Vec::new() });
        }
        let (z1, z2) = self.encode_views(tape, bound, x1, x2)?;
        let y_hat = self.global_branch(tape, bound, z1, z2)?;
        if !self.rtf_enabled {
            return Ok(BranchOutputs { y_hat, y_hat_rtf: None, masks: Vec::new() });
        }
        let n = z1.count(tape) - 1;
        let masks = (0..z1.batch(tape)).map(|_| sample_rtf_mask(n, rng)).collect::<Result<Vec<_>>>()?;
        let fused = rtf_fuse(tape, z1, z2, &masks)?;
        let out = self.global.forward(tape, bound, fused, false)?;
        let y_rtf = self.head_forward(tape, bound, out, HeadInput::Cls)?;
        Ok(BranchOutputs { y_hat, y_hat_rtf: Some(y_rtf), masks })
    }

    /// Global-branch logits `[B, 1]`. Consumes no randomness.
    pub fn forward_infer(&self, x1: &Tensor<T>, x2: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let y = self.infer_on_tape(&mut tape, &bound, x1, x2)?;
        Ok(tape.tensor(y))
    }

    /// One training forward/backward: returns the combined loss and leaves
    /// its gradients on the parameters.
    pub fn loss_and_grads<R: Rng + ?Sized>(
        &mut self,
        x1: &Tensor<T>,
        x2: &Tensor<T>,
        labels: &Tensor<T>,
        rng: &mut R,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, true);
        let out = self.forward_train(&mut tape, &bound, x1, x2, rng)?;
        let loss = combined_loss(&mut tape, &out, labels)?;
        let value = tape.value(loss)[0].as_f64();
        tape.backward(loss)?;
        self.params.collect_grads(&tape, &bound)?;
        Ok(value)
    }
}

/// `bce(y_hat, y) + bce(y_hat_rtf, y)`, or the first term alone without the
/// random-fusion branch.
pub fn combined_loss<T: Scalar>(tape: &mut Tape<T>, out: &BranchOutputs, labels: &Tensor<T>) -> Result<Var> {
    let labels = if labels.shape() == tape.shape(out.y_hat) {
        labels.clone()
    } else {
        labels.clone().reshaped(tape.shape(out.y_hat))?
    };
    let global = tape.bce_with_logits(out.y_hat, &labels)?;
    match out.y_hat_rtf {
        Some(y) => {
            let rtf = tape.bce_with_logits(y, &labels)?;
            tape.add(global, rtf)
        }
        None => Ok(global),
    }
}
