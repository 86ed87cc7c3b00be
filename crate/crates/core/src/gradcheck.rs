//! Central finite-difference verification of every backward rule, of the
//! encoder modules, of each fusion and of the full two-branch model, in f64.
//!
//! Non-scalar outputs are reduced to `sum(w * out)` with fixed random
//! weights `w`, so every output element contributes a distinct upstream
//! gradient.

use crate::error::Result;
use crate::fusion::{rtf_fuse, FusionStrategy, RtfMask};
use crate::model::{combined_loss, MultiViewModel};
use crate::tape::{OpKind, Tape, Var};
use crate::tensor::Tensor;
use crate::vit::{Block, Bound, ModelConfig, ParamStore, PatchEmbed, TokenSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write;
use std::time::Instant;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so that gradients that are zero
/// analytically are compared in absolute terms.
pub const FLOOR: f64 = 1e-4;
/// Random input draws per op.
pub const SEEDS: u64 = 10;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    /// Gradient entries compared.
    pub checked: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error < TOLERANCE
    }
}

#[derive(Clone, Debug, Default)]
pub struct Report {
    pub ops: Vec<CheckResult>,
    pub composites: Vec<CheckResult>,
    pub seconds: f64,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.ops.iter().chain(&self.composites).all(CheckResult::passed)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<24} {:>14} {:>8}  status", "check", "max rel err", "entries");
        for (title, rows) in [("ops", &self.ops), ("composites", &self.composites)] {
            let _ = writeln!(out, "# {title}");
            for r in rows {
                let status = if r.passed() { "ok" } else { "FAIL" };
                let _ = writeln!(out, "{:<24} {:>14.3e} {:>8}  {status}", r.name, r.max_rel_error, r.checked);
            }
        }
        let verdict = if self.passed() { "passed" } else { "FAILED" };
        let _ = writeln!(
            out,
            "gradient check {verdict}: tolerance {TOLERANCE:e}, step {STEP:e}, {:.2} s",
            self.seconds
        );
        out
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// `sum(w * out)`, or `out` itself when it is already a single value.
fn reduce(tape: &mut Tape<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    if tape.value(out).len() == 1 && weights.len() == 1 {
        return Ok(out);
    }
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

/// Gradient of `f` with respect to every entry of every input.
pub fn check_inputs(inputs: &[Tensor<f64>], f: &Build<'_>, fault: Option<OpKind>, seed: u64) -> Result<(f64, usize)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = f(&mut tape, &vars)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let weights = uniform(tape.shape(out), -1.0, 1.0, &mut rng);
    let loss = reduce(&mut tape, out, &weights)?;
    tape.inject_fault(fault);
    tape.backward(loss)?;

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|x| t.constant(x.clone())).collect();
        let out = f(&mut t, &vars)?;
        let loss = reduce(&mut t, out, &weights)?;
        Ok(t.value(loss)[0])
    };
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut work = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = tape.grad(v).expect("tracked input");
        for j in 0..inputs[i].len() {
            let x = inputs[i].values()[j];
            work[i].values_mut()[j] = x + STEP;
            let up = eval(&work)?;
            work[i].values_mut()[j] = x - STEP;
            let down = eval(&work)?;
            work[i].values_mut()[j] = x;
            worst = worst.max(rel_error(analytic.values()[j], (up - down) / (2.0 * STEP)));
            checked += 1;
        }
    }
    Ok((worst, checked))
}

type Loss<'a> = dyn Fn(&mut Tape<f64>, &Bound) -> Result<Var> + 'a;

/// Gradient of a scalar `f` with respect to up to `per_tensor` entries of
/// every parameter tensor in `store`.
pub fn check_params(
    store: &ParamStore<f64>,
    f: &Loss<'_>,
    per_tensor: usize,
    fault: Option<OpKind>,
    seed: u64,
) -> Result<(f64, usize)> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, true);
    let loss = f(&mut tape, &bound)?;
    tape.inject_fault(fault);
    tape.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = store.clone();
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let b = s.bind(&mut t, false);
        let loss = f(&mut t, &b)?;
        Ok(t.value(loss)[0])
    };
    let mut worst = 0.0f64;
    let mut checked = 0;
    for id in store.ids() {
        let analytic = tape.grad(bound.var(id)).expect("tracked parameter");
        let n = store.get(id).len();
        let picks: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|_| rng.random_range(0..n)).collect()
        };
        for j in picks {
            let x = store.get(id).values()[j];
            work.get_mut(id).values_mut()[j] = x + STEP;
            let up = eval(&work)?;
            work.get_mut(id).values_mut()[j] = x - STEP;
            let down = eval(&work)?;
            work.get_mut(id).values_mut()[j] = x;
            worst = worst.max(rel_error(analytic.values()[j], (up - down) / (2.0 * STEP)));
            checked += 1;
        }
    }
    Ok((worst, checked))
}

/// Replaces every parameter with `U(-0.5, 0.5)` so gradients are not
/// vanishingly small, as they are at the default initialization.
fn spread(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for p in store.iter_mut() {
        p.tensor.values_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
    }
}

fn op_case(kind: OpKind, rng: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<Build<'static>>) {
    let mut extra = ChaCha8Rng::seed_from_u64(rng.random());
    let mut u = |shape: &[usize]| uniform(shape, -2.0, 2.0, rng);
    match kind {
        OpKind::MatMul => (vec![u(&[3, 4]), u(&[4, 2])], Box::new(|t, v| t.matmul(v[0], v[1]))),
        OpKind::BatchMatMul => (vec![u(&[2, 3, 4]), u(&[2, 4, 2])], Box::new(|t, v| t.batch_matmul(v[0], v[1]))),
        OpKind::Add => (vec![u(&[3, 4]), u(&[3, 4])], Box::new(|t, v| t.add(v[0], v[1]))),
        OpKind::Mul => (vec![u(&[3, 4]), u(&[3, 4])], Box::new(|t, v| t.mul(v[0], v[1]))),
        OpKind::AddBroadcast => (vec![u(&[2, 3, 4]), u(&[3, 4])], Box::new(|t, v| t.add_broadcast(v[0], v[1]))),
        OpKind::MulScalar => (vec![u(&[3, 4])], Box::new(|t, v| t.mul_scalar(v[0], -0.7))),
        OpKind::SoftmaxRows => (vec![u(&[3, 5])], Box::new(|t, v| t.softmax_rows(v[0]))),
        OpKind::LayerNorm => {
            (vec![u(&[3, 5]), u(&[5]), u(&[5])], Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-6)))
        }
        OpKind::Gelu => (vec![u(&[3, 4])], Box::new(|t, v| t.gelu(v[0]))),
        OpKind::MeanOver => (vec![u(&[2, 3, 4])], Box::new(|t, v| t.mean_over(v[0], 1))),
        OpKind::Sum => (vec![u(&[3, 4])], Box::new(|t, v| t.sum(v[0]))),
        OpKind::ConcatAlong => {
            (vec![u(&[2, 3, 4]), u(&[2, 2, 4])], Box::new(|t, v| t.concat_along(&[v[0], v[1]], 1)))
        }
        OpKind::SliceAlong => (vec![u(&[2, 5, 3])], Box::new(|t, v| t.slice_along(v[0], 1, 1..4))),
        OpKind::Permute => (vec![u(&[2, 3, 4])], Box::new(|t, v| t.permute(v[0], &[2, 0, 1]))),
        OpKind::TransposeLast2 => (vec![u(&[2, 3, 4])], Box::new(|t, v| t.transpose_last2(v[0]))),
        OpKind::Reshape => (vec![u(&[2, 6])], Box::new(|t, v| t.reshape(v[0], &[3, 4]))),
        OpKind::SelectRows => {
            let take: Vec<bool> = (0..8).map(|_| extra.random()).collect();
            (vec![u(&[2, 4, 3]), u(&[2, 4, 3])], Box::new(move |t, v| t.select_rows(v[0], v[1], &take)))
        }
        OpKind::BceWithLogits => {
            let target = Tensor::from_fn(&[4, 1], |_| if extra.random::<bool>() { 1.0 } else { 0.0 });
            (vec![u(&[4, 1])], Box::new(move |t, v| t.bce_with_logits(v[0], &target)))
        }
        OpKind::Leaf => unreachable!("leaves have no backward rule"),
    }
}

/// Every differentiable op over [`SEEDS`] random draws in `[-2, 2]`.
pub fn check_ops(fault: Option<OpKind>) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for kind in OpKind::DIFFERENTIABLE {
        let mut res = CheckResult { name: kind.name().to_string(), max_rel_error: 0.0, checked: 0 };
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 31 + kind as u64);
            let (inputs, f) = op_case(kind, &mut rng);
            let (worst, n) = check_inputs(&inputs, &*f, fault, seed)?;
            res.max_rel_error = res.max_rel_error.max(worst);
            res.checked += n;
        }
        out.push(res);
    }
    Ok(out)
}

fn merge(name: &str, parts: &[(f64, usize)]) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        max_rel_error: parts.iter().map(|p| p.0).fold(0.0, f64::max),
        checked: parts.iter().map(|p| p.1).sum(),
    }
}

/// Configuration of the whole-model check: `D = 16`, `L = 2`, split 1/1.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        patch_size: 4,
        channels: 1,
        dim: 16,
        depth: 2,
        heads: 2,
        mlp_ratio: 2.0,
        local_fraction: 0.5,
        shared_local: true,
    }
}

fn check_mlp(fault: Option<OpKind>) -> Result<CheckResult> {
    let mut parts = Vec::new();
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = uniform(&[4, 3], -2.0, 2.0, &mut rng);
        let target = Tensor::new(vec![4, 1], vec![1.0, 0.0, 0.0, 1.0])?;
        let inputs = vec![uniform(&[3, 5], -1.0, 1.0, &mut rng), uniform(&[5], -1.0, 1.0, &mut rng), uniform(&[5, 1], -1.0, 1.0, &mut rng)];
        let f = move |t: &mut Tape<f64>, v: &[Var]| {
            let x = t.constant(x.clone());
            let h = t.matmul(x, v[0])?;
            let h = t.add_broadcast(h, v[1])?;
            let h = t.gelu(h)?;
            let y = t.matmul(h, v[2])?;
            t.bce_with_logits(y, &target)
        };
        parts.push(check_inputs(&inputs, &f, fault, seed)?);
    }
    Ok(merge("mlp_2layer", &parts))
}

fn check_block(fault: Option<OpKind>) -> Result<CheckResult> {
    let cfg = ModelConfig { dim: 8, heads: 2, ..tiny_config() };
    let mut parts = Vec::new();
    for seed in 0..2 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let mut store = ParamStore::new();
        let block = Block::new(&mut store, "block", &cfg, &mut rng);
        spread(&mut store, &mut rng);
        let x = uniform(&[2, 5, 8], -2.0, 2.0, &mut rng);
        let w = uniform(&[2, 5, 8], -1.0, 1.0, &mut rng);
        let f = |t: &mut Tape<f64>, b: &Bound| {
            let x = t.constant(x.clone());
            let (out, _) = block.forward(t, b, x)?;
            reduce(t, out, &w)
        };
        parts.push(check_params(&store, &f, 12, fault, seed)?);
        // Gradient with respect to the tokens themselves.
        let frozen = store.clone();
        let g = |t: &mut Tape<f64>, v: &[Var]| {
            let b = frozen.bind(t, false);
            Ok(block.forward(t, &b, v[0])?.0)
        };
        parts.push(check_inputs(std::slice::from_ref(&x), &g, fault, seed)?);
    }
    Ok(merge("transformer_block", &parts))
}

fn check_patch_embed(fault: Option<OpKind>) -> Result<CheckResult> {
    let cfg = ModelConfig { dim: 8, heads: 2, ..tiny_config() };
    let mut parts = Vec::new();
    for seed in 0..2 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let mut store = ParamStore::new();
        let embed = PatchEmbed::new(&mut store, "embed", &cfg, &mut rng);
        spread(&mut store, &mut rng);
        let images = uniform(&[2, 8, 8, 1], 0.0, 1.0, &mut rng);
        let w = uniform(&[2, cfg.tokens_per_view(), 8], -1.0, 1.0, &mut rng);
        let f = |t: &mut Tape<f64>, b: &Bound| {
            let z = embed.forward(t, b, &images, &cfg)?;
            reduce(t, z.tokens, &w)
        };
        parts.push(check_params(&store, &f, 16, fault, seed)?);
    }
    Ok(merge("patch_embed", &parts))
}

fn check_fusion(strategy: Option<FusionStrategy>, fault: Option<OpKind>) -> Result<CheckResult> {
    let name = strategy.map_or("fusion_rtf".to_string(), |s| format!("fusion_{s}"));
    let mut parts = Vec::new();
    for seed in 0..3 {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let inputs = vec![uniform(&[2, 5, 6], -2.0, 2.0, &mut rng), uniform(&[2, 5, 6], -2.0, 2.0, &mut rng)];
        let masks: Vec<RtfMask> = (0..2).map(|_| RtfMask::from_bits((0..4).map(|_| rng.random()).collect())).collect();
        let head = uniform(&[6, 1], -1.0, 1.0, &mut rng);
        let target = Tensor::new(vec![2, 1], vec![1.0, 0.0])?;
        let f = |t: &mut Tape<f64>, v: &[Var]| {
            let z1 = TokenSet::new(t, v[0])?;
            let z2 = TokenSet::new(t, v[1])?;
            let fused = match strategy {
                Some(s) => s.fuse(t, z1, z2)?,
                None => rtf_fuse(t, z1, z2, &masks)?,
            };
            // A scalar head loss over the mean fused token.
            let pooled = t.mean_over(fused.tokens, 1)?;
            let w = t.constant(head.clone());
            let logit = t.matmul(pooled, w)?;
            t.bce_with_logits(logit, &target)
        };
        parts.push(check_inputs(&inputs, &f, fault, seed)?);
    }
    Ok(merge(&name, &parts))
}

fn check_model(strategy: FusionStrategy, fault: Option<OpKind>) -> Result<CheckResult> {
    let cfg = tiny_config();
    let mut parts = Vec::new();
    for seed in 0..2 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let mut model = MultiViewModel::<f64>::with_rng(cfg.clone(), strategy, true, &mut rng)?;
        spread(model.params_mut(), &mut rng);
        let x1 = uniform(&[2, 8, 8, 1], 0.0, 1.0, &mut rng);
        let x2 = uniform(&[2, 8, 8, 1], 0.0, 1.0, &mut rng);
        let labels = Tensor::new(vec![2, 1], vec![1.0, 0.0])?;
        let f = |t: &mut Tape<f64>, b: &Bound| {
            let mut masks = ChaCha8Rng::seed_from_u64(seed);
            let out = model.forward_train(t, b, &x1, &x2, &mut masks)?;
            combined_loss(t, &out, &labels)
        };
        parts.push(check_params(model.params(), &f, 6, fault, seed)?);
    }
    Ok(merge(&format!("model_{strategy}_rtf"), &parts))
}

/// Module, fusion and whole-model checks.
pub fn check_composites(fault: Option<OpKind>) -> Result<Vec<CheckResult>> {
    let mut out = vec![check_mlp(fault)?, check_block(fault)?, check_patch_embed(fault)?];
    for s in FusionStrategy::ALL {
        out.push(check_fusion(Some(s), fault)?);
    }
    out.push(check_fusion(None, fault)?);
    for s in FusionStrategy::ALL {
        out.push(check_model(s, fault)?);
    }
    Ok(out)
}

/// The full suite. `fault` corrupts one backward rule as a negative control.
pub fn run_suite(fault: Option<OpKind>) -> Result<Report> {
    let start = Instant::now();
    let ops = check_ops(fault)?;
    let composites = check_composites(fault)?;
    Ok(Report { ops, composites, seconds: start.elapsed().as_secs_f64() })
}
