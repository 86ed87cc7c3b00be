#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rtf_core::{Tape, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Scalar objective over a list of input tensors, built on a fresh tape.
pub type Objective<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Var + 'a;

/// Tape gradient of `f` with respect to every input.
pub fn tape_grads(inputs: &[Tensor<f64>], f: &Objective<'_>) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let loss = f(&mut tape, &vars);
    tape.backward(loss).unwrap();
    vars.iter().map(|&v| tape.grad(v).unwrap().into_values()).collect()
}

fn value(inputs: &[Tensor<f64>], f: &Objective<'_>) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let loss = f(&mut tape, &vars);
    tape.value(loss)[0]
}

/// Central differences with step `1e-5`.
pub fn numeric_grads(inputs: &[Tensor<f64>], f: &Objective<'_>) -> Vec<Vec<f64>> {
    let h = 1e-5;
    let mut work = inputs.to_vec();
    let mut out = Vec::new();
    for i in 0..inputs.len() {
        let mut g = Vec::with_capacity(inputs[i].len());
        for j in 0..inputs[i].len() {
            let x = inputs[i].values()[j];
            work[i].values_mut()[j] = x + h;
            let up = value(&work, f);
            work[i].values_mut()[j] = x - h;
            let down = value(&work, f);
            work[i].values_mut()[j] = x;
            g.push((up - down) / (2.0 * h));
        }
        out.push(g);
    }
    out
}

/// Largest `|a - n| / max(|a|, |n|, 1e-4)` over all entries.
pub fn max_rel_error(a: &[Vec<f64>], n: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(n.iter().flatten())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-4))
        .fold(0.0, f64::max)
}

/// `sum(w * out)` with weights drawn from `seed`.
pub fn weighted_sum(tape: &mut Tape<f64>, out: Var, seed: u64) -> Var {
    let mut r = rng(seed);
    let w = uniform(tape.shape(out), -1.0, 1.0, &mut r);
    let w = tape.constant(w);
    let p = tape.mul(out, w).unwrap();
    tape.sum(p).unwrap()
}

/// Tape gradients against central differences for up to `per_tensor`
/// evenly spaced entries of every parameter; returns the largest relative error.
pub fn store_fd_error(
    store: &mut rtf_core::vit::ParamStore<f64>,
    per_tensor: usize,
    f: &dyn Fn(&mut Tape<f64>, &rtf_core::vit::Bound) -> Var,
) -> f64 {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, true);
    let loss = f(&mut tape, &bound);
    tape.backward(loss).unwrap();
    let ids: Vec<_> = store.ids().collect();
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(bound.var(id)).map(|g| g.into_values()).unwrap_or_else(|| vec![0.0; store.get(id).len()]))
        .collect();
    let eval = |store: &rtf_core::vit::ParamStore<f64>| {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let loss = f(&mut tape, &bound);
        tape.value(loss)[0]
    };
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (k, &id) in ids.iter().enumerate() {
        let len = store.get(id).len();
        let stride = (len / per_tensor).max(1);
        for j in (0..len).step_by(stride).take(per_tensor) {
            let x = store.get(id).values()[j];
            store.get_mut(id).values_mut()[j] = x + h;
            let up = eval(store);
            store.get_mut(id).values_mut()[j] = x - h;
            let down = eval(store);
            store.get_mut(id).values_mut()[j] = x;
            let n = (up - down) / (2.0 * h);
            let a = analytic[k][j];
            worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(1e-4));
        }
    }
    worst
}

/// Redraws every parameter from `U(-0.5, 0.5)` so gradients are not tiny.
pub fn spread(store: &mut rtf_core::vit::ParamStore<f64>, seed: u64) {
    let mut r = rng(seed);
    for p in store.iter_mut() {
        p.tensor.values_mut().iter_mut().for_each(|v| *v = r.random_range(-0.5..0.5));
    }
}
