mod common;

use common::*;
use rand::Rng;
use rtf_core::model::combined_loss;
use rtf_core::optim::{AdamW, AdamWConfig};
use rtf_core::vit::ParamStore;
use rtf_core::{FusionStrategy, ModelConfig, MultiViewModel, Tape, Tensor, ViewMode};

fn tiny() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        patch_size: 4,
        channels: 1,
        dim: 8,
        depth: 2,
        heads: 2,
        mlp_ratio: 2.0,
        local_fraction: 0.5,
        shared_local: true,
    }
}

fn images(b: usize, seed: u64) -> Tensor<f64> {
    uniform(&[b, 8, 8, 1], 0.0, 1.0, &mut rng(seed))
}

fn labels(v: &[f64]) -> Tensor<f64> {
    Tensor::new(vec![v.len(), 1], v.to_vec()).unwrap()
}

/// Per-parameter gradients of the global term, the fusion term and their sum.
fn branch_grads(m: &MultiViewModel<f64>, x1: &Tensor<f64>, x2: &Tensor<f64>, y: &Tensor<f64>) -> [Vec<Vec<f64>>; 3] {
    let run = |which: u8| {
        let mut tape = Tape::new();
        let bound = m.params().bind(&mut tape, true);
        let out = m.forward_train(&mut tape, &bound, x1, x2, &mut rng(77)).unwrap();
        let loss = match which {
            0 => tape.bce_with_logits(out.y_hat, y).unwrap(),
            1 => tape.bce_with_logits(out.y_hat_rtf.unwrap(), y).unwrap(),
            _ => combined_loss(&mut tape, &out, y).unwrap(),
        };
        tape.backward(loss).unwrap();
        m.params()
            .ids()
            .map(|id| tape.grad(bound.var(id)).map(|g| g.into_values()).unwrap_or_else(|| vec![0.0; m.params().get(id).len()]))
            .collect::<Vec<_>>()
    };
    [run(0), run(1), run(2)]
}

#[test]
fn full_two_branch_loss_matches_finite_differences() {
    let (x1, x2) = (images(3, 1), images(3, 2));
    let y = labels(&[1.0, 0.0, 1.0]);
    for strategy in FusionStrategy::ALL {
        let mut m = MultiViewModel::<f64>::new(tiny(), strategy, true, 3).unwrap();
        spread(m.params_mut(), 4);
        let mut store: ParamStore<f64> = m.params().clone();
        let err = store_fd_error(&mut store, 4, &|tape, bound| {
            let out = m.forward_train(tape, bound, &x1, &x2, &mut rng(5)).unwrap();
            combined_loss(tape, &out, &y).unwrap()
        });
        assert!(err < 1e-4, "{}: {err}", strategy.name());
    }
}

#[test]
fn fusion_branch_adds_exactly_its_own_gradient() {
    let (x1, x2) = (images(4, 6), images(4, 7));
    let y = labels(&[1.0, 0.0, 0.0, 1.0]);
    for strategy in FusionStrategy::ALL {
        let mut m = MultiViewModel::<f64>::new(tiny(), strategy, true, 8).unwrap();
        spread(m.params_mut(), 9);
        let [global, fused, both] = branch_grads(&m, &x1, &x2, &y);
        for ((g, f), b) in global.iter().zip(&fused).zip(&both) {
            for ((g, f), b) in g.iter().zip(f).zip(b) {
                assert!((g + f - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }
        // the fusion term reaches local, global and head parameters
        for name in ["embed.proj.weight", "block.0.qkv.weight", "block.1.fc1.weight", "head.weight"] {
            let id = m.params().find(name).unwrap();
            let k = m.params().ids().position(|i| i == id).unwrap();
            assert!(fused[k].iter().any(|&v| v != 0.0), "{name}");
        }

        m.rtf_enabled = false;
        let mut store = m.params().clone();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, true);
        let out = m.forward_train(&mut tape, &bound, &x1, &x2, &mut rng(77)).unwrap();
        assert!(out.y_hat_rtf.is_none());
        let loss = combined_loss(&mut tape, &out, &y).unwrap();
        tape.backward(loss).unwrap();
        store.collect_grads(&tape, &bound).unwrap();
        for (p, g) in store.iter().zip(&global) {
            let got = p.tensor.grad().map(|v| v.to_vec()).unwrap_or_else(|| vec![0.0; g.len()]);
            for (a, b) in got.iter().zip(g) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }
    }
}

#[test]
fn single_view_models_have_no_fusion_branch() {
    let (x1, x2) = (images(2, 10), images(2, 11));
    for views in [ViewMode::Only1, ViewMode::Only2] {
        let m = MultiViewModel::<f64>::new(tiny(), FusionStrategy::Concat, true, 12).unwrap().with_views(views);
        let mut tape = Tape::new();
        let bound = m.params().bind(&mut tape, true);
        let out = m.forward_train(&mut tape, &bound, &x1, &x2, &mut rng(0)).unwrap();
        assert!(out.y_hat_rtf.is_none());
        // the other view's pixels do not matter
        let only = if views == ViewMode::Only1 { m.forward_infer(&x1, &images(2, 99)) } else { m.forward_infer(&images(2, 99), &x2) };
        assert_eq!(only.unwrap().values(), tape.value(out.y_hat));
    }
}

#[test]
fn construction_is_seed_deterministic() {
    let (x1, x2) = (images(2, 13), images(2, 14));
    let a = MultiViewModel::<f32>::new(ModelConfig::default(), FusionStrategy::Concat, true, 15).unwrap();
    let b = MultiViewModel::<f32>::new(ModelConfig::default(), FusionStrategy::Concat, true, 15).unwrap();
    let c = MultiViewModel::<f32>::new(ModelConfig::default(), FusionStrategy::Concat, true, 16).unwrap();
    let (x1, x2) = (
        Tensor::<f32>::from_fn(&[2, 32, 32, 1], |i| x1.values()[i % 64] as f32),
        Tensor::<f32>::from_fn(&[2, 32, 32, 1], |i| x2.values()[i % 64] as f32),
    );
    let ya = a.forward_infer(&x1, &x2).unwrap();
    assert_eq!(ya, b.forward_infer(&x1, &x2).unwrap());
    assert_ne!(ya, c.forward_infer(&x1, &x2).unwrap());
}

#[test]
fn fifty_full_batch_steps_halve_the_loss() {
    // label 1: view 1 bright; label 0: view 1 dark; view 2 is noise
    let mut r = rng(17);
    let n = 32;
    let y: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
    let x1 = Tensor::from_fn(&[n, 8, 8, 1], |i| {
        let level = if y[i / 64] > 0.5 { 0.8 } else { 0.2 };
        level + r.random_range(-0.1..0.1)
    });
    let x2 = uniform(&[n, 8, 8, 1], 0.0, 1.0, &mut r);
    let y = labels(&y);
    for strategy in FusionStrategy::ALL {
        let mut m = MultiViewModel::<f64>::new(tiny(), strategy, true, 18).unwrap();
        let mut opt = AdamW::new(AdamWConfig { lr: 3e-3, ..AdamWConfig::default() }, m.params()).unwrap();
        let mut masks = rng(19);
        let mut losses = Vec::new();
        for _ in 0..50 {
            losses.push(m.loss_and_grads(&x1, &x2, &y, &mut masks).unwrap());
            opt.step(m.params_mut()).unwrap();
        }
        let (first, last) = (losses[0], *losses.last().unwrap());
        assert!(last <= 0.5 * first, "{}: {first} -> {last}", strategy.name());
    }
}
