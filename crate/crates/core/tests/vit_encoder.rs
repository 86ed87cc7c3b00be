mod common;

use common::*;
use proptest::prelude::*;
use rtf_core::vit::{split_encoder, EncoderStage, ParamStore, PatchEmbed};
use rtf_core::{Error, ModelConfig, MultiViewModel, FusionStrategy, Tape, Tensor, TokenSet};

fn cfg(dim: usize, depth: usize) -> ModelConfig {
    ModelConfig { dim, depth, heads: 2, ..ModelConfig::default() }
}

fn stage(cfg: &ModelConfig, depth: usize, seed: u64) -> (ParamStore<f64>, EncoderStage<f64>) {
    let mut store = ParamStore::new();
    let s = EncoderStage::new(&mut store, "block", cfg, depth, &mut rng(seed));
    spread(&mut store, seed + 1);
    (store, s)
}

fn run_stage(store: &ParamStore<f64>, s: &EncoderStage<f64>, x: &Tensor<f64>) -> Vec<f64> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let z = tape.constant(x.clone());
    let z = TokenSet::new(&tape, z).unwrap();
    let out = s.forward(&mut tape, &bound, z, true).unwrap();
    tape.value(out.tokens).to_vec()
}

#[test]
fn patch_embed_token_count() {
    let c = ModelConfig::default();
    let mut store = ParamStore::<f64>::new();
    let embed = PatchEmbed::new(&mut store, "embed", &c, &mut rng(0));
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let z = embed.forward(&mut tape, &bound, &Tensor::zeros(&[2, 32, 32, 1]), &c).unwrap();
    assert_eq!(tape.shape(z.tokens), &[2, 17, c.dim]);

    let wrong = embed.forward(&mut tape, &bound, &Tensor::zeros(&[1, 24, 24, 1]), &c);
    assert!(matches!(wrong, Err(Error::Dimension(_))));
}

#[test]
fn zero_image_and_projection_give_position_plus_cls() {
    let c = ModelConfig::default();
    let mut store = ParamStore::<f64>::new();
    let embed = PatchEmbed::new(&mut store, "embed", &c, &mut rng(1));
    for id in [embed.proj.weight, embed.proj.bias] {
        store.get_mut(id).values_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut r = rng(2);
    let image = uniform(&[1, 32, 32, 1], 0.0, 1.0, &mut r);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let z = embed.forward(&mut tape, &bound, &image, &c).unwrap();
    let got = tape.value(z.tokens);
    let (pos, cls, d) = (store.get(embed.pos).values(), store.get(embed.cls).values(), c.dim);
    for t in 0..17 {
        for k in 0..d {
            let want = pos[t * d + k] + if t == 0 { cls[k] } else { 0.0 };
            assert_eq!(got[t * d + k], want);
        }
    }
}

#[test]
fn patch_embed_gradient_matches_finite_differences() {
    let c = ModelConfig { image_size: 8, patch_size: 4, dim: 6, heads: 2, ..ModelConfig::default() };
    let mut store = ParamStore::<f64>::new();
    let embed = PatchEmbed::new(&mut store, "embed", &c, &mut rng(3));
    spread(&mut store, 4);
    let mut r = rng(5);
    let image = uniform(&[2, 8, 8, 1], 0.0, 1.0, &mut r);
    let err = store_fd_error(&mut store, 12, &|tape, bound| {
        let z = embed.forward(tape, bound, &image, &c).unwrap();
        weighted_sum(tape, z.tokens, 6)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn zeroed_output_projections_make_the_identity() {
    let c = cfg(8, 2);
    let (mut store, s) = stage(&c, 2, 7);
    for b in s.blocks() {
        b.zero_output_projections(&mut store);
    }
    let x = uniform(&[2, 17, 8], -1.0, 1.0, &mut rng(8));
    assert_eq!(run_stage(&store, &s, &x), x.values());
}

#[test]
fn stage_accepts_any_token_count_and_rejects_wrong_dim() {
    let c = cfg(8, 1);
    let (store, s) = stage(&c, 1, 9);
    for t in [17, 34] {
        let x = uniform(&[1, t, 8], -1.0, 1.0, &mut rng(t as u64));
        assert_eq!(run_stage(&store, &s, &x).len(), t * 8);
    }
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let z = tape.constant(Tensor::zeros(&[1, 17, 6]));
    let z = TokenSet::new(&tape, z).unwrap();
    assert!(matches!(s.forward(&mut tape, &bound, z, false), Err(Error::Dimension(_))));
}

#[test]
fn block_gradient_matches_finite_differences() {
    let c = cfg(8, 1);
    let (mut store, s) = stage(&c, 1, 10);
    let x = uniform(&[2, 5, 8], -2.0, 2.0, &mut rng(11));
    let err = store_fd_error(&mut store, 10, &|tape, bound| {
        let z = tape.constant(x.clone());
        let z = TokenSet::new(tape, z).unwrap();
        let out = s.forward(tape, bound, z, false).unwrap();
        weighted_sum(tape, out.tokens, 12)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn split_defaults() {
    for (depth, fraction, want) in [(8, 0.75, (6, 2)), (8, 0.5, (4, 4)), (4, 0.25, (1, 3))] {
        let c = ModelConfig { depth, local_fraction: fraction, ..cfg(8, depth) };
        let mut store = ParamStore::<f64>::new();
        let all = EncoderStage::new(&mut store, "block", &c, depth, &mut rng(0));
        let (l, g) = split_encoder::<f64>(&c, all.blocks().to_vec()).unwrap();
        assert_eq!((l.depth(), g.depth()), want);
    }
    let c = ModelConfig { local_fraction: 0.1, ..cfg(8, 4) };
    assert!(matches!(split_encoder::<f64>(&c, Vec::new()), Err(Error::Config(_))));
}

#[test]
fn split_stages_compose_to_the_unsplit_encoder() {
    let c = cfg(8, 4);
    let (store, all) = stage(&c, 4, 13);
    let (local, global) = split_encoder::<f64>(&c, all.blocks().to_vec()).unwrap();
    let x = uniform(&[2, 17, 8], -1.0, 1.0, &mut rng(14));
    let whole = run_stage(&store, &all, &x);
    let mid = Tensor::new(vec![2, 17, 8], run_stage(&store, &local, &x)).unwrap();
    assert_eq!(run_stage(&store, &global, &mid), whole);
}

#[test]
fn attention_rows_are_distributions() {
    let c = cfg(8, 2);
    let (store, s) = stage(&c, 2, 15);
    assert!(matches!(s.attention_weights(0), Err(Error::State(_))));
    run_stage(&store, &s, &uniform(&[1, 17, 8], -2.0, 2.0, &mut rng(16)));
    for b in 0..2 {
        let a = s.attention_weights(b).unwrap();
        assert_eq!(a.shape(), &[2, 17, 17]);
        for row in a.values().chunks(17) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
    assert!(matches!(s.attention_weights(2), Err(Error::Dimension(_))));
}

#[test]
fn duplicate_tokens_receive_equal_attention() {
    let c = cfg(8, 1);
    let (store, s) = stage(&c, 1, 17);
    let mut x = uniform(&[1, 6, 8], -1.0, 1.0, &mut rng(18));
    let row2: Vec<f64> = x.values()[2 * 8..3 * 8].to_vec();
    x.values_mut()[4 * 8..5 * 8].copy_from_slice(&row2);
    run_stage(&store, &s, &x);
    let a = s.attention_weights(0).unwrap();
    for row in a.values().chunks(6) {
        assert!((row[2] - row[4]).abs() < 1e-12);
    }

    let same = Tensor::from_fn(&[1, 5, 8], |i| (i % 8) as f64 * 0.1);
    run_stage(&store, &s, &same);
    let a = s.attention_weights(0).unwrap();
    assert!(a.values().iter().all(|&v| (v - 0.2).abs() < 1e-12));
}

#[test]
fn single_token_attends_to_itself() {
    let c = cfg(8, 1);
    let (store, s) = stage(&c, 1, 19);
    run_stage(&store, &s, &uniform(&[1, 1, 8], -1.0, 1.0, &mut rng(20)));
    assert!(s.attention_weights(0).unwrap().values().iter().all(|&v| v == 1.0));
}

#[test]
fn self_attention_is_permutation_equivariant() {
    let c = cfg(8, 2);
    let (store, s) = stage(&c, 2, 21);
    let x = uniform(&[1, 9, 8], -1.0, 1.0, &mut rng(22));
    let perm = [0, 3, 1, 8, 2, 7, 5, 4, 6];
    let permute = |v: &[f64]| -> Vec<f64> { perm.iter().flat_map(|&p| v[p * 8..(p + 1) * 8].to_vec()).collect() };
    let px = Tensor::new(vec![1, 9, 8], permute(x.values())).unwrap();
    let out = run_stage(&store, &s, &x);
    let pout = run_stage(&store, &s, &px);
    for (a, b) in permute(&out).iter().zip(&pout) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn parameter_count_closed_form() {
    for (dim, depth, heads, ratio, shared) in [(32, 4, 4, 2.0, true), (16, 4, 2, 4.0, true), (24, 8, 3, 1.5, false)] {
        let c = ModelConfig { dim, depth, heads, mlp_ratio: ratio, shared_local: shared, ..ModelConfig::default() };
        let (d, n, p) = (dim, 16, 8 * 8);
        let hidden = (dim as f64 * ratio).round() as usize;
        let embed = p * d + d + d + (n + 1) * d;
        let block = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * hidden + hidden) + (hidden * d + d);
        let head = 2 * d + d + 1;
        let mut want = embed + depth * block + head;
        if !shared {
            want += embed + c.local_blocks() * block;
        }
        let model = MultiViewModel::<f32>::new(c.clone(), FusionStrategy::Concat, true, 0).unwrap();
        assert_eq!(model.params().scalar_count(), want);
        assert_eq!(c.param_count(), want);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn stage_preserves_token_count(t in 1usize..40, seed in any::<u64>()) {
        let c = cfg(8, 1);
        let (store, s) = stage(&c, 1, seed % 1000);
        let x = uniform(&[1, t, 8], -1.0, 1.0, &mut rng(seed));
        prop_assert_eq!(run_stage(&store, &s, &x).len(), t * 8);
    }
}
