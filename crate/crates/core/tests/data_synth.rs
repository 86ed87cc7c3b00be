use std::collections::HashSet;
use std::fs;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rtf_core::data::{augment, export, generate, load_dataset, load_pairs, MultiViewSample, TaskKind, TaskSpec};
use rtf_core::Error;

fn spec(kind: TaskKind, seed: u64) -> TaskSpec {
    TaskSpec { kind, n_train: 64, n_val: 16, n_test: 32, noise: 0.0, seed, ..TaskSpec::default() }
}

fn cue_table(samples: &[MultiViewSample]) -> Vec<(u8, u8, u8)> {
    samples
        .iter()
        .map(|s| {
            let c = s.cues.expect("generated samples carry cues");
            (c.side1, c.side2, s.label)
        })
        .collect()
}

/// Side of the brighter image half, read from the pixels.
fn bright_side(view: &rtf_core::Tensor<f32>) -> u8 {
    let (w, c) = (view.shape()[1], view.shape()[2]);
    let (mut left, mut right) = (0.0f64, 0.0f64);
    for (i, &v) in view.values().iter().enumerate() {
        if (i / c) % w < w / 2 {
            left += v as f64;
        } else {
            right += v as f64;
        }
    }
    u8::from(right > left)
}

/// Accuracy of the best predictor of the label from `feature` alone.
fn bayes_accuracy(rows: &[(u8, u8, u8)], feature: impl Fn(&(u8, u8, u8)) -> u8) -> f64 {
    let mut counts = std::collections::HashMap::<u8, [usize; 2]>::new();
    for r in rows {
        counts.entry(feature(r)).or_default()[r.2 as usize] += 1;
    }
    counts.values().map(|c| c[0].max(c[1])).sum::<usize>() as f64 / rows.len() as f64
}

fn mutual_information(rows: &[(u8, u8, u8)]) -> f64 {
    let n = rows.len() as f64;
    let mut joint = [[0.0f64; 2]; 2];
    for r in rows {
        joint[r.0 as usize][r.2 as usize] += 1.0 / n;
    }
    let ps = [joint[0][0] + joint[0][1], joint[1][0] + joint[1][1]];
    let py = [joint[0][0] + joint[1][0], joint[0][1] + joint[1][1]];
    let mut mi = 0.0;
    for s in 0..2 {
        for y in 0..2 {
            if joint[s][y] > 0.0 {
                mi += joint[s][y] * (joint[s][y] / (ps[s] * py[y])).ln();
            }
        }
    }
    mi
}

#[test]
fn generation_is_deterministic() {
    let a = generate(&TaskSpec { noise: 0.15, ..spec(TaskKind::Xor, 3) }).unwrap();
    let b = generate(&TaskSpec { noise: 0.15, ..spec(TaskKind::Xor, 3) }).unwrap();
    for ((_, x), (_, y)) in a.splits().iter().zip(b.splits()) {
        for (s, t) in x.iter().zip(y) {
            assert_eq!((&s.id, &s.view1, &s.view2, s.label), (&t.id, &t.view1, &t.view2, t.label));
        }
    }
    let c = generate(&TaskSpec { noise: 0.15, ..spec(TaskKind::Xor, 4) }).unwrap();
    assert_ne!(a.train[0].view1, c.train[0].view1);
}

#[test]
fn splits_are_balanced_and_disjoint_over_seeds() {
    for kind in [TaskKind::Xor, TaskKind::Dominant] {
        for seed in 0..10 {
            let data = generate(&TaskSpec { alpha: 0.75, ..spec(kind, seed) }).unwrap();
            let mut ids = HashSet::new();
            for (name, split) in data.splits() {
                let ones = split.iter().filter(|s| s.label == 1).count();
                assert_eq!(2 * ones, split.len(), "{kind} seed {seed} {name}");
                for s in split {
                    assert!(s.id.starts_with(name));
                    assert!(ids.insert(s.id.clone()));
                }
            }
            assert_eq!(ids.len(), 64 + 16 + 32);
        }
    }
}

#[test]
fn rendered_squares_match_their_cues() {
    for kind in [TaskKind::Xor, TaskKind::Dominant] {
        let data = generate(&spec(kind, 5)).unwrap();
        for (_, split) in data.splits() {
            for s in split {
                let c = s.cues.unwrap();
                assert_eq!((bright_side(&s.view1), bright_side(&s.view2)), (c.side1, c.side2));
                assert!(s.view1.values().iter().all(|&v| v == 0.0 || v == 1.0));
            }
        }
    }
}

#[test]
fn noisy_pixels_stay_in_unit_range() {
    let data = generate(&TaskSpec { noise: 0.5, channels: 3, ..spec(TaskKind::Dominant, 6) }).unwrap();
    assert_eq!(data.geometry(), Some((32, 3)));
    assert!(data.train.iter().all(|s| s.view2.values().iter().all(|v| (0.0..=1.0).contains(v))));
}

#[test]
fn xor_label_is_independent_of_each_view() {
    for seed in 0..10 {
        let data = generate(&spec(TaskKind::Xor, seed)).unwrap();
        for (_, split) in data.splits() {
            let rows = cue_table(split);
            assert_eq!(mutual_information(&rows), 0.0);
            assert_eq!(bayes_accuracy(&rows, |r| r.0), 0.5);
            assert_eq!(bayes_accuracy(&rows, |r| r.1), 0.5);
            assert_eq!(bayes_accuracy(&rows, |r| r.0 * 2 + r.1), 1.0);
            assert!(rows.iter().all(|r| r.2 == r.0 ^ r.1));
        }
    }
}

#[test]
fn dominant_cue_accuracies() {
    let data = generate(&TaskSpec { alpha: 0.9, n_train: 100, n_val: 20, n_test: 40, ..spec(TaskKind::Dominant, 7) }).unwrap();
    for (_, split) in data.splits() {
        let rows = cue_table(split);
        let agree = rows.iter().filter(|r| r.0 == r.2).count() as f64 / rows.len() as f64;
        assert_eq!(agree, 0.9);
        assert_eq!(bayes_accuracy(&rows, |r| r.1), 1.0);
        assert!(rows.iter().all(|r| r.1 == r.2));
    }
    let full = generate(&TaskSpec { alpha: 1.0, ..spec(TaskKind::Dominant, 8) }).unwrap();
    assert!(cue_table(&full.train).iter().all(|r| r.0 == r.2 && r.1 == r.2));
}

#[test]
fn invalid_specs_are_rejected() {
    let bad = [
        TaskSpec { n_train: 30, ..spec(TaskKind::Xor, 0) },
        TaskSpec { n_train: 31, ..spec(TaskKind::Dominant, 0) },
    ];
    for s in bad {
        assert!(matches!(generate(&s), Err(Error::Generation(_))));
    }
    for s in [
        TaskSpec { alpha: 1.5, ..spec(TaskKind::Dominant, 0) },
        TaskSpec { noise: -0.1, ..spec(TaskKind::Xor, 0) },
        TaskSpec { image_size: 7, ..spec(TaskKind::Xor, 0) },
    ] {
        assert!(generate(&s).is_err());
    }
}

#[test]
fn augmentation_is_a_seeded_involution() {
    let data = generate(&TaskSpec { noise: 0.15, ..spec(TaskKind::Xor, 9) }).unwrap();
    for s in data.train.iter().take(16) {
        let rng = ChaCha8Rng::seed_from_u64(11);
        let once = augment(s, &mut rng.clone());
        assert_eq!(once.label, s.label);
        assert_eq!(once.view1, augment(s, &mut rng.clone()).view1);
        let twice = augment(&once, &mut rng.clone());
        assert_eq!((&twice.view1, &twice.view2), (&s.view1, &s.view2));
    }
}

#[test]
fn export_then_load_roundtrips() {
    let dir = tempfile::tempdir().unwrap();
    let s = TaskSpec { n_train: 8, n_val: 4, n_test: 4, noise: 0.15, ..spec(TaskKind::Xor, 12) };
    let data = generate(&s).unwrap();
    export(&data, Some(&s), dir.path()).unwrap();
    let (loaded, skipped) = load_dataset(dir.path()).unwrap();
    assert_eq!(skipped, 0);
    for ((_, a), (_, b)) in data.splits().iter().zip(loaded.splits()) {
        let mut a: Vec<_> = a.iter().collect();
        a.sort_by(|x, y| x.id.cmp(&y.id));
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert_eq!((&x.id, x.label, x.cues), (&y.id, y.label, y.cues));
            assert!(x.view1.values().iter().zip(y.view1.values()).all(|(p, q)| (p - q).abs() <= 0.5 / 255.0 + 1e-6));
        }
    }
}

#[test]
fn load_pairs_skips_incomplete_rows() {
    let dir = tempfile::tempdir().unwrap();
    let s = TaskSpec { n_train: 4, n_val: 4, n_test: 4, ..spec(TaskKind::Xor, 13) };
    let mut data = generate(&s).unwrap();
    data.train.truncate(3);
    data.val.clear();
    data.test.clear();
    export(&data, None, dir.path()).unwrap();
    let full = load_pairs(dir.path()).unwrap();
    assert_eq!((full.samples.len(), full.skipped), (3, 0));
    let ids: Vec<_> = full.samples.iter().map(|s| s.id.clone()).collect();
    let mut sorted = ids.clone();
    sorted.sort();
    assert_eq!(ids, sorted);

    let victim = &full.samples[1].id;
    fs::remove_file(dir.path().join(format!("images/{victim}_v2.png"))).unwrap();
    let partial = load_pairs(dir.path()).unwrap();
    assert_eq!((partial.samples.len(), partial.skipped), (2, 1));
    assert!(partial.samples.iter().all(|s| &s.id != victim));

    fs::write(dir.path().join("manifest.tsv"), "id\tview1_path\tview2_path\tlabel\n").unwrap();
    assert!(matches!(load_pairs(dir.path()), Err(Error::Data(_))));
    fs::write(dir.path().join("manifest.tsv"), "id\tview1_path\tlabel\n").unwrap();
    assert!(matches!(load_pairs(dir.path()), Err(Error::Data(_))));
}
