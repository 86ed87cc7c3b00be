use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
task.kind=dominant
task.image_size=16
task.n_train=32
task.n_val=16
task.n_test=16
task.alpha=1.0
task.noise=0.1
model.image_size=16
model.dim=16
model.depth=2
model.heads=2
model.local_fraction=0.5
train.epochs=2
train.batch_size=8
";

fn rtf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rtf")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.cfg");
    fs::write(&path, TINY).unwrap();
    path.display().to_string()
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d").display().to_string();
    let o = rtf(&["gen-data", "--kind", "spiral", "--out", &out]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("spiral"));
    let o = rtf(&["train", "--strategy", "sum", "--out", &out]);
    assert_eq!(code(&o), 2);
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "model.dim=15\nmodel.heads=2\nmodel.depth=2\nmodel.local_fraction=0.5\n").unwrap();
    assert_eq!(code(&rtf(&["train", "--config", bad.to_str().unwrap(), "--out", &out])), 2);
}

#[test]
fn gradcheck_passes_and_detects_an_injected_fault() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    let o = rtf(&["gradcheck", "--out", &out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert!(read(dir.path(), "gradcheck.txt").contains("matmul"));
    let o = rtf(&["gradcheck", "--inject-fault", "softmax_rows", "--out", &out]);
    assert_eq!(code(&o), 4);
    assert_eq!(code(&rtf(&["gradcheck", "--inject-fault", "nope", "--out", &out])), 2);
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run").display().to_string();
    let o = rtf(&["train", "--config", &cfg, "--lr", "1e30", "--out", &out]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn gen_data_is_byte_identical_on_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let o = rtf(&["gen-data", "--kind", "xor", "--n", "16", "--image-size", "16", "--seed", "3", "--out", d.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let files = read(&a, "outputs.txt");
    assert!(files.contains("manifest.tsv"));
    for f in files.lines() {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let manifest = read(&a, "manifest.tsv");
    assert_eq!(manifest.lines().count(), 1 + 16 + 4 + 8);
}

#[test]
fn train_writes_its_outputs_and_matches_a_single_cell_ablation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (t, a) = (dir.path().join("train"), dir.path().join("ablate"));
    let o = rtf(&["train", "--config", &cfg, "--seed", "5", "--out", t.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["config.txt", "history.csv", "results.csv", "outputs.txt"] {
        assert!(t.join(f).exists(), "{f}");
    }
    assert!(t.join("checkpoint").exists());
    assert_eq!(read(&t, "history.csv").lines().count(), 1 + 2);

    let grid = dir.path().join("grid.cfg");
    fs::write(&grid, format!("{TINY}grid.seeds=5\n")).unwrap();
    let o = rtf(&["ablate", "--config", grid.to_str().unwrap(), "--seed", "5", "--out", a.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read(&t, "results.csv"), read(&a, "results.csv"));
}

#[test]
fn ablation_csvs_are_byte_identical_on_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let grid = dir.path().join("grid.cfg");
    fs::write(&grid, format!("{TINY}train.epochs=1\ngrid.strategy=average,concat\ngrid.rtf=off,on\ngrid.seeds=0,1\n")).unwrap();
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = rtf(&["ablate", "--config", grid.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        runs.push(out);
    }
    for f in ["results.csv", "summary.csv", "table.csv", "table.md"] {
        assert_eq!(read(&runs[0], f), read(&runs[1], f), "{f}");
    }
    assert_eq!(read(&runs[0], "results.csv").lines().count(), 1 + 8);
}

#[test]
fn attention_export_needs_a_concat_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let avg = dir.path().join("avg");
    let o = rtf(&["train", "--config", &cfg, "--strategy", "average", "--epochs", "1", "--out", avg.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let att = dir.path().join("att");
    let o = rtf(&[
        "attention",
        "--config",
        &cfg,
        "--checkpoint",
        avg.join("checkpoint").to_str().unwrap(),
        "--out",
        att.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);

    let cat = dir.path().join("cat");
    let o = rtf(&["train", "--config", &cfg, "--strategy", "concat", "--epochs", "1", "--out", cat.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let o = rtf(&[
        "attention",
        "--config",
        &cfg,
        "--checkpoint",
        cat.join("checkpoint").to_str().unwrap(),
        "--n",
        "4",
        "--out",
        att.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let pngs = fs::read_dir(att.join("attention")).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png")).count();
    assert_eq!(pngs, 8);
    let balance = read(&att, "balance.csv");
    let rows: Vec<&str> = balance.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    for r in rows {
        let f: Vec<f64> = r.split(',').skip(2).map(|v| v.parse().unwrap()).collect();
        assert!((f[0] + f[1] - 1.0).abs() < 1e-5, "{r}");
    }
}
