//! `rtf`: data generation, training, ablation grids, gradient checking and
//! attention export for two-view vision transformers.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numerical
//! divergence, 4 verification failure.

use clap::{Args, Parser, Subcommand};
use rtf_core::attention::{grid_text, save_heatmap, view_attention};
use rtf_core::checkpoint;
use rtf_core::data::{self, Dataset, MultiViewSample, TaskKind};
use rtf_core::experiment::{run_matrix, ExperimentConfig, Grid, RESULTS_HEADER};
use rtf_core::gradcheck::run_suite;
use rtf_core::kv::{parse_flag, KvMap};
use rtf_core::{Error, FusionStrategy, OpKind, ViewMode};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "rtf", version, about = "Two-view vision transformers with random token fusion")]
struct Cli {
    /// Seed: the task seed for gen-data, the training seed otherwise.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "rtf-out")]
    out: PathBuf,
    /// key=value config file with dotted keys (model.depth=4, train.lr=0.001, ...).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic two-view dataset as PNGs plus a manifest.
    GenData(GenArgs),
    /// Train one model and archive checkpoint, history and results.
    Train(RunArgs),
    /// Train every cell of a grid over several seeds.
    Ablate(AblateArgs),
    /// Finite-difference check of every backward rule and the full model.
    Gradcheck(GradArgs),
    /// Export CLS attention maps and view balance of a Concat checkpoint.
    Attention(AttentionArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    kind: Option<String>,
    /// Training samples; validation and test default to n/4 and n/2.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    n_val: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    /// Fraction of samples whose view-1 cue agrees with the label.
    #[arg(long)]
    alpha: Option<f64>,
    /// Pixel noise standard deviation.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
}

#[derive(Args, Debug, Default)]
struct RunArgs {
    /// average, clscat or concat.
    #[arg(long)]
    strategy: Option<String>,
    /// on or off.
    #[arg(long)]
    rtf: Option<String>,
    /// Fraction of blocks in the local encoder.
    #[arg(long)]
    split: Option<f64>,
    /// both, view1 or view2.
    #[arg(long)]
    views: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    /// Dataset directory written by gen-data; otherwise the config's task is generated.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// The 3 split fractions x 3 strategies x with/without RTF grid.
    #[arg(long)]
    full_grid: bool,
}

#[derive(Args, Debug)]
struct GradArgs {
    /// Corrupt one backward rule (negative control).
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

#[derive(Args, Debug)]
struct AttentionArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory; otherwise the config's task is generated.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Test samples to export, in id order.
    #[arg(long, default_value_t = 4)]
    n: usize,
}

enum Failure {
    Error(Error),
    Verification(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Error(Error::Io(e))
    }
}

type CmdResult = Result<(), Failure>;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence(_) | Error::NonFinite { .. } => 3,
        Error::Config(_)
        | Error::Validation(_)
        | Error::Unsupported(_)
        | Error::Data(_)
        | Error::Generation(_)
        | Error::Format(_)
        | Error::Io(_)
        | Error::Image(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Verification(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(4)
        }
    }
}

fn dispatch(cli: &Cli) -> CmdResult {
    let kv = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
            KvMap::parse_text(&text)?
        }
        None => KvMap::new(),
    };
    match &cli.command {
        Command::GenData(a) => gen_data(cli, &kv, a),
        Command::Train(a) => train(cli, &kv, a),
        Command::Ablate(a) => ablate(cli, &kv, a),
        Command::Gradcheck(a) => gradcheck(cli, a),
        Command::Attention(a) => attention(cli, &kv, a),
    }
}

/// Records `files` (relative to `out`) in `out/outputs.txt`.
fn write_outputs(out: &Path, files: &[PathBuf]) -> CmdResult {
    let mut rel: Vec<String> = files
        .iter()
        .map(|f| f.strip_prefix(out).unwrap_or(f).display().to_string())
        .collect();
    rel.sort();
    rel.dedup();
    let mut text = rel.join("\n");
    text.push('\n');
    fs::write(out.join("outputs.txt"), text)?;
    Ok(())
}

fn write(out: &Path, name: &str, text: &str, files: &mut Vec<PathBuf>) -> CmdResult {
    let path = out.join(name);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(&path, text)?;
    files.push(path);
    Ok(())
}

fn gen_data(cli: &Cli, kv: &KvMap, a: &GenArgs) -> CmdResult {
    let mut cfg = ExperimentConfig::from_kv(kv)?;
    let task = &mut cfg.task;
    if let Some(k) = &a.kind {
        task.kind = k.parse::<TaskKind>()?;
    }
    if let Some(n) = a.n {
        task.n_train = n;
        task.n_val = n / 4;
        task.n_test = n / 2;
    }
    task.n_val = a.n_val.unwrap_or(task.n_val);
    task.n_test = a.n_test.unwrap_or(task.n_test);
    task.alpha = a.alpha.unwrap_or(task.alpha);
    task.noise = a.noise.unwrap_or(task.noise);
    task.image_size = a.image_size.unwrap_or(task.image_size);
    task.channels = a.channels.unwrap_or(task.channels);
    task.seed = cli.seed.unwrap_or(task.seed);
    let data = data::generate(task)?;
    fs::create_dir_all(&cli.out)?;
    let mut files = data::export(&data, Some(task), &cli.out)?;
    files.push(cli.out.join("outputs.txt"));
    write_outputs(&cli.out, &files)?;
    println!(
        "{} dataset: train {}, val {}, test {} -> {}",
        task.kind,
        data.train.len(),
        data.val.len(),
        data.test.len(),
        cli.out.display()
    );
    Ok(())
}

/// Config file, then command-line overrides.
fn run_config(cli: &Cli, kv: &KvMap, a: &RunArgs) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::from_kv(kv)?;
    if let Some(s) = &a.strategy {
        cfg.strategy = s.parse::<FusionStrategy>()?;
    }
    if let Some(r) = &a.rtf {
        cfg.rtf = parse_flag(r)?;
    }
    if let Some(v) = &a.views {
        cfg.views = v.parse::<ViewMode>()?;
    }
    cfg.model.local_fraction = a.split.unwrap_or(cfg.model.local_fraction);
    cfg.model.depth = a.depth.unwrap_or(cfg.model.depth);
    cfg.model.dim = a.dim.unwrap_or(cfg.model.dim);
    cfg.train.epochs = a.epochs.unwrap_or(cfg.train.epochs);
    cfg.train.optim.lr = a.lr.unwrap_or(cfg.train.optim.lr);
    cfg.train.batch_size = a.batch_size.unwrap_or(cfg.train.batch_size);
    cfg.train.seed = cli.seed.unwrap_or(cfg.train.seed);
    if let Some(d) = &a.data {
        cfg.data_dir = Some(d.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(cli: &Cli, kv: &KvMap, a: &RunArgs) -> CmdResult {
    let cfg = run_config(cli, kv, a)?;
    let data = cfg.load_data()?;
    let (model, record) = cfg.run(&data)?;
    let out = &cli.out;
    fs::create_dir_all(out)?;
    let mut files = Vec::new();
    write(out, "config.txt", &cfg.to_kv().render(), &mut files)?;
    let mut extra = KvMap::new();
    extra.set("train.seed", cfg.train.seed);
    extra.set("run.config_hash", &record.config_hash);
    files.extend(checkpoint::save(&model, &out.join("checkpoint"), &extra)?);
    write(out, "history.csv", &record.history_csv(), &mut files)?;
    let grid = Grid::single(&cfg);
    let row = rtf_core::experiment::results_row(&grid.cells()[0], cfg.train.seed, Some(&record));
    write(out, "results.csv", &format!("{RESULTS_HEADER}\n{row}\n"), &mut files)?;
    files.push(out.join("outputs.txt"));
    write_outputs(out, &files)?;
    let best = record.best_epoch.map_or("none".to_string(), |e| e.to_string());
    println!(
        "{} rtf={} views={}: best epoch {best}, val auc {:.4}, test auc {:.4}",
        cfg.strategy,
        if cfg.rtf { "on" } else { "off" },
        cfg.views,
        record.val_auc,
        record.test_auc
    );
    Ok(())
}

fn ablate(cli: &Cli, kv: &KvMap, a: &AblateArgs) -> CmdResult {
    let base = run_config(cli, kv, &a.run)?;
    let mut grid = Grid::from_kv(kv, &base)?;
    if a.full_grid {
        grid.strategies = FusionStrategy::ALL.to_vec();
        grid.rtf = vec![false, true];
        grid.splits = vec![0.25, 0.5, 0.75];
    }
    if !kv.contains("grid.seeds") {
        grid.seeds = (base.train.seed..base.train.seed + 4).collect();
    }
    grid.validate()?;
    let data = base.load_data()?;
    let result = run_matrix(&base, &grid, &data)?;
    let out = &cli.out;
    fs::create_dir_all(out)?;
    let mut files = Vec::new();
    let mut archived = base.to_kv();
    archived.set("grid.strategy", grid.strategies.iter().map(|s| s.name()).collect::<Vec<_>>().join(","));
    archived.set("grid.rtf", grid.rtf.iter().map(|&r| if r { "on" } else { "off" }).collect::<Vec<_>>().join(","));
    archived.set("grid.split", grid.splits.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","));
    archived.set("grid.scale", grid.scales.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","));
    archived.set("grid.seeds", grid.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","));
    write(out, "config.txt", &archived.render(), &mut files)?;
    write(out, "results.csv", &result.results_csv(), &mut files)?;
    write(out, "summary.csv", &result.summary_csv(), &mut files)?;
    let (table_csv, table_md) = result.pivot_tables();
    write(out, "table.csv", &table_csv, &mut files)?;
    write(out, "table.md", &table_md, &mut files)?;
    let failures = result.failures();
    if !failures.is_empty() {
        let mut text = String::from("strategy\trtf\tsplit_fraction\tscale\tseed\terror\n");
        for f in &failures {
            let err = f.outcome.as_ref().err().map(String::as_str).unwrap_or_default();
            text.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{err}\n",
                f.cell.strategy, f.cell.rtf, f.cell.split, f.cell.scale, f.seed
            ));
        }
        write(out, "failures.tsv", &text, &mut files)?;
    }
    files.push(out.join("outputs.txt"));
    write_outputs(out, &files)?;
    print!("{table_md}");
    println!("{} runs, {} failed -> {}", result.runs.len(), failures.len(), out.display());
    if failures.len() == result.runs.len() {
        return Err(Error::Divergence("every cell of the grid failed".into()).into());
    }
    Ok(())
}

fn gradcheck(cli: &Cli, a: &GradArgs) -> CmdResult {
    let fault = match &a.inject_fault {
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| Error::Config(format!("unknown op '{name}'")))?),
        None => None,
    };
    let report = run_suite(fault)?;
    let text = report.render();
    print!("{text}");
    fs::create_dir_all(&cli.out)?;
    let mut files = Vec::new();
    write(&cli.out, "gradcheck.txt", &text, &mut files)?;
    files.push(cli.out.join("outputs.txt"));
    write_outputs(&cli.out, &files)?;
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Verification("finite differences disagree with the tape".into()))
    }
}

fn attention(cli: &Cli, kv: &KvMap, a: &AttentionArgs) -> CmdResult {
    let model = checkpoint::load(&a.checkpoint)?;
    if model.strategy != FusionStrategy::Concat || model.views != ViewMode::Both {
        return Err(Error::Unsupported(format!(
            "attention export needs a two-view Concat checkpoint; {} holds strategy {} with views {}",
            a.checkpoint.display(),
            model.strategy,
            model.views
        ))
        .into());
    }
    let mut cfg = ExperimentConfig::from_kv(kv)?;
    cfg.model = model.cfg().clone();
    if let Some(d) = &a.data {
        cfg.data_dir = Some(d.clone());
    }
    let data: Dataset = cfg.load_data()?;
    let mut test: Vec<&MultiViewSample> = data.test.iter().collect();
    test.sort_by(|x, y| x.id.cmp(&y.id));
    test.truncate(a.n);
    if test.is_empty() {
        return Err(Error::Data("no test samples to export".into()).into());
    }
    let maps = view_attention(&model, &test)?;
    let out = &cli.out;
    fs::create_dir_all(out.join("attention"))?;
    let mut files = Vec::new();
    let mut balance = String::from("id,label,mass1,mass2\n");
    let scale = model.cfg().patch_size;
    for (s, m) in test.iter().zip(&maps) {
        let max = m.view1.iter().chain(&m.view2).copied().fold(0.0, f64::max);
        for (tag, grid) in [("view1", &m.view1), ("view2", &m.view2)] {
            let png = out.join(format!("attention/{}_{tag}.png", s.id));
            save_heatmap(grid, m.side, scale, max, &png)?;
            files.push(png);
            write(out, &format!("attention/{}_{tag}.txt", s.id), &grid_text(grid, m.side), &mut files)?;
        }
        balance.push_str(&format!("{},{},{:.6},{:.6}\n", s.id, s.label, m.balance.mass1, m.balance.mass2));
    }
    write(out, "balance.csv", &balance, &mut files)?;
    files.push(out.join("outputs.txt"));
    write_outputs(out, &files)?;
    print!("{balance}");
    Ok(())
}
