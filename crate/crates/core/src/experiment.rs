//! Run configuration and the repeated-seed ablation grid.

use crate::data::{generate, load_dataset, Dataset, TaskSpec};
use crate::error::{Error, Result};
use crate::fusion::FusionStrategy;
use crate::kv::{parse_flag, KvMap};
use crate::model::{MultiViewModel, ViewMode};
use crate::train::{stream, train, RunRecord, Stream, TrainConfig};
use crate::vit::ModelConfig;
use sha2::{Digest, Sha256};
use std::fmt::Write;
use std::path::PathBuf;

/// Everything that determines a run.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub views: ViewMode,
    pub strategy: FusionStrategy,
    pub rtf: bool,
    pub train: TrainConfig,
    pub task: TaskSpec,
    /// Read pairs from this directory instead of generating `task`.
    pub data_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            views: ViewMode::Both,
            strategy: FusionStrategy::Concat,
            rtf: true,
            train: TrainConfig::default(),
            task: TaskSpec::default(),
            data_dir: None,
        }
    }
}

const MODEL_KEYS: [&str; 10] = [
    "image_size",
    "patch_size",
    "channels",
    "dim",
    "depth",
    "heads",
    "mlp_ratio",
    "local_fraction",
    "shared_local",
    "views",
];
const TRAIN_KEYS: [&str; 9] = ["lr", "weight_decay", "beta1", "beta2", "eps", "epochs", "batch_size", "seed", "augment"];
const TASK_KEYS: [&str; 10] =
    ["kind", "n_train", "n_val", "n_test", "image_size", "channels", "alpha", "noise", "square", "seed"];
pub const GRID_KEYS: [&str; 5] = ["grid.strategy", "grid.rtf", "grid.split", "grid.scale", "grid.seeds"];

fn known_keys() -> Vec<String> {
    let mut keys: Vec<String> = MODEL_KEYS.iter().map(|k| format!("model.{k}")).collect();
    keys.extend(TRAIN_KEYS.iter().map(|k| format!("train.{k}")));
    keys.extend(TASK_KEYS.iter().map(|k| format!("task.{k}")));
    keys.extend(["fusion.strategy", "fusion.rtf", "data.dir"].map(String::from));
    keys.extend(GRID_KEYS.map(String::from));
    keys
}

impl ExperimentConfig {
    /// Overlays `kv` onto the defaults; unknown keys are config errors.
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let known = known_keys();
        let known: Vec<&str> = known.iter().map(String::as_str).collect();
        let unknown = kv.unknown_keys(&known);
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown config keys: {}", unknown.join(", "))));
        }
        let mut c = Self::default();
        c.model.update_from_kv(kv, "model.")?;
        if let Some(v) = kv.parse::<ViewMode>("model.views")? {
            c.views = v;
        }
        c.train.update_from_kv(kv, "train.")?;
        c.task.update_from_kv(kv, "task.")?;
        if let Some(s) = kv.parse::<FusionStrategy>("fusion.strategy")? {
            c.strategy = s;
        }
        if let Some(v) = kv.get("fusion.rtf") {
            c.rtf = parse_flag(v)?;
        }
        c.data_dir = kv.get("data.dir").map(PathBuf::from);
        Ok(c)
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = self.model.to_kv("model.");
        kv.set("model.views", self.views.name());
        kv.set("fusion.strategy", self.strategy.name());
        kv.set("fusion.rtf", if self.rtf { "on" } else { "off" });
        kv.merge(&self.train.to_kv("train."));
        match &self.data_dir {
            Some(dir) => kv.set("data.dir", dir.display()),
            None => kv.merge(&self.task.to_kv("task.")),
        }
        kv
    }

    /// Hex prefix of the SHA-256 of the rendered config.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_kv().render().as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data_dir.is_none() {
            self.task.validate()?;
        }
        Ok(())
    }

    pub fn load_data(&self) -> Result<Dataset> {
        let data = match &self.data_dir {
            Some(dir) => {
                let (data, skipped) = load_dataset(dir)?;
                if skipped > 0 {
                    log::warn!("{skipped} incomplete pairs skipped under {}", dir.display());
                }
                data
            }
            None => generate(&self.task)?,
        };
        if let Some((size, channels)) = data.geometry() {
            if size != self.model.image_size || channels != self.model.channels {
                return Err(Error::Config(format!(
                    "data is {size}px with {channels} channel(s) but the model expects {}px with {}",
                    self.model.image_size, self.model.channels
                )));
            }
        }
        Ok(data)
    }

    /// Freshly initialized model for this config.
    pub fn build_model(&self) -> Result<MultiViewModel<f32>> {
        let mut rng = stream(self.train.seed, Stream::Init);
        Ok(MultiViewModel::with_rng(self.model.clone(), self.strategy, self.rtf, &mut rng)?.with_views(self.views))
    }

    /// Builds and trains one model on `data`.
    pub fn run(&self, data: &Dataset) -> Result<(MultiViewModel<f32>, RunRecord)> {
        self.validate()?;
        let mut model = self.build_model()?;
        let record = train(&mut model, data, &self.train, &self.hash())?;
        Ok((model, record))
    }
}

/// Model width and depth of a grid cell, written `DxL`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Scale {
    pub dim: usize,
    pub depth: usize,
}

impl std::fmt::Display for Scale {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.dim, self.depth)
    }
}

impl std::str::FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("scale must be written DIMxDEPTH, got '{s}'"));
        let (d, l) = s.trim().split_once('x').ok_or_else(bad)?;
        Ok(Scale { dim: d.parse().map_err(|_| bad())?, depth: l.parse().map_err(|_| bad())? })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub strategy: FusionStrategy,
    pub rtf: bool,
    pub split: f64,
    pub scale: Scale,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub strategies: Vec<FusionStrategy>,
    pub rtf: Vec<bool>,
    pub splits: Vec<f64>,
    pub scales: Vec<Scale>,
    pub seeds: Vec<u64>,
}

impl Grid {
    /// One cell matching `base` with its seed.
    pub fn single(base: &ExperimentConfig) -> Self {
        Self {
            strategies: vec![base.strategy],
            rtf: vec![base.rtf],
            splits: vec![base.model.local_fraction],
            scales: vec![Scale { dim: base.model.dim, depth: base.model.depth }],
            seeds: vec![base.train.seed],
        }
    }

    /// `grid.*` keys over the single-cell grid of `base`.
    pub fn from_kv(kv: &KvMap, base: &ExperimentConfig) -> Result<Self> {
        let mut g = Self::single(base);
        if let Some(v) = kv.list::<FusionStrategy>("grid.strategy")? {
            g.strategies = v;
        }
        if let Some(v) = kv.get("grid.rtf") {
            g.rtf = v.split(',').map(parse_flag).collect::<Result<_>>()?;
        }
        if let Some(v) = kv.list::<f64>("grid.split")? {
            g.splits = v;
        }
        if let Some(v) = kv.list::<Scale>("grid.scale")? {
            g.scales = v;
        }
        if let Some(v) = kv.list::<u64>("grid.seeds")? {
            g.seeds = v;
        }
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells().is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("grid has no cells".into()));
        }
        Ok(())
    }

    /// Cells in output order: scale, split, strategy, rtf.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &scale in &self.scales {
            for &split in &self.splits {
                for &strategy in &self.strategies {
                    for &rtf in &self.rtf {
                        out.push(Cell { strategy, rtf, split, scale });
                    }
                }
            }
        }
        out
    }

    pub fn run_count(&self) -> usize {
        self.cells().len() * self.seeds.len()
    }
}

/// Config of one `(cell, seed)` run derived from `base`.
pub fn cell_config(base: &ExperimentConfig, cell: &Cell, seed: u64) -> ExperimentConfig {
    let mut c = base.clone();
    c.strategy = cell.strategy;
    c.rtf = cell.rtf;
    c.model.local_fraction = cell.split;
    c.model.dim = cell.scale.dim;
    c.model.depth = cell.scale.depth;
    c.train.seed = seed;
    c
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellRun {
    pub cell: Cell,
    pub seed: u64,
    /// The failure diagnostic when the run aborted.
    pub outcome: std::result::Result<RunRecord, String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatrixResult {
    pub runs: Vec<CellRun>,
}

/// Runs every `(cell, seed)` of `grid` on `data`. Each run builds its own
/// model and random streams from its seed alone, so results do not depend
/// on execution order. Failed runs are recorded and the matrix continues.
pub fn run_matrix(base: &ExperimentConfig, grid: &Grid, data: &Dataset) -> Result<MatrixResult> {
    grid.validate()?;
    let mut runs = Vec::with_capacity(grid.run_count());
    for cell in grid.cells() {
        for &seed in &grid.seeds {
            let cfg = cell_config(base, &cell, seed);
            let outcome = cfg.run(data).map(|(_, r)| r).map_err(|e| e.to_string());
            match &outcome {
                Ok(r) => log::info!(
                    "{} rtf={} split={} scale={} seed={seed}: test auc {:.4}",
                    cell.strategy,
                    on_off(cell.rtf),
                    cell.split,
                    cell.scale,
                    r.test_auc
                ),
                Err(e) => log::warn!("cell {cell:?} seed {seed} failed: {e}"),
            }
            runs.push(CellRun { cell, seed, outcome });
        }
    }
    Ok(MatrixResult { runs })
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

pub const RESULTS_HEADER: &str = "strategy,rtf,split_fraction,scale,seed,val_auc,test_auc";

/// One results row; failed runs leave the AUC fields empty.
pub fn results_row(cell: &Cell, seed: u64, record: Option<&RunRecord>) -> String {
    let (v, t) = match record {
        Some(r) => (format!("{:.6}", r.val_auc), format!("{:.6}", r.test_auc)),
        None => (String::new(), String::new()),
    };
    format!("{},{},{},{},{seed},{v},{t}", cell.strategy, on_off(cell.rtf), cell.split, cell.scale)
}

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellSummary {
    pub cell: Cell,
    pub ok: usize,
    pub failed: usize,
    pub val: (f64, f64),
    pub test: (f64, f64),
}

impl MatrixResult {
    pub fn results_csv(&self) -> String {
        let mut out = format!("{RESULTS_HEADER}\n");
        for r in &self.runs {
            let _ = writeln!(out, "{}", results_row(&r.cell, r.seed, r.outcome.as_ref().ok()));
        }
        out
    }

    pub fn failures(&self) -> Vec<&CellRun> {
        self.runs.iter().filter(|r| r.outcome.is_err()).collect()
    }

    pub fn summaries(&self) -> Vec<CellSummary> {
        let mut cells: Vec<Cell> = Vec::new();
        for r in &self.runs {
            if !cells.contains(&r.cell) {
                cells.push(r.cell);
            }
        }
        cells
            .into_iter()
            .map(|cell| {
                let runs: Vec<&CellRun> = self.runs.iter().filter(|r| r.cell == cell).collect();
                let ok: Vec<&RunRecord> = runs.iter().filter_map(|r| r.outcome.as_ref().ok()).collect();
                let val: Vec<f64> = ok.iter().map(|r| r.val_auc).collect();
                let test: Vec<f64> = ok.iter().map(|r| r.test_auc).collect();
                CellSummary { cell, ok: ok.len(), failed: runs.len() - ok.len(), val: mean_std(&val), test: mean_std(&test) }
            })
            .collect()
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from(
            "strategy,rtf,split_fraction,scale,runs,failed,val_auc_mean,val_auc_std,test_auc_mean,test_auc_std\n",
        );
        for s in self.summaries() {
            let c = s.cell;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
                c.strategy,
                on_off(c.rtf),
                c.split,
                c.scale,
                s.ok,
                s.failed,
                s.val.0,
                s.val.1,
                s.test.0,
                s.test.1
            );
        }
        out
    }

    /// Test AUC pivot: one row per (fusion, RTF) pair, one column per split
    /// fraction, a block per scale. Returns `(csv, markdown)`.
    pub fn pivot_tables(&self) -> (String, String) {
        let summaries = self.summaries();
        let uniq = |f: &dyn Fn(&Cell) -> String| {
            let mut v: Vec<String> = Vec::new();
            for s in &summaries {
                let k = f(&s.cell);
                if !v.contains(&k) {
                    v.push(k);
                }
            }
            v
        };
        let scales = uniq(&|c| c.scale.to_string());
        let splits = uniq(&|c| c.split.to_string());
        let strategies = uniq(&|c| c.strategy.to_string());
        let rtfs = uniq(&|c| on_off(c.rtf).to_string());
        let pct = |s: &str| format!("{}% local", (s.parse::<f64>().unwrap_or(0.0) * 100.0).round());
        let mut csv = format!("scale,fusion,rtf,{}\n", splits.iter().map(|s| pct(s)).collect::<Vec<_>>().join(","));
        let mut md = String::new();
        for scale in &scales {
            let _ = writeln!(md, "Scale {scale}: test AUC, mean ± std over seeds\n");
            let _ = writeln!(md, "| Fusion | RTF | {} |", splits.iter().map(|s| pct(s)).collect::<Vec<_>>().join(" | "));
            let _ = writeln!(md, "|---|---|{}", "---|".repeat(splits.len()));
            for strategy in &strategies {
                for rtf in &rtfs {
                    let entries: Vec<String> = splits
                        .iter()
                        .map(|split| {
                            summaries
                                .iter()
                                .find(|s| {
                                    s.cell.scale.to_string() == *scale
                                        && s.cell.split.to_string() == *split
                                        && s.cell.strategy.to_string() == *strategy
                                        && on_off(s.cell.rtf) == rtf
                                })
                                .filter(|s| s.ok > 0)
                                .map_or("failed".to_string(), |s| format!("{:.3} ± {:.3}", s.test.0, s.test.1))
                        })
                        .collect();
                    let label = if rtf == "on" { "yes" } else { "no" };
                    let _ = writeln!(csv, "{scale},{strategy},{label},{}", entries.join(","));
                    let _ = writeln!(md, "| {strategy} | {label} | {} |", entries.join(" | "));
                }
            }
            md.push('\n');
        }
        (csv, md)
    }
}
