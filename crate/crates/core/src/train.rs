//! Training loop with best-validation checkpoint selection.

use crate::data::{augment, batch_tensors, Dataset, MultiViewSample};
use crate::error::{Error, Result};
use crate::kv::{parse_flag, KvMap};
use crate::metrics::auc;
use crate::model::MultiViewModel;
use crate::optim::{AdamW, AdamWConfig};
use crate::vit::ParamStore;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write;

/// Independent random streams derived from one run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 0,
    Shuffle = 1,
    Masks = 2,
    Augment = 3,
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optim: AdamWConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Random horizontal flips of the training views.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { optim: AdamWConfig::default(), epochs: 60, batch_size: 32, seed: 0, augment: false }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self, prefix: &str) -> KvMap {
        let mut kv = KvMap::new();
        kv.set(format!("{prefix}lr"), self.optim.lr);
        kv.set(format!("{prefix}weight_decay"), self.optim.weight_decay);
        kv.set(format!("{prefix}beta1"), self.optim.beta1);
        kv.set(format!("{prefix}beta2"), self.optim.beta2);
        kv.set(format!("{prefix}eps"), self.optim.eps);
        kv.set(format!("{prefix}epochs"), self.epochs);
        kv.set(format!("{prefix}batch_size"), self.batch_size);
        kv.set(format!("{prefix}seed"), self.seed);
        kv.set(format!("{prefix}augment"), if self.augment { "on" } else { "off" });
        kv
    }

    /// Reads `prefix`-keyed fields, keeping current values for absent keys.
    pub fn update_from_kv(&mut self, kv: &KvMap, prefix: &str) -> Result<()> {
        let key = |k: &str| format!("{prefix}{k}");
        kv.update(&key("lr"), &mut self.optim.lr)?;
        kv.update(&key("weight_decay"), &mut self.optim.weight_decay)?;
        kv.update(&key("beta1"), &mut self.optim.beta1)?;
        kv.update(&key("beta2"), &mut self.optim.beta2)?;
        kv.update(&key("eps"), &mut self.optim.eps)?;
        kv.update(&key("epochs"), &mut self.epochs)?;
        kv.update(&key("batch_size"), &mut self.batch_size)?;
        kv.update(&key("seed"), &mut self.seed)?;
        if let Some(v) = kv.get(&key("augment")) {
            self.augment = parse_flag(v)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean combined loss over the epoch's batches.
    pub train_loss: f64,
    pub val_auc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub seed: u64,
    pub config_hash: String,
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters were restored; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
    /// Validation AUC of the restored parameters.
    pub val_auc: f64,
    pub test_auc: f64,
}

impl RunRecord {
    pub fn history_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_auc\n");
        for e in &self.history {
            let _ = writeln!(out, "{},{:.6},{:.6}", e.epoch, e.train_loss, e.val_auc);
        }
        out
    }
}

const EVAL_BATCH: usize = 64;

/// Inference logits for `samples`, in order.
pub fn scores(model: &MultiViewModel<f32>, samples: &[MultiViewSample]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&MultiViewSample> = chunk.iter().collect();
        let (x1, x2, _) = batch_tensors(&refs)?;
        let y = model.forward_infer(&x1, &x2)?;
        out.extend(y.values().iter().map(|&v| v as f64));
    }
    Ok(out)
}

pub fn evaluate_auc(model: &MultiViewModel<f32>, samples: &[MultiViewSample]) -> Result<f64> {
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    auc(&scores(model, samples)?, &labels)
}

fn snapshot(params: &ParamStore<f32>) -> Vec<Vec<f32>> {
    params.iter().map(|p| p.tensor.values().to_vec()).collect()
}

fn restore(params: &mut ParamStore<f32>, values: &[Vec<f32>]) {
    for (p, v) in params.iter_mut().zip(values) {
        p.tensor.values_mut().copy_from_slice(v);
    }
}

fn diverged(epoch: usize, step: usize, detail: impl std::fmt::Display) -> Error {
    Error::Divergence(format!("epoch {epoch}, step {step}: {detail}"))
}

/// Trains `model` in place and leaves it at the epoch with the highest
/// validation AUC (earliest on ties). Deterministic in `(cfg, data, model)`.
pub fn train(
    model: &mut MultiViewModel<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
    config_hash: &str,
) -> Result<RunRecord> {
    cfg.validate()?;
    for (name, split) in data.splits() {
        if split.is_empty() {
            return Err(Error::Data(format!("{name} split is empty")));
        }
    }
    let mut opt = AdamW::new(cfg.optim, model.params())?;
    let mut shuffle = stream(cfg.seed, Stream::Shuffle);
    let mut masks = stream(cfg.seed, Stream::Masks);
    let mut flips = stream(cfg.seed, Stream::Augment);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Vec<Vec<f32>>)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let augmented: Vec<MultiViewSample>;
            let refs: Vec<&MultiViewSample> = if cfg.augment {
                augmented = idx.iter().map(|&i| augment(&data.train[i], &mut flips)).collect();
                augmented.iter().collect()
            } else {
                idx.iter().map(|&i| &data.train[i]).collect()
            };
            let (x1, x2, y) = batch_tensors(&refs)?;
            let loss = match model.loss_and_grads(&x1, &x2, &y, &mut masks) {
                Ok(l) => l,
                Err(e @ Error::NonFinite { .. }) => return Err(diverged(epoch, step + 1, e)),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(diverged(epoch, step + 1, format!("loss {loss}")));
            }
            opt.step(model.params_mut())?;
            if !model.params().iter().all(|p| p.tensor.all_finite()) {
                return Err(diverged(epoch, step + 1, "non-finite parameters after update"));
            }
            loss_sum += loss;
            batches += 1;
        }
        let val_auc = evaluate_auc(model, &data.val)?;
        let train_loss = loss_sum / batches as f64;
        log::debug!("epoch {epoch}: loss {train_loss:.4}, val auc {val_auc:.4}");
        history.push(EpochRecord { epoch, train_loss, val_auc });
        if best.as_ref().is_none_or(|b| val_auc > b.1) {
            best = Some((epoch, val_auc, snapshot(model.params())));
        }
    }

    let (best_epoch, val_auc) = match best {
        Some((epoch, val, values)) => {
            restore(model.params_mut(), &values);
            (Some(epoch), val)
        }
        None => (None, evaluate_auc(model, &data.val)?),
    };
    let test_auc = evaluate_auc(model, &data.test)?;
    Ok(RunRecord { seed: cfg.seed, config_hash: config_hash.to_string(), history, best_epoch, val_auc, test_auc })
}
