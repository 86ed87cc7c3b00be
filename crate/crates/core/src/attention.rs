//! CLS attention of the last global block under Concat fusion, split by the
//! view each spatial column came from.

use crate::data::{batch_tensors, MultiViewSample};
use crate::error::{Error, Result};
use crate::fusion::FusionStrategy;
use crate::model::{MultiViewModel, ViewMode};
use image::{GrayImage, ImageBuffer, Luma};
use std::fmt::Write;
use std::path::Path;

/// Share of CLS attention on each view's spatial tokens; sums to 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionBalance {
    pub mass1: f64,
    pub mass2: f64,
}

impl AttentionBalance {
    /// `|mass1 - 0.5|`.
    pub fn imbalance(&self) -> f64 {
        (self.mass1 - 0.5).abs()
    }
}

/// Head- and CLS-row-averaged attention over the patch grid of each view.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewAttention {
    pub balance: AttentionBalance,
    /// Patches per side.
    pub side: usize,
    /// Row-major `side x side` grids, renormalized jointly to sum to 1.
    pub view1: Vec<f64>,
    pub view2: Vec<f64>,
}

fn require_concat(model: &MultiViewModel<f32>) -> Result<()> {
    if model.strategy != FusionStrategy::Concat || model.views != ViewMode::Both {
        return Err(Error::Unsupported(format!(
            "attention balance needs a two-view Concat model, got strategy {} with views {}",
            model.strategy, model.views
        )));
    }
    Ok(())
}

/// Runs inference on `samples` and reads the last global block's attention.
pub fn view_attention(model: &MultiViewModel<f32>, samples: &[&MultiViewSample]) -> Result<Vec<ViewAttention>> {
    require_concat(model)?;
    let (x1, x2, _) = batch_tensors(samples)?;
    model.forward_infer(&x1, &x2)?;
    let last = model.global().depth() - 1;
    let n = model.cfg().num_patches();
    let side = model.cfg().image_size / model.cfg().patch_size;
    let t_total = 2 * (n + 1);
    let mut out = Vec::with_capacity(samples.len());
    for b in 0..samples.len() {
        let attn = model.global().attention_weights_of(last, b)?;
        let (heads, t) = (attn.shape()[0], attn.shape()[1]);
        if t != t_total {
            return Err(Error::dim(format!("expected {t_total} fused tokens, found {t}")));
        }
        let v = attn.values();
        let mut cols = vec![0.0f64; t];
        for h in 0..heads {
            for row in [0, n + 1] {
                let base = (h * t + row) * t;
                for (c, acc) in cols.iter_mut().enumerate() {
                    *acc += v[base + c] as f64;
                }
            }
        }
        let view1: Vec<f64> = cols[1..=n].to_vec();
        let view2: Vec<f64> = cols[n + 2..].to_vec();
        let total: f64 = view1.iter().chain(&view2).sum();
        let (m1, m2) = (view1.iter().sum::<f64>() / total, view2.iter().sum::<f64>() / total);
        out.push(ViewAttention {
            balance: AttentionBalance { mass1: m1, mass2: m2 },
            side,
            view1: view1.iter().map(|x| x / total).collect(),
            view2: view2.iter().map(|x| x / total).collect(),
        });
    }
    Ok(out)
}

/// Balance for one sample.
pub fn attention_balance(model: &MultiViewModel<f32>, sample: &MultiViewSample) -> Result<AttentionBalance> {
    Ok(view_attention(model, &[sample])?[0].balance)
}

/// Mean `|mass1 - 0.5|` over `samples`.
pub fn mean_imbalance(model: &MultiViewModel<f32>, samples: &[MultiViewSample]) -> Result<f64> {
    let mut sum = 0.0;
    for chunk in samples.chunks(64) {
        let refs: Vec<&MultiViewSample> = chunk.iter().collect();
        sum += view_attention(model, &refs)?.iter().map(|a| a.balance.imbalance()).sum::<f64>();
    }
    Ok(sum / samples.len() as f64)
}

/// Row-major text matrix, one grid row per line.
pub fn grid_text(grid: &[f64], side: usize) -> String {
    let mut out = String::new();
    for row in grid.chunks(side) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        let _ = writeln!(out, "{}", cells.join(" "));
    }
    out
}

/// Grayscale heatmap, each grid cell drawn as a `scale x scale` block;
/// `max` maps to 255.
pub fn save_heatmap(grid: &[f64], side: usize, scale: usize, max: f64, path: &Path) -> Result<()> {
    let px = (side * scale) as u32;
    let img: GrayImage = ImageBuffer::from_fn(px, px, |x, y| {
        let v = grid[(y as usize / scale) * side + x as usize / scale];
        let q = if max > 0.0 { (v / max).clamp(0.0, 1.0) } else { 0.0 };
        Luma([(q * 255.0).round() as u8])
    });
    img.save(path)?;
    Ok(())
}
