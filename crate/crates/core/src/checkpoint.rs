//! Model checkpoints: a directory with `weights.bin` (tensors back to back in
//! the binary tensor format), `manifest.tsv` (name and byte offset of each
//! tensor) and `config.txt` (model and fusion settings as `key=value`).

use crate::error::{Error, Result};
use crate::fusion::FusionStrategy;
use crate::kv::{parse_flag, KvMap};
use crate::model::{MultiViewModel, ViewMode};
use crate::tensor::Tensor;
use crate::vit::ModelConfig;
use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Cursor, Write};
use std::path::{Path, PathBuf};

pub const WEIGHTS: &str = "weights.bin";
pub const MANIFEST: &str = "manifest.tsv";
pub const CONFIG: &str = "config.txt";

/// Model geometry and fusion settings as `model.*` / `fusion.*` keys.
pub fn model_kv(model: &MultiViewModel<f32>) -> KvMap {
    let mut kv = model.cfg().to_kv("model.");
    kv.set("model.views", model.views.name());
    kv.set("fusion.strategy", model.strategy.name());
    kv.set("fusion.rtf", if model.rtf_enabled { "on" } else { "off" });
    kv
}

/// Writes `model` under `dir`; `extra` is appended to the config block.
pub fn save(model: &MultiViewModel<f32>, dir: &Path, extra: &KvMap) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut weights = BufWriter::new(fs::File::create(dir.join(WEIGHTS))?);
    let mut manifest = String::from("name\toffset\n");
    let mut offset = 0usize;
    for p in model.params().iter() {
        manifest.push_str(&format!("{}\t{offset}\n", p.name));
        p.tensor.write_binary(&mut weights)?;
        offset += p.tensor.binary_len();
    }
    weights.flush()?;
    fs::write(dir.join(MANIFEST), manifest)?;
    let mut kv = model_kv(model);
    kv.merge(extra);
    fs::write(dir.join(CONFIG), kv.render())?;
    Ok(vec![dir.join(WEIGHTS), dir.join(MANIFEST), dir.join(CONFIG)])
}

pub fn read_config(dir: &Path) -> Result<KvMap> {
    let path = dir.join(CONFIG);
    let text = fs::read_to_string(&path).map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))?;
    KvMap::parse_text(&text)
}

/// Rebuilds the model described by `config.txt` and fills in its weights.
pub fn load(dir: &Path) -> Result<MultiViewModel<f32>> {
    let kv = read_config(dir)?;
    let mut cfg = ModelConfig::default();
    cfg.update_from_kv(&kv, "model.")?;
    let strategy = kv.parse::<FusionStrategy>("fusion.strategy")?.unwrap_or(FusionStrategy::Concat);
    let rtf = kv.get("fusion.rtf").map(parse_flag).transpose()?.unwrap_or(true);
    let views = kv.parse::<ViewMode>("model.views")?.unwrap_or(ViewMode::Both);
    let mut model = MultiViewModel::new(cfg, strategy, rtf, 0)?.with_views(views);

    let manifest = fs::read_to_string(dir.join(MANIFEST))?;
    let mut offsets = HashMap::new();
    for line in manifest.lines().skip(1).filter(|l| !l.is_empty()) {
        let (name, off) = line
            .split_once('\t')
            .ok_or_else(|| Error::Format(format!("malformed manifest row '{line}'")))?;
        let off: usize = off.trim().parse().map_err(|_| Error::Format(format!("bad offset in '{line}'")))?;
        offsets.insert(name.to_string(), off);
    }
    let bytes = fs::read(dir.join(WEIGHTS))?;
    for p in model.params_mut().iter_mut() {
        let off = *offsets
            .get(&p.name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor '{}'", p.name)))?;
        if off >= bytes.len() {
            return Err(Error::Format(format!("offset {off} of '{}' is past the end of {WEIGHTS}", p.name)));
        }
        let t = Tensor::<f32>::read_binary(Cursor::new(&bytes[off..]))?;
        if t.shape() != p.tensor.shape() {
            return Err(Error::Format(format!(
                "tensor '{}' has shape {:?}, config expects {:?}",
                p.name,
                t.shape(),
                p.tensor.shape()
            )));
        }
        p.tensor = t;
    }
    Ok(model)
}
