//! Synthetic two-view tasks and on-disk image pairs.
//!
//! Every view holds one bright square in its left or right half. The side of
//! that square is the view's cue. Cue counts are assigned exactly rather than
//! drawn, so oracle accuracies of the generated data are known in closed form.

use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::tensor::Tensor;
use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskKind {
    /// Label is the XOR of the two cue sides.
    Xor,
    /// View 2's cue always equals the label; view 1's agrees on a fraction
    /// `alpha` of the samples.
    Dominant,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Xor => "xor",
            TaskKind::Dominant => "dominant",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "xor" => Ok(TaskKind::Xor),
            "dominant" => Ok(TaskKind::Dominant),
            other => Err(Error::Config(format!("unknown task kind '{other}' (expected xor or dominant)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Fraction of samples whose view-1 cue agrees with the label
    /// (dominant kind only).
    pub alpha: f64,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
    /// Side of the bright square in pixels, at most half the image.
    pub square: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::Xor,
            n_train: 512,
            n_val: 128,
            n_test: 256,
            image_size: 32,
            channels: 1,
            alpha: 0.9,
            noise: 0.15,
            square: 8,
            seed: 7,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 4 || self.image_size % 2 != 0 {
            return Err(Error::Config(format!("image_size must be even and at least 4, got {}", self.image_size)));
        }
        if self.square == 0 || self.square > self.image_size / 2 {
            return Err(Error::Config(format!(
                "square of {} px does not fit half of a {} px image",
                self.square, self.image_size
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise must be a finite non-negative std, got {}", self.noise)));
        }
        for (name, n) in [("train", self.n_train), ("val", self.n_val), ("test", self.n_test)] {
            let quantum = match self.kind {
                TaskKind::Xor => 4,
                TaskKind::Dominant => 2,
            };
            if n == 0 || n % quantum != 0 {
                return Err(Error::Generation(format!(
                    "{name} split of {n} samples cannot be balanced exactly; {} tasks need a positive multiple of {quantum}",
                    self.kind
                )));
            }
        }
        Ok(())
    }

    pub fn to_kv(&self, prefix: &str) -> KvMap {
        let mut kv = KvMap::new();
        kv.set(format!("{prefix}kind"), self.kind.name());
        kv.set(format!("{prefix}n_train"), self.n_train);
        kv.set(format!("{prefix}n_val"), self.n_val);
        kv.set(format!("{prefix}n_test"), self.n_test);
        kv.set(format!("{prefix}image_size"), self.image_size);
        kv.set(format!("{prefix}channels"), self.channels);
        kv.set(format!("{prefix}alpha"), self.alpha);
        kv.set(format!("{prefix}noise"), self.noise);
        kv.set(format!("{prefix}square"), self.square);
        kv.set(format!("{prefix}seed"), self.seed);
        kv
    }

    /// Reads `prefix`-keyed fields, keeping current values for absent keys.
    pub fn update_from_kv(&mut self, kv: &KvMap, prefix: &str) -> Result<()> {
        let key = |k: &str| format!("{prefix}{k}");
        if let Some(v) = kv.parse::<TaskKind>(&key("kind"))? {
            self.kind = v;
        }
        kv.update(&key("n_train"), &mut self.n_train)?;
        kv.update(&key("n_val"), &mut self.n_val)?;
        kv.update(&key("n_test"), &mut self.n_test)?;
        kv.update(&key("image_size"), &mut self.image_size)?;
        kv.update(&key("channels"), &mut self.channels)?;
        kv.update(&key("alpha"), &mut self.alpha)?;
        kv.update(&key("noise"), &mut self.noise)?;
        kv.update(&key("square"), &mut self.square)?;
        kv.update(&key("seed"), &mut self.seed)?;
        Ok(())
    }
}

/// Discrete generator variables behind a sample: 0 = left half, 1 = right.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cues {
    pub side1: u8,
    pub side2: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewSample {
    pub id: String,
    /// `[H, W, C]`, values in `[0, 1]`.
    pub view1: Tensor<f32>,
    pub view2: Tensor<f32>,
    pub label: u8,
    /// Known for generated samples only.
    pub cues: Option<Cues>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<MultiViewSample>,
    pub val: Vec<MultiViewSample>,
    pub test: Vec<MultiViewSample>,
}

impl Dataset {
    pub fn splits(&self) -> [(&'static str, &[MultiViewSample]); 3] {
        [("train", &self.train), ("val", &self.val), ("test", &self.test)]
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Image geometry `(size, channels)` shared by all samples.
    pub fn geometry(&self) -> Option<(usize, usize)> {
        let s = self.train.first().or(self.val.first()).or(self.test.first())?;
        let shape = s.view1.shape();
        Some((shape[0], shape[2]))
    }
}

fn cue_pairs(spec: &TaskSpec, n: usize, rng: &mut ChaCha8Rng) -> Vec<(u8, Cues)> {
    let mut out = Vec::with_capacity(n);
    match spec.kind {
        TaskKind::Xor => {
            for (s1, s2) in [(0u8, 0u8), (0, 1), (1, 0), (1, 1)] {
                for _ in 0..n / 4 {
                    out.push((s1 ^ s2, Cues { side1: s1, side2: s2 }));
                }
            }
        }
        TaskKind::Dominant => {
            let agree = (spec.alpha * n as f64).round() as usize;
            let mut agrees: Vec<bool> = (0..n).map(|i| i < agree).collect();
            agrees.shuffle(rng);
            for (i, a) in agrees.into_iter().enumerate() {
                let label = u8::from(i >= n / 2);
                let side1 = if a { label } else { 1 - label };
                out.push((label, Cues { side1, side2: label }));
            }
        }
    }
    out.shuffle(rng);
    out
}

fn render_view(spec: &TaskSpec, side: u8, rng: &mut ChaCha8Rng, noise: &Option<Normal<f64>>) -> Tensor<f32> {
    let (s, c) = (spec.image_size, spec.channels);
    let square = spec.square;
    let half = s / 2;
    let x0 = side as usize * half + rng.random_range(0..=half - square);
    let y0 = rng.random_range(0..=s - square);
    let mut values = vec![0f32; s * s * c];
    for y in 0..s {
        for x in 0..s {
            let inside = (y0..y0 + square).contains(&y) && (x0..x0 + square).contains(&x);
            for ch in 0..c {
                let mut v = if inside { 1.0 } else { 0.0 };
                if let Some(n) = noise {
                    v += n.sample(rng);
                }
                values[(y * s + x) * c + ch] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Tensor::new(vec![s, s, c], values).expect("geometry")
}

/// Deterministic dataset for `spec`.
pub fn generate(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let noise = (spec.noise > 0.0).then(|| Normal::new(0.0, spec.noise).expect("validated std"));
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut make = |name: &str, n: usize| {
        cue_pairs(spec, n, &mut rng)
            .into_iter()
            .enumerate()
            .map(|(i, (label, cues))| MultiViewSample {
                id: format!("{name}-{:05}", i + 1),
                view1: render_view(spec, cues.side1, &mut rng, &noise),
                view2: render_view(spec, cues.side2, &mut rng, &noise),
                label,
                cues: Some(cues),
            })
            .collect::<Vec<_>>()
    };
    let train = make("train", spec.n_train);
    let val = make("val", spec.n_val);
    let test = make("test", spec.n_test);
    Ok(Dataset { train, val, test })
}

/// Horizontal flip of each view, drawn independently per view.
///
/// A flip moves the square to the other half, so on the generated tasks it
/// rewrites the cue; it is meant for data whose label is flip-invariant.
pub fn augment<R: Rng + ?Sized>(s: &MultiViewSample, rng: &mut R) -> MultiViewSample {
    let mut out = s.clone();
    if rng.random::<bool>() {
        out.view1 = flip_horizontal(&s.view1);
    }
    if rng.random::<bool>() {
        out.view2 = flip_horizontal(&s.view2);
    }
    out
}

pub fn flip_horizontal(view: &Tensor<f32>) -> Tensor<f32> {
    let (h, w, c) = (view.shape()[0], view.shape()[1], view.shape()[2]);
    let src = view.values();
    Tensor::from_fn(&[h, w, c], |i| {
        let (y, x, ch) = (i / (w * c), (i / c) % w, i % c);
        src[(y * w + (w - 1 - x)) * c + ch]
    })
}

pub const MANIFEST: &str = "manifest.tsv";
pub const METADATA: &str = "metadata.txt";
pub const CUES: &str = "cues.tsv";

fn to_image(view: &Tensor<f32>) -> DynamicImage {
    let (h, w, c) = (view.shape()[0] as u32, view.shape()[1] as u32, view.shape()[2]);
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let v = view.values();
    if c == 1 {
        let img: GrayImage = ImageBuffer::from_fn(w, h, |x, y| Luma([q(v[(y * w + x) as usize])]));
        DynamicImage::ImageLuma8(img)
    } else {
        let img: RgbImage = ImageBuffer::from_fn(w, h, |x, y| {
            let base = (y * w + x) as usize * 3;
            Rgb([q(v[base]), q(v[base + 1]), q(v[base + 2])])
        });
        DynamicImage::ImageRgb8(img)
    }
}

/// Writes `root/manifest.tsv`, PNG views under `root/images/`, generator
/// cues and the task metadata. Returns the written paths.
pub fn export(data: &Dataset, spec: Option<&TaskSpec>, root: &Path) -> Result<Vec<PathBuf>> {
    let images = root.join("images");
    fs::create_dir_all(&images)?;
    let mut written = Vec::new();
    let mut manifest = String::from("id\tview1_path\tview2_path\tlabel\n");
    let mut cues = String::from("id\tside1\tside2\n");
    for (_, split) in data.splits() {
        for s in split {
            let p1 = format!("images/{}_v1.png", s.id);
            let p2 = format!("images/{}_v2.png", s.id);
            to_image(&s.view1).save(root.join(&p1))?;
            to_image(&s.view2).save(root.join(&p2))?;
            written.push(root.join(&p1));
            written.push(root.join(&p2));
            manifest.push_str(&format!("{}\t{p1}\t{p2}\t{}\n", s.id, s.label));
            if let Some(c) = s.cues {
                cues.push_str(&format!("{}\t{}\t{}\n", s.id, c.side1, c.side2));
            }
        }
    }
    fs::write(root.join(MANIFEST), manifest)?;
    written.push(root.join(MANIFEST));
    fs::write(root.join(CUES), cues)?;
    written.push(root.join(CUES));
    if let Some(spec) = spec {
        let mut f = fs::File::create(root.join(METADATA))?;
        f.write_all(spec.to_kv("task.").render().as_bytes())?;
        written.push(root.join(METADATA));
    }
    Ok(written)
}

#[derive(Clone, Debug)]
pub struct LoadedPairs {
    /// Complete pairs, sorted by id.
    pub samples: Vec<MultiViewSample>,
    /// Manifest rows dropped for a missing or unreadable view.
    pub skipped: usize,
}

fn read_view(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (c, raw) = match img.color() {
        image::ColorType::L8 | image::ColorType::L16 | image::ColorType::La8 | image::ColorType::La16 => {
            (1, img.to_luma8().into_raw())
        }
        _ => (3, img.to_rgb8().into_raw()),
    };
    Tensor::new(vec![h, w, c], raw.into_iter().map(|b| b as f32 / 255.0).collect())
}

/// Reads the pairs listed in `root/manifest.tsv`.
pub fn load_pairs(root: &Path) -> Result<LoadedPairs> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines.next().unwrap_or_default().split('\t').collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Data(format!("{} lacks a '{name}' column", path.display())))
    };
    let (ci, c1, c2, cl) = (col("id")?, col("view1_path")?, col("view2_path")?, col("label")?);
    let mut samples = Vec::new();
    let mut skipped = 0;
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        let field = |i: usize| fields.get(i).map(|s| s.trim()).unwrap_or("");
        let label = match field(cl) {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(Error::Data(format!("row {}: label must be 0 or 1, got '{other}'", lineno + 2)));
            }
        };
        let views = [field(c1), field(c2)].map(|p| {
            if p.is_empty() {
                return Err(Error::Data("empty path".into()));
            }
            read_view(&root.join(p))
        });
        match views {
            [Ok(view1), Ok(view2)] if view1.shape() == view2.shape() => {
                samples.push(MultiViewSample { id: field(ci).to_string(), view1, view2, label, cues: None });
            }
            [v1, v2] => {
                for (v, p) in [(v1, field(c1)), (v2, field(c2))] {
                    if let Err(e) = v {
                        log::warn!("skipping {}: view '{p}' unusable: {e}", field(ci));
                    }
                }
                skipped += 1;
            }
        }
    }
    if samples.is_empty() {
        return Err(Error::Data(format!("no complete view pairs under {}", root.display())));
    }
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(LoadedPairs { samples, skipped })
}

/// Splits loaded pairs by their `train-` / `val-` / `test-` id prefix.
pub fn split_by_prefix(samples: Vec<MultiViewSample>) -> Result<Dataset> {
    let mut data = Dataset::default();
    for s in samples {
        if s.id.starts_with("train-") {
            data.train.push(s);
        } else if s.id.starts_with("val-") {
            data.val.push(s);
        } else if s.id.starts_with("test-") {
            data.test.push(s);
        } else {
            log::warn!("sample '{}' has no split prefix; ignored", s.id);
        }
    }
    for (name, split) in data.splits() {
        if split.is_empty() {
            return Err(Error::Data(format!("dataset has no '{name}-' samples")));
        }
    }
    Ok(data)
}

/// Loads a dataset directory, attaching generator cues when present.
pub fn load_dataset(root: &Path) -> Result<(Dataset, usize)> {
    let loaded = load_pairs(root)?;
    let mut data = split_by_prefix(loaded.samples)?;
    if let Ok(text) = fs::read_to_string(root.join(CUES)) {
        let cues: std::collections::HashMap<&str, Cues> = text
            .lines()
            .skip(1)
            .filter_map(|l| {
                let f: Vec<&str> = l.split('\t').collect();
                Some((*f.first()?, Cues { side1: f.get(1)?.parse().ok()?, side2: f.get(2)?.parse().ok()? }))
            })
            .collect();
        for s in data.train.iter_mut().chain(&mut data.val).chain(&mut data.test) {
            s.cues = cues.get(s.id.as_str()).copied();
        }
    }
    Ok((data, loaded.skipped))
}

/// Stacks the views of `samples` into `[B, H, W, C]` tensors plus `[B, 1]` labels.
pub fn batch_tensors(samples: &[&MultiViewSample]) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
    let first = samples.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let geo = first.view1.shape().to_vec();
    let mut v1 = Vec::with_capacity(samples.len() * first.view1.len());
    let mut v2 = Vec::with_capacity(v1.capacity());
    for s in samples {
        if s.view1.shape() != geo.as_slice() || s.view2.shape() != geo.as_slice() {
            return Err(Error::dim(format!("sample {} differs from batch geometry {geo:?}", s.id)));
        }
        v1.extend_from_slice(s.view1.values());
        v2.extend_from_slice(s.view2.values());
    }
    let mut shape = vec![samples.len()];
    shape.extend_from_slice(&geo);
    let labels = samples.iter().map(|s| s.label as f32).collect();
    Ok((Tensor::new(shape.clone(), v1)?, Tensor::new(shape, v2)?, Tensor::new(vec![samples.len(), 1], labels)?))
}
