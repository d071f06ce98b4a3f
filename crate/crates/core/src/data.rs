//! Labeled image datasets.
//!
//! Splits are stored as CIFAR-style binary shards: each record is one label
//! byte followed by `C·H·W` pixel bytes in channel-major order. A JSON
//! manifest lists every shard with its SHA-256, plus normalization constants.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::digest;
use crate::error::{Error, Result};
use crate::pipeline::store::write_atomic;
use crate::rng;
use crate::tensor::{ImageBatch, Tensor};

pub const MANIFEST_VERSION: u32 = 1;

/// Images in normalized pixel space with hard labels.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pub images: ImageBatch,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn new(images: ImageBatch, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.batch() != labels.len() {
            return Err(Error::shape(format!(
                "{} images but {} labels",
                images.batch(),
                labels.len()
            )));
        }
        images.dims4()?;
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Label { label, num_classes });
        }
        Ok(LabeledDataset {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn resolution(&self) -> (usize, usize) {
        let s = self.images.shape();
        (s[2], s[3])
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            images: self.images.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Indices of each class, in dataset order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShardFile {
    pub path: String,
    pub sha256: String,
    pub records: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub dataset_id: String,
    pub num_classes: usize,
    pub resolution: (usize, usize),
    pub channels: usize,
    /// Split name (`train`, `test`) to shard list.
    pub splits: BTreeMap<String, Vec<ShardFile>>,
    pub normalization: Normalization,
    /// Images per class used when assigning prior-performance scores.
    pub reference_ipc: usize,
}

/// Prior-assignment IPC convention: 50 for small-resolution datasets, 10 for
/// high-resolution ones.
pub fn conventional_reference_ipc(resolution: (usize, usize)) -> usize {
    if resolution.0.max(resolution.1) <= 32 {
        50
    } else {
        10
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub manifest_digest: String,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

impl Dataset {
    pub fn id(&self) -> &str {
        &self.manifest.dataset_id
    }

    /// Loads and verifies a dataset from its manifest. Shard paths are
    /// relative to the manifest's directory.
    pub fn load(manifest_path: &Path) -> Result<Dataset> {
        let bytes = std::fs::read(manifest_path)?;
        let manifest: DatasetManifest = serde_json::from_slice(&bytes)?;
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        manifest.validate(manifest_path)?;
        let train = manifest.read_split(root, "train")?;
        let test = manifest.read_split(root, "test")?;
        Ok(Dataset {
            manifest_digest: digest::sha256_hex(&bytes),
            manifest,
            train,
            test,
        })
    }

    /// Maps normalized images back to `[0, 1]` pixel values.
    pub fn denormalize(&self, x: &ImageBatch) -> Result<ImageBatch> {
        let (n, c, h, w) = x.dims4()?;
        let norm = &self.manifest.normalization;
        let mut out = x.clone();
        for i in 0..n {
            let s = out.item_mut(i);
            for ch in 0..c {
                for v in &mut s[ch * h * w..(ch + 1) * h * w] {
                    *v = *v * norm.std[ch] + norm.mean[ch];
                }
            }
        }
        Ok(out)
    }
}

impl DatasetManifest {
    fn validate(&self, path: &Path) -> Result<()> {
        let bad = |msg: String| Error::Format {
            path: path.to_path_buf(),
            msg,
        };
        if self.format_version != MANIFEST_VERSION {
            return Err(bad(format!("unsupported manifest version {}", self.format_version)));
        }
        for split in ["train", "test"] {
            if !self.splits.contains_key(split) {
                return Err(bad(format!("missing `{split}` split")));
            }
        }
        let mut seen = BTreeMap::new();
        for (split, files) in &self.splits {
            for f in files {
                if let Some(other) = seen.insert(f.sha256.clone(), split.clone()) {
                    return Err(bad(format!(
                        "shard {} appears in both `{other}` and `{split}`",
                        f.path
                    )));
                }
            }
        }
        if self.normalization.mean.len() != self.channels
            || self.normalization.std.len() != self.channels
            || self.normalization.std.iter().any(|&s| s <= 0.0)
        {
            return Err(bad("normalization constants must be positive, one per channel".into()));
        }
        if self.num_classes == 0 || self.num_classes > 256 || self.reference_ipc == 0 {
            return Err(bad("class count must be in 1..=256 and reference_ipc positive".into()));
        }
        Ok(())
    }

    fn record_len(&self) -> usize {
        1 + self.channels * self.resolution.0 * self.resolution.1
    }

    fn read_split(&self, root: &Path, split: &str) -> Result<LabeledDataset> {
        let (h, w) = self.resolution;
        let c = self.channels;
        let rec = self.record_len();
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for f in &self.splits[split] {
            let path = root.join(&f.path);
            let bytes = std::fs::read(&path).map_err(|e| Error::Format {
                path: path.clone(),
                msg: e.to_string(),
            })?;
            if digest::sha256_hex(&bytes) != f.sha256 {
                return Err(Error::Format {
                    path,
                    msg: "hash mismatch".into(),
                });
            }
            if bytes.len() != rec * f.records {
                return Err(Error::Format {
                    path,
                    msg: format!("expected {} records of {rec} bytes", f.records),
                });
            }
            for r in bytes.chunks_exact(rec) {
                let label = r[0] as usize;
                if label >= self.num_classes {
                    return Err(Error::Label {
                        label,
                        num_classes: self.num_classes,
                    });
                }
                labels.push(label);
                for ch in 0..c {
                    let (m, s) = (self.normalization.mean[ch], self.normalization.std[ch]);
                    pixels.extend(
                        r[1 + ch * h * w..1 + (ch + 1) * h * w]
                            .iter()
                            .map(|&b| (b as f64 / 255.0 - m) / s),
                    );
                }
            }
        }
        let n = labels.len();
        LabeledDataset::new(Tensor::from_vec(&[n, c, h, w], pixels)?, labels, self.num_classes)
    }
}

/// Parameters of the procedural shape datasets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShapesConfig {
    pub dataset_id: String,
    pub resolution: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Std of additive pixel noise in `[0, 1]` units.
    pub noise: f64,
    /// Hue jitter around each class's base hue, in degrees.
    pub hue_jitter: f64,
    /// Fraction of images that get a distractor shape from another class.
    pub distractor_rate: f64,
    pub reference_ipc: usize,
    pub seed: u64,
}

impl ShapesConfig {
    /// CIFAR-10-like: 10 classes at 32×32.
    pub fn cifar_like() -> Self {
        ShapesConfig {
            dataset_id: "shapes10-32".into(),
            resolution: 32,
            train_per_class: 200,
            test_per_class: 200,
            noise: 0.12,
            hue_jitter: 70.0,
            distractor_rate: 0.5,
            reference_ipc: 10,
            seed: 2024,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "shapes10-32" => Ok(Self::cifar_like()),
            "toy10-16" => Ok(Self::toy()),
            other => Err(Error::UnknownPreset(other.into())),
        }
    }

    /// Small 10-class toy set at 16×16.
    pub fn toy() -> Self {
        ShapesConfig {
            dataset_id: "toy10-16".into(),
            resolution: 16,
            train_per_class: 20,
            test_per_class: 10,
            noise: 0.05,
            hue_jitter: 20.0,
            distractor_rate: 0.0,
            reference_ipc: 2,
            seed: 7,
        }
    }
}

pub const SHAPE_CLASSES: usize = 10;

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Whether normalized shape coordinates `(u, v)` fall inside class `k`'s shape.
fn inside(k: usize, u: f64, v: f64) -> bool {
    let box1 = u.abs() <= 1.0 && v.abs() <= 1.0;
    match k {
        0 => u * u + v * v <= 1.0,
        1 => u.abs().max(v.abs()) <= 0.8,
        2 => v <= 0.8 && v >= -0.8 && u.abs() <= (0.8 - v) * 0.6,
        3 => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
        4 => {
            let r = (u * u + v * v).sqrt();
            (0.55..=1.0).contains(&r)
        }
        5 => box1 && ((v + 1.0) * 2.5).floor() as i64 % 2 == 0,
        6 => box1 && ((u + 1.0) * 2.5).floor() as i64 % 2 == 0,
        7 => u.abs() + v.abs() <= 1.0,
        8 => box1 && (((u + 1.0) * 2.0).floor() as i64 + ((v + 1.0) * 2.0).floor() as i64) % 2 == 0,
        _ => box1 && ((u - v).abs() <= 0.3 || (u + v).abs() <= 0.3),
    }
}

/// Renders one image of class `k` as `[0, 1]` pixels, channel-major.
fn render(k: usize, cfg: &ShapesConfig, r: &mut rng::Rng) -> Vec<f64> {
    let n = cfg.resolution;
    let nf = n as f64;
    let noise = Normal::new(0.0, cfg.noise).expect("valid std");
    let bg0 = hsv_to_rgb(r.gen_range(0.0..360.0), r.gen_range(0.0..0.4), r.gen_range(0.2..0.8));
    let bg1 = hsv_to_rgb(r.gen_range(0.0..360.0), r.gen_range(0.0..0.4), r.gen_range(0.2..0.8));
    let grad_angle: f64 = r.gen_range(0.0..2.0 * PI);
    let mut img = vec![0.0; 3 * n * n];
    for y in 0..n {
        for x in 0..n {
            let t = 0.5
                + 0.5 * ((x as f64 / nf - 0.5) * grad_angle.cos() + (y as f64 / nf - 0.5) * grad_angle.sin());
            for ch in 0..3 {
                img[(ch * n + y) * n + x] = bg0[ch] * (1.0 - t) + bg1[ch] * t;
            }
        }
    }
    let draw = |k: usize, scale: f64, r: &mut rng::Rng, img: &mut Vec<f64>| {
        let radius = r.gen_range(0.22..0.38) * nf * scale;
        let cx = r.gen_range(radius..nf - radius);
        let cy = r.gen_range(radius..nf - radius);
        let rot: f64 = if k == 5 || k == 6 { 0.0 } else { r.gen_range(-0.35..0.35) };
        let hue = k as f64 * 36.0 + r.gen_range(-cfg.hue_jitter..=cfg.hue_jitter);
        let fg = hsv_to_rgb(hue, r.gen_range(0.6..1.0), r.gen_range(0.7..1.0));
        let (s, c) = rot.sin_cos();
        for y in 0..n {
            for x in 0..n {
                let dx = (x as f64 + 0.5 - cx) / radius;
                let dy = (y as f64 + 0.5 - cy) / radius;
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                if inside(k, u, v) {
                    for ch in 0..3 {
                        img[(ch * n + y) * n + x] = fg[ch];
                    }
                }
            }
        }
    };
    if r.gen_bool(cfg.distractor_rate) {
        let other = (k + r.gen_range(1..SHAPE_CLASSES)) % SHAPE_CLASSES;
        draw(other, 0.55, r, &mut img);
    }
    draw(k, 1.0, r, &mut img);
    for v in &mut img {
        *v = (*v + noise.sample(r)).clamp(0.0, 1.0);
    }
    img
}

fn encode_records(images: &[(usize, Vec<f64>)]) -> Vec<u8> {
    let mut out = Vec::new();
    for (label, px) in images {
        out.push(*label as u8);
        out.extend(px.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    out
}

/// Writes a procedural dataset (shards + manifest) under `root` and returns
/// the manifest path. Output is a pure function of the config.
pub fn generate_shapes(root: &Path, cfg: &ShapesConfig) -> Result<PathBuf> {
    std::fs::create_dir_all(root)?;
    let mut splits = BTreeMap::new();
    let mut sums = [0.0f64; 3];
    let mut sq = [0.0f64; 3];
    let mut count = 0usize;
    for (split, per_class) in [("train", cfg.train_per_class), ("test", cfg.test_per_class)] {
        let mut r = rng::stream(cfg.seed, &format!("shapes-{split}"), 0);
        let mut records = Vec::with_capacity(per_class * SHAPE_CLASSES);
        for i in 0..per_class * SHAPE_CLASSES {
            let k = i % SHAPE_CLASSES;
            let img = render(k, cfg, &mut r);
            records.push((k, img));
        }
        let bytes = encode_records(&records);
        if split == "train" {
            let n2 = cfg.resolution * cfg.resolution;
            for rec in bytes.chunks_exact(1 + 3 * n2) {
                for ch in 0..3 {
                    for &b in &rec[1 + ch * n2..1 + (ch + 1) * n2] {
                        let v = b as f64 / 255.0;
                        sums[ch] += v;
                        sq[ch] += v * v;
                    }
                }
                count += n2;
            }
        }
        let name = format!("{split}-000.bin");
        write_atomic(&root.join(&name), &bytes)?;
        splits.insert(
            split.to_string(),
            vec![ShardFile {
                path: name,
                sha256: digest::sha256_hex(&bytes),
                records: records.len(),
            }],
        );
    }
    let mean: Vec<f64> = sums.iter().map(|s| s / count as f64).collect();
    let std: Vec<f64> = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| (q / count as f64 - m * m).max(1e-12).sqrt())
        .collect();
    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        dataset_id: cfg.dataset_id.clone(),
        num_classes: SHAPE_CLASSES,
        resolution: (cfg.resolution, cfg.resolution),
        channels: 3,
        splits,
        normalization: Normalization { mean, std },
        reference_ipc: cfg.reference_ipc,
    };
    let path = root.join("manifest.json");
    write_atomic(&path, &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_dataset_round_trips_and_is_balanced() {
        let dir = tempfile::tempdir().unwrap();
        let path = generate_shapes(dir.path(), &ShapesConfig::toy()).unwrap();
        let ds = Dataset::load(&path).unwrap();
        assert_eq!(ds.train.len(), 200);
        assert_eq!(ds.test.len(), 100);
        assert!(ds.train.class_indices().iter().all(|c| c.len() == 20));
        // normalized train pixels have ~zero mean per channel
        let (n, _, h, w) = ds.train.images.dims4().unwrap();
        for ch in 0..3 {
            let mut s = 0.0;
            for i in 0..n {
                s += ds.train.images.item(i)[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>();
            }
            assert!((s / (n * h * w) as f64).abs() < 1e-2);
        }
        let other = tempfile::tempdir().unwrap();
        let again = generate_shapes(other.path(), &ShapesConfig::toy()).unwrap();
        assert_eq!(
            std::fs::read(&again).unwrap(),
            std::fs::read(&path).unwrap(),
            "generation is deterministic"
        );
    }

    #[test]
    fn tampered_shard_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = generate_shapes(dir.path(), &ShapesConfig::toy()).unwrap();
        let shard = dir.path().join("test-000.bin");
        let mut bytes = std::fs::read(&shard).unwrap();
        bytes[5] ^= 1;
        std::fs::write(&shard, bytes).unwrap();
        assert!(matches!(Dataset::load(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn overlapping_splits_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = generate_shapes(dir.path(), &ShapesConfig::toy()).unwrap();
        let mut m: DatasetManifest = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
        let train = m.splits["train"].clone();
        m.splits.insert("test".into(), train);
        std::fs::write(&path, serde_json::to_vec(&m).unwrap()).unwrap();
        assert!(matches!(Dataset::load(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn out_of_range_labels_are_rejected() {
        let err = LabeledDataset::new(Tensor::zeros(&[1, 3, 4, 4]), vec![3], 3).unwrap_err();
        assert!(matches!(err, Error::Label { label: 3, num_classes: 3 }));
    }
}
