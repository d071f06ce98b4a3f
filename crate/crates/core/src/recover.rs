//! Synthesis of distilled images by optimizing pixels against a committee.

use std::path::{Path, PathBuf};
use std::time::Instant;

use image::ImageEncoder as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentFlags, AugmentPlan, CropBox, ViewTransform};
use crate::data::{Dataset, LabeledDataset};
use crate::digest;
use crate::error::{Error, Result};
use crate::model_zoo::Model;
use crate::optim::{Optimizer, OptimizerConfig, Schedule};
use crate::pipeline::store::write_atomic;
use crate::prior::PriorTable;
use crate::rng;
use crate::squeeze::TrainedTeacher;
use crate::tensor::{ImageBatch, Tensor};
use crate::voting::{committee_loss, ppg_weights, sample_committee, LossLog, Resample, VoterMode, VotingConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    RealPatch,
    GaussianNoise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecoverConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub betas: (f64, f64),
    pub epsilon: f64,
    /// Images optimized together; `None` means 100, or 10 when there are
    /// fewer than 100 classes.
    pub batch_size: Option<usize>,
    pub init_mode: InitMode,
    pub augmentation: AugmentFlags,
    /// Crop-area range used by real-patch initialization.
    pub init_scale: (f64, f64),
    pub lambda_bn: f64,
    pub voting: VotingConfig,
    pub scheduler: Schedule,
    pub seed: u64,
}

impl Default for RecoverConfig {
    fn default() -> Self {
        RecoverConfig {
            iterations: 4000,
            learning_rate: 0.1,
            betas: (0.5, 0.9),
            epsilon: 1e-8,
            batch_size: None,
            init_mode: InitMode::RealPatch,
            augmentation: AugmentFlags::default(),
            init_scale: (0.5, 1.0),
            lambda_bn: 0.01,
            voting: VotingConfig::default(),
            scheduler: Schedule::Cosine,
            seed: 0,
        }
    }
}

impl RecoverConfig {
    pub fn batch_size_for(&self, num_classes: usize) -> usize {
        self.batch_size
            .unwrap_or(if num_classes < 100 { 10 } else { 100 })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == Some(0) {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lambda_bn >= 0.0 && self.lambda_bn.is_finite()) {
            return Err(Error::Config(format!("lambda_bn must be nonnegative, got {}", self.lambda_bn)));
        }
        let (a, b) = self.init_scale;
        if !(0.0 < a && a <= b && b <= 1.0) {
            return Err(Error::Config(format!("init_scale must satisfy 0 < lo <= hi <= 1, got {a}..{b}")));
        }
        self.augmentation.validate()?;
        self.voting.validate()
    }
}

/// Where a real-patch initial image came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitRecord {
    pub source_index: usize,
    pub crop: CropBox,
}

/// Committee subset and weights in force from `from_iteration` on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetRecord {
    pub from_iteration: usize,
    pub members: Vec<String>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundProvenance {
    pub ipc_round: usize,
    pub seed: u64,
    pub subsets: Vec<SubsetRecord>,
    /// Committee loss per iteration, averaged over the round's batches.
    pub loss_trace: Vec<f64>,
    /// Wall-clock milliseconds since the round started, after each
    /// iteration. Not serialized, so reruns produce identical artifacts.
    #[serde(skip)]
    pub timing_ms: Vec<f64>,
    pub images_per_step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSet {
    /// `(ipc * classes, C, H, W)` in normalized pixel space, round-major:
    /// image `r * classes + k` is round `r`'s image of class `k`.
    pub images: ImageBatch,
    pub labels: Vec<usize>,
    pub ipc: usize,
    pub num_classes: usize,
    pub init: Vec<Option<InitRecord>>,
    pub provenance: Vec<RoundProvenance>,
    pub config_digest: String,
}

impl SyntheticSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn as_dataset(&self) -> Result<LabeledDataset> {
        LabeledDataset::new(self.images.clone(), self.labels.clone(), self.num_classes)
    }

    /// Indices of round `r`'s images.
    pub fn round_indices(&self, r: usize) -> Vec<usize> {
        (r * self.num_classes..(r + 1) * self.num_classes).collect()
    }

    pub fn digest(&self) -> String {
        digest::digest_f64(self.images.data())
    }
}

/// Initial images, one per class per round, labels cycling over the classes.
pub fn init_synthetic(
    dataset: &LabeledDataset,
    ipc: usize,
    mode: InitMode,
    resolution: (usize, usize),
    init_scale: (f64, f64),
    seed: u64,
) -> Result<SyntheticSet> {
    if ipc == 0 {
        return Err(Error::Config("ipc must be at least 1".into()));
    }
    let k = dataset.num_classes;
    let c = dataset.images.shape()[1];
    let (h, w) = resolution;
    let n = ipc * k;
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    let mut r = rng::stream(seed, "init-synthetic", 0);
    let (images, init) = match mode {
        InitMode::GaussianNoise => {
            let data = (0..n * c * h * w).map(|_| StandardNormal.sample(&mut r)).collect();
            (Tensor::from_vec(&[n, c, h, w], data)?, vec![None; n])
        }
        InitMode::RealPatch => {
            let by_class = dataset.class_indices();
            let mut picks = vec![0; n];
            for (class, pool) in by_class.iter().enumerate() {
                if pool.len() < ipc {
                    return Err(Error::InsufficientData(format!(
                        "class {class} has {} images, {ipc} needed",
                        pool.len()
                    )));
                }
                let chosen = rand::seq::index::sample(&mut r, pool.len(), ipc);
                for (round, j) in chosen.into_iter().enumerate() {
                    picks[round * k + class] = pool[j];
                }
            }
            let src_hw = dataset.resolution();
            let views: Vec<ViewTransform> = picks
                .iter()
                .map(|_| ViewTransform {
                    crop: CropBox::sample(src_hw.0, src_hw.1, init_scale, (3.0 / 4.0, 4.0 / 3.0), &mut r),
                    flip: false,
                })
                .collect();
            let plan = AugmentPlan {
                views: views.clone(),
                in_hw: src_hw,
                out_hw: resolution,
            };
            let images = plan.apply(&dataset.images.select(&picks))?;
            let init = picks
                .iter()
                .zip(views)
                .map(|(&source_index, v)| Some(InitRecord { source_index, crop: v.crop }))
                .collect();
            (images, init)
        }
    };
    Ok(SyntheticSet {
        images,
        labels,
        ipc,
        num_classes: k,
        init,
        provenance: Vec::new(),
        config_digest: String::new(),
    })
}

/// Draws a crop-and-flip view of every image in `batch`.
pub fn augment_for_recovery(batch: &ImageBatch, flags: &AugmentFlags, rng_state: &mut rng::Rng) -> Result<(ImageBatch, AugmentPlan)> {
    let (n, _, h, w) = batch.dims4()?;
    let plan = AugmentPlan::sample(n, (h, w), (h, w), flags, rng_state);
    Ok((plan.apply(batch)?, plan))
}

struct Subset<'a> {
    members: Vec<(&'a Model, f64)>,
    record: SubsetRecord,
}

fn choose_subset<'a>(
    committee: &'a [TrainedTeacher],
    prior: Option<&PriorTable>,
    cfg: &VotingConfig,
    draw: u64,
    from_iteration: usize,
) -> Result<Subset<'a>> {
    let (idx, weights) = if committee.len() == 1 {
        (vec![0], vec![1.0])
    } else {
        let idx = sample_committee(committee.len(), cfg, draw)?;
        let alphas = match cfg.voter_mode {
            VoterMode::Prior => {
                let table = prior.ok_or_else(|| Error::MissingPrior("no prior table for prior voting".into()))?;
                idx.iter()
                    .map(|&i| table.lookup_alpha(&committee[i].member_id()))
                    .collect::<Result<Vec<_>>>()?
            }
            _ => vec![0.0; idx.len()],
        };
        let mut r = rng::stream(cfg.seed, "voter", draw);
        let w = ppg_weights(&alphas, cfg.temperature, cfg.voter_mode, &mut r)?;
        (idx, w)
    };
    Ok(Subset {
        members: idx.iter().zip(&weights).map(|(&i, &w)| (&committee[i].model, w)).collect(),
        record: SubsetRecord {
            from_iteration,
            members: idx.iter().map(|&i| committee[i].member_id()).collect(),
            weights,
        },
    })
}

/// Optimizes one IPC round's images. The committee subset and weights are
/// drawn once for the round (or once per iteration under
/// [`Resample::PerIteration`]). A single-member committee runs the
/// single-backbone baseline with weight 1.
pub fn synthesize_ipc_round(
    committee: &[TrainedTeacher],
    prior: Option<&PriorTable>,
    targets: &[usize],
    init: &ImageBatch,
    cfg: &RecoverConfig,
    ipc_round: usize,
    mut log: Option<&mut LossLog>,
) -> Result<(ImageBatch, RoundProvenance)> {
    cfg.validate()?;
    if committee.is_empty() {
        return Err(Error::IncompleteCommittee("empty committee".into()));
    }
    if init.batch() != targets.len() {
        return Err(Error::shape(format!(
            "{} initial images for {} targets",
            init.batch(),
            targets.len()
        )));
    }
    let num_classes = committee[0].model.spec().num_classes;
    let bs = cfg.batch_size_for(num_classes);
    let round = ipc_round as u64;
    let mut subset = choose_subset(committee, prior, &cfg.voting, round, 0)?;
    let mut subsets = vec![subset.record.clone()];
    let chunks: Vec<Vec<usize>> = (0..targets.len())
        .collect::<Vec<_>>()
        .chunks(bs)
        .map(|c| c.to_vec())
        .collect();
    let mut slabs: Vec<Tensor> = chunks.iter().map(|c| init.select(c)).collect();
    let labels: Vec<Vec<usize>> = chunks.iter().map(|c| c.iter().map(|&i| targets[i]).collect()).collect();
    let adam = OptimizerConfig::adam(cfg.betas, cfg.epsilon, 0.0);
    let mut opts: Vec<Optimizer> = chunks.iter().map(|_| Optimizer::new(adam)).collect();
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut timing = Vec::with_capacity(cfg.iterations);
    let start = Instant::now();
    for it in 0..cfg.iterations {
        if it > 0 && cfg.voting.resample == Resample::PerIteration && committee.len() > 1 {
            let draw = round * cfg.iterations as u64 + it as u64;
            subset = choose_subset(committee, prior, &cfg.voting, draw, it)?;
            subsets.push(subset.record.clone());
        }
        let lr = cfg.scheduler.lr(it, cfg.iterations, cfg.learning_rate, 0.0, 1)?;
        let mut step_loss = 0.0;
        for (b, slab) in slabs.iter_mut().enumerate() {
            let stream = (round << 40) | ((b as u64) << 24) | it as u64;
            let mut r = rng::stream(cfg.seed, "recover-augment", stream);
            let (view, plan) = augment_for_recovery(slab, &cfg.augmentation, &mut r)?;
            let (breakdown, g) = committee_loss(&subset.members, &view, &labels[b], cfg.lambda_bn)?;
            if !breakdown.total.is_finite() {
                return Err(Error::SynthesisDiverged {
                    round: ipc_round,
                    iteration: it,
                });
            }
            if let Some(l) = log.as_deref_mut() {
                l.append(it, &breakdown)?;
            }
            step_loss += breakdown.total;
            let gx = plan.backward(&g)?;
            opts[b].step(vec![slab.storage_mut()], &[gx.into_data()], lr);
        }
        trace.push(step_loss / slabs.len() as f64);
        timing.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let mut out = Tensor::zeros(init.shape());
    for (c, slab) in chunks.iter().zip(&slabs) {
        for (j, &i) in c.iter().enumerate() {
            out.item_mut(i).copy_from_slice(slab.item(j));
        }
    }
    Ok((
        out,
        RoundProvenance {
            ipc_round,
            seed: cfg.seed,
            subsets,
            loss_trace: trace,
            timing_ms: timing,
            images_per_step: targets.len(),
        },
    ))
}

pub fn recover_digest(cfg: &RecoverConfig, committee: &[TrainedTeacher], prior: Option<&PriorTable>, ipc: usize) -> String {
    let teachers: Vec<&str> = committee.iter().map(|t| t.config_digest.as_str()).collect();
    digest::digest_of(&(cfg, teachers, prior.map(|p| &p.entries), ipc))
}

/// Full synthesis: initializes `ipc` rounds and optimizes each in turn, with
/// an independently drawn committee subset per round.
pub fn distill(
    dataset: &LabeledDataset,
    committee: &[TrainedTeacher],
    prior: Option<&PriorTable>,
    ipc: usize,
    cfg: &RecoverConfig,
    loss_log: Option<&Path>,
) -> Result<SyntheticSet> {
    cfg.validate()?;
    let first = committee
        .first()
        .ok_or_else(|| Error::IncompleteCommittee("empty committee".into()))?;
    if committee.len() > 1 {
        cfg.voting.validate_for(committee.len())?;
    }
    let resolution = first.model.spec().input_resolution;
    let mut set = init_synthetic(dataset, ipc, cfg.init_mode, resolution, cfg.init_scale, cfg.seed)?;
    let mut log = loss_log.map(LossLog::open).transpose()?;
    for round in 0..ipc {
        let idx = set.round_indices(round);
        let targets: Vec<usize> = idx.iter().map(|&i| set.labels[i]).collect();
        let init = set.images.select(&idx);
        let (imgs, prov) = synthesize_ipc_round(committee, prior, &targets, &init, cfg, round, log.as_mut())?;
        for (j, &i) in idx.iter().enumerate() {
            set.images.item_mut(i).copy_from_slice(imgs.item(j));
        }
        set.provenance.push(prov);
    }
    if let Some(l) = log.as_mut() {
        l.flush()?;
    }
    set.config_digest = recover_digest(cfg, committee, prior, ipc);
    Ok(set)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExportManifest {
    pub format_version: u32,
    pub dataset_id: String,
    pub num_classes: usize,
    pub ipc: usize,
    pub labels: Vec<usize>,
    pub files: Vec<String>,
    pub provenance: Vec<RoundProvenance>,
    pub config_digest: String,
    pub images_digest: String,
    pub normalization: crate::data::Normalization,
}

/// Writes `distilled/<dataset>/<run>/<class>/<ipc_index>.png`, the exact
/// normalized tensor (`synthetic.json`) and `manifest.json`; returns the run
/// directory.
pub fn export(set: &SyntheticSet, data: &Dataset, root: &Path, run: &str) -> Result<PathBuf> {
    let dir = root.join("distilled").join(data.id()).join(run);
    let pixels = data.denormalize(&set.images)?;
    let (n, c, h, w) = pixels.dims4()?;
    let mut files = Vec::with_capacity(n);
    for i in 0..n {
        let class = set.labels[i];
        let round = i / set.num_classes;
        let rel = format!("{class}/{round}.png");
        let src = pixels.item(i);
        let mut buf = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    let v = src[(ch.min(c - 1) * h + y) * w + x];
                    buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        let mut png = Vec::new();
        image::codecs::png::PngEncoder::new(&mut png)
            .write_image(&buf, w as u32, h as u32, image::ExtendedColorType::Rgb8)
            .map_err(|e| Error::Format {
                path: dir.join(&rel),
                msg: e.to_string(),
            })?;
        write_atomic(&dir.join(&rel), &png)?;
        files.push(rel);
    }
    write_atomic(&dir.join("synthetic.json"), &serde_json::to_vec(set)?)?;
    let manifest = ExportManifest {
        format_version: 1,
        dataset_id: data.id().to_string(),
        num_classes: set.num_classes,
        ipc: set.ipc,
        labels: set.labels.clone(),
        files,
        provenance: set.provenance.clone(),
        config_digest: set.config_digest.clone(),
        images_digest: set.digest(),
        normalization: data.manifest.normalization.clone(),
    };
    write_atomic(&dir.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(dir)
}

pub fn load_synthetic(dir: &Path) -> Result<SyntheticSet> {
    let set: SyntheticSet = serde_json::from_slice(&std::fs::read(dir.join("synthetic.json"))?)?;
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(per_class: usize) -> LabeledDataset {
        let n = per_class * 3;
        let mut r = rng::stream(5, "toy", 0);
        let data = (0..n * 2 * 6 * 6).map(|_| StandardNormal.sample(&mut r)).collect();
        LabeledDataset::new(
            Tensor::from_vec(&[n, 2, 6, 6], data).unwrap(),
            (0..n).map(|i| i % 3).collect(),
            3,
        )
        .unwrap()
    }

    #[test]
    fn init_counts_and_labels() {
        let s = init_synthetic(&toy(2), 1, InitMode::RealPatch, (4, 4), (0.5, 1.0), 0).unwrap();
        assert_eq!(s.labels, vec![0, 1, 2]);
        assert_eq!(s.images.shape(), &[3, 2, 4, 4]);
        let s = init_synthetic(&toy(2), 2, InitMode::GaussianNoise, (4, 4), (0.5, 1.0), 0).unwrap();
        assert_eq!(s.labels, vec![0, 1, 2, 0, 1, 2]);
    }

    #[test]
    fn real_patch_needs_enough_images() {
        assert!(matches!(
            init_synthetic(&toy(2), 3, InitMode::RealPatch, (4, 4), (0.5, 1.0), 0),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn batch_size_follows_class_count() {
        let cfg = RecoverConfig::default();
        assert_eq!(cfg.batch_size_for(10), 10);
        assert_eq!(cfg.batch_size_for(100), 100);
        assert_eq!((cfg.learning_rate, cfg.betas, cfg.epsilon, cfg.iterations), (0.1, (0.5, 0.9), 1e-8, 4000));
    }
}
