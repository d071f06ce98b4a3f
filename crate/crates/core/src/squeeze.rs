//! Pre-training of committee backbones on the original data.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentFlags, AugmentPlan};
use crate::data::{Dataset, LabeledDataset};
use crate::digest;
use crate::error::{Error, Result};
use crate::loss::{argmax, cross_entropy};
use crate::model_zoo::{build_backbone, BackboneSpec, Model};
use crate::nn::{BackwardOpts, NormMode, Pass};
use crate::optim::{Optimizer, OptimizerConfig, Schedule};
use crate::pipeline::store::write_atomic;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SqueezeConfig {
    pub optimizer: OptimizerConfig,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub scheduler: Schedule,
    pub augmentation: AugmentFlags,
    /// Weight on the old running statistics in each update.
    pub bn_momentum: f64,
    pub seed: u64,
}

impl Default for SqueezeConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl SqueezeConfig {
    /// CIFAR-10/100 pre-training: Adam, lr 0.001, weight decay 1e-4, batch 512, 200 epochs.
    pub fn cifar() -> Self {
        SqueezeConfig {
            optimizer: OptimizerConfig::adam((0.9, 0.999), 1e-8, 1e-4),
            learning_rate: 0.001,
            batch_size: 512,
            epochs: 200,
            scheduler: Schedule::Cosine,
            augmentation: AugmentFlags::default(),
            bn_momentum: 0.9,
            seed: 0,
        }
    }

    /// Tiny-ImageNet pre-training: SGD momentum 0.9, lr 0.1, batch 128, 50 epochs.
    pub fn tiny_imagenet() -> Self {
        SqueezeConfig {
            optimizer: OptimizerConfig::sgd(0.9, 0.0),
            learning_rate: 0.1,
            batch_size: 128,
            epochs: 50,
            ..Self::cifar()
        }
    }

    /// ImageNette pre-training: SGD momentum 0.9, lr 0.01, weight decay 1e-4, batch 64, 300 epochs.
    pub fn imagenette() -> Self {
        SqueezeConfig {
            optimizer: OptimizerConfig::sgd(0.9, 1e-4),
            learning_rate: 0.01,
            batch_size: 64,
            epochs: 300,
            ..Self::cifar()
        }
    }

    /// Desk-scale variant of [`SqueezeConfig::cifar`]: a quarter of the
    /// epochs and batches sized for a few thousand images.
    pub fn desk() -> Self {
        SqueezeConfig {
            batch_size: 64,
            epochs: 50,
            ..Self::cifar()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "cifar" | "cifar10" | "cifar100" => Ok(Self::cifar()),
            "tiny-imagenet" => Ok(Self::tiny_imagenet()),
            "imagenette" => Ok(Self::imagenette()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::UnknownPreset(other.into())),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::InvalidMomentum(self.bn_momentum));
        }
        self.augmentation.validate()
    }
}

#[derive(Debug, Clone)]
pub struct TrainedTeacher {
    pub model: Model,
    pub dataset_id: String,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub config_digest: String,
    pub seed: u64,
    /// Mean training cross-entropy per epoch.
    pub loss_history: Vec<f64>,
}

impl TrainedTeacher {
    pub fn member_id(&self) -> String {
        self.model.spec().member_id()
    }
}

impl AsRef<Model> for TrainedTeacher {
    fn as_ref(&self) -> &Model {
        &self.model
    }
}

/// Digest identifying `(spec, cfg, data split)`.
pub fn squeeze_digest(spec: &BackboneSpec, cfg: &SqueezeConfig, manifest_digest: &str) -> String {
    digest::digest_of(&(spec, cfg, manifest_digest))
}

/// Trains a fresh backbone on `data.train` with cross-entropy.
pub fn pretrain(spec: &BackboneSpec, data: &Dataset, cfg: &SqueezeConfig) -> Result<TrainedTeacher> {
    cfg.validate()?;
    let train = &data.train;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if train.num_classes != spec.num_classes {
        return Err(Error::shape(format!(
            "dataset has {} classes, spec {}",
            train.num_classes, spec.num_classes
        )));
    }
    let mut model = build_backbone(spec, cfg.seed)?;
    let mut opt = Optimizer::new(cfg.optimizer);
    let n = train.len();
    let per_epoch = n.div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let hw = train.resolution();
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(cfg.seed, "squeeze-shuffle", epoch as u64));
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train.subset(chunk);
            let mut r = rng::stream(cfg.seed, "squeeze-augment", step as u64);
            let x = AugmentPlan::sample(chunk.len(), hw, hw, &cfg.augmentation, &mut r).apply(&batch.images)?;
            let mut pass = Pass::new(NormMode::Batch, true);
            let logits = model.forward(&x, &mut pass)?;
            let (loss, dlogits) = cross_entropy(&logits, &batch.labels)?;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            epoch_loss += loss * chunk.len() as f64;
            let mut grads = model.zero_grads();
            model.backward(dlogits, &mut pass, Some(&mut grads), &BackwardOpts { bn_align: 0.0 })?;
            let lr = cfg.scheduler.lr(step, total, cfg.learning_rate, 0.0, 1)?;
            opt.step(model.params_mut(), &grads.bufs, lr);
            model.apply_running_update(&pass.records, cfg.bn_momentum)?;
            step += 1;
        }
        history.push(epoch_loss / n as f64);
    }
    Ok(TrainedTeacher {
        train_accuracy: evaluate(&model, train)?,
        test_accuracy: evaluate(&model, &data.test)?,
        model,
        dataset_id: data.id().to_string(),
        config_digest: squeeze_digest(spec, cfg, &data.manifest_digest),
        seed: cfg.seed,
        loss_history: history,
    })
}

/// Top-1 accuracy in percent with running-statistics normalization.
pub fn evaluate(model: &Model, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(256) {
        let logits = model.predict(&data.images.select(chunk))?;
        for (row, &i) in chunk.iter().enumerate() {
            if argmax(logits.item(row)) == data.labels[i] {
                correct += 1;
            }
        }
    }
    Ok(100.0 * correct as f64 / data.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherMeta {
    pub format_version: u32,
    pub dataset_id: String,
    pub member_id: String,
    pub spec: BackboneSpec,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub config_digest: String,
    pub model_digest: String,
    pub seed: u64,
    pub loss_history: Vec<f64>,
    pub config: Option<SqueezeConfig>,
}

/// `teachers/<dataset>/<member>/<config digest>` under `root`.
pub fn teacher_dir(root: &Path, dataset_id: &str, member_id: &str, config_digest: &str) -> PathBuf {
    root.join("teachers")
        .join(dataset_id)
        .join(member_id)
        .join(digest::short(config_digest))
}

/// Writes the checkpoint and its sidecar; returns the teacher directory.
pub fn save_teacher(root: &Path, t: &TrainedTeacher, cfg: Option<&SqueezeConfig>) -> Result<PathBuf> {
    let dir = teacher_dir(root, &t.dataset_id, &t.member_id(), &t.config_digest);
    t.model.save(&dir.join("model.json"))?;
    let meta = TeacherMeta {
        format_version: 1,
        dataset_id: t.dataset_id.clone(),
        member_id: t.member_id(),
        spec: t.model.spec().clone(),
        train_accuracy: t.train_accuracy,
        test_accuracy: t.test_accuracy,
        config_digest: t.config_digest.clone(),
        model_digest: t.model.digest(),
        seed: t.seed,
        loss_history: t.loss_history.clone(),
        config: cfg.cloned(),
    };
    write_atomic(&dir.join("meta.json"), &serde_json::to_vec_pretty(&meta)?)?;
    Ok(dir)
}

pub fn load_teacher(dir: &Path) -> Result<TrainedTeacher> {
    let meta: TeacherMeta = serde_json::from_slice(&std::fs::read(dir.join("meta.json"))?)?;
    let model = Model::load(&dir.join("model.json"))?;
    if model.digest() != meta.model_digest {
        return Err(Error::Format {
            path: dir.to_path_buf(),
            msg: "checkpoint does not match its recorded digest".into(),
        });
    }
    Ok(TrainedTeacher {
        model,
        dataset_id: meta.dataset_id,
        train_accuracy: meta.train_accuracy,
        test_accuracy: meta.test_accuracy,
        config_digest: meta.config_digest,
        seed: meta.seed,
        loss_history: meta.loss_history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_epochs_rejected() {
        let cfg = SqueezeConfig {
            epochs: 0,
            ..SqueezeConfig::desk()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn presets_mirror_tables() {
        let c = SqueezeConfig::cifar();
        assert_eq!((c.learning_rate, c.batch_size, c.epochs), (0.001, 512, 200));
        assert_eq!(c.optimizer.weight_decay, 1e-4);
        let t = SqueezeConfig::tiny_imagenet();
        assert_eq!((t.learning_rate, t.optimizer.momentum, t.batch_size, t.epochs), (0.1, 0.9, 128, 50));
        assert_eq!(SqueezeConfig::desk().epochs * 4, c.epochs);
    }
}
