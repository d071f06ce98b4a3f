//! Teacher soft labels under batch-specific or running normalization, and the
//! per-channel statistic arithmetic both rely on.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::digest;
use crate::error::{Error, Result};
use crate::model_zoo::Model;
use crate::nn::{channel_stats, NormMode, Pass, DEFAULT_EPS};
use crate::tensor::{ImageBatch, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMode {
    BatchSpecific,
    Running,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SoftLabelConfig {
    pub mode: LabelMode,
    pub epsilon: f64,
    pub protect_running_stats: bool,
    /// Running-statistic momentum used only when `protect_running_stats` is
    /// off and labeling is allowed to move the teacher's statistics.
    pub momentum: f64,
}

impl Default for SoftLabelConfig {
    fn default() -> Self {
        SoftLabelConfig {
            mode: LabelMode::BatchSpecific,
            epsilon: DEFAULT_EPS,
            protect_running_stats: true,
            momentum: 0.9,
        }
    }
}

impl SoftLabelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::InvalidMomentum(self.momentum));
        }
        Ok(())
    }
}

/// Raw teacher logits bound to the exact batch they were computed on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftLabelBatch {
    pub logits: Tensor,
    pub batch_digest: String,
    pub teacher_digest: String,
}

/// Per-channel `(mean, variance + epsilon)` over `(N, H, W)`, population variance.
pub fn batch_stats(features: &Tensor, epsilon: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    channel_stats(features, epsilon)
}

/// One exponential-moving-average step of `(mean, var)` towards the batch statistics.
pub fn running_stat_update(
    running: (&[f64], &[f64]),
    batch: (&[f64], &[f64]),
    momentum: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::InvalidMomentum(momentum));
    }
    let c = running.0.len();
    if running.1.len() != c || batch.0.len() != c || batch.1.len() != c {
        return Err(Error::shape("running and batch statistics differ in channel count"));
    }
    let mix = |r: &[f64], b: &[f64]| -> Vec<f64> {
        r.iter()
            .zip(b)
            .map(|(r, b)| momentum * r + (1.0 - momentum) * b)
            .collect()
    };
    Ok((mix(running.0, batch.0), mix(running.1, batch.1)))
}

pub fn batch_digest(batch: &ImageBatch) -> String {
    let mut h = digest::digest_f64(batch.data());
    h.push(':');
    h.push_str(&format!("{:?}", batch.shape()));
    digest::sha256_hex(h.as_bytes())
}

/// Labels `batch` with every BN layer normalizing by the batch's own
/// statistics. The teacher is read-only, so its running statistics are
/// preserved regardless of `protect_running_stats`; use [`bssl_labels_drift`]
/// for the variant that folds each batch into the running statistics.
pub fn bssl_labels(teacher: &Model, batch: &ImageBatch, cfg: &SoftLabelConfig) -> Result<SoftLabelBatch> {
    bssl_with_digest(teacher, batch, cfg, teacher.digest())
}

pub(crate) fn bssl_with_digest(
    teacher: &Model,
    batch: &ImageBatch,
    cfg: &SoftLabelConfig,
    teacher_digest: String,
) -> Result<SoftLabelBatch> {
    Ok(bssl_forward(teacher, batch, cfg, teacher_digest)?.0)
}

fn bssl_forward(
    teacher: &Model,
    batch: &ImageBatch,
    cfg: &SoftLabelConfig,
    teacher_digest: String,
) -> Result<(SoftLabelBatch, Pass)> {
    cfg.validate()?;
    if batch.batch() == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut pass = Pass::new(NormMode::Batch, false);
    pass.eps = Some(cfg.epsilon);
    let logits = teacher.forward(batch, &mut pass)?;
    Ok((
        SoftLabelBatch {
            logits,
            batch_digest: batch_digest(batch),
            teacher_digest,
        },
        pass,
    ))
}

/// Batch-specific labeling that also moves the teacher's running statistics
/// towards this batch, as a training-mode forward pass would.
pub fn bssl_labels_drift(teacher: &mut Model, batch: &ImageBatch, cfg: &SoftLabelConfig) -> Result<SoftLabelBatch> {
    let d = teacher.digest();
    let (labels, pass) = bssl_forward(teacher, batch, cfg, d)?;
    teacher.apply_running_update(&pass.records, cfg.momentum)?;
    Ok(labels)
}

/// Inference-mode labels; independent of how the batch is composed.
pub fn running_labels(teacher: &Model, batch: &ImageBatch) -> Result<SoftLabelBatch> {
    running_with_digest(teacher, batch, teacher.digest())
}

pub(crate) fn running_with_digest(teacher: &Model, batch: &ImageBatch, teacher_digest: String) -> Result<SoftLabelBatch> {
    if batch.batch() == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(SoftLabelBatch {
        logits: teacher.predict(batch)?,
        batch_digest: batch_digest(batch),
        teacher_digest,
    })
}

/// Logits memoized by `(teacher_digest, batch_digest)`. A hit requires the
/// exact same batch in the exact same order.
#[derive(Debug, Default, Serialize, Deserialize)]
pub struct LabelCache {
    entries: BTreeMap<String, Tensor>,
}

impl LabelCache {
    fn key(teacher_digest: &str, batch_digest: &str) -> String {
        format!("{teacher_digest}/{batch_digest}")
    }

    pub fn get(&self, teacher_digest: &str, batch_digest: &str) -> Option<&Tensor> {
        self.entries.get(&Self::key(teacher_digest, batch_digest))
    }

    pub fn insert(&mut self, labels: &SoftLabelBatch) {
        self.entries.insert(
            Self::key(&labels.teacher_digest, &labels.batch_digest),
            labels.logits.clone(),
        );
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::pipeline::store::write_atomic(path, &serde_json::to_vec(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_stats() {
        let x = Tensor::from_vec(&[2, 1, 1, 1], vec![1.0, 3.0]).unwrap();
        let (m, v) = batch_stats(&x, 1e-5).unwrap();
        assert_eq!(m, vec![2.0]);
        assert_eq!(v, vec![1.0 + 1e-5]);
    }

    #[test]
    fn constant_input_has_epsilon_variance() {
        let x = Tensor::full(&[3, 2, 2, 2], 4.25);
        let (m, v) = batch_stats(&x, 1e-5).unwrap();
        assert_eq!(m, vec![4.25, 4.25]);
        assert_eq!(v, vec![1e-5, 1e-5]);
    }

    #[test]
    fn empty_input_is_rejected() {
        let x = Tensor::zeros(&[0, 2, 2, 2]);
        assert!(matches!(batch_stats(&x, 1e-5), Err(Error::EmptyBatch)));
    }

    #[test]
    fn update_closed_forms() {
        let (m, _) = running_stat_update((&[0.0], &[1.0]), (&[1.0], &[1.0]), 0.9).unwrap();
        assert!((m[0] - 0.1).abs() < 1e-15);
        let (m, v) = running_stat_update((&[0.3], &[2.0]), (&[0.3], &[2.0]), 0.9).unwrap();
        assert_eq!((m[0], v[0]), (0.3, 2.0));
        let (m, v) = running_stat_update((&[0.3], &[2.0]), (&[-1.5], &[0.7]), 0.0).unwrap();
        assert_eq!((m[0], v[0]), (-1.5, 0.7));
        assert!(matches!(
            running_stat_update((&[0.0], &[1.0]), (&[0.0], &[1.0]), 1.5),
            Err(Error::InvalidMomentum(_))
        ));
    }

    #[test]
    fn config_rejects_nonpositive_epsilon() {
        let cfg = SoftLabelConfig {
            epsilon: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
