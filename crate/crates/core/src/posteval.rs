//! Post-evaluation: trains a fresh student on distilled images against
//! teacher soft labels and reports its test accuracy.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

pub use crate::optim::cosine_lr;

use crate::augment::{AugmentFlags, AugmentPlan};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::loss::{argmax, softmax_rows};
use crate::model_zoo::{build_backbone, ArchId, BackboneSpec, Model};
use crate::nn::{BackwardOpts, NormMode, Pass, DEFAULT_EPS};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::recover::SyntheticSet;
use crate::rng::{self, Rng};
use crate::softlabel::{bssl_labels_drift, bssl_with_digest, running_with_digest, LabelMode, SoftLabelConfig};
use crate::squeeze::{evaluate, TrainedTeacher};
use crate::tensor::{ImageBatch, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PostEvalConfig {
    pub student_arch: String,
    pub student_width: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// `None` means 16, or 10 when the distilled set has at most 16 images.
    pub batch_size: Option<usize>,
    pub epochs: usize,
    /// Number of half-cosine cycles over the run.
    pub cycles: usize,
    pub min_lr: f64,
    pub augmentation: AugmentFlags,
    pub cutmix: bool,
    pub cutmix_beta: f64,
    pub kd_temperature: f64,
    pub label_mode: LabelMode,
    pub protect_running_stats: bool,
    pub label_epsilon: f64,
    pub bn_momentum: f64,
    /// Evaluate on the test split every this many epochs (and always after the last).
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for PostEvalConfig {
    fn default() -> Self {
        PostEvalConfig {
            student_arch: ArchId::Resnet18Like.name().into(),
            student_width: 16,
            learning_rate: 0.001,
            weight_decay: 0.01,
            batch_size: None,
            epochs: 300,
            cycles: 1,
            min_lr: 0.0,
            augmentation: AugmentFlags::default(),
            cutmix: true,
            cutmix_beta: 1.0,
            kd_temperature: 1.0,
            label_mode: LabelMode::BatchSpecific,
            protect_running_stats: true,
            label_epsilon: DEFAULT_EPS,
            bn_momentum: 0.9,
            eval_every: 1,
            seed: 0,
        }
    }
}

impl PostEvalConfig {
    pub fn batch_size_for(&self, distilled_len: usize) -> usize {
        self.batch_size.unwrap_or(if distilled_len <= 16 { 10 } else { 16 })
    }

    pub fn soft_labels(&self) -> SoftLabelConfig {
        SoftLabelConfig {
            mode: self.label_mode,
            epsilon: self.label_epsilon,
            protect_running_stats: self.protect_running_stats,
            momentum: self.bn_momentum,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.student_arch.parse::<ArchId>()?;
        if self.epochs == 0 || self.batch_size == Some(0) || self.eval_every == 0 || self.student_width == 0 {
            return Err(Error::Config("epochs, batch_size, eval_every and student_width must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || self.min_lr < 0.0 || self.min_lr > self.learning_rate {
            return Err(Error::Config("need 0 <= min_lr <= learning_rate and learning_rate > 0".into()));
        }
        if self.cycles == 0 {
            return Err(Error::Config("cycles must be at least 1".into()));
        }
        if !(self.kd_temperature > 0.0) || !(self.cutmix_beta > 0.0) {
            return Err(Error::Config("kd_temperature and cutmix_beta must be positive".into()));
        }
        self.augmentation.validate()?;
        self.soft_labels().validate()
    }
}

/// `τ² · mean_i KL(softmax(t_i/τ) ‖ softmax(s_i/τ))` and its gradient w.r.t.
/// the student logits.
pub fn kd_loss(student: &Tensor, teacher: &Tensor, temperature: f64) -> Result<(f64, Tensor)> {
    if student.shape() != teacher.shape() {
        return Err(Error::shape(format!(
            "student logits {:?} vs teacher logits {:?}",
            student.shape(),
            teacher.shape()
        )));
    }
    let (n, _) = student.dims2()?;
    let p = softmax_rows(teacher, temperature)?;
    let q = softmax_rows(student, temperature)?;
    let mut loss = 0.0;
    let mut grad = q.clone();
    for i in 0..n {
        for ((g, &pi), &qi) in grad.item_mut(i).iter_mut().zip(p.item(i)).zip(q.item(i)) {
            if pi > 0.0 {
                loss += pi * (pi.ln() - qi.max(f64::MIN_POSITIVE).ln());
            }
            *g = temperature * (qi - pi) / n as f64;
        }
    }
    Ok((temperature * temperature * loss / n as f64, grad))
}

/// Pasted rectangle, half-open in both axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CutBox {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

#[derive(Debug, Clone)]
pub struct CutMixed {
    pub images: ImageBatch,
    /// Source of the pasted patch for each image.
    pub partner: Vec<usize>,
    /// Fraction of each image that is still its own, from the pasted area.
    pub lambda: f64,
    pub cut: CutBox,
    pub labels_a: Vec<usize>,
    pub labels_b: Vec<usize>,
}

/// One CutMix draw for the whole batch: a Beta(β, β) mixing ratio, a box of
/// area `(1 − λ)·H·W` around a uniform center (clipped to the image), and a
/// random partner permutation.
pub fn cutmix(images: &ImageBatch, labels: &[usize], rng: &mut Rng, beta_param: f64) -> Result<CutMixed> {
    let (n, _, h, w) = images.dims4()?;
    if n < 2 {
        return Err(Error::DegenerateBatch(format!("cutmix needs at least 2 images, got {n}")));
    }
    let beta = Beta::new(beta_param, beta_param).map_err(|e| Error::Config(e.to_string()))?;
    let lam: f64 = beta.sample(rng);
    let mut partner: Vec<usize> = (0..n).collect();
    partner.shuffle(rng);
    let r = (1.0 - lam).sqrt();
    let (ch, cw) = ((h as f64 * r) as usize, (w as f64 * r) as usize);
    let cy = rng.gen_range(0..h);
    let cx = rng.gen_range(0..w);
    let cut = CutBox {
        y0: cy.saturating_sub(ch / 2),
        y1: (cy + ch / 2).min(h),
        x0: cx.saturating_sub(cw / 2),
        x1: (cx + cw / 2).min(w),
    };
    cutmix_with(images, labels, &partner, cut)
}

/// Pastes `cut` from `partner[i]` into image `i`; λ is recomputed from the
/// exact pasted pixel count.
pub fn cutmix_with(images: &ImageBatch, labels: &[usize], partner: &[usize], cut: CutBox) -> Result<CutMixed> {
    let (n, c, h, w) = images.dims4()?;
    if partner.len() != n || labels.len() != n {
        return Err(Error::shape("partner and label lists must match the batch"));
    }
    if cut.y0 > cut.y1 || cut.x0 > cut.x1 || cut.y1 > h || cut.x1 > w {
        return Err(Error::shape(format!("cut box {cut:?} outside {h}x{w}")));
    }
    let mut out = images.clone();
    for i in 0..n {
        let src = images.item(partner[i]);
        let dst = out.item_mut(i);
        for ch in 0..c {
            for y in cut.y0..cut.y1 {
                let row = (ch * h + y) * w;
                dst[row + cut.x0..row + cut.x1].copy_from_slice(&src[row + cut.x0..row + cut.x1]);
            }
        }
    }
    let area = (cut.y1 - cut.y0) * (cut.x1 - cut.x0);
    Ok(CutMixed {
        images: out,
        lambda: 1.0 - area as f64 / (h * w) as f64,
        cut,
        labels_a: labels.to_vec(),
        labels_b: partner.iter().map(|&j| labels[j]).collect(),
        partner: partner.to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub train_top1: f64,
    /// `NaN` on epochs without a test evaluation.
    pub test_top1: f64,
    pub mean_loss: f64,
    /// Learning rate at the epoch's first step.
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainingTrace {
    pub per_epoch: Vec<TraceRow>,
}

impl TrainingTrace {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.per_epoch {
            w.serialize(row).map_err(|e| csv_err(path, e))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        crate::pipeline::store::write_atomic(path, &bytes)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let per_epoch = r
            .deserialize()
            .collect::<std::result::Result<Vec<TraceRow>, _>>()
            .map_err(|e| csv_err(path, e))?;
        Ok(TrainingTrace { per_epoch })
    }

    /// Mean `(train_top1, test_top1)` over the last `fraction` of epochs,
    /// skipping epochs without a test evaluation.
    pub fn tail_means(&self, fraction: f64) -> (f64, f64) {
        let n = self.per_epoch.len();
        let k = ((n as f64 * fraction).ceil() as usize).clamp(1, n.max(1));
        let tail = &self.per_epoch[n - k.min(n)..];
        let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len().max(1) as f64;
        (
            mean(tail.iter().map(|r| r.train_top1).collect()),
            mean(tail.iter().map(|r| r.test_top1).filter(|v| v.is_finite()).collect()),
        )
    }
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

/// Where the soft labels of a training batch come from.
enum Labeler<'a> {
    Frozen(&'a Model, String),
    Drifting(Model),
}

/// Trains a fresh student on `distilled` with KD against `teacher` and
/// returns its final test accuracy and per-epoch trace.
///
/// Every random draw (init, shuffling, augmentation, CutMix) comes from its
/// own stream, so switching the label mode changes nothing else.
pub fn train_student(
    distilled: &SyntheticSet,
    teacher: &TrainedTeacher,
    test: &LabeledDataset,
    cfg: &PostEvalConfig,
) -> Result<(f64, TrainingTrace)> {
    cfg.validate()?;
    if distilled.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (_, _, h, w) = distilled.images.dims4()?;
    let spec = BackboneSpec::new(
        cfg.student_arch.parse()?,
        distilled.num_classes,
        (h, w),
        cfg.student_width,
    );
    let mut student = build_backbone(&spec, cfg.seed)?;
    let labels_cfg = cfg.soft_labels();
    let mut labeler = if cfg.label_mode == LabelMode::BatchSpecific && !cfg.protect_running_stats {
        Labeler::Drifting(teacher.model.clone())
    } else {
        Labeler::Frozen(&teacher.model, teacher.model.digest())
    };
    let mut opt = Optimizer::new(OptimizerConfig::adamw(cfg.weight_decay));
    let n = distilled.len();
    let bs = cfg.batch_size_for(n);
    let per_epoch = n.div_ceil(bs);
    let total = per_epoch * cfg.epochs;
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = TrainingTrace::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(cfg.seed, "posteval-shuffle", epoch as u64));
        let epoch_lr = cosine_lr(step, total, cfg.learning_rate, cfg.min_lr, cfg.cycles)?;
        let (mut loss_sum, mut hits) = (0.0, 0.0);
        for chunk in order.chunks(bs) {
            let x = distilled.images.select(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| distilled.labels[i]).collect();
            let mut r = rng::stream(cfg.seed, "posteval-augment", step as u64);
            let x = AugmentPlan::sample(chunk.len(), (h, w), (h, w), &cfg.augmentation, &mut r).apply(&x)?;
            let mixed = if cfg.cutmix && chunk.len() >= 2 {
                let mut r = rng::stream(cfg.seed, "posteval-cutmix", step as u64);
                cutmix(&x, &y, &mut r, cfg.cutmix_beta)?
            } else {
                CutMixed {
                    images: x,
                    partner: (0..chunk.len()).collect(),
                    lambda: 1.0,
                    cut: CutBox { y0: 0, y1: 0, x0: 0, x1: 0 },
                    labels_a: y.clone(),
                    labels_b: y,
                }
            };
            let targets = match (&mut labeler, cfg.label_mode) {
                (Labeler::Frozen(t, d), LabelMode::BatchSpecific) => {
                    bssl_with_digest(t, &mixed.images, &labels_cfg, d.clone())?
                }
                (Labeler::Frozen(t, d), LabelMode::Running) => running_with_digest(t, &mixed.images, d.clone())?,
                (Labeler::Drifting(t), _) => bssl_labels_drift(t, &mixed.images, &labels_cfg)?,
            };
            let mut pass = Pass::new(NormMode::Batch, true);
            let logits = student.forward(&mixed.images, &mut pass)?;
            let (loss, dlogits) = kd_loss(&logits, &targets.logits, cfg.kd_temperature)?;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            loss_sum += loss * chunk.len() as f64;
            for i in 0..chunk.len() {
                let p = argmax(logits.item(i));
                hits += mixed.lambda * f64::from(p == mixed.labels_a[i])
                    + (1.0 - mixed.lambda) * f64::from(p == mixed.labels_b[i]);
            }
            let mut grads = student.zero_grads();
            student.backward(dlogits, &mut pass, Some(&mut grads), &BackwardOpts { bn_align: 0.0 })?;
            let lr = cosine_lr(step, total, cfg.learning_rate, cfg.min_lr, cfg.cycles)?;
            opt.step(student.params_mut(), &grads.bufs, lr);
            student.apply_running_update(&pass.records, cfg.bn_momentum)?;
            step += 1;
        }
        let test_top1 = if (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs {
            evaluate(&student, test)?
        } else {
            f64::NAN
        };
        trace.per_epoch.push(TraceRow {
            epoch,
            train_top1: 100.0 * hits / n as f64,
            test_top1,
            mean_loss: loss_sum / n as f64,
            lr: epoch_lr,
        });
    }
    let last = trace.per_epoch.last().map_or(f64::NAN, |r| r.test_top1);
    Ok((last, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kd_identical_logits_is_zero() {
        let t = Tensor::from_vec(&[2, 3], vec![0.1, 2.0, -1.0, 0.0, 0.0, 5.0]).unwrap();
        let (l, g) = kd_loss(&t, &t, 2.0).unwrap();
        assert!(l.abs() < 1e-15);
        assert!(g.data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn kd_shape_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 4]);
        assert!(matches!(kd_loss(&a, &b, 1.0), Err(Error::Shape(_))));
    }

    #[test]
    fn cutmix_needs_two_images() {
        let x = Tensor::zeros(&[1, 3, 4, 4]);
        let mut r = rng::stream(0, "t", 0);
        assert!(matches!(cutmix(&x, &[0], &mut r, 1.0), Err(Error::DegenerateBatch(_))));
    }

    #[test]
    fn empty_box_leaves_images_alone() {
        let x = Tensor::from_vec(&[2, 1, 2, 2], (0..8).map(f64::from).collect()).unwrap();
        let m = cutmix_with(&x, &[0, 1], &[1, 0], CutBox { y0: 1, y1: 1, x0: 0, x1: 2 }).unwrap();
        assert_eq!(m.images, x);
        assert_eq!(m.lambda, 1.0);
    }

    #[test]
    fn half_box_gives_half_lambda() {
        let x = Tensor::zeros(&[2, 3, 8, 8]);
        let m = cutmix_with(&x, &[0, 1], &[1, 0], CutBox { y0: 0, y1: 4, x0: 0, x1: 8 }).unwrap();
        assert_eq!(m.lambda, 0.5);
    }

    #[test]
    fn small_sets_use_batch_ten() {
        let cfg = PostEvalConfig::default();
        assert_eq!(cfg.batch_size_for(16), 10);
        assert_eq!(cfg.batch_size_for(17), 16);
        assert_eq!((cfg.learning_rate, cfg.epochs, cfg.kd_temperature), (0.001, 300, 1.0));
    }
}
