//! Committee subset sampling, prior-performance-guided weights and the
//! weighted committee loss that drives synthesis.

use std::io::Write;
use std::path::Path;

use rand::Rng as _;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::cross_entropy;
use crate::model_zoo::Model;
use crate::nn::{BackwardOpts, NormMode, Pass};
use crate::rng::{self, Rng};
use crate::tensor::{ImageBatch, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VoterMode {
    Prior,
    Equal,
    Random,
}

/// When a new committee subset is drawn during synthesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Resample {
    PerIpc,
    PerIteration,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VotingConfig {
    #[serde(rename = "N")]
    pub n: usize,
    pub temperature: f64,
    pub voter_mode: VoterMode,
    pub seed: u64,
    pub resample: Resample,
}

impl Default for VotingConfig {
    fn default() -> Self {
        VotingConfig {
            n: 2,
            temperature: 4.0,
            voter_mode: VoterMode::Prior,
            seed: 0,
            resample: Resample::PerIpc,
        }
    }
}

impl VotingConfig {
    /// Checks the bounds that do not depend on the committee.
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::InvalidSubsetSize {
                n: self.n,
                committee: None,
            });
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    pub fn validate_for(&self, committee_size: usize) -> Result<()> {
        self.validate()?;
        if self.n > committee_size {
            return Err(Error::InvalidSubsetSize {
                n: self.n,
                committee: Some(committee_size),
            });
        }
        Ok(())
    }
}

/// Draws `cfg.n` distinct member indices uniformly without replacement,
/// returned in ascending order. `draw` selects an independent stream (the
/// IPC round, or the iteration in per-iteration mode).
pub fn sample_committee(committee_size: usize, cfg: &VotingConfig, draw: u64) -> Result<Vec<usize>> {
    cfg.validate_for(committee_size)?;
    let mut r = rng::stream(cfg.seed, "committee", draw);
    let mut idx = rand::seq::index::sample(&mut r, committee_size, cfg.n).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Member weights: a temperature softmax over the prior scores, uniform, or a
/// uniform draw from the simplex.
pub fn ppg_weights(alphas: &[f64], temperature: f64, mode: VoterMode, rng: &mut Rng) -> Result<Vec<f64>> {
    if alphas.is_empty() {
        return Err(Error::InvalidSubsetSize { n: 0, committee: None });
    }
    if let Some(a) = alphas.iter().find(|a| !a.is_finite()) {
        return Err(Error::InvalidScore(format!("prior score {a} is not finite")));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let raw: Vec<f64> = match mode {
        VoterMode::Prior => {
            let max = alphas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            alphas.iter().map(|a| ((a - max) / temperature).exp()).collect()
        }
        VoterMode::Equal => vec![1.0; alphas.len()],
        VoterMode::Random => alphas.iter().map(|_| rng.sample::<f64, _>(Exp1)).collect(),
    };
    let z: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / z).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub pairs: Vec<(String, f64)>,
}

impl WeightVector {
    pub fn new(ids: Vec<String>, weights: Vec<f64>) -> Result<Self> {
        if ids.len() != weights.len() || ids.is_empty() {
            return Err(Error::shape("weight vector needs one weight per member"));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::InvalidScore(format!("weights {weights:?} are not on the simplex")));
        }
        Ok(WeightVector {
            pairs: ids.into_iter().zip(weights).collect(),
        })
    }

    pub fn weights(&self) -> Vec<f64> {
        self.pairs.iter().map(|p| p.1).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberLoss {
    pub member_id: String,
    pub ce: f64,
    pub bn_align: f64,
    pub weight: f64,
    /// `weight * (ce + lambda_bn * bn_align)`.
    pub weighted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub per_member: Vec<MemberLoss>,
    pub lambda_bn: f64,
}

/// Cross-entropy of the teacher on `x` against `y` plus `lambda_bn` times the
/// squared distance of every BN layer's batch statistics to its running
/// statistics. Returns the loss (weight 1) and its gradient w.r.t. `x`.
pub fn recover_loss(teacher: &Model, x: &ImageBatch, y: &[usize], lambda_bn: f64) -> Result<(MemberLoss, Tensor)> {
    if x.batch() != y.len() {
        return Err(Error::shape(format!("{} images but {} targets", x.batch(), y.len())));
    }
    let mut pass = Pass::new(NormMode::Batch, true);
    let logits = teacher.forward(x, &mut pass)?;
    let (ce, dlogits) = cross_entropy(&logits, y)?;
    let norms = teacher.norm_layers();
    let mut bn_align = 0.0;
    for rec in &pass.records {
        let bn = norms
            .iter()
            .find(|b| b.index == rec.index)
            .ok_or_else(|| Error::shape(format!("no BN layer with index {}", rec.index)))?;
        for c in 0..bn.channels {
            bn_align += (rec.mean[c] - bn.running_mean[c]).powi(2) + (rec.var[c] - bn.running_var[c]).powi(2);
        }
    }
    let grad = teacher.backward(dlogits, &mut pass, None, &BackwardOpts { bn_align: lambda_bn })?;
    Ok((
        MemberLoss {
            member_id: teacher.spec().member_id(),
            ce,
            bn_align,
            weight: 1.0,
            weighted: ce + lambda_bn * bn_align,
        },
        grad,
    ))
}

/// `Σ wᵢ · recover_lossᵢ` and its gradient w.r.t. `x`.
pub fn committee_loss(
    members: &[(&Model, f64)],
    x: &ImageBatch,
    y: &[usize],
    lambda_bn: f64,
) -> Result<(LossBreakdown, Tensor)> {
    if members.is_empty() {
        return Err(Error::InvalidSubsetSize { n: 0, committee: None });
    }
    let mut grad = Tensor::zeros(x.shape());
    let mut per_member = Vec::with_capacity(members.len());
    let mut total = 0.0;
    for &(model, w) in members {
        let (mut m, mut g) = recover_loss(model, x, y, lambda_bn)?;
        m.weight = w;
        m.weighted *= w;
        total += m.weighted;
        g.scale(w);
        grad.add_assign(&g)?;
        per_member.push(m);
    }
    Ok((
        LossBreakdown {
            total,
            per_member,
            lambda_bn,
        },
        grad,
    ))
}

/// Appends breakdown rows to a CSV file
/// (`iteration,member,ce,bn_align,weight,total`), writing the header first
/// when the file is new.
pub struct LossLog {
    out: std::io::BufWriter<std::fs::File>,
}

impl LossLog {
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let fresh = !path.exists();
        let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        let mut out = std::io::BufWriter::new(file);
        if fresh {
            writeln!(out, "iteration,member,ce,bn_align,weight,total")?;
        }
        Ok(LossLog { out })
    }

    pub fn append(&mut self, iteration: usize, b: &LossBreakdown) -> Result<()> {
        for m in &b.per_member {
            writeln!(
                self.out,
                "{iteration},{},{},{},{},{}",
                m.member_id, m.ce, m.bn_align, m.weight, b.total
            )?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        Ok(self.out.flush()?)
    }
}
