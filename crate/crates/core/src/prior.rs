//! Prior-performance scores: how well a reference student generalizes from
//! data distilled by each committee member alone.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::digest;
use crate::error::{Error, Result};
use crate::pipeline::store::write_atomic;
use crate::posteval::{train_student, PostEvalConfig};
use crate::recover::{distill, RecoverConfig};
use crate::squeeze::TrainedTeacher;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorTable {
    pub dataset_id: String,
    pub reference_ipc: usize,
    /// Member id to α, in percent top-1.
    pub entries: BTreeMap<String, f64>,
    pub evaluation_arch: String,
    /// Member id to the digest of the run that produced its entry.
    pub provenance: BTreeMap<String, String>,
}

impl PriorTable {
    pub fn lookup_alpha(&self, member_id: &str) -> Result<f64> {
        self.entries
            .get(member_id)
            .copied()
            .ok_or_else(|| Error::MissingPrior(member_id.to_string()))
    }

    /// Fails unless every member has a score.
    pub fn covers<'a>(&self, members: impl IntoIterator<Item = &'a str>) -> Result<()> {
        let missing: Vec<&str> = members.into_iter().filter(|m| !self.entries.contains_key(*m)).collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::IncompleteCommittee(format!("no prior score for {}", missing.join(", "))))
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (k, &a) in &self.entries {
            if !(0.0..=100.0).contains(&a) {
                return Err(Error::InvalidScore(format!("{k}: {a} is outside [0, 100]")));
            }
        }
        Ok(())
    }

    pub fn path(root: &Path, dataset_id: &str) -> PathBuf {
        root.join("priors").join(format!("{dataset_id}.prior"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &serde_json::to_vec_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let t: PriorTable = serde_json::from_slice(&std::fs::read(path)?)?;
        t.validate()?;
        Ok(t)
    }

    fn fixture(dataset_id: &str, reference_ipc: usize, scores: [f64; 5]) -> Self {
        let names = ["resnet18-like", "resnet50-like", "densenet121-like", "shufflenetv2-like", "mobilenetv2-like"];
        PriorTable {
            dataset_id: dataset_id.into(),
            reference_ipc,
            entries: names.iter().map(|n| n.to_string()).zip(scores).collect(),
            evaluation_arch: "resnet18-like".into(),
            provenance: BTreeMap::new(),
        }
    }

    /// Published full-scale scores for CIFAR-100, keyed by architecture.
    pub fn cifar100_fixture() -> Self {
        Self::fixture("cifar100", 50, [64.00, 60.58, 56.36, 51.62, 59.34])
    }

    /// Published full-scale scores for CIFAR-10, keyed by architecture.
    pub fn cifar10_fixture() -> Self {
        Self::fixture("cifar10", 50, [63.01, 65.25, 67.57, 68.52, 67.61])
    }
}

/// Builds a table by calling `score` once per teacher. `score` returns the
/// member's α and a digest describing the run behind it.
pub fn assign_prior_performance_with(
    committee: &[TrainedTeacher],
    dataset: &Dataset,
    ipc: usize,
    eval_arch: &str,
    mut score: impl FnMut(&TrainedTeacher) -> Result<(f64, String)>,
) -> Result<PriorTable> {
    if committee.is_empty() {
        return Err(Error::IncompleteCommittee("empty committee".into()));
    }
    if ipc == 0 {
        return Err(Error::Config("ipc must be at least 1".into()));
    }
    if ipc != dataset.manifest.reference_ipc {
        return Err(Error::Config(format!(
            "prior scores for {} use IPC {}, got {ipc}",
            dataset.id(),
            dataset.manifest.reference_ipc
        )));
    }
    if let Some(t) = committee.iter().find(|t| t.dataset_id != dataset.id()) {
        return Err(Error::IncompleteCommittee(format!(
            "{} was trained on {}, not {}",
            t.member_id(),
            t.dataset_id,
            dataset.id()
        )));
    }
    let mut entries = BTreeMap::new();
    let mut provenance = BTreeMap::new();
    for t in committee {
        let (alpha, run) = score(t)?;
        entries.insert(t.member_id(), alpha);
        provenance.insert(t.member_id(), run);
    }
    let table = PriorTable {
        dataset_id: dataset.id().to_string(),
        reference_ipc: ipc,
        entries,
        evaluation_arch: eval_arch.to_string(),
        provenance,
    };
    table.validate()?;
    Ok(table)
}

/// For each teacher: distill with that teacher alone, train a fresh
/// `eval.student_arch` student on the result with the teacher's
/// batch-specific labels, and record the student's test accuracy.
pub fn assign_prior_performance(
    committee: &[TrainedTeacher],
    dataset: &Dataset,
    ipc: usize,
    recover: &RecoverConfig,
    eval: &PostEvalConfig,
    seed: u64,
) -> Result<PriorTable> {
    let recover = RecoverConfig {
        seed,
        ..recover.clone()
    };
    let eval = PostEvalConfig {
        seed,
        ..eval.clone()
    };
    assign_prior_performance_with(committee, dataset, ipc, &eval.student_arch, |t| {
        let set = distill(&dataset.train, std::slice::from_ref(t), None, ipc, &recover, None)?;
        let (acc, _) = train_student(&set, t, &dataset.test, &eval)?;
        Ok((acc, digest::digest_of(&(&set.config_digest, &eval))))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup_present_and_absent() {
        let t = PriorTable::cifar100_fixture();
        assert_eq!(t.lookup_alpha("resnet18-like").unwrap(), 64.00);
        assert!(matches!(t.lookup_alpha("vit"), Err(Error::MissingPrior(_))));
    }

    #[test]
    fn coverage_names_missing_members() {
        let t = PriorTable::cifar10_fixture();
        assert!(t.covers(["resnet18-like", "mobilenetv2-like"]).is_ok());
        let e = t.covers(["resnet18-like", "tiny-cnn-w8"]).unwrap_err();
        assert!(e.to_string().contains("tiny-cnn-w8"));
    }
}
