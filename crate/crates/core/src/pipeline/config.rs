//! Run configuration files.
//!
//! A config is TOML with a `version` key, a dataset source, the committee and
//! one table per stage. Every stage table is optional; omitted keys take the
//! preset defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::ShapesConfig;
use crate::digest;
use crate::error::{Error, Result};
use crate::model_zoo::{ArchId, BackboneSpec};
use crate::posteval::PostEvalConfig;
use crate::recover::RecoverConfig;
use crate::squeeze::SqueezeConfig;

use super::store::write_atomic;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemberSpec {
    pub arch: String,
    pub width: usize,
}

impl MemberSpec {
    pub fn new(arch: ArchId, width: usize) -> Self {
        MemberSpec {
            arch: arch.name().to_string(),
            width,
        }
    }

    pub fn backbone(&self, num_classes: usize, resolution: (usize, usize)) -> Result<BackboneSpec> {
        Ok(BackboneSpec::new(self.arch.parse()?, num_classes, resolution, self.width))
    }

    pub fn member_id(&self) -> String {
        format!("{}-w{}", self.arch, self.width)
    }
}

/// Either an existing manifest or one of the built-in generators
/// (`shapes10-32`, `toy10-16`), written under the output root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generate: Option<String>,
}

impl DatasetSource {
    pub fn generated(preset: &str) -> Self {
        DatasetSource {
            manifest: None,
            generate: Some(preset.to_string()),
        }
    }

    pub fn generator(&self) -> Result<Option<ShapesConfig>> {
        match (&self.manifest, &self.generate) {
            (Some(_), None) => Ok(None),
            (None, Some(name)) => ShapesConfig::preset(name).map(Some),
            _ => Err(Error::Config(
                "dataset needs exactly one of `manifest` or `generate`".into(),
            )),
        }
    }
}

/// How the prior table is obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    /// Use a published table (`cifar10`, `cifar100`) matched to members by
    /// architecture instead of measuring.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fixture: Option<String>,
    /// Synthesis iterations for the per-member runs; `None` keeps `recover.iterations`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    /// Student epochs for the per-member runs; `None` keeps `posteval.epochs`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    pub seed: u64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            fixture: None,
            iterations: None,
            epochs: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub version: u32,
    pub dataset: DatasetSource,
    pub committee: Vec<MemberSpec>,
    /// Images per class to distill.
    #[serde(default = "default_ipc")]
    pub ipc: usize,
    /// Member that labels the distilled data and embeds it for diagnostics;
    /// defaults to the first committee member.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_teacher: Option<String>,
    /// Student seeds for the eval stage; empty means the global seed only.
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub squeeze: SqueezeConfig,
    #[serde(default)]
    pub prior: PriorConfig,
    #[serde(default)]
    pub recover: RecoverConfig,
    #[serde(default)]
    pub posteval: PostEvalConfig,
}

fn default_ipc() -> usize {
    10
}

impl PipelineConfig {
    pub fn new(dataset: DatasetSource, committee: Vec<MemberSpec>) -> Self {
        PipelineConfig {
            version: CONFIG_VERSION,
            dataset,
            committee,
            ipc: default_ipc(),
            label_teacher: None,
            seeds: Vec::new(),
            squeeze: SqueezeConfig::default(),
            prior: PriorConfig::default(),
            recover: RecoverConfig::default(),
            posteval: PostEvalConfig::default(),
        }
    }

    /// The laptop-scale experiment: three tiny CNNs on `shapes10-32`,
    /// ten images per class.
    pub fn desk() -> Self {
        let mut cfg = PipelineConfig::new(
            DatasetSource::generated("shapes10-32"),
            vec![
                MemberSpec::new(ArchId::TinyCnn, 12),
                MemberSpec::new(ArchId::TinyCnn, 10),
                MemberSpec::new(ArchId::TinyCnn, 8),
            ],
        );
        cfg.recover.iterations = 500;
        cfg.recover.lambda_bn = 1.0;
        cfg.prior.iterations = Some(200);
        cfg.prior.epochs = Some(60);
        cfg.posteval.student_arch = ArchId::TinyCnn.name().into();
        cfg.posteval.student_width = 8;
        cfg.posteval.learning_rate = 0.01;
        cfg.posteval.epochs = 100;
        cfg.posteval.eval_every = 2;
        cfg
    }

    pub fn label_teacher_id(&self) -> String {
        self.label_teacher
            .clone()
            .unwrap_or_else(|| self.committee.first().map(|m| m.member_id()).unwrap_or_default())
    }

    pub fn member_ids(&self) -> Vec<String> {
        self.committee.iter().map(|m| m.member_id()).collect()
    }

    /// Applies `seed` to every stage that draws random numbers.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.recover.seed = seed;
        self.recover.voting.seed = seed;
        self.posteval.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.dataset.generator()?;
        if self.committee.is_empty() {
            return Err(Error::Config("committee is empty".into()));
        }
        let ids = self.member_ids();
        for (i, m) in self.committee.iter().enumerate() {
            m.arch.parse::<ArchId>()?;
            if m.width == 0 {
                return Err(Error::Config(format!("member {} has width 0", m.member_id())));
            }
            if ids[..i].contains(&ids[i]) {
                return Err(Error::Config(format!("member {} listed twice", ids[i])));
            }
        }
        if self.ipc == 0 {
            return Err(Error::Config("ipc must be at least 1".into()));
        }
        if !ids.contains(&self.label_teacher_id()) {
            return Err(Error::Config(format!(
                "label_teacher `{}` is not a committee member",
                self.label_teacher_id()
            )));
        }
        self.squeeze.validate()?;
        self.recover.validate()?;
        if self.committee.len() > 1 {
            self.recover.voting.validate_for(self.committee.len())?;
        }
        self.posteval.validate()
    }

    pub fn digest(&self) -> String {
        digest::digest_of(self)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses and validates; `origin` only labels error messages.
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(format!("{}: {e}", origin.display())))?;
        cfg.validate()
            .map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("{}: {msg}", origin.display())),
                other => other,
            })?;
        Ok(cfg)
    }
}

pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    PipelineConfig::from_toml(&text, path)
}

pub fn save_config(path: &Path, cfg: &PipelineConfig) -> Result<()> {
    write_atomic(path, cfg.to_toml()?.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> &'static str {
        "version = 1\ncommittee = [{ arch = \"tiny-cnn\", width = 4 }, { arch = \"tiny-cnn\", width = 6 }]\n\
         [dataset]\ngenerate = \"toy10-16\"\n"
    }

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = PipelineConfig::from_toml(minimal(), Path::new("m.toml")).unwrap();
        assert_eq!(cfg.recover, RecoverConfig::default());
        assert_eq!(cfg.posteval, PostEvalConfig::default());
        assert_eq!(cfg.label_teacher_id(), "tiny-cnn-w4");
    }

    #[test]
    fn unknown_key_reports_line() {
        let text = format!("{}[recover]\niterations = 3\nlearning_rat = 0.1\n", minimal());
        let err = PipelineConfig::from_toml(&text, Path::new("m.toml")).unwrap_err().to_string();
        assert!(err.contains("line 7"), "{err}");
        assert!(err.contains("learning_rat"), "{err}");
    }

    #[test]
    fn toml_round_trip_keeps_digest() {
        let mut cfg = PipelineConfig::from_toml(minimal(), Path::new("m.toml")).unwrap();
        cfg.recover.batch_size = Some(4);
        cfg.prior.iterations = Some(7);
        let back = PipelineConfig::from_toml(&cfg.to_toml().unwrap(), Path::new("x")).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.digest(), cfg.digest());
    }
}
