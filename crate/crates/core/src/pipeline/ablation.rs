//! Named ablation bundles: matched configs that differ from a base config
//! only along declared fields.

use serde_json::Value;

use crate::error::{Error, Result};
use crate::softlabel::LabelMode;
use crate::voting::VoterMode;

use super::config::PipelineConfig;

pub const PRESETS: [&str; 5] = ["n2-vs-n3", "voter-modes", "bssl-on-off", "committee-growth", "sre2lpp-baseline"];

#[derive(Debug, Clone)]
pub struct AblationSet {
    pub name: String,
    /// Dotted paths of the fields the variants are allowed to differ in.
    pub axis: Vec<String>,
    pub variants: Vec<(String, PipelineConfig)>,
}

pub fn ablation_preset(name: &str, base: &PipelineConfig) -> Result<AblationSet> {
    base.validate()?;
    let mk = |f: &dyn Fn(&mut PipelineConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    let (axis, variants): (Vec<&str>, Vec<(String, PipelineConfig)>) = match name {
        "n2-vs-n3" => {
            if base.committee.len() < 3 {
                return Err(Error::Config(format!(
                    "n2-vs-n3 needs at least 3 committee members, got {}",
                    base.committee.len()
                )));
            }
            (
                vec!["recover.voting.N"],
                [2usize, 3]
                    .into_iter()
                    .map(|n| (format!("n{n}"), mk(&|c| c.recover.voting.n = n)))
                    .collect(),
            )
        }
        "voter-modes" => (
            vec!["recover.voting.voter_mode"],
            [("prior", VoterMode::Prior), ("equal", VoterMode::Equal), ("random", VoterMode::Random)]
                .into_iter()
                .map(|(l, v)| (l.to_string(), mk(&|c| c.recover.voting.voter_mode = v)))
                .collect(),
        ),
        "bssl-on-off" => (
            vec!["posteval.label_mode"],
            [("bssl", LabelMode::BatchSpecific), ("running", LabelMode::Running)]
                .into_iter()
                .map(|(l, m)| (l.to_string(), mk(&|c| c.posteval.label_mode = m)))
                .collect(),
        ),
        "committee-growth" => {
            let n = base.recover.voting.n;
            if base.committee.len() <= n {
                return Err(Error::Config(format!(
                    "committee-growth needs more than N={n} members, got {}",
                    base.committee.len()
                )));
            }
            (
                vec!["committee"],
                (n..=base.committee.len())
                    .map(|k| (format!("k{k}"), mk(&|c| c.committee.truncate(k))))
                    .collect(),
            )
        }
        "sre2lpp-baseline" => {
            let lead = base.label_teacher_id();
            let single = base
                .committee
                .iter()
                .find(|m| m.member_id() == lead)
                .cloned()
                .expect("validated label teacher");
            (
                vec!["committee"],
                vec![
                    ("single-backbone".to_string(), mk(&|c| c.committee = vec![single.clone()])),
                    ("committee".to_string(), base.clone()),
                ],
            )
        }
        other => return Err(Error::UnknownPreset(other.to_string())),
    };
    for (label, v) in &variants {
        if base.label_teacher.is_none() && v.label_teacher_id() != base.label_teacher_id() {
            return Err(Error::Config(format!("variant {label} changes the label teacher")));
        }
        v.validate()?;
    }
    Ok(AblationSet {
        name: name.to_string(),
        axis: axis.into_iter().map(String::from).collect(),
        variants,
    })
}

/// Dotted paths at which two configs differ. Arrays compare as a whole.
pub fn differing_paths(a: &PipelineConfig, b: &PipelineConfig) -> Result<Vec<String>> {
    let a = serde_json::to_value(a)?;
    let b = serde_json::to_value(b)?;
    let mut out = Vec::new();
    walk(&a, &b, String::new(), &mut out);
    Ok(out)
}

fn walk(a: &Value, b: &Value, prefix: String, out: &mut Vec<String>) {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            for k in keys {
                let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                match (x.get(k), y.get(k)) {
                    (Some(u), Some(v)) => walk(u, v, p, out),
                    _ => out.push(p),
                }
            }
        }
        _ if a != b => out.push(prefix),
        _ => {}
    }
}
