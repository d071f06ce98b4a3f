//! Stage orchestration over an on-disk artifact store.
//!
//! Layout under the output root:
//!
//! ```text
//! datasets/<id>/manifest.json           generated datasets
//! teachers/<id>/<member>/<digest>/      squeeze outputs
//! priors/<id>.prior                     prior table
//! distilled/<id>/<run>/                 recover outputs
//! runs/<run>/                           logs, labels, traces, reports
//! manifests/<run>.json                  one manifest per stage run
//! ledger.jsonl                          append-only run ledger
//! ```

pub mod ablation;
pub mod config;
pub mod store;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::analysis::{self, BNDiscrepancyReport, DiversityReport};
use crate::data::{generate_shapes, Dataset};
use crate::digest;
use crate::error::{Error, Result};
use crate::posteval::{train_student, PostEvalConfig, TrainingTrace};
use crate::prior::{assign_prior_performance, PriorTable};
use crate::rng;
use crate::recover::{distill, export, load_synthetic, recover_digest, RecoverConfig, SyntheticSet};
use crate::softlabel::{bssl_labels, running_labels, LabelCache, LabelMode};
use crate::squeeze::{load_teacher, pretrain, save_teacher, squeeze_digest, teacher_dir, TrainedTeacher};
use crate::voting::VoterMode;

pub use config::{load_config, save_config, DatasetSource, MemberSpec, PipelineConfig, PriorConfig};
use store::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Squeeze,
    Prior,
    Recover,
    Label,
    Eval,
    Report,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Squeeze => "squeeze",
            Stage::Prior => "prior",
            Stage::Recover => "recover",
            Stage::Label => "label",
            Stage::Eval => "eval",
            Stage::Report => "report",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the output root.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub stage: Stage,
    pub dataset_id: String,
    pub config_digest: String,
    /// Digests of everything the stage read, by name.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<Artifact>,
    /// Files whose content varies between identical runs (timings).
    pub logs: Vec<String>,
    pub seeds: Vec<u64>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

impl RunManifest {
    pub fn output_digests(&self) -> BTreeMap<String, String> {
        self.outputs.iter().map(|a| (a.path.clone(), a.sha256.clone())).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub run_id: String,
    pub stage: Stage,
    pub seed: u64,
    pub config_digest: String,
    pub metric: Option<f64>,
    pub metric_name: Option<String>,
    pub unix_time: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub seed: u64,
    pub final_test_top1: f64,
    pub tail_train_top1: f64,
    pub tail_test_top1: f64,
    pub trace_path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub run_id: String,
    pub diversity: DiversityReport,
    pub bn_distilled: BNDiscrepancyReport,
    pub bn_real: BNDiscrepancyReport,
    pub evals: Vec<EvalResult>,
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Runs `f` over `items` on up to `jobs` threads; results keep input order.
pub fn parallel_map<T: Sync, R: Send>(jobs: usize, items: &[T], f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<R>>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().unwrap_or_else(|p| p.into_inner()) = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap_or_else(|p| p.into_inner()).expect("every slot filled"))
        .collect()
}

/// Handle on an output root.
pub struct Workspace {
    root: PathBuf,
    jobs: usize,
    ledger: Mutex<()>,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>, jobs: usize) -> Self {
        Workspace {
            root: root.into(),
            jobs: jobs.max(1),
            ledger: Mutex::new(()),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn ledger_path(&self) -> PathBuf {
        self.root.join("ledger.jsonl")
    }

    pub fn append_ledger(&self, row: &LedgerRow) -> Result<()> {
        let _guard = self.ledger.lock().unwrap_or_else(|p| p.into_inner());
        std::fs::create_dir_all(&self.root)?;
        let mut line = serde_json::to_vec(row)?;
        line.push(b'\n');
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.ledger_path())?;
        f.write_all(&line)?;
        Ok(())
    }

    pub fn read_ledger(&self) -> Result<Vec<LedgerRow>> {
        let path = self.ledger_path();
        if !path.exists() {
            return Ok(Vec::new());
        }
        std::fs::read_to_string(&path)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect()
    }

    fn artifact(&self, path: &Path) -> Result<Artifact> {
        let rel = path.strip_prefix(&self.root).unwrap_or(path);
        Ok(Artifact {
            path: rel.to_string_lossy().replace('\\', "/"),
            sha256: digest::sha256_hex(&std::fs::read(path)?),
        })
    }

    fn artifacts_under(&self, dir: &Path) -> Result<Vec<Artifact>> {
        let mut files = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for entry in std::fs::read_dir(&d)? {
                let p = entry?.path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    files.push(p);
                }
            }
        }
        files.sort();
        files.iter().map(|p| self.artifact(p)).collect()
    }

    fn finish(&self, mut m: RunManifest) -> Result<RunManifest> {
        m.finished_unix = now();
        let path = self.root.join("manifests").join(format!("{}.json", m.run_id));
        write_atomic(&path, &serde_json::to_vec_pretty(&m)?)?;
        Ok(m)
    }

    fn manifest(&self, stage: Stage, run_id: String, data: &Dataset, cfg_digest: String) -> RunManifest {
        let mut inputs = BTreeMap::new();
        inputs.insert("dataset".into(), data.manifest_digest.clone());
        RunManifest {
            run_id,
            stage,
            dataset_id: data.id().to_string(),
            config_digest: cfg_digest,
            inputs,
            outputs: Vec::new(),
            logs: Vec::new(),
            seeds: Vec::new(),
            started_unix: now(),
            finished_unix: 0,
        }
    }

    /// Loads the configured dataset, generating it first if needed.
    pub fn dataset(&self, cfg: &PipelineConfig) -> Result<Dataset> {
        match cfg.dataset.generator()? {
            Some(shapes) => {
                let dir = self.root.join("datasets").join(&shapes.dataset_id);
                let manifest = dir.join("manifest.json");
                if !manifest.exists() {
                    generate_shapes(&dir, &shapes)?;
                }
                Dataset::load(&manifest)
            }
            None => {
                let path = cfg.dataset.manifest.as_ref().expect("checked by generator()");
                Dataset::load(path).map_err(|e| match e {
                    Error::Io(io) => Error::Dependency(format!("dataset manifest {}: {io}", path.display())),
                    other => other,
                })
            }
        }
    }

    fn teacher_location(&self, cfg: &PipelineConfig, data: &Dataset, m: &MemberSpec) -> Result<(PathBuf, String)> {
        let spec = m.backbone(data.train.num_classes, data.train.resolution())?;
        let d = squeeze_digest(&spec, &cfg.squeeze, &data.manifest_digest);
        Ok((teacher_dir(&self.root, data.id(), &m.member_id(), &d), d))
    }

    /// Every committee member's checkpoint, or a dependency error naming the
    /// missing members and the digests they were expected under.
    pub fn teachers(&self, cfg: &PipelineConfig, data: &Dataset) -> Result<Vec<TrainedTeacher>> {
        let mut missing = Vec::new();
        let mut found = Vec::new();
        for m in &cfg.committee {
            let (dir, d) = self.teacher_location(cfg, data, m)?;
            if dir.join("meta.json").exists() {
                found.push(load_teacher(&dir)?);
            } else {
                missing.push(format!("{} (squeeze digest {})", m.member_id(), digest::short(&d)));
            }
        }
        if !missing.is_empty() {
            return Err(Error::Dependency(format!(
                "no trained teacher for {}; run `squeeze` first",
                missing.join(", ")
            )));
        }
        Ok(found)
    }

    pub fn label_teacher<'a>(&self, cfg: &PipelineConfig, teachers: &'a [TrainedTeacher]) -> Result<&'a TrainedTeacher> {
        let id = cfg.label_teacher_id();
        teachers
            .iter()
            .find(|t| t.member_id() == id)
            .ok_or_else(|| Error::Dependency(format!("label teacher {id} not loaded")))
    }

    pub fn squeeze(&self, cfg: &PipelineConfig) -> Result<RunManifest> {
        cfg.validate()?;
        let data = self.dataset(cfg)?;
        let run_id = format!("squeeze-{}", digest::short(&digest::digest_of(&(&cfg.committee, &cfg.squeeze, &data.manifest_digest))));
        let mut m = self.manifest(Stage::Squeeze, run_id, &data, digest::digest_of(&cfg.squeeze));
        m.seeds = vec![cfg.squeeze.seed];
        let dirs = parallel_map(self.jobs, &cfg.committee, |member| {
            let (dir, _) = self.teacher_location(cfg, &data, member)?;
            if !dir.join("meta.json").exists() {
                let spec = member.backbone(data.train.num_classes, data.train.resolution())?;
                let t = pretrain(&spec, &data, &cfg.squeeze)?;
                save_teacher(&self.root, &t, Some(&cfg.squeeze))?;
                self.append_ledger(&LedgerRow {
                    run_id: format!("squeeze-{}", digest::short(&t.config_digest)),
                    stage: Stage::Squeeze,
                    seed: cfg.squeeze.seed,
                    config_digest: t.config_digest.clone(),
                    metric: Some(t.test_accuracy),
                    metric_name: Some(format!("{} test top-1", t.member_id())),
                    unix_time: now(),
                })?;
            }
            Ok(dir)
        })?;
        for (member, dir) in cfg.committee.iter().zip(&dirs) {
            let t = load_teacher(dir)?;
            m.inputs.insert(member.member_id(), t.config_digest.clone());
            m.outputs.push(self.artifact(&dir.join("model.json"))?);
            m.outputs.push(self.artifact(&dir.join("meta.json"))?);
        }
        self.finish(m)
    }

    fn prior_inputs(&self, cfg: &PipelineConfig) -> (RecoverConfig, PostEvalConfig) {
        let mut recover = cfg.recover.clone();
        if let Some(it) = cfg.prior.iterations {
            recover.iterations = it;
        }
        let mut eval = cfg.posteval.clone();
        if let Some(e) = cfg.prior.epochs {
            eval.epochs = e;
        }
        eval.label_mode = LabelMode::BatchSpecific;
        (recover, eval)
    }

    pub fn prior(&self, cfg: &PipelineConfig) -> Result<RunManifest> {
        cfg.validate()?;
        let data = self.dataset(cfg)?;
        let teachers = self.teachers(cfg, &data)?;
        let (recover, eval) = self.prior_inputs(cfg);
        let table = match &cfg.prior.fixture {
            Some(name) => fixture_for(name, &data, &teachers)?,
            None => {
                let per_member = parallel_map(self.jobs, &teachers, |t| {
                    assign_prior_performance(std::slice::from_ref(t), &data, data.manifest.reference_ipc, &recover, &eval, cfg.prior.seed)
                })?;
                let mut table = per_member[0].clone();
                for t in &per_member[1..] {
                    table.entries.extend(t.entries.clone());
                    table.provenance.extend(t.provenance.clone());
                }
                table
            }
        };
        let path = PriorTable::path(&self.root, data.id());
        table.save(&path)?;
        let cfg_digest = digest::digest_of(&(&cfg.prior, &recover, &eval));
        let mut m = self.manifest(Stage::Prior, format!("prior-{}", digest::short(&cfg_digest)), &data, cfg_digest);
        m.seeds = vec![cfg.prior.seed];
        for t in &teachers {
            m.inputs.insert(t.member_id(), t.config_digest.clone());
        }
        m.outputs.push(self.artifact(&path)?);
        for (id, alpha) in &table.entries {
            self.append_ledger(&LedgerRow {
                run_id: m.run_id.clone(),
                stage: Stage::Prior,
                seed: cfg.prior.seed,
                config_digest: m.config_digest.clone(),
                metric: Some(*alpha),
                metric_name: Some(format!("{id} prior")),
                unix_time: now(),
            })?;
        }
        self.finish(m)
    }

    /// The prior table when the voter needs one: present, for this dataset,
    /// covering the committee.
    pub fn prior_for(&self, cfg: &PipelineConfig, data: &Dataset) -> Result<Option<PriorTable>> {
        if cfg.committee.len() < 2 || cfg.recover.voting.voter_mode != VoterMode::Prior {
            return Ok(None);
        }
        let path = PriorTable::path(&self.root, data.id());
        if !path.exists() {
            return Err(Error::Dependency(format!(
                "prior table {} is missing; run `prior` first",
                path.display()
            )));
        }
        let table = PriorTable::load(&path)?;
        if table.dataset_id != data.id() {
            return Err(Error::Dependency(format!(
                "prior table is for {}, not {}",
                table.dataset_id,
                data.id()
            )));
        }
        table
            .covers(cfg.committee.iter().map(|m| m.member_id()).collect::<Vec<_>>().iter().map(String::as_str))
            .map_err(|e| Error::Dependency(e.to_string()))?;
        Ok(Some(table))
    }

    /// Run id of the synthesis this config describes.
    pub fn recover_run(&self, cfg: &PipelineConfig, teachers: &[TrainedTeacher], prior: Option<&PriorTable>) -> String {
        format!("recover-{}", digest::short(&recover_digest(&cfg.recover, teachers, prior, cfg.ipc)))
    }

    pub fn recover(&self, cfg: &PipelineConfig) -> Result<RunManifest> {
        cfg.validate()?;
        let data = self.dataset(cfg)?;
        let teachers = self.teachers(cfg, &data)?;
        let prior = self.prior_for(cfg, &data)?;
        let run = self.recover_run(cfg, &teachers, prior.as_ref());
        let log_dir = self.root.join("runs").join(&run);
        let loss_path = log_dir.join("loss.csv");
        if loss_path.exists() {
            std::fs::remove_file(&loss_path)?;
        }
        let set = distill(&data.train, &teachers, prior.as_ref(), cfg.ipc, &cfg.recover, Some(&loss_path))?;
        let dir = export(&set, &data, &self.root, &run)?;
        let timing: Vec<analysis::RunLog> = set.provenance.iter().map(analysis::RunLog::from).collect();
        let timing_path = log_dir.join("timing.json");
        write_atomic(&timing_path, &serde_json::to_vec(&timing)?)?;
        let mut m = self.manifest(Stage::Recover, run, &data, set.config_digest.clone());
        m.seeds = vec![cfg.recover.seed];
        for t in &teachers {
            m.inputs.insert(t.member_id(), t.config_digest.clone());
        }
        if let Some(p) = &prior {
            m.inputs.insert("prior".into(), digest::digest_of(&p.entries));
        }
        m.outputs = self.artifacts_under(&dir)?;
        m.outputs.push(self.artifact(&loss_path)?);
        m.logs.push(self.artifact(&timing_path)?.path);
        self.append_ledger(&LedgerRow {
            run_id: m.run_id.clone(),
            stage: Stage::Recover,
            seed: cfg.recover.seed,
            config_digest: m.config_digest.clone(),
            metric: set.provenance.last().and_then(|p| p.loss_trace.last().copied()),
            metric_name: Some("final loss".into()),
            unix_time: now(),
        })?;
        self.finish(m)
    }

    /// The distilled set this config's recover stage produced.
    pub fn distilled(&self, cfg: &PipelineConfig, data: &Dataset, teachers: &[TrainedTeacher]) -> Result<(String, SyntheticSet)> {
        let prior = self.prior_for(cfg, data)?;
        let run = self.recover_run(cfg, teachers, prior.as_ref());
        let dir = self.root.join("distilled").join(data.id()).join(&run);
        if !dir.join("synthetic.json").exists() {
            return Err(Error::Dependency(format!(
                "no distilled data for {run} (recover digest {}); run `recover` first",
                digest::short(&recover_digest(&cfg.recover, teachers, prior.as_ref(), cfg.ipc))
            )));
        }
        Ok((run, load_synthetic(&dir)?))
    }

    /// Labels every distilled image once, in order and batched as the
    /// student would see them without augmentation, and caches the logits.
    pub fn label(&self, cfg: &PipelineConfig) -> Result<RunManifest> {
        cfg.validate()?;
        let data = self.dataset(cfg)?;
        let teachers = self.teachers(cfg, &data)?;
        let teacher = self.label_teacher(cfg, &teachers)?;
        let (run, set) = self.distilled(cfg, &data, &teachers)?;
        let labels_cfg = cfg.posteval.soft_labels();
        let bs = cfg.posteval.batch_size_for(set.len());
        let mut cache = LabelCache::default();
        let idx: Vec<usize> = (0..set.len()).collect();
        for chunk in idx.chunks(bs) {
            let x = set.images.select(chunk);
            let labels = match cfg.posteval.label_mode {
                LabelMode::BatchSpecific => bssl_labels(&teacher.model, &x, &labels_cfg)?,
                LabelMode::Running => running_labels(&teacher.model, &x)?,
            };
            cache.insert(&labels);
        }
        let path = self.root.join("runs").join(&run).join(format!("labels-{}.json", mode_name(cfg.posteval.label_mode)));
        cache.save(&path)?;
        let cfg_digest = digest::digest_of(&(&set.config_digest, &labels_cfg, bs, &teacher.config_digest));
        let mut m = self.manifest(Stage::Label, format!("label-{}", digest::short(&cfg_digest)), &data, cfg_digest);
        m.inputs.insert("distilled".into(), set.digest());
        m.inputs.insert(teacher.member_id(), teacher.config_digest.clone());
        m.outputs.push(self.artifact(&path)?);
        self.finish(m)
    }

    pub fn eval_seeds(&self, cfg: &PipelineConfig) -> Vec<u64> {
        if cfg.seeds.is_empty() {
            vec![cfg.posteval.seed]
        } else {
            cfg.seeds.clone()
        }
    }

    fn eval_dir(&self, recover_run: &str, eval_digest: &str) -> PathBuf {
        self.root
            .join("runs")
            .join(recover_run)
            .join(format!("eval-{}", digest::short(eval_digest)))
    }

    /// Trains one student per seed and records each in the ledger.
    pub fn eval(&self, cfg: &PipelineConfig) -> Result<(RunManifest, Vec<EvalResult>)> {
        cfg.validate()?;
        let data = self.dataset(cfg)?;
        let teachers = self.teachers(cfg, &data)?;
        let teacher = self.label_teacher(cfg, &teachers)?;
        let (run, set) = self.distilled(cfg, &data, &teachers)?;
        let seeds = self.eval_seeds(cfg);
        let eval_digest = digest::digest_of(&(&set.config_digest, &cfg.posteval, &teacher.config_digest));
        let dir = self.eval_dir(&run, &eval_digest);
        let run_id = format!("eval-{}", digest::short(&eval_digest));
        let results = parallel_map(self.jobs, &seeds, |&seed| {
            let ecfg = PostEvalConfig {
                seed,
                ..cfg.posteval.clone()
            };
            let (acc, trace) = train_student(&set, teacher, &data.test, &ecfg)?;
            let path = dir.join(format!("seed-{seed}")).join("trace.csv");
            trace.write_csv(&path)?;
            let (tail_train, tail_test) = trace.tail_means(0.1);
            self.append_ledger(&LedgerRow {
                run_id: run_id.clone(),
                stage: Stage::Eval,
                seed,
                config_digest: eval_digest.clone(),
                metric: Some(acc),
                metric_name: Some("test top-1".into()),
                unix_time: now(),
            })?;
            Ok(EvalResult {
                seed,
                final_test_top1: acc,
                tail_train_top1: tail_train,
                tail_test_top1: tail_test,
                trace_path: self.artifact(&path)?.path,
            })
        })?;
        let summary = dir.join("results.json");
        write_atomic(&summary, &serde_json::to_vec_pretty(&results)?)?;
        let mut m = self.manifest(Stage::Eval, run_id, &data, eval_digest);
        m.seeds = seeds;
        m.inputs.insert("distilled".into(), set.digest());
        m.inputs.insert(teacher.member_id(), teacher.config_digest.clone());
        m.outputs = self.artifacts_under(&dir)?;
        Ok((self.finish(m)?, results))
    }

    /// Diversity and BN-discrepancy diagnostics for the distilled set, plus
    /// curves for every eval run recorded for it.
    pub fn report(&self, cfg: &PipelineConfig) -> Result<(RunManifest, Report)> {
        cfg.validate()?;
        let data = self.dataset(cfg)?;
        let teachers = self.teachers(cfg, &data)?;
        let teacher = self.label_teacher(cfg, &teachers)?;
        let (run, set) = self.distilled(cfg, &data, &teachers)?;
        let eval_digest = digest::digest_of(&(&set.config_digest, &cfg.posteval, &teacher.config_digest));
        let eval_dir = self.eval_dir(&run, &eval_digest);
        let results_path = eval_dir.join("results.json");
        if !results_path.exists() {
            return Err(Error::Dependency(format!(
                "no eval results for {run} (eval digest {}); run `eval` first",
                digest::short(&eval_digest)
            )));
        }
        let evals: Vec<EvalResult> = serde_json::from_slice(&std::fs::read(&results_path)?)?;
        let diversity = analysis::intraclass_cosine(&set, &teacher.model)?;
        let bs = cfg.posteval.batch_size_for(set.len());
        let order: Vec<usize> = (0..set.len()).collect();
        let distilled_batches: Vec<_> = order.chunks(bs).map(|c| set.images.select(c)).collect();
        // real reference: as many training images as the distilled set, drawn
        // the way a shuffled loader would
        let mut real_order: Vec<usize> = (0..data.train.len()).collect();
        real_order.shuffle(&mut rng::stream(cfg.posteval.seed, "report-real-batches", 0));
        real_order.truncate(set.len());
        let real_batches: Vec<_> = real_order.chunks(bs).map(|c| data.train.images.select(c)).collect();
        let bn_distilled = analysis::bn_discrepancy(&distilled_batches, &teacher.model)?;
        let bn_real = analysis::bn_discrepancy(&real_batches, &teacher.model)?;
        let out_dir = self.root.join("runs").join(&run).join(format!("report-{}", digest::short(&eval_digest)));
        let traces = evals
            .iter()
            .map(|e| TrainingTrace::read_csv(&self.root.join(&e.trace_path)))
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<String> = evals.iter().map(|e| format!("seed {}", e.seed)).collect();
        let (csv, svg) = analysis::emit_curves(&traces, &labels, &out_dir)?;
        let report = Report {
            run_id: run.clone(),
            diversity,
            bn_distilled,
            bn_real,
            evals,
        };
        let report_path = out_dir.join("report.json");
        write_atomic(&report_path, &serde_json::to_vec_pretty(&report)?)?;
        let mut m = self.manifest(Stage::Report, format!("report-{}", digest::short(&eval_digest)), &data, eval_digest);
        m.inputs.insert("distilled".into(), set.digest());
        m.outputs = vec![self.artifact(&report_path)?, self.artifact(&csv)?, self.artifact(&svg)?];
        Ok((self.finish(m)?, report))
    }
}

fn mode_name(mode: LabelMode) -> &'static str {
    match mode {
        LabelMode::BatchSpecific => "batch-specific",
        LabelMode::Running => "running",
    }
}

/// A published table re-keyed to the committee by architecture.
fn fixture_for(name: &str, data: &Dataset, teachers: &[TrainedTeacher]) -> Result<PriorTable> {
    let base = match name {
        "cifar10" => PriorTable::cifar10_fixture(),
        "cifar100" => PriorTable::cifar100_fixture(),
        other => return Err(Error::Config(format!("unknown prior fixture `{other}`"))),
    };
    let mut entries = BTreeMap::new();
    let mut provenance = BTreeMap::new();
    for t in teachers {
        let arch = &t.model.spec().arch_id;
        let alpha = base.lookup_alpha(arch)?;
        entries.insert(t.member_id(), alpha);
        provenance.insert(t.member_id(), format!("fixture {name}"));
    }
    let table = PriorTable {
        dataset_id: data.id().to_string(),
        reference_ipc: base.reference_ipc,
        entries,
        evaluation_arch: base.evaluation_arch,
        provenance,
    };
    table.validate()?;
    Ok(table)
}
