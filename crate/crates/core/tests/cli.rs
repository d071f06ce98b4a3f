use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_committee-distill");

const TOY: &str = r#"
version = 1
ipc = 2
committee = [
    { arch = "tiny-cnn", width = 4 },
    { arch = "tiny-cnn", width = 6 },
    { arch = "tiny-cnn", width = 8 },
]

[dataset]
generate = "toy10-16"

[squeeze]
epochs = 1
batch_size = 50

[prior]
iterations = 2
epochs = 1

[recover]
iterations = 3

[posteval]
student_arch = "tiny-cnn"
student_width = 4
epochs = 2
"#;

fn run(dir: &Path, config: &str, args: &[&str]) -> Output {
    let cfg = dir.join("run.toml");
    std::fs::write(&cfg, config).unwrap();
    Command::new(BIN)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .args(args)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_config_is_a_config_error() {
    let o = Command::new(BIN)
        .args(["--config", "/nonexistent/cfg.toml", "squeeze"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn unknown_key_error_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = TOY.replace("iterations = 3", "iterations = 3\nlambda = 0.5");
    let o = run(dir.path(), &bad, &["recover"]);
    assert_eq!(o.status.code(), Some(2));
    let line = bad.lines().position(|l| l == "lambda = 0.5").unwrap() + 1;
    let e = stderr(&o);
    assert!(e.contains(&format!("line {line}")) && e.contains("lambda"), "{e}");
}

#[test]
fn subset_of_one_is_rejected_at_load() {
    let dir = tempfile::tempdir().unwrap();
    let bad = TOY.replace("iterations = 3", "iterations = 3\n[recover.voting]\nN = 1");
    let o = run(dir.path(), &bad, &["squeeze"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("subset size 1"), "{}", stderr(&o));
}

#[test]
fn missing_upstream_is_a_dependency_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), TOY, &["recover"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("squeeze digest"), "{}", stderr(&o));
}

#[test]
fn corrupt_dataset_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("manifest.json");
    std::fs::write(&manifest, "{ not json").unwrap();
    let cfg = TOY.replace("generate = \"toy10-16\"", &format!("manifest = {:?}", manifest.to_string_lossy()));
    let o = run(dir.path(), &cfg, &["squeeze"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn every_verb_runs_on_the_toy_set() {
    let dir = tempfile::tempdir().unwrap();
    for verb in [&["squeeze"][..], &["prior"], &["recover"], &["label"], &["eval", "--seeds", "0,1"], &["report"]] {
        let o = run(dir.path(), TOY, verb);
        assert!(o.status.success(), "{verb:?}: {}", stderr(&o));
    }
    let o = run(dir.path(), TOY, &["ablate", "voter-modes"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let listed = String::from_utf8_lossy(&o.stdout).into_owned();
    assert_eq!(listed.lines().count(), 3, "{listed}");
    for label in ["prior", "equal", "random"] {
        let p = dir.path().join("out/ablations/voter-modes").join(format!("{label}.toml"));
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains(&format!("voter_mode = \"{label}\"")), "{text}");
    }
    let ledger = std::fs::read_to_string(dir.path().join("out/ledger.jsonl")).unwrap();
    assert_eq!(ledger.lines().filter(|l| l.contains("\"stage\":\"eval\"")).count(), 2);
}

#[test]
fn global_seed_changes_the_distilled_set() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["squeeze"][..], &["prior"]] {
        assert!(run(dir.path(), TOY, args).status.success());
    }
    let a = run(dir.path(), TOY, &["--seed", "1", "recover"]);
    let b = run(dir.path(), TOY, &["--seed", "2", "recover"]);
    assert!(a.status.success() && b.status.success());
    assert_ne!(a.stdout, b.stdout);
}
