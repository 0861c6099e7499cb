use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn corpus() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/corpus12.jsonl")
}

fn emrq(run_dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emrq"))
        .arg("--run-dir")
        .arg(run_dir)
        .args(["--seed", "7"])
        .args(args)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path();
    let out = emrq(run, &["extract", "--corpus", corpus().to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("extract: 12 produced"));
    assert_eq!(code(&emrq(run, &["network"])), 0);
    assert_eq!(code(&emrq(run, &["synthesize", "--all"])), 0);
    assert_eq!(code(&emrq(run, &["generate", "--all"])), 0);
    let out = emrq(run, &["evaluate"]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("Mean (12 subjects)"));
    let out = emrq(run, &["report"]);
    assert_eq!(stdout(&out), std::fs::read_to_string(run.join("report.txt")).unwrap());

    let again = emrq(run, &["extract"]);
    assert!(stdout(&again).contains("0 produced, 12 cached"));
}

#[test]
fn usage_and_prerequisite_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path();
    let out = emrq(run, &["network"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("emr.jsonl"));
    assert_eq!(code(&emrq(run, &["generate", "--personal", "a", "--disease", "b"])), 1);
    assert_eq!(code(&emrq(run, &["synthesize"])), 1);
    assert_eq!(code(&emrq(run, &["--help"])), 0);

    emrq(run, &["extract", "--corpus", corpus().to_str().unwrap()]);
    emrq(run, &["network"]);
    assert_eq!(code(&emrq(run, &["synthesize", "--disease", "Z99.9"])), 1);
    assert_eq!(code(&emrq(run, &["synthesize", "--all", "--cutoff", "3"])), 1);
    assert_eq!(code(&emrq(run, &["evaluate"])), 1);
}

#[test]
fn partial_failure_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/partial_failure.jsonl");
    let out = emrq(dir.path(), &["extract", "--corpus", corpus.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad-1"));
    let lines = std::fs::read_to_string(dir.path().join("assertions.jsonl")).unwrap();
    let ids: std::collections::BTreeSet<String> = lines
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["emr_id"]
                .as_str()
                .unwrap()
                .to_string()
        })
        .collect();
    assert_eq!(ids.into_iter().collect::<Vec<_>>(), ["ok-1", "ok-2"]);
}

#[test]
fn config_file_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("emrq.toml");
    std::fs::write(&cfg, "seed = 1\nworkers = 2\ncluster_cutoff = 0.0\n").unwrap();
    let run = dir.path().join("run");
    let with_cfg = |args: &[&str]| {
        let mut full = vec!["--config", cfg.to_str().unwrap()];
        full.extend_from_slice(args);
        emrq(&run, &full)
    };
    assert_eq!(code(&with_cfg(&["extract", "--corpus", corpus().to_str().unwrap()])), 0);
    assert_eq!(code(&with_cfg(&["network"])), 0);
    assert_eq!(code(&with_cfg(&["synthesize", "--disease", "I10"])), 0);
    let dk: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("knowledge/I10.json")).unwrap()).unwrap();
    assert_eq!(dk["cutoff"], 0.0);

    std::fs::write(&cfg, "tau = 7\n").unwrap();
    let out = with_cfg(&["network"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("tau"));
}
