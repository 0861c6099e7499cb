#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use emrq_core::pipeline::{Clock, Config, GenerateTarget, Outcome, Pipeline, SynthesizeTarget};

pub const SEED: u64 = 7;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

pub fn mock_pipeline(run_dir: &Path) -> Pipeline {
    let config = Config {
        seed: SEED,
        ..Config::default()
    };
    Pipeline::new(config, run_dir).unwrap().clock(Clock::Fixed(0.0))
}

/// extract, network, synthesize, generate, evaluate over the 12-record corpus.
pub fn run_full(run_dir: &Path) -> Vec<Outcome> {
    let p = mock_pipeline(run_dir);
    vec![
        p.extract(Some(&fixture("corpus12.jsonl"))).unwrap(),
        p.network().unwrap(),
        p.synthesize(&SynthesizeTarget::All, None).unwrap(),
        p.generate(&GenerateTarget::All).unwrap(),
        p.evaluate(None).unwrap().0,
    ]
}

/// Every file under `dir`, keyed by relative path with `/` separators.
pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path
                    .strip_prefix(root)
                    .unwrap()
                    .components()
                    .map(|c| c.as_os_str().to_string_lossy().into_owned())
                    .collect::<Vec<_>>()
                    .join("/");
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    if dir.exists() {
        walk(dir, dir, &mut out);
    }
    out
}

/// Compares a run directory with the committed golden files, rewriting them
/// instead when `UPDATE_GOLDEN` is set. Returns the differing paths.
pub fn check_golden(run_dir: &Path) -> Vec<String> {
    let actual = snapshot(run_dir);
    let golden = golden_dir();
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        let _ = std::fs::remove_dir_all(&golden);
        for (rel, bytes) in &actual {
            let path = golden.join(rel);
            std::fs::create_dir_all(path.parent().unwrap()).unwrap();
            std::fs::write(path, bytes).unwrap();
        }
        return Vec::new();
    }
    let expected = snapshot(&golden);
    let mut diffs: Vec<String> = actual
        .iter()
        .filter(|(rel, bytes)| expected.get(*rel) != Some(bytes))
        .map(|(rel, _)| rel.clone())
        .collect();
    diffs.extend(
        expected
            .keys()
            .filter(|rel| !actual.contains_key(*rel))
            .map(|rel| format!("{rel} (missing)")),
    );
    diffs
}
