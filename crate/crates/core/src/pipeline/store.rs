//! Run-directory layout and atomic artifact IO.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::model::{AtomicAssertion, QuestionnaireKind};

/// One line of `assertions.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssertionRecord {
    pub emr_id: String,
    pub index: usize,
    pub assert: String,
    #[serde(rename = "relative time")]
    pub relative_time: String,
}

impl AssertionRecord {
    pub fn from_assertion(emr_id: &str, a: &AtomicAssertion) -> Self {
        Self {
            emr_id: emr_id.to_string(),
            index: a.id,
            assert: a.assert.clone(),
            relative_time: a.relative_time.clone(),
        }
    }

    pub fn to_assertion(&self) -> AtomicAssertion {
        AtomicAssertion::new(self.index, self.assert.clone(), self.relative_time.clone())
    }
}

/// Generation times in seconds, per questionnaire kind and subject.
pub type Timings = BTreeMap<QuestionnaireKind, BTreeMap<String, f64>>;

/// Paths of every artifact inside a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn corpus(&self) -> PathBuf {
        self.root.join("emr.jsonl")
    }

    pub fn assertions(&self) -> PathBuf {
        self.root.join("assertions.jsonl")
    }

    pub fn networks(&self) -> PathBuf {
        self.root.join("networks.jsonl")
    }

    pub fn knowledge_dir(&self) -> PathBuf {
        self.root.join("knowledge")
    }

    pub fn knowledge(&self, code: &str) -> PathBuf {
        self.knowledge_dir().join(format!("{}.json", file_stem(code)))
    }

    pub fn questionnaire_dir(&self, kind: QuestionnaireKind) -> PathBuf {
        self.root.join("questionnaires").join(kind.to_string())
    }

    pub fn questionnaire(&self, kind: QuestionnaireKind, subject: &str) -> PathBuf {
        self.questionnaire_dir(kind)
            .join(format!("{}.json", file_stem(subject)))
    }

    pub fn questionnaire_text(&self, kind: QuestionnaireKind, subject: &str) -> PathBuf {
        self.questionnaire_dir(kind).join(format!("{}.txt", file_stem(subject)))
    }

    pub fn timings(&self) -> PathBuf {
        self.root.join("timings.json")
    }

    pub fn keyfacts(&self) -> PathBuf {
        self.root.join("keyfacts.jsonl")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn report_text(&self) -> PathBuf {
        self.root.join("report.txt")
    }
}

/// Subject ids and disease codes made safe as file names.
pub fn file_stem(subject: &str) -> String {
    subject
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Writes through a temporary file in the same directory and renames it into
/// place. Leaves the file untouched when it already holds `bytes`; returns
/// whether anything was written.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<bool, PipelineError> {
    if std::fs::read(path).is_ok_and(|old| old == bytes) {
        return Ok(false);
    }
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| PipelineError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| PipelineError::io(path, e))?;
    tmp.persist(path).map_err(|e| PipelineError::io(path, e.error))?;
    Ok(true)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<bool, PipelineError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| PipelineError::Format(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<bool, PipelineError> {
    let mut text = String::new();
    for row in rows {
        text.push_str(&serde_json::to_string(row).map_err(|e| PipelineError::Format(e.to_string()))?);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Format(format!("{}: {e}", path.display())))
}

/// Reads one JSON value per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| PipelineError::Format(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Like [`read_jsonl`] but an absent file reads as empty.
pub fn read_jsonl_or_empty<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    if path.exists() {
        read_jsonl(path)
    } else {
        Ok(Vec::new())
    }
}

/// Fails with a message naming the artifact when an earlier stage has not run.
pub fn require(path: &Path, produced_by: &str) -> Result<(), PipelineError> {
    if path.exists() {
        Ok(())
    } else {
        Err(PipelineError::MissingArtifact {
            path: path.to_path_buf(),
            produced_by: produced_by.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_skips_identical_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.json");
        assert!(write_atomic(&p, b"x").unwrap());
        assert!(!write_atomic(&p, b"x").unwrap());
        assert!(write_atomic(&p, b"y").unwrap());
        assert_eq!(std::fs::read(&p).unwrap(), b"y");
        assert_eq!(std::fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn jsonl_round_trip_keeps_key_names() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.jsonl");
        let rows = vec![AssertionRecord::from_assertion(
            "e1",
            &AtomicAssertion::new(0, "cough", "2 days ago"),
        )];
        write_jsonl(&p, &rows).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains("\"relative time\":\"2 days ago\""));
        assert_eq!(read_jsonl::<AssertionRecord>(&p).unwrap(), rows);
    }

    #[test]
    fn file_stems_are_safe() {
        assert_eq!(file_stem("J62.8"), "J62.8");
        assert_eq!(file_stem("a/b c"), "a_b_c");
    }
}
