//! Domain types shared by every pipeline stage, plus their structural validation.
//!
//! All types are plain immutable values once built. The JSON layout of an
//! assertion uses the keys `"assert"` and `"relative time"` (with a space),
//! which is the format produced by the extraction prompt and stored on disk.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

/// One unstructured electronic medical record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmrDocument {
    pub id: String,
    /// ICD-10 code of the primary diagnosis. Empty for personal-only flows.
    #[serde(default)]
    pub disease_code: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub department: Option<String>,
}

impl EmrDocument {
    pub fn new(id: impl Into<String>, disease_code: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            disease_code: disease_code.into(),
            text: text.into(),
            department: None,
        }
    }

    pub fn has_text(&self) -> bool {
        !self.text.trim().is_empty()
    }
}

/// Checks corpus-level invariants: unique ids and non-blank text.
pub fn validate_corpus(docs: &[EmrDocument]) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut seen = HashSet::new();
    for doc in docs {
        if !seen.insert(doc.id.as_str()) {
            report.push(Violation::DuplicateEmrId(doc.id.clone()));
        }
        if !doc.has_text() {
            report.push(Violation::EmptyEmrText(doc.id.clone()));
        }
    }
    report
}

/// A single indivisible medical fact with its relative timing.
///
/// `id` is the position of the assertion within its record. An empty
/// `relative_time` means the record did not state when the fact occurred.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AtomicAssertion {
    #[serde(default)]
    pub id: usize,
    pub assert: String,
    #[serde(rename = "relative time", default)]
    pub relative_time: String,
}

impl AtomicAssertion {
    pub fn new(id: usize, assert: impl Into<String>, relative_time: impl Into<String>) -> Self {
        Self {
            id,
            assert: assert.into(),
            relative_time: relative_time.into(),
        }
    }

    /// Statement text, with `", <timing>"` appended when timing is known.
    pub fn text_with_timing(&self) -> String {
        if self.relative_time.trim().is_empty() {
            self.assert.clone()
        } else {
            format!("{}, {}", self.assert, self.relative_time)
        }
    }
}

/// Directed graph over the assertions of one record.
///
/// Edges are `(src, dst)` pairs of node positions. Cycles are allowed;
/// self-loops and duplicate edges are not.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CausalNetwork {
    pub emr_id: String,
    pub nodes: Vec<AtomicAssertion>,
    pub edges: Vec<(usize, usize)>,
}

impl CausalNetwork {
    pub fn new(emr_id: impl Into<String>, nodes: Vec<AtomicAssertion>, edges: Vec<(usize, usize)>) -> Self {
        Self {
            emr_id: emr_id.into(),
            nodes,
            edges,
        }
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edges(&self) -> bool {
        !self.edges.is_empty()
    }
}

/// Symmetric table of pairwise network similarities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    #[serde(rename = "ids")]
    pub network_ids: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl SimilarityMatrix {
    /// Builds a matrix from its upper triangle (including the diagonal),
    /// mirroring each entry so that `values[i][j]` and `values[j][i]` are the
    /// same `f64`.
    #[allow(clippy::needless_range_loop)]
    pub fn from_upper<F>(network_ids: Vec<String>, mut entry: F) -> Self
    where
        F: FnMut(usize, usize) -> f64,
    {
        let k = network_ids.len();
        let mut values = vec![vec![0.0; k]; k];
        for i in 0..k {
            for j in i..k {
                let v = entry(i, j);
                values[i][j] = v;
                values[j][i] = v;
            }
        }
        Self { network_ids, values }
    }

    pub fn len(&self) -> usize {
        self.network_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.network_ids.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i][j]
    }

    /// Distance used by clustering: `1 - sim`.
    pub fn distance(&self, i: usize, j: usize) -> f64 {
        1.0 - self.values[i][j]
    }

    pub fn is_symmetric(&self) -> bool {
        let k = self.len();
        self.values.len() == k
            && self.values.iter().all(|row| row.len() == k)
            && (0..k).all(|i| (0..k).all(|j| self.values[i][j].to_bits() == self.values[j][i].to_bits()))
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().flatten().all(|v| v.is_finite())
    }
}

/// Flat partition of networks into clusters `0..cluster_count`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterResult {
    /// Cluster index of each network, positionally aligned with the
    /// similarity matrix rows.
    pub assignments: Vec<usize>,
    pub network_ids: Vec<String>,
    pub cluster_count: usize,
    pub cutoff: f64,
}

impl ClusterResult {
    /// Member positions of each cluster, ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.cluster_count];
        for (pos, &c) in self.assignments.iter().enumerate() {
            out[c].push(pos);
        }
        out
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.cluster_count];
        for &c in &self.assignments {
            sizes[c] += 1;
        }
        sizes
    }

    /// Network id to cluster index.
    pub fn assignment_map(&self) -> BTreeMap<&str, usize> {
        self.network_ids
            .iter()
            .map(String::as_str)
            .zip(self.assignments.iter().copied())
            .collect()
    }

    /// Partition, contiguity and non-emptiness.
    pub fn is_valid(&self) -> bool {
        if self.assignments.len() != self.network_ids.len() {
            return false;
        }
        if self.assignments.iter().any(|&c| c >= self.cluster_count) {
            return false;
        }
        self.sizes().iter().all(|&s| s > 0)
    }
}

/// One representative pathway of a disease.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeEntry {
    pub weight: f64,
    pub member_count: usize,
    pub medoid_emr_id: String,
    pub network: CausalNetwork,
}

/// Weighted set of medoid networks synthesized for one disease.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiseaseKnowledge {
    pub disease_code: String,
    pub cutoff: f64,
    pub entries: Vec<KnowledgeEntry>,
}

impl DiseaseKnowledge {
    pub fn total_members(&self) -> usize {
        self.entries.iter().map(|e| e.member_count).sum()
    }

    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        if self.entries.is_empty() {
            report.push(Violation::EmptyKnowledge);
            return report;
        }
        let total = self.total_members();
        let sum: f64 = self.entries.iter().map(|e| e.weight).sum();
        if (sum - 1.0).abs() > 1e-9 {
            report.push(Violation::WeightSum(sum));
        }
        for e in &self.entries {
            if e.member_count == 0 || e.weight != e.member_count as f64 / total as f64 {
                report.push(Violation::WeightMismatch(e.medoid_emr_id.clone()));
            }
            report.extend(validate_network(&e.network));
        }
        let sorted = self.entries.windows(2).all(|w| {
            w[0].weight > w[1].weight || (w[0].weight == w[1].weight && w[0].medoid_emr_id <= w[1].medoid_emr_id)
        });
        if !sorted {
            report.push(Violation::EntryOrder);
        }
        report
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionnaireKind {
    Personal,
    Disease,
}

impl fmt::Display for QuestionnaireKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QuestionnaireKind::Personal => f.write_str("personal"),
            QuestionnaireKind::Disease => f.write_str("disease"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionKind {
    MultipleChoice,
    FreeText,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: usize,
    pub text: String,
    pub kind: QuestionKind,
    pub options: Vec<String>,
    pub allows_free_text: bool,
    pub source_assertion_ids: Vec<usize>,
    pub rationale: Option<String>,
}

impl Question {
    /// Text used when matching a question against key facts: the question
    /// followed by its options.
    pub fn match_text(&self) -> String {
        if self.options.is_empty() {
            self.text.clone()
        } else {
            format!("{} {}", self.text, self.options.join(" "))
        }
    }
}

/// Ordered list of questions for one patient record or one disease.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Questionnaire {
    pub kind: QuestionnaireKind,
    pub subject: String,
    pub questions: Vec<Question>,
}

impl Questionnaire {
    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        if self.questions.is_empty() {
            report.push(Violation::EmptyQuestionnaire);
        }
        for (pos, q) in self.questions.iter().enumerate() {
            if q.id != pos {
                report.push(Violation::QuestionOrder(q.id));
            }
            if q.text.trim().is_empty() {
                report.push(Violation::EmptyQuestionText(q.id));
            }
            match q.kind {
                QuestionKind::MultipleChoice if q.options.len() < 2 => {
                    report.push(Violation::TooFewOptions(q.id));
                }
                QuestionKind::FreeText if !q.options.is_empty() => {
                    report.push(Violation::UnexpectedOptions(q.id));
                }
                _ => {}
            }
        }
        report
    }
}

/// A single structural problem found by a validator.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    EmptyAssert {
        id: usize,
    },
    DuplicateAssertionId {
        id: usize,
    },
    /// Heuristic: the statement contains a denylisted conjunction and may
    /// bundle more than one fact. Reported as a warning only.
    CompoundFact {
        id: usize,
        token: String,
    },
    DanglingEdge {
        src: usize,
        dst: usize,
    },
    SelfLoop {
        node: usize,
    },
    DuplicateEdge {
        src: usize,
        dst: usize,
    },
    DuplicateEmrId(String),
    EmptyEmrText(String),
    EmptyKnowledge,
    WeightSum(f64),
    WeightMismatch(String),
    EntryOrder,
    EmptyQuestionnaire,
    QuestionOrder(usize),
    EmptyQuestionText(usize),
    TooFewOptions(usize),
    UnexpectedOptions(usize),
}

impl Violation {
    /// Warnings do not invalidate an artifact.
    pub fn is_error(&self) -> bool {
        !matches!(self, Violation::CompoundFact { .. })
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyAssert { id } => write!(f, "assertion {id} has an empty statement"),
            Violation::DuplicateAssertionId { id } => write!(f, "assertion id {id} appears more than once"),
            Violation::CompoundFact { id, token } => {
                write!(
                    f,
                    "assertion {id} contains conjunction {token:?} and may hold several facts"
                )
            }
            Violation::DanglingEdge { src, dst } => write!(f, "edge ({src},{dst}) references a missing node"),
            Violation::SelfLoop { node } => write!(f, "self-loop on node {node}"),
            Violation::DuplicateEdge { src, dst } => write!(f, "edge ({src},{dst}) appears more than once"),
            Violation::DuplicateEmrId(id) => write!(f, "record id {id:?} appears more than once"),
            Violation::EmptyEmrText(id) => write!(f, "record {id:?} has no text"),
            Violation::EmptyKnowledge => f.write_str("knowledge has no entries"),
            Violation::WeightSum(s) => write!(f, "weights sum to {s}, not 1"),
            Violation::WeightMismatch(id) => write!(f, "weight of entry {id:?} is not member_count/total"),
            Violation::EntryOrder => f.write_str("entries are not sorted by weight descending"),
            Violation::EmptyQuestionnaire => f.write_str("questionnaire has no questions"),
            Violation::QuestionOrder(id) => write!(f, "question id {id} out of order"),
            Violation::EmptyQuestionText(id) => write!(f, "question {id} has empty text"),
            Violation::TooFewOptions(id) => write!(f, "multiple-choice question {id} has fewer than 2 options"),
            Violation::UnexpectedOptions(id) => write!(f, "free-text question {id} carries options"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn push(&mut self, v: Violation) {
        self.violations.push(v);
    }

    pub fn extend(&mut self, other: ValidationReport) {
        self.violations.extend(other.violations);
    }

    /// True when there are no violations at all, warnings included.
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    /// True when no error-level violation is present.
    pub fn is_valid(&self) -> bool {
        !self.violations.iter().any(Violation::is_error)
    }

    pub fn errors(&self) -> impl Iterator<Item = &Violation> {
        self.violations.iter().filter(|v| v.is_error())
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.violations.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join("; "))
    }
}

/// Validator for assertion lists with an optional compound-fact heuristic.
#[derive(Debug, Clone, Default)]
pub struct AssertionValidator {
    /// Lowercase conjunction tokens (e.g. `"and"`) whose presence as a
    /// whole word flags a statement as possibly compound.
    pub conjunction_denylist: Vec<String>,
}

impl AssertionValidator {
    pub fn with_denylist<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            conjunction_denylist: tokens.into_iter().map(|t| t.into().to_lowercase()).collect(),
        }
    }

    pub fn validate(&self, assertions: &[AtomicAssertion]) -> ValidationReport {
        let mut report = ValidationReport::default();
        let mut seen = HashSet::new();
        for a in assertions {
            if !seen.insert(a.id) {
                report.push(Violation::DuplicateAssertionId { id: a.id });
            }
            if a.assert.trim().is_empty() {
                report.push(Violation::EmptyAssert { id: a.id });
                continue;
            }
            if let Some(token) = self.compound_token(&a.assert) {
                report.push(Violation::CompoundFact { id: a.id, token });
            }
        }
        report
    }

    fn compound_token(&self, statement: &str) -> Option<String> {
        if self.conjunction_denylist.is_empty() {
            return None;
        }
        let lower = statement.to_lowercase();
        let words: Vec<&str> = lower
            .split(|c: char| !c.is_alphanumeric() && c != '\'')
            .filter(|w| !w.is_empty())
            .collect();
        self.conjunction_denylist
            .iter()
            .find(|t| {
                if t.is_ascii() {
                    words.iter().any(|w| w == t)
                } else {
                    // CJK conjunctions are not whitespace-delimited.
                    lower.contains(t.as_str())
                }
            })
            .cloned()
    }
}

/// Reports empty statements and duplicate ids. Valid input yields an empty report.
pub fn validate_assertions(assertions: &[AtomicAssertion]) -> ValidationReport {
    AssertionValidator::default().validate(assertions)
}

/// Reports dangling endpoints, self-loops and duplicate edges.
pub fn validate_network(net: &CausalNetwork) -> ValidationReport {
    let mut report = ValidationReport::default();
    let n = net.nodes.len();
    let mut seen = HashSet::new();
    for &(src, dst) in &net.edges {
        if src >= n || dst >= n {
            report.push(Violation::DanglingEdge { src, dst });
        }
        if src == dst {
            report.push(Violation::SelfLoop { node: src });
        }
        if !seen.insert((src, dst)) {
            report.push(Violation::DuplicateEdge { src, dst });
        }
    }
    report
}
