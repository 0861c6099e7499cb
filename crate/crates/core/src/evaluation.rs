//! Coverage and timing metrics, and report assembly.
//!
//! A fact counts as covered when some question's text (options included)
//! embeds within cosine `tau` of it. This matching rule stands in for expert
//! judgement, and reports say so in their `matching` field.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AtomicAssertion, DiseaseKnowledge, Questionnaire, QuestionnaireKind};
use crate::providers::{Embedder, ProviderError};
use crate::similarity::{cosine, SimilarityError};

pub const DEFAULT_TAU: f64 = 0.8;

/// Label written into every report describing how coverage was decided.
pub const MATCHING_RULE: &str = "embedding cosine threshold (automatic stand-in for expert judgement)";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("fact set for {0:?} is empty")]
    EmptyFacts(String),
    #[error("tau must satisfy 0 < tau <= 1, got {0}")]
    InvalidTau(f64),
    #[error("subject {subject:?}: {reason}")]
    SubjectMismatch { subject: String, reason: String },
    #[error("external score for {subject:?} out of range 0..=10: {value}")]
    ScoreOutOfRange { subject: String, value: f64 },
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactSource {
    Annotated,
    DerivedFromAssertions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyFactSet {
    pub subject: String,
    pub facts: Vec<String>,
    #[serde(default = "annotated")]
    pub source: FactSource,
}

fn annotated() -> FactSource {
    FactSource::Annotated
}

impl KeyFactSet {
    pub fn annotated(subject: impl Into<String>, facts: Vec<String>) -> Self {
        Self {
            subject: subject.into(),
            facts,
            source: FactSource::Annotated,
        }
    }

    /// Fallback when nobody annotated the record: every assertion, with its
    /// timing, is a fact.
    pub fn from_assertions(subject: impl Into<String>, assertions: &[AtomicAssertion]) -> Self {
        Self {
            subject: subject.into(),
            facts: assertions.iter().map(AtomicAssertion::text_with_timing).collect(),
            source: FactSource::DerivedFromAssertions,
        }
    }

    /// Disease fallback: distinct node statements of all representative networks.
    pub fn from_knowledge(dk: &DiseaseKnowledge) -> Self {
        let mut seen = BTreeSet::new();
        let facts = dk
            .entries
            .iter()
            .flat_map(|e| e.network.nodes.iter())
            .filter(|a| seen.insert(a.assert.clone()))
            .map(|a| a.assert.clone())
            .collect();
        Self {
            subject: dk.disease_code.clone(),
            facts,
            source: FactSource::DerivedFromAssertions,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub matched: usize,
    pub total: usize,
    pub coverage: f64,
    /// Best cosine per fact, in fact order.
    pub best: Vec<f64>,
}

impl Coverage {
    /// Recounts coverage for another threshold without re-embedding.
    pub fn at(&self, tau: f64) -> Coverage {
        let matched = self.best.iter().filter(|&&b| b >= tau).count();
        Coverage {
            matched,
            total: self.total,
            coverage: matched as f64 / self.total as f64,
            best: self.best.clone(),
        }
    }
}

pub fn check_tau(tau: f64) -> Result<(), EvalError> {
    if tau > 0.0 && tau <= 1.0 {
        Ok(())
    } else {
        Err(EvalError::InvalidTau(tau))
    }
}

/// Fraction of facts whose best-matching question reaches cosine `tau`.
pub fn key_fact_coverage<E: Embedder + ?Sized>(
    facts: &KeyFactSet,
    q: &Questionnaire,
    embedder: &E,
    tau: f64,
) -> Result<Coverage, EvalError> {
    check_tau(tau)?;
    if facts.facts.is_empty() {
        return Err(EvalError::EmptyFacts(facts.subject.clone()));
    }
    let fact_vecs = embedder.embed_batch(&facts.facts)?;
    let texts: Vec<String> = q.questions.iter().map(|x| x.match_text()).collect();
    let question_vecs = if texts.is_empty() {
        Vec::new()
    } else {
        embedder.embed_batch(&texts)?
    };
    let mut best = Vec::with_capacity(fact_vecs.len());
    for f in &fact_vecs {
        let mut top = f64::NEG_INFINITY;
        for v in &question_vecs {
            top = top.max(cosine(f.values(), v.values())?);
        }
        best.push(top);
    }
    let matched = best.iter().filter(|&&b| b >= tau).count();
    Ok(Coverage {
        matched,
        total: best.len(),
        coverage: matched as f64 / best.len() as f64,
        best,
    })
}

/// Wall-clock duration of a generation task, kept even when it fails.
#[derive(Debug)]
pub struct Timed<T, E> {
    pub elapsed_sec: f64,
    pub result: Result<T, E>,
}

impl<T, E> Timed<T, E> {
    pub fn failed(&self) -> bool {
        self.result.is_err()
    }
}

pub fn measure_generation<T, E>(task: impl FnOnce() -> Result<T, E>) -> Timed<T, E> {
    let start = Instant::now();
    let result = task();
    Timed {
        elapsed_sec: start.elapsed().as_secs_f64(),
        result,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalScore {
    pub subject: String,
    #[serde(default)]
    pub relevance: Option<f64>,
    #[serde(default)]
    pub understandability: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub subject: String,
    pub kind: QuestionnaireKind,
    pub coverage: f64,
    pub matched: usize,
    pub total: usize,
    pub generation_time_sec: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relevance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub understandability: Option<f64>,
    pub fact_source: FactSource,
}

impl EvalReport {
    pub fn is_consistent(&self) -> bool {
        self.matched <= self.total
            && self.total > 0
            && self.coverage == self.matched as f64 / self.total as f64
            && self.generation_time_sec >= 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub subjects: usize,
    pub mean_coverage: f64,
    pub mean_generation_time_sec: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_relevance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_understandability: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub tau: f64,
    pub matching: String,
    pub reports: Vec<EvalReport>,
    pub summary: Summary,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn check_score(subject: &str, value: Option<f64>) -> Result<(), EvalError> {
    match value {
        Some(v) if !(0.0..=10.0).contains(&v) => Err(EvalError::ScoreOutOfRange {
            subject: subject.to_string(),
            value: v,
        }),
        _ => Ok(()),
    }
}

/// One report per questionnaire plus corpus means. Every questionnaire needs
/// a fact set and a timing under its subject; external scores are optional
/// and copied through unchanged.
pub fn build_report<E: Embedder + ?Sized>(
    questionnaires: &[Questionnaire],
    fact_sets: &[KeyFactSet],
    timings: &BTreeMap<String, f64>,
    external_scores: &[ExternalScore],
    embedder: &E,
    tau: f64,
) -> Result<CorpusReport, EvalError> {
    check_tau(tau)?;
    let facts: BTreeMap<&str, &KeyFactSet> = fact_sets.iter().map(|f| (f.subject.as_str(), f)).collect();
    let scores: BTreeMap<&str, &ExternalScore> = external_scores.iter().map(|s| (s.subject.as_str(), s)).collect();
    for s in external_scores {
        check_score(&s.subject, s.relevance)?;
        check_score(&s.subject, s.understandability)?;
    }
    let mismatch = |subject: &str, reason: &str| EvalError::SubjectMismatch {
        subject: subject.to_string(),
        reason: reason.to_string(),
    };

    let reports = questionnaires
        .par_iter()
        .map(|q| {
            let fs = facts
                .get(q.subject.as_str())
                .ok_or_else(|| mismatch(&q.subject, "no key fact set"))?;
            let time = *timings
                .get(q.subject.as_str())
                .ok_or_else(|| mismatch(&q.subject, "no generation timing"))?;
            let cov = key_fact_coverage(fs, q, embedder, tau)?;
            let score = scores.get(q.subject.as_str());
            Ok(EvalReport {
                subject: q.subject.clone(),
                kind: q.kind,
                coverage: cov.coverage,
                matched: cov.matched,
                total: cov.total,
                generation_time_sec: time,
                relevance: score.and_then(|s| s.relevance),
                understandability: score.and_then(|s| s.understandability),
                fact_source: fs.source,
            })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;

    let summary = Summary {
        subjects: reports.len(),
        mean_coverage: mean(reports.iter().map(|r| r.coverage)).unwrap_or(0.0),
        mean_generation_time_sec: mean(reports.iter().map(|r| r.generation_time_sec)).unwrap_or(0.0),
        mean_relevance: mean(reports.iter().filter_map(|r| r.relevance)),
        mean_understandability: mean(reports.iter().filter_map(|r| r.understandability)),
    };
    Ok(CorpusReport {
        tau,
        matching: MATCHING_RULE.to_string(),
        reports,
        summary,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.1}"))
}

/// Plain-text table: subject, coverage C, relevance R, understandability U, time T.
pub fn render_table(report: &CorpusReport) -> String {
    let mean_label = format!("Mean ({} subjects)", report.summary.subjects);
    let width = report
        .reports
        .iter()
        .map(|r| format!("{} ({})", r.subject, r.kind).chars().count())
        .chain([mean_label.chars().count()])
        .max()
        .unwrap_or(7);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$} | {:>7} | {:>4} | {:>4} | {:>9}",
        "Subject", "C", "R", "U", "T (s)"
    );
    let _ = writeln!(out, "{}", "-".repeat(width + 38));
    for r in &report.reports {
        let label = format!("{} ({})", r.subject, r.kind);
        let _ = writeln!(
            out,
            "{:<width$} | {:>6.1}% | {:>4} | {:>4} | {:>9.3}",
            label,
            r.coverage * 100.0,
            opt(r.relevance),
            opt(r.understandability),
            r.generation_time_sec
        );
    }
    let s = &report.summary;
    let _ = writeln!(out, "{}", "-".repeat(width + 38));
    let _ = writeln!(
        out,
        "{:<width$} | {:>6.1}% | {:>4} | {:>4} | {:>9.3}",
        mean_label,
        s.mean_coverage * 100.0,
        opt(s.mean_relevance),
        opt(s.mean_understandability),
        s.mean_generation_time_sec
    );
    let _ = writeln!(out, "tau = {}; matching: {}", report.tau, report.matching);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Question, QuestionKind};
    use crate::providers::GenerationRequest;
    use crate::providers::{MockEmbedder, MockGenerator, TextGenerator};
    use proptest::prelude::*;

    fn questionnaire(subject: &str, texts: &[String]) -> Questionnaire {
        Questionnaire {
            kind: QuestionnaireKind::Personal,
            subject: subject.into(),
            questions: texts
                .iter()
                .enumerate()
                .map(|(id, t)| Question {
                    id,
                    text: t.clone(),
                    kind: QuestionKind::FreeText,
                    options: vec![],
                    allows_free_text: true,
                    source_assertion_ids: vec![],
                    rationale: None,
                })
                .collect(),
        }
    }

    fn facts(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("fact{i} alpha{i} beta{i}")).collect()
    }

    #[test]
    fn worked_example_fractions() {
        let m = MockEmbedder::new(0);
        let all = facts(38);
        let fs = KeyFactSet::annotated("fig5", all.clone());
        for (covered, expected) in [(32usize, 0.8421), (16, 0.4211)] {
            let q = questionnaire("fig5", &all[..covered]);
            let c = key_fact_coverage(&fs, &q, &m, 1.0).unwrap();
            assert_eq!((c.matched, c.total), (covered, 38));
            assert!((c.coverage - expected).abs() < 1e-4, "{}", c.coverage);
        }
    }

    #[test]
    fn identical_texts_cover_everything() {
        let m = MockEmbedder::new(2);
        let all = facts(5);
        let c = key_fact_coverage(
            &KeyFactSet::annotated("s", all.clone()),
            &questionnaire("s", &all),
            &m,
            1.0,
        )
        .unwrap();
        assert_eq!(c.coverage, 1.0);
    }

    #[test]
    fn bad_inputs() {
        let m = MockEmbedder::new(0);
        let q = questionnaire("s", &facts(1));
        assert!(matches!(
            key_fact_coverage(&KeyFactSet::annotated("s", vec![]), &q, &m, 0.8),
            Err(EvalError::EmptyFacts(_))
        ));
        for tau in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(
                key_fact_coverage(&KeyFactSet::annotated("s", facts(1)), &q, &m, tau),
                Err(EvalError::InvalidTau(_))
            ));
        }
    }

    #[test]
    fn timing_examples() {
        let quick = measure_generation(|| Ok::<_, ()>(1));
        assert!(quick.elapsed_sec < 0.1 && !quick.failed());

        let gen = MockGenerator::new(0).with_delay(std::time::Duration::from_millis(50));
        let slow = measure_generation(|| gen.generate(&GenerationRequest::new("x")));
        assert!((0.05..=0.25).contains(&slow.elapsed_sec), "{}", slow.elapsed_sec);

        let failing = measure_generation(|| Err::<(), _>("boom"));
        assert!(failing.failed() && failing.elapsed_sec >= 0.0);
    }

    fn timings(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn report_means_and_optional_scores() {
        let m = MockEmbedder::new(0);
        let a = facts(5);
        let b: Vec<String> = (10..15).map(|i| format!("fact{i} alpha{i} beta{i}")).collect();
        let qs = vec![questionnaire("a", &a[..4]), questionnaire("b", &b[..3])];
        let fs = vec![KeyFactSet::annotated("a", a), KeyFactSet::annotated("b", b)];
        let scores = vec![ExternalScore {
            subject: "a".into(),
            relevance: Some(8.0),
            understandability: None,
        }];
        let r = build_report(&qs, &fs, &timings(&[("a", 1.0), ("b", 3.0)]), &scores, &m, 1.0).unwrap();
        assert_eq!(r.reports[0].coverage, 0.8);
        assert_eq!(r.reports[1].coverage, 0.6);
        assert!((r.summary.mean_coverage - 0.7).abs() < 1e-12);
        assert_eq!(r.summary.mean_generation_time_sec, 2.0);
        assert_eq!(r.reports[0].relevance, Some(8.0));
        assert_eq!(r.reports[1].relevance, None);
        assert!(r.reports.iter().all(EvalReport::is_consistent));
        let json = serde_json::to_string(&r.reports[1]).unwrap();
        assert!(!json.contains("relevance"));
        let table = render_table(&r);
        let header: Vec<&str> = table.lines().next().unwrap().split('|').map(str::trim).collect();
        assert_eq!(header, ["Subject", "C", "R", "U", "T (s)"]);
        assert!(table.contains("80.0%"));
    }

    #[test]
    fn questionnaire_without_facts_is_mismatch() {
        let m = MockEmbedder::new(0);
        let qs = vec![questionnaire("a", &facts(1))];
        let err = build_report(&qs, &[], &timings(&[("a", 1.0)]), &[], &m, 0.8).unwrap_err();
        assert!(matches!(err, EvalError::SubjectMismatch { .. }));
        let fs = vec![KeyFactSet::annotated("a", facts(1))];
        let err = build_report(&qs, &fs, &BTreeMap::new(), &[], &m, 0.8).unwrap_err();
        assert!(matches!(err, EvalError::SubjectMismatch { .. }));
    }

    #[test]
    fn derived_fact_sets() {
        let a = vec![
            AtomicAssertion::new(0, "cough", "1 year ago"),
            AtomicAssertion::new(1, "fever", ""),
        ];
        let fs = KeyFactSet::from_assertions("e1", &a);
        assert_eq!(fs.facts, vec!["cough, 1 year ago", "fever"]);
        assert_eq!(fs.source, FactSource::DerivedFromAssertions);
        assert_eq!(
            serde_json::to_value(&fs).unwrap()["source"],
            serde_json::json!("derived_from_assertions")
        );
        let parsed: KeyFactSet = serde_json::from_str(r#"{"subject":"x","facts":["a"]}"#).unwrap();
        assert_eq!(parsed.source, FactSource::Annotated);
    }

    proptest! {
        #[test]
        fn coverage_monotone_and_order_free(
            fact_words in proptest::collection::vec("[a-e]{1,3}( [a-e]{1,3}){0,2}", 1..8),
            question_words in proptest::collection::vec("[a-e]{1,3}( [a-e]{1,3}){0,2}", 1..6),
            seed in 0u64..4,
        ) {
            let m = MockEmbedder::new(seed);
            let fs = KeyFactSet::annotated("s", fact_words);
            let q = questionnaire("s", &question_words);
            let mut rev = question_words.clone();
            rev.reverse();
            let base = key_fact_coverage(&fs, &q, &m, 0.5).unwrap();
            let reordered = key_fact_coverage(&fs, &questionnaire("s", &rev), &m, 0.5).unwrap();
            prop_assert_eq!(base.matched, reordered.matched);
            let mut last = 0.0;
            for tau in [1.0, 0.9, 0.7, 0.5, 0.3, 0.1, 1e-9] {
                let c = key_fact_coverage(&fs, &q, &m, tau).unwrap();
                prop_assert!(c.coverage >= last && (0.0..=1.0).contains(&c.coverage));
                prop_assert_eq!(c.matched, c.best.iter().filter(|&&b| b >= tau).count());
                last = c.coverage;
            }
        }
    }
}
