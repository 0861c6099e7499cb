//! Stage 1: turn a record's free text into atomic assertions.

use thiserror::Error;

use crate::lenient;
use crate::model::{AssertionValidator, AtomicAssertion, EmrDocument};
use crate::prompt::{PromptTemplate, SectionKind, TemplateError};
use crate::providers::{ProviderError, TextGenerator};
use crate::stage::{generate_with_repair, GenerationSettings, StageFailure};

const REPAIR: &str = "Your previous answer could not be used. Reply again with JSONL only: one JSON object per \
line with the keys \"assert\" and \"relative time\", each object stating exactly one non-empty fact. \
No prose, no code fences.";

#[derive(Debug, Error)]
pub enum ExtractionError {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("record {0:?} has no text")]
    EmptyRecord(String),
    #[error("no well-formed assertion objects in model output")]
    EmptyExtraction,
    #[error("extraction for {emr_id:?} failed after {attempts} attempt(s): {reason}")]
    ExtractionFailed {
        emr_id: String,
        attempts: u32,
        reason: String,
    },
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

/// Renders the extraction prompt: task, output requirements, at least one
/// worked example, then the record text.
pub fn build_extraction_prompt(emr: &EmrDocument, template: &PromptTemplate) -> Result<String, ExtractionError> {
    if !emr.has_text() {
        return Err(ExtractionError::EmptyRecord(emr.id.clone()));
    }
    template.check_layout(&[
        SectionKind::Task,
        SectionKind::Requirements,
        SectionKind::Examples,
        SectionKind::Payload,
    ])?;
    Ok(template.render(&[("record", emr.text.trim())])?)
}

/// Reads assertion objects out of model output.
///
/// Every recoverable JSON object with a non-blank string `"assert"` becomes
/// an assertion; a missing or non-string `"relative time"` becomes `""`.
/// Ids are assigned `0..n` in encounter order.
pub fn parse_assertions(raw: &str) -> Result<Vec<AtomicAssertion>, ExtractionError> {
    let out: Vec<AtomicAssertion> = lenient::json_objects(raw)
        .into_iter()
        .filter_map(|obj| {
            let statement = obj.get("assert")?.as_str()?.trim();
            if statement.is_empty() {
                return None;
            }
            let time = obj
                .get("relative time")
                .or_else(|| obj.get("relative_time"))
                .and_then(|v| v.as_str())
                .unwrap_or("")
                .trim();
            Some((statement.to_string(), time.to_string()))
        })
        .enumerate()
        .map(|(id, (a, t))| AtomicAssertion::new(id, a, t))
        .collect();
    if out.is_empty() {
        Err(ExtractionError::EmptyExtraction)
    } else {
        Ok(out)
    }
}

/// Serializes assertions back into the JSONL form the model is asked to produce.
pub fn to_jsonl(assertions: &[AtomicAssertion]) -> String {
    assertions
        .iter()
        .map(|a| serde_json::json!({"assert": a.assert, "relative time": a.relative_time}).to_string())
        .collect::<Vec<_>>()
        .join("\n")
}

/// Prompt, generate, parse and validate, re-asking with a repair instruction
/// up to `settings.retries` times when the output is unusable.
pub fn extract_assertions<G: TextGenerator + ?Sized>(
    emr: &EmrDocument,
    gen: &G,
    template: &PromptTemplate,
    settings: &GenerationSettings,
) -> Result<Vec<AtomicAssertion>, ExtractionError> {
    extract_with_validator(emr, gen, template, settings, &AssertionValidator::default())
}

pub fn extract_with_validator<G: TextGenerator + ?Sized>(
    emr: &EmrDocument,
    gen: &G,
    template: &PromptTemplate,
    settings: &GenerationSettings,
    validator: &AssertionValidator,
) -> Result<Vec<AtomicAssertion>, ExtractionError> {
    let prompt = build_extraction_prompt(emr, template)?;
    let result = generate_with_repair(gen, &prompt, REPAIR, settings, |raw| {
        let assertions = parse_assertions(raw).map_err(|e| e.to_string())?;
        let report = validator.validate(&assertions);
        for w in report.violations.iter().filter(|v| !v.is_error()) {
            log::info!("{}: {w}", emr.id);
        }
        if report.is_valid() {
            Ok(assertions)
        } else {
            Err(report.to_string())
        }
    });
    match result {
        Ok(a) => Ok(a),
        Err(StageFailure::Provider(e)) => Err(e.into()),
        Err(StageFailure::Exhausted { attempts, reason }) => Err(ExtractionError::ExtractionFailed {
            emr_id: emr.id.clone(),
            attempts,
            reason,
        }),
    }
}
