//! Stage 2a: personal causal network construction.

use std::collections::HashSet;

use serde_json::Value;
use thiserror::Error;

use crate::lenient;
use crate::model::{validate_network, AtomicAssertion, CausalNetwork, EmrDocument};
use crate::prompt::{assertion_line, PromptTemplate, SectionKind, TemplateError};
use crate::providers::{ProviderError, TextGenerator};
use crate::stage::{generate_with_repair, GenerationSettings, StageFailure};

const REPAIR: &str = "Your previous answer could not be used. Reply again with JSONL only: one line per edge \
as {\"from\": <index>, \"to\": <index>} using the bracketed assertion indices, or the single line NONE if \
there is no causal link.";

/// Marker a model may emit to say the record has no causal links.
const NO_EDGES: &str = "NONE";

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("no assertions to connect")]
    EmptyInput,
    #[error("network for {emr_id:?} failed after {attempts} attempt(s): {reason}")]
    NetworkFailed {
        emr_id: String,
        attempts: u32,
        reason: String,
    },
    #[error("assembled network for {emr_id:?} is invalid: {report}")]
    Invalid { emr_id: String, report: String },
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

/// Why a parsed edge was discarded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DroppedEdge {
    OutOfRange(i64, i64),
    SelfLoop(usize),
    Duplicate(usize, usize),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EdgeParse {
    pub edges: Vec<(usize, usize)>,
    /// Objects that carried both `"from"` and `"to"` integer keys.
    pub recognized: usize,
    pub dropped: Vec<DroppedEdge>,
    /// The output explicitly said there are no edges.
    pub declared_none: bool,
}

impl EdgeParse {
    /// True when the output was either empty, an explicit no-edge marker,
    /// or held at least one edge object.
    pub fn interpretable(&self, raw: &str) -> bool {
        self.recognized > 0 || self.declared_none || raw.trim().is_empty()
    }
}

pub fn build_network_prompt(
    emr: &EmrDocument,
    assertions: &[AtomicAssertion],
    template: &PromptTemplate,
) -> Result<String, NetworkError> {
    if assertions.is_empty() {
        return Err(NetworkError::EmptyInput);
    }
    template.check_layout(&[SectionKind::Task, SectionKind::Requirements, SectionKind::Payload])?;
    let listing = assertions.iter().map(assertion_line).collect::<Vec<_>>().join("\n");
    Ok(template.render(&[("record", emr.text.trim()), ("assertions", &listing)])?)
}

fn as_index(v: &Value) -> Option<i64> {
    match v {
        Value::Number(n) => n.as_i64().or_else(|| {
            let f = n.as_f64()?;
            (f.fract() == 0.0 && f.abs() < 1e15).then_some(f as i64)
        }),
        Value::String(s) => s.trim().trim_matches(['[', ']']).parse().ok(),
        _ => None,
    }
}

/// Reads `{"from": i, "to": j}` edges, dropping out-of-range pairs,
/// self-loops and repeats while keeping first-encounter order.
pub fn parse_edges_detailed(raw: &str, n_assertions: usize) -> EdgeParse {
    let mut parse = EdgeParse {
        declared_none: lenient::unfenced_lines(raw).iter().any(|l| l.trim() == NO_EDGES),
        ..EdgeParse::default()
    };
    let mut seen = HashSet::new();
    for obj in lenient::json_objects(raw) {
        let (Some(from), Some(to)) = (obj.get("from").and_then(as_index), obj.get("to").and_then(as_index)) else {
            continue;
        };
        parse.recognized += 1;
        let in_range = |x: i64| x >= 0 && (x as u64) < n_assertions as u64;
        if !in_range(from) || !in_range(to) {
            log::warn!("dropping edge ({from},{to}): outside 0..{n_assertions}");
            parse.dropped.push(DroppedEdge::OutOfRange(from, to));
            continue;
        }
        let (src, dst) = (from as usize, to as usize);
        if src == dst {
            log::warn!("dropping self-loop on {src}");
            parse.dropped.push(DroppedEdge::SelfLoop(src));
            continue;
        }
        if !seen.insert((src, dst)) {
            log::warn!("dropping duplicate edge ({src},{dst})");
            parse.dropped.push(DroppedEdge::Duplicate(src, dst));
            continue;
        }
        parse.edges.push((src, dst));
    }
    parse
}

pub fn parse_edges(raw: &str, n_assertions: usize) -> Vec<(usize, usize)> {
    parse_edges_detailed(raw, n_assertions).edges
}

/// Builds and validates the causal network of one record. Nodes are exactly
/// `assertions`, in order. A network with zero edges is a legal result.
pub fn build_personal_network<G: TextGenerator + ?Sized>(
    emr: &EmrDocument,
    assertions: &[AtomicAssertion],
    gen: &G,
    template: &PromptTemplate,
    settings: &GenerationSettings,
) -> Result<CausalNetwork, NetworkError> {
    let prompt = build_network_prompt(emr, assertions, template)?;
    let n = assertions.len();
    let parsed = generate_with_repair(gen, &prompt, REPAIR, settings, |raw| {
        let p = parse_edges_detailed(raw, n);
        if p.interpretable(raw) {
            Ok(p.edges)
        } else {
            Err("output holds no edge objects and no NONE marker".to_string())
        }
    });
    let edges = match parsed {
        Ok(e) => e,
        Err(StageFailure::Provider(e)) => return Err(e.into()),
        Err(StageFailure::Exhausted { attempts, reason }) => {
            return Err(NetworkError::NetworkFailed {
                emr_id: emr.id.clone(),
                attempts,
                reason,
            })
        }
    };
    let net = CausalNetwork::new(emr.id.clone(), assertions.to_vec(), edges);
    let report = validate_network(&net);
    if !report.is_empty() {
        return Err(NetworkError::Invalid {
            emr_id: emr.id.clone(),
            report: report.to_string(),
        });
    }
    Ok(net)
}
