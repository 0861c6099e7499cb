//! Stage 3: personal and disease questionnaires.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap};
use std::fmt::Write as _;

use petgraph::algo::tarjan_scc;
use petgraph::graph::{DiGraph, NodeIndex};
use serde_json::Value;
use thiserror::Error;

use crate::lenient;
use crate::model::{
    AtomicAssertion, CausalNetwork, DiseaseKnowledge, KnowledgeEntry, Question, QuestionKind, Questionnaire,
    QuestionnaireKind,
};
use crate::prompt::{assertion_line, PromptTemplate, SectionKind, TemplateError};
use crate::providers::{ProviderError, TextGenerator};
use crate::stage::{generate_with_repair, GenerationSettings, StageFailure};

const REPAIR: &str = "Your previous answer could not be used. Reply again with a JSON array of question \
objects only, following the output requirements exactly. Multiple-choice questions need at least two options.";

#[derive(Debug, Error)]
pub enum QuestionnaireError {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("no assertions to ask about")]
    EmptyInput,
    #[error("network has {network} nodes but {assertions} assertions were given")]
    NetworkMismatch { network: usize, assertions: usize },
    #[error("disease knowledge has no entries")]
    EmptyKnowledge,
    #[error("model output holds no valid question")]
    EmptyQuestionnaire,
    #[error("questionnaire for {subject:?} failed after {attempts} attempt(s): {reason}")]
    GenerationFailed {
        subject: String,
        attempts: u32,
        reason: String,
    },
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

/// Node ids in a logical asking order.
///
/// Connected nodes come first in topological order of the edge relation,
/// smallest id first among the ready ones. A strongly connected group is
/// emitted as a block in ascending id order when it becomes ready. Nodes
/// without any edge follow, ascending.
pub fn order_assertions(net: &CausalNetwork) -> Vec<usize> {
    let n = net.nodes.len();
    let mut graph: DiGraph<usize, ()> = DiGraph::with_capacity(n, net.edges.len());
    let idx: Vec<NodeIndex> = (0..n).map(|i| graph.add_node(i)).collect();
    let mut connected = vec![false; n];
    for &(s, d) in &net.edges {
        if s < n && d < n && s != d {
            graph.update_edge(idx[s], idx[d], ());
            connected[s] = true;
            connected[d] = true;
        }
    }

    let mut comp_of = vec![usize::MAX; n];
    let mut comps: Vec<Vec<usize>> = Vec::new();
    for scc in tarjan_scc(&graph) {
        let mut members: Vec<usize> = scc.iter().map(|ix| graph[*ix]).filter(|&i| connected[i]).collect();
        if members.is_empty() {
            continue;
        }
        members.sort_unstable();
        for &m in &members {
            comp_of[m] = comps.len();
        }
        comps.push(members);
    }

    let mut succ: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); comps.len()];
    let mut indegree = vec![0usize; comps.len()];
    for e in graph.edge_indices() {
        let (a, b) = graph.edge_endpoints(e).expect("edge exists");
        let (ca, cb) = (comp_of[graph[a]], comp_of[graph[b]]);
        if ca != cb && succ[ca].insert(cb) {
            indegree[cb] += 1;
        }
    }

    let mut ready: BinaryHeap<Reverse<(usize, usize)>> = comps
        .iter()
        .enumerate()
        .filter(|(c, _)| indegree[*c] == 0)
        .map(|(c, members)| Reverse((members[0], c)))
        .collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse((_, c))) = ready.pop() {
        order.extend_from_slice(&comps[c]);
        for &next in &succ[c] {
            indegree[next] -= 1;
            if indegree[next] == 0 {
                ready.push(Reverse((comps[next][0], next)));
            }
        }
    }
    order.extend((0..n).filter(|&i| !connected[i]));
    order
}

fn edge_listing(net: &CausalNetwork) -> String {
    if net.edges.is_empty() {
        return "(no causal links)".to_string();
    }
    net.edges
        .iter()
        .map(|(s, d)| format!("[{s}] -> [{d}]"))
        .collect::<Vec<_>>()
        .join("\n")
}

fn ordered_listing(assertions: &[AtomicAssertion], net: &CausalNetwork) -> String {
    order_assertions(net)
        .into_iter()
        .filter_map(|i| assertions.get(i))
        .map(assertion_line)
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn build_personal_prompt(
    assertions: &[AtomicAssertion],
    net: &CausalNetwork,
    template: &PromptTemplate,
) -> Result<String, QuestionnaireError> {
    if assertions.is_empty() {
        return Err(QuestionnaireError::EmptyInput);
    }
    if net.nodes.len() != assertions.len() {
        return Err(QuestionnaireError::NetworkMismatch {
            network: net.nodes.len(),
            assertions: assertions.len(),
        });
    }
    template.check_layout(&[SectionKind::Task, SectionKind::Requirements, SectionKind::Payload])?;
    let listing = ordered_listing(assertions, net);
    let edges = edge_listing(net);
    Ok(template.render(&[("assertions", &listing), ("edges", &edges)])?)
}

/// Entries in weight-descending order, ties by medoid id.
fn by_weight(dk: &DiseaseKnowledge) -> Vec<&KnowledgeEntry> {
    let mut entries: Vec<&KnowledgeEntry> = dk.entries.iter().collect();
    entries.sort_by(|a, b| {
        b.weight
            .total_cmp(&a.weight)
            .then_with(|| a.medoid_emr_id.cmp(&b.medoid_emr_id))
    });
    entries
}

pub fn build_disease_prompt(dk: &DiseaseKnowledge, template: &PromptTemplate) -> Result<String, QuestionnaireError> {
    if dk.entries.is_empty() {
        return Err(QuestionnaireError::EmptyKnowledge);
    }
    template.check_layout(&[SectionKind::Task, SectionKind::Requirements, SectionKind::Payload])?;
    let mut payload = format!("Disease (ICD-10): {}\n", dk.disease_code);
    for (rank, entry) in by_weight(dk).into_iter().enumerate() {
        let net = &entry.network;
        let _ = write!(
            payload,
            "\n<pathway rank={} weight={:.4} records={} medoid={}>\n{}\nedges: {}\n</pathway>\n",
            rank + 1,
            entry.weight,
            entry.member_count,
            entry.medoid_emr_id,
            ordered_listing(&net.nodes, net),
            if net.edges.is_empty() {
                "none".to_string()
            } else {
                net.edges
                    .iter()
                    .map(|(s, d)| format!("[{s}] -> [{d}]"))
                    .collect::<Vec<_>>()
                    .join("; ")
            }
        );
    }
    Ok(template.render(&[("pathways", payload.trim_end())])?)
}

fn parse_kind(v: Option<&Value>) -> Option<Option<QuestionKind>> {
    match v {
        None | Some(Value::Null) => Some(None),
        Some(Value::String(s)) => match s.trim().to_ascii_lowercase().replace(['-', ' '], "_").as_str() {
            "multiple_choice" | "single_choice" | "choice" => Some(Some(QuestionKind::MultipleChoice)),
            "free_text" | "text" | "open" => Some(Some(QuestionKind::FreeText)),
            _ => None,
        },
        _ => None,
    }
}

fn parse_question(v: &Value, position: usize) -> Option<Question> {
    let obj = v.as_object()?;
    let text = obj.get("text")?.as_str()?.trim();
    if text.is_empty() {
        log::warn!("question {position}: empty text, dropped");
        return None;
    }
    let Some(declared) = parse_kind(obj.get("kind")) else {
        log::warn!("question {position}: unknown kind, dropped");
        return None;
    };
    let mut options: Vec<String> = match obj.get("options") {
        None | Some(Value::Null) => Vec::new(),
        Some(Value::Array(items)) => items
            .iter()
            .filter_map(Value::as_str)
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect(),
        Some(_) => {
            log::warn!("question {position}: options is not an array, dropped");
            return None;
        }
    };
    let kind = declared.unwrap_or(if options.len() >= 2 {
        QuestionKind::MultipleChoice
    } else {
        QuestionKind::FreeText
    });
    let allows_free_text = match kind {
        QuestionKind::MultipleChoice => {
            if options.len() < 2 {
                log::warn!(
                    "question {position}: multiple choice with {} option(s), dropped",
                    options.len()
                );
                return None;
            }
            obj.get("allows_free_text").and_then(Value::as_bool).unwrap_or(true)
        }
        QuestionKind::FreeText => {
            if !options.is_empty() {
                log::warn!("question {position}: free-text question carried options, ignored");
                options.clear();
            }
            true
        }
    };
    let mut source_assertion_ids: Vec<usize> = Vec::new();
    if let Some(Value::Array(ids)) = obj.get("source_assertion_ids") {
        for id in ids.iter().filter_map(Value::as_u64) {
            let id = id as usize;
            if !source_assertion_ids.contains(&id) {
                source_assertion_ids.push(id);
            }
        }
    }
    let rationale = obj
        .get("rationale")
        .and_then(Value::as_str)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string);
    Some(Question {
        id: 0,
        text: text.to_string(),
        kind,
        options,
        allows_free_text,
        source_assertion_ids,
        rationale,
    })
}

/// Parses the model's JSON question array, dropping malformed questions and
/// numbering the rest `0..n`.
pub fn parse_questionnaire(
    raw: &str,
    kind: QuestionnaireKind,
    subject: &str,
) -> Result<Questionnaire, QuestionnaireError> {
    let items = lenient::json_array(raw).ok_or(QuestionnaireError::EmptyQuestionnaire)?;
    let questions: Vec<Question> = items
        .iter()
        .enumerate()
        .filter_map(|(pos, v)| parse_question(v, pos))
        .enumerate()
        .map(|(id, q)| Question { id, ..q })
        .collect();
    if questions.is_empty() {
        return Err(QuestionnaireError::EmptyQuestionnaire);
    }
    Ok(Questionnaire {
        kind,
        subject: subject.to_string(),
        questions,
    })
}

fn run<G: TextGenerator + ?Sized>(
    gen: &G,
    prompt: &str,
    kind: QuestionnaireKind,
    subject: &str,
    settings: &GenerationSettings,
) -> Result<Questionnaire, QuestionnaireError> {
    let result = generate_with_repair(gen, prompt, REPAIR, settings, |raw| {
        parse_questionnaire(raw, kind, subject).map_err(|e| e.to_string())
    });
    match result {
        Ok(q) => Ok(q),
        Err(StageFailure::Provider(e)) => Err(e.into()),
        Err(StageFailure::Exhausted { attempts, reason }) => Err(QuestionnaireError::GenerationFailed {
            subject: subject.to_string(),
            attempts,
            reason,
        }),
    }
}

/// Questionnaire for one returning patient, built from that record's
/// assertions and causal network. Source ids that do not name an
/// assertion are dropped.
pub fn generate_personal<G: TextGenerator + ?Sized>(
    emr_id: &str,
    assertions: &[AtomicAssertion],
    net: &CausalNetwork,
    gen: &G,
    template: &PromptTemplate,
    settings: &GenerationSettings,
) -> Result<Questionnaire, QuestionnaireError> {
    let prompt = build_personal_prompt(assertions, net, template)?;
    let mut q = run(gen, &prompt, QuestionnaireKind::Personal, emr_id, settings)?;
    let n = assertions.len();
    for question in &mut q.questions {
        question.source_assertion_ids.retain(|&id| id < n);
    }
    Ok(q)
}

/// One merged questionnaire for a disease, pathways in weight order.
pub fn generate_disease<G: TextGenerator + ?Sized>(
    dk: &DiseaseKnowledge,
    gen: &G,
    template: &PromptTemplate,
    settings: &GenerationSettings,
) -> Result<Questionnaire, QuestionnaireError> {
    let prompt = build_disease_prompt(dk, template)?;
    run(gen, &prompt, QuestionnaireKind::Disease, &dk.disease_code, settings)
}

/// Assertion ids in `0..n` that no question cites.
pub fn uncovered_assertions(q: &Questionnaire, n: usize) -> Vec<usize> {
    let cited: BTreeSet<usize> = q
        .questions
        .iter()
        .flat_map(|x| x.source_assertion_ids.iter().copied())
        .collect();
    (0..n).filter(|i| !cited.contains(i)).collect()
}

/// Plain-text rendering for reading or printing.
pub fn render_text(q: &Questionnaire) -> String {
    let mut out = match q.kind {
        QuestionnaireKind::Personal => format!("Pre-consultation questionnaire (personal): {}\n", q.subject),
        QuestionnaireKind::Disease => format!("Pre-consultation questionnaire (disease {})\n", q.subject),
    };
    out.push_str(&"=".repeat(out.trim_end().chars().count()));
    out.push('\n');
    for question in &q.questions {
        let _ = writeln!(out, "\n{}. {}", question.id + 1, question.text);
        for opt in &question.options {
            let _ = writeln!(out, "   [ ] {opt}");
        }
        match question.kind {
            QuestionKind::MultipleChoice if question.allows_free_text => {
                out.push_str("   [ ] Other: ______________________\n");
            }
            QuestionKind::FreeText => out.push_str("   Answer: ______________________\n"),
            _ => {}
        }
    }
    out
}
