//! Sectioned prompt templates with named `{{slot}}` placeholders.
//!
//! Every rendered prompt starts with a `[<template name>]` tag line, followed
//! by the sections in declaration order. Slot values are inserted verbatim
//! and never re-scanned for placeholders.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const EXTRACTION: &str = "atomic-assertion-extraction";
pub const NETWORK: &str = "causal-network";
pub const PERSONAL_QUESTIONNAIRE: &str = "personal-questionnaire";
pub const DISEASE_QUESTIONNAIRE: &str = "disease-questionnaire";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template {template:?} has no `{{{{{slot}}}}}` slot")]
    MissingSlot { template: String, slot: String },
    #[error("template {template:?} uses slot `{{{{{slot}}}}}` more than once")]
    RepeatedSlot { template: String, slot: String },
    #[error("template {template:?} references unknown slot `{{{{{slot}}}}}`")]
    UnknownSlot { template: String, slot: String },
    #[error("template {template:?} has an unterminated placeholder")]
    Unterminated { template: String },
    #[error("template {template:?}: {reason}")]
    Structure { template: String, reason: String },
    #[error("no built-in {stage:?} template for locale {locale:?}")]
    UnknownBuiltin { stage: String, locale: String },
    #[error("cannot parse template file: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SectionKind {
    Task,
    Requirements,
    Examples,
    Completion,
    Payload,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSection {
    pub kind: SectionKind,
    pub heading: String,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub name: String,
    pub locale: String,
    pub sections: Vec<PromptSection>,
}

impl PromptTemplate {
    pub fn from_toml_str(s: &str) -> Result<Self, TemplateError> {
        toml::from_str(s).map_err(|e| TemplateError::Parse(e.to_string()))
    }

    /// Built-in template for a stage (`EXTRACTION`, `NETWORK`, ...) and locale (`en`, `zh`).
    pub fn builtin(stage: &str, locale: &str) -> Result<Self, TemplateError> {
        let lang = locale.split(['-', '_']).next().unwrap_or(locale).to_ascii_lowercase();
        let sections = match (stage, lang.as_str()) {
            (EXTRACTION, "en") => en::extraction(),
            (EXTRACTION, "zh") => zh::extraction(),
            (NETWORK, "en") => en::network(),
            (NETWORK, "zh") => zh::network(),
            (PERSONAL_QUESTIONNAIRE, "en") => en::personal(),
            (PERSONAL_QUESTIONNAIRE, "zh") => zh::personal(),
            (DISEASE_QUESTIONNAIRE, "en") => en::disease(),
            (DISEASE_QUESTIONNAIRE, "zh") => zh::disease(),
            _ => {
                return Err(TemplateError::UnknownBuiltin {
                    stage: stage.to_string(),
                    locale: locale.to_string(),
                })
            }
        };
        Ok(Self {
            name: stage.to_string(),
            locale: lang,
            sections: sections
                .into_iter()
                .map(|(kind, heading, body)| PromptSection {
                    kind,
                    heading: heading.to_string(),
                    body: body.to_string(),
                })
                .collect(),
        })
    }

    /// Placeholder names in order of appearance (with repeats).
    pub fn placeholders(&self) -> Result<Vec<String>, TemplateError> {
        let mut out = Vec::new();
        for section in &self.sections {
            for piece in scan(&section.body).map_err(|_| TemplateError::Unterminated {
                template: self.name.clone(),
            })? {
                if let Piece::Slot(name) = piece {
                    out.push(name.to_string());
                }
            }
        }
        Ok(out)
    }

    /// Checks that each required slot appears exactly once and that no other
    /// slot is referenced.
    pub fn check_slots(&self, required: &[&str]) -> Result<(), TemplateError> {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for name in self.placeholders()? {
            *counts.entry(name).or_default() += 1;
        }
        for slot in required {
            match counts.get(*slot) {
                None => {
                    return Err(TemplateError::MissingSlot {
                        template: self.name.clone(),
                        slot: slot.to_string(),
                    })
                }
                Some(n) if *n > 1 => {
                    return Err(TemplateError::RepeatedSlot {
                        template: self.name.clone(),
                        slot: slot.to_string(),
                    })
                }
                _ => {}
            }
        }
        if let Some(unknown) = counts.keys().find(|k| !required.contains(&k.as_str())) {
            return Err(TemplateError::UnknownSlot {
                template: self.name.clone(),
                slot: unknown.clone(),
            });
        }
        Ok(())
    }

    /// Checks that the section kinds appear in the given relative order,
    /// each at least once, and that the payload is the final section.
    pub fn check_layout(&self, order: &[SectionKind]) -> Result<(), TemplateError> {
        let structure = |reason: String| TemplateError::Structure {
            template: self.name.clone(),
            reason,
        };
        let mut last = 0usize;
        for kind in order {
            let pos = self
                .sections
                .iter()
                .position(|s| s.kind == *kind)
                .ok_or_else(|| structure(format!("missing {kind:?} section")))?;
            if pos < last {
                return Err(structure(format!("{kind:?} section is out of order")));
            }
            last = pos;
        }
        if self.sections.last().map(|s| s.kind) != Some(SectionKind::Payload) {
            return Err(structure("payload must be the last section".into()));
        }
        Ok(())
    }

    pub fn sections_non_empty(&self) -> bool {
        self.sections.iter().all(|s| !s.body.trim().is_empty())
    }

    /// Renders the prompt. `slots` must cover exactly the template's placeholders.
    pub fn render(&self, slots: &[(&str, &str)]) -> Result<String, TemplateError> {
        let required: Vec<&str> = slots.iter().map(|(k, _)| *k).collect();
        self.check_slots(&required)?;
        let mut out = format!("[{}]\n", self.name);
        for section in &self.sections {
            out.push('\n');
            if !section.heading.is_empty() {
                out.push_str("## ");
                out.push_str(&section.heading);
                out.push('\n');
            }
            for piece in scan(&section.body).expect("checked by check_slots") {
                match piece {
                    Piece::Text(t) => out.push_str(t),
                    Piece::Slot(name) => {
                        let value = slots.iter().find(|(k, _)| *k == name).map(|(_, v)| *v).unwrap_or("");
                        out.push_str(value);
                    }
                }
            }
            if !out.ends_with('\n') {
                out.push('\n');
            }
        }
        Ok(out)
    }
}

impl fmt::Display for PromptTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.name, self.locale)
    }
}

enum Piece<'a> {
    Text(&'a str),
    Slot(&'a str),
}

fn scan(body: &str) -> Result<Vec<Piece<'_>>, ()> {
    let mut pieces = Vec::new();
    let mut rest = body;
    while let Some(start) = rest.find("{{") {
        if start > 0 {
            pieces.push(Piece::Text(&rest[..start]));
        }
        let after = &rest[start + 2..];
        let end = after.find("}}").ok_or(())?;
        pieces.push(Piece::Slot(after[..end].trim()));
        rest = &after[end + 2..];
    }
    if !rest.is_empty() {
        pieces.push(Piece::Text(rest));
    }
    Ok(pieces)
}

/// Finds the text between the last `<tag...>` opening and the following
/// `</tag>` closing. Used to read payload blocks back out of a prompt.
pub fn tagged_block<'a>(prompt: &'a str, tag: &str) -> Option<&'a str> {
    let open = format!("<{tag}");
    let close = format!("</{tag}>");
    let start = prompt.rfind(&open)?;
    let body_start = start + prompt[start..].find('>')? + 1;
    let end = body_start + prompt[body_start..].find(&close)?;
    Some(prompt[body_start..end].trim_matches('\n'))
}

/// All `<tag ...>body</tag>` blocks in order, as (attribute text, body).
pub fn tagged_blocks<'a>(prompt: &'a str, tag: &str) -> Vec<(&'a str, &'a str)> {
    let open = format!("<{tag}");
    let close = format!("</{tag}>");
    let mut out = Vec::new();
    let mut rest = prompt;
    while let Some(start) = rest.find(&open) {
        let Some(gt) = rest[start..].find('>') else { break };
        let attrs = rest[start + open.len()..start + gt].trim();
        let body_start = start + gt + 1;
        let Some(len) = rest[body_start..].find(&close) else {
            break;
        };
        out.push((attrs, rest[body_start..body_start + len].trim_matches('\n')));
        rest = &rest[body_start + len + close.len()..];
    }
    out
}

/// One numbered assertion line as it appears in prompts:
/// `[3] Patient has no fever` or `[4] Patient developed recurrent cough (relative time: Over 20 years ago)`.
pub fn assertion_line(a: &crate::model::AtomicAssertion) -> String {
    if a.relative_time.trim().is_empty() {
        format!("[{}] {}", a.id, a.assert)
    } else {
        format!("[{}] {} (relative time: {})", a.id, a.assert, a.relative_time)
    }
}

/// Inverse of [`assertion_line`]: `(index, statement, relative time)`.
pub fn parse_assertion_line(line: &str) -> Option<(usize, &str, &str)> {
    let line = line.trim();
    let rest = line.strip_prefix('[')?;
    let close = rest.find(']')?;
    let index = rest[..close].trim().parse().ok()?;
    let body = rest[close + 1..].trim();
    if let Some(stripped) = body.strip_suffix(')') {
        if let Some(pos) = stripped.rfind(" (relative time: ") {
            return Some((index, &stripped[..pos], &stripped[pos + " (relative time: ".len()..]));
        }
    }
    Some((index, body, ""))
}

type Sections = Vec<(SectionKind, &'static str, &'static str)>;

mod en {
    use super::SectionKind::*;
    use super::Sections;

    pub fn extraction() -> Sections {
        vec![
            (
                Task,
                "Task",
                "You are a clinical documentation specialist. Decompose the medical record below into atomic \
assertions. An atomic assertion states exactly one concrete medical fact or observation about the patient \
(a symptom, finding, diagnosis, exposure, test result, treatment or relevant negative), together with when \
it happened relative to the current visit.",
            ),
            (
                Requirements,
                "Output requirements",
                "- Output JSONL: one JSON object per line and nothing else.\n\
- Each object has exactly two keys: \"assert\" (the fact statement) and \"relative time\" (the timing).\n\
- One fact per object. Split statements that combine several facts, symptoms or findings.\n\
- Keep temporal information out of \"assert\"; put it in \"relative time\" relative to the visit \
(for example \"3 days ago\"). Use \"\" when the record states no timing.\n\
- Keep negative findings as their own assertions (for example \"Patient has no fever\").\n\
- Cover every clinically relevant fact in the record; do not invent facts that are not written there.",
            ),
            (
                Examples,
                "Example",
                "Input: The patient has had a persistent headache and fever for 3 days.\n\
Output:\n\
{\"assert\": \"patient has a persistent headache\", \"relative time\": \"3 days ago\"}\n\
{\"assert\": \"patient has a persistent fever\", \"relative time\": \"3 days ago\"}",
            ),
            (Payload, "Medical record", "<record>\n{{record}}\n</record>"),
        ]
    }

    pub fn network() -> Sections {
        vec![
            (
                Task,
                "Task",
                "You are a clinical reasoning assistant. Using the medical record and its numbered atomic \
assertions, build the patient's personal causal network: a directed graph whose nodes are the assertions \
and whose edges point from a cause to its effect.",
            ),
            (
                Requirements,
                "Generation requirements",
                "- Consider causal relationships such as exposure leading to disease, disease leading to \
symptom, finding leading to diagnosis, and condition leading to treatment.\n\
- Refer to assertions only by their bracketed index.\n\
- Output JSONL: one edge per line as {\"from\": <cause index>, \"to\": <effect index>}, nothing else.\n\
- Never link an assertion to itself and never repeat an edge.\n\
- If the record supports no causal link at all, output the single line NONE.",
            ),
            (
                Completion,
                "Completion criteria",
                "The network is complete when every causal link stated or clearly implied by the record is \
present, and every assertion that takes part in any such link is connected. Assertions that are unrelated to \
the others stay isolated.",
            ),
            (
                Payload,
                "Input",
                "<record>\n{{record}}\n</record>\n\n<assertions>\n{{assertions}}\n</assertions>",
            ),
        ]
    }

    pub fn personal() -> Sections {
        vec![
            (
                Task,
                "Task",
                "You are preparing a pre-consultation questionnaire for a returning patient. The patient's \
atomic assertions are listed below in the logical order of their personal causal network, followed by the \
network edges. Write patient-friendly questions that let the patient confirm, correct and update each fact \
before the visit.",
            ),
            (
                Requirements,
                "Output requirements",
                "- Ask one or more questions for every assertion; every assertion index must appear in some \
question's \"source_assertion_ids\".\n\
- Follow the given assertion order so that causes are asked about before their effects.\n\
- Prefer multiple-choice questions with at least two options; the patient can always add free text.\n\
- Use plain language a patient understands.\n\
- Output a JSON array and nothing else. Each element is an object with keys \"text\" (string), \"kind\" \
(\"multiple_choice\" or \"free_text\"), \"options\" (array of strings, empty for free_text), \
\"allows_free_text\" (boolean), \"source_assertion_ids\" (array of assertion indices) and \"rationale\" \
(short string).",
            ),
            (
                Payload,
                "Input",
                "<assertions>\n{{assertions}}\n</assertions>\n\n<edges>\n{{edges}}\n</edges>",
            ),
        ]
    }

    pub fn disease() -> Sections {
        vec![
            (
                Task,
                "Task",
                "You are preparing a standard pre-consultation questionnaire for first-visit patients with \
the disease below. The disease is described by representative clinical pathways, each a causal network of \
atomic assertions with a weight giving how common the pathway is among patients.",
            ),
            (
                Requirements,
                "Output requirements",
                "- Produce one comprehensive questionnaire that covers the pathways in the order given, \
higher-weight pathways first.\n\
- Merge questions about facts shared by several pathways so each topic is asked once, keeping a logical \
flow from causes and exposures to symptoms, findings and treatment.\n\
- Prefer multiple-choice questions with at least two options; the patient can always add free text.\n\
- Output a JSON array and nothing else. Each element is an object with keys \"text\" (string), \"kind\" \
(\"multiple_choice\" or \"free_text\"), \"options\" (array of strings, empty for free_text), \
\"allows_free_text\" (boolean) and \"rationale\" (short string naming the pathway it comes from).",
            ),
            (Payload, "Disease knowledge", "{{pathways}}"),
        ]
    }
}

mod zh {
    use super::SectionKind::*;
    use super::Sections;

    pub fn extraction() -> Sections {
        vec![
            (
                Task,
                "任务",
                "你是一名临床病历整理专家。请将下面的病历拆解为原子断言。每条原子断言只陈述一个具体的医学事实\
或观察（症状、体征、诊断、暴露史、检查结果、治疗或有意义的阴性表现），并注明其相对于本次就诊的发生时间。",
            ),
            (
                Requirements,
                "输出要求",
                "- 以 JSONL 格式输出：每行一个 JSON 对象，不要输出其他内容。\n\
- 每个对象只包含两个键：\"assert\"（事实陈述）和 \"relative time\"（相对时间）。\n\
- 每个对象只表达一个事实；包含多个事实的句子必须拆开。\n\
- 时间信息不要写进 \"assert\"，而是写进 \"relative time\"（例如 \"3天前\"）；病历未说明时间时填 \"\"。\n\
- 阴性表现单独成条（例如 \"患者无发热\"）。\n\
- 覆盖病历中所有有临床意义的事实，不得编造病历中没有的内容。",
            ),
            (
                Examples,
                "示例",
                "输入：患者持续头痛、发热3天。\n\
输出：\n\
{\"assert\": \"患者持续头痛\", \"relative time\": \"3天前\"}\n\
{\"assert\": \"患者持续发热\", \"relative time\": \"3天前\"}",
            ),
            (Payload, "病历", "<record>\n{{record}}\n</record>"),
        ]
    }

    pub fn network() -> Sections {
        vec![
            (
                Task,
                "任务",
                "你是一名临床推理助手。请根据病历原文及其编号的原子断言，构建该患者的个人因果网络：节点为原子断言，\
有向边从原因指向结果。",
            ),
            (
                Requirements,
                "生成要求",
                "- 关注因果关系，例如暴露导致疾病、疾病导致症状、检查发现支持诊断、病情导致治疗。\n\
- 只用方括号中的编号指代原子断言。\n\
- 以 JSONL 格式输出，每行一条边：{\"from\": <原因编号>, \"to\": <结果编号>}，不要输出其他内容。\n\
- 不得出现自环，不得重复输出同一条边。\n\
- 如果病历不支持任何因果关系，只输出一行 NONE。",
            ),
            (
                Completion,
                "完成标准",
                "当病历中明确陈述或清楚隐含的因果关系全部列出、且参与任何因果关系的断言都已连接时，网络即完成。\
与其他断言无关的断言保持孤立。",
            ),
            (
                Payload,
                "输入",
                "<record>\n{{record}}\n</record>\n\n<assertions>\n{{assertions}}\n</assertions>",
            ),
        ]
    }

    pub fn personal() -> Sections {
        vec![
            (
                Task,
                "任务",
                "你正在为复诊患者准备诊前问卷。下面按个人因果网络的逻辑顺序列出了患者的原子断言及网络中的边。\
请编写通俗易懂的问题，让患者在就诊前确认、更正并补充每一条事实。",
            ),
            (
                Requirements,
                "输出要求",
                "- 每条断言至少对应一个问题；每个断言编号都必须出现在某个问题的 \"source_assertion_ids\" 中。\n\
- 按给定的断言顺序提问，先问原因，再问结果。\n\
- 以选择题为主，至少两个选项；患者始终可以补充文字说明。\n\
- 只输出一个 JSON 数组。每个元素包含键 \"text\"、\"kind\"（\"multiple_choice\" 或 \"free_text\"）、\
\"options\"（字符串数组，填空题为空数组）、\"allows_free_text\"（布尔值）、\"source_assertion_ids\"（断言编号数组）\
和 \"rationale\"（简短说明）。",
            ),
            (
                Payload,
                "输入",
                "<assertions>\n{{assertions}}\n</assertions>\n\n<edges>\n{{edges}}\n</edges>",
            ),
        ]
    }

    pub fn disease() -> Sections {
        vec![
            (
                Task,
                "任务",
                "你正在为下述疾病的初诊患者准备标准化诊前问卷。该疾病由若干代表性临床路径描述，每条路径是由原子断言\
构成的因果网络，并带有表示该路径在患者中常见程度的权重。",
            ),
            (
                Requirements,
                "输出要求",
                "- 生成一份完整问卷，按给定顺序覆盖各条路径，权重高的路径优先。\n\
- 多条路径共有的事实合并为一个问题，从病因和暴露到症状、检查和治疗保持逻辑顺序。\n\
- 以选择题为主，至少两个选项；患者始终可以补充文字说明。\n\
- 只输出一个 JSON 数组。每个元素包含键 \"text\"、\"kind\"（\"multiple_choice\" 或 \"free_text\"）、\
\"options\"（字符串数组）、\"allows_free_text\"（布尔值）和 \"rationale\"（注明来源路径）。",
            ),
            (Payload, "疾病知识", "{{pathways}}"),
        ]
    }
}
