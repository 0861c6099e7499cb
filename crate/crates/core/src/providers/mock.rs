//! Deterministic offline providers.
//!
//! `MockGenerator` recognizes the pipeline's built-in prompts by their tag
//! line and answers with well-formed, content-derived output, so the whole
//! pipeline runs without a model. Everything is a pure function of
//! `(seed, input)` using SHA-256, which is stable across processes and
//! platforms.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, OnceLock};
use std::time::Duration;

use regex::Regex;
use serde_json::json;
use sha2::{Digest, Sha256};

use super::{check_text, Embedder, EmbeddingVector, GenerationRequest, ProviderError, TextGenerator};
use crate::prompt::{self, parse_assertion_line, tagged_block, tagged_blocks};

pub const MOCK_EMBEDDING_DIM: usize = 8;

fn digest(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().into()
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hex SHA-256 of a prompt, the key for canned mock responses.
pub(crate) fn prompt_key(prompt: &str) -> String {
    hex(&digest(&[prompt.as_bytes()]))
}

fn hashed_unit_cube(seed: u64, domain: &[u8], text: &str) -> [f64; MOCK_EMBEDDING_DIM] {
    let d = digest(&[&seed.to_le_bytes(), domain, text.as_bytes()]);
    let mut out = [0.0; MOCK_EMBEDDING_DIM];
    for (i, chunk) in d.chunks_exact(4).enumerate() {
        let x = u32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        out[i] = (x as f64 / u32::MAX as f64) * 2.0 - 1.0;
    }
    out
}

/// Function words that carry little meaning; their token vectors count at
/// [`STOPWORD_WEIGHT`], much like a low inverse document frequency.
const STOPWORDS: &[&str] = &[
    "a",
    "an",
    "and",
    "any",
    "are",
    "been",
    "can",
    "confirm",
    "did",
    "do",
    "does",
    "experienced",
    "for",
    "has",
    "have",
    "how",
    "in",
    "is",
    "it",
    "no",
    "not",
    "of",
    "or",
    "sure",
    "the",
    "to",
    "told",
    "was",
    "what",
    "when",
    "with",
    "yes",
    "you",
    "your",
];
const STOPWORD_WEIGHT: f64 = 0.2;

/// Seeded hash embedder with dimension 8 and unit-norm output.
///
/// The vector is the sum of per-token hash vectors (function words
/// down-weighted) plus a half-weight whole-text hash vector, then
/// normalized. Texts sharing content words therefore land closer together,
/// while byte-distinct texts still get distinct vectors.
#[derive(Debug, Clone)]
pub struct MockEmbedder {
    seed: u64,
}

impl MockEmbedder {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn raw(&self, text: &str) -> [f64; MOCK_EMBEDDING_DIM] {
        let whole = hashed_unit_cube(self.seed, b"text", text);
        let mut v = whole.map(|x| 0.5 * x);
        let lower = text.to_lowercase();
        for token in lower.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
            let t = hashed_unit_cube(self.seed, b"token", token);
            let w = if STOPWORDS.contains(&token) {
                STOPWORD_WEIGHT
            } else {
                1.0
            };
            for (acc, x) in v.iter_mut().zip(t) {
                *acc += w * x;
            }
        }
        if v.iter().all(|x| *x == 0.0) {
            v = whole;
        }
        v
    }
}

impl Embedder for MockEmbedder {
    fn dim(&self) -> usize {
        MOCK_EMBEDDING_DIM
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, ProviderError> {
        check_text(text)?;
        let raw = self.raw(text);
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        EmbeddingVector::new(raw.iter().map(|x| x / norm).collect())
    }
}

/// Offline text generator.
///
/// Canned responses (keyed by the SHA-256 of the exact prompt) take
/// precedence. Otherwise built-in stage prompts get a simulated answer and
/// any other prompt gets a short hash-derived string.
#[derive(Debug, Clone, Default)]
pub struct MockGenerator {
    seed: u64,
    canned: HashMap<String, String>,
    delay: Duration,
}

impl MockGenerator {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            canned: HashMap::new(),
            delay: Duration::ZERO,
        }
    }

    pub fn with_canned(mut self, prompt: &str, response: impl Into<String>) -> Self {
        self.canned.insert(prompt_key(prompt), response.into());
        self
    }

    /// Adds canned responses keyed by precomputed prompt hashes.
    pub fn with_canned_by_key<I>(mut self, entries: I) -> Self
    where
        I: IntoIterator<Item = (String, String)>,
    {
        self.canned.extend(entries);
        self
    }

    /// Sleeps this long on every call, for timing tests.
    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }

    fn simulate(&self, prompt: &str) -> String {
        let tag = prompt.lines().next().unwrap_or("").trim();
        let stage = tag.strip_prefix('[').and_then(|t| t.strip_suffix(']')).unwrap_or("");
        match stage {
            prompt::EXTRACTION => simulate::extraction(prompt),
            prompt::NETWORK => simulate::network(self.seed, prompt),
            prompt::PERSONAL_QUESTIONNAIRE => simulate::personal(prompt),
            prompt::DISEASE_QUESTIONNAIRE => simulate::disease(prompt),
            _ => {
                let d = digest(&[&self.seed.to_le_bytes(), prompt.as_bytes()]);
                format!("mock response {}", hex(&d[..8]))
            }
        }
    }
}

impl TextGenerator for MockGenerator {
    fn generate(&self, req: &GenerationRequest) -> Result<String, ProviderError> {
        req.validate()?;
        if !self.delay.is_zero() {
            std::thread::sleep(self.delay);
        }
        if let Some(text) = self.canned.get(&prompt_key(&req.prompt)) {
            return Ok(text.clone());
        }
        Ok(self.simulate(&req.prompt))
    }
}

/// Replays a fixed sequence of responses, one per call. Once the sequence
/// is exhausted the last entry repeats. Records every prompt it receives.
pub struct ScriptedGenerator {
    responses: Vec<Result<String, ProviderError>>,
    next: AtomicUsize,
    prompts: Mutex<Vec<String>>,
}

impl ScriptedGenerator {
    pub fn new<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::with_results(responses.into_iter().map(|s| Ok(s.into())))
    }

    pub fn with_results<I>(responses: I) -> Self
    where
        I: IntoIterator<Item = Result<String, ProviderError>>,
    {
        let responses: Vec<_> = responses.into_iter().collect();
        assert!(!responses.is_empty(), "scripted generator needs at least one response");
        Self {
            responses,
            next: AtomicUsize::new(0),
            prompts: Mutex::new(Vec::new()),
        }
    }

    pub fn calls(&self) -> usize {
        self.prompts.lock().expect("prompt log poisoned").len()
    }

    pub fn prompts(&self) -> Vec<String> {
        self.prompts.lock().expect("prompt log poisoned").clone()
    }
}

impl TextGenerator for ScriptedGenerator {
    fn generate(&self, req: &GenerationRequest) -> Result<String, ProviderError> {
        req.validate()?;
        self.prompts
            .lock()
            .expect("prompt log poisoned")
            .push(req.prompt.clone());
        let i = self.next.fetch_add(1, Ordering::SeqCst).min(self.responses.len() - 1);
        self.responses[i].clone()
    }
}

/// Wraps another generator and counts calls.
pub struct RecordingGenerator<G> {
    inner: G,
    prompts: Mutex<Vec<String>>,
}

impl<G: TextGenerator> RecordingGenerator<G> {
    pub fn new(inner: G) -> Self {
        Self {
            inner,
            prompts: Mutex::new(Vec::new()),
        }
    }

    pub fn calls(&self) -> usize {
        self.prompts.lock().expect("prompt log poisoned").len()
    }

    pub fn prompts(&self) -> Vec<String> {
        self.prompts.lock().expect("prompt log poisoned").clone()
    }
}

impl<G: TextGenerator> TextGenerator for RecordingGenerator<G> {
    fn generate(&self, req: &GenerationRequest) -> Result<String, ProviderError> {
        self.prompts
            .lock()
            .expect("prompt log poisoned")
            .push(req.prompt.clone());
        self.inner.generate(req)
    }
}

mod simulate {
    use super::*;

    fn time_pattern() -> &'static Regex {
        static RE: OnceLock<Regex> = OnceLock::new();
        RE.get_or_init(|| {
            Regex::new(
                r"(?ix)
                (?:\b(?:for|since)\s+)?
                (?P<time>
                    (?:(?:over|about|approximately|nearly|more\ than|almost)\s+)?
                    (?:\d+(?:\.\d+)?|one|two|three|four|five|six|seven|eight|nine|ten|several|a\ few)
                    \s+(?:hour|day|week|month|year)s?
                    (?:\s+ago)?
                )\b
                |
                (?P<zh>\d+(?:\.\d+)?\s*(?:小时|天|周|个月|月|年)(?:前|余)?)
                ",
            )
            .expect("valid time regex")
        })
    }

    fn split_clauses(text: &str) -> Vec<&str> {
        text.split(['.', ';', '!', '?', '\n', '。', '；', '！', '？', ',', '，'])
            .map(str::trim)
            .filter(|c| !c.is_empty())
            .collect()
    }

    fn normalize_time(t: &str) -> String {
        let t = t.split_whitespace().collect::<Vec<_>>().join(" ");
        let ascii = t.is_ascii();
        if ascii && !t.to_ascii_lowercase().ends_with("ago") {
            format!("{t} ago")
        } else {
            t
        }
    }

    fn capitalize(s: &str) -> String {
        let mut chars = s.chars();
        match chars.next() {
            Some(f) => f.to_uppercase().chain(chars).collect(),
            None => String::new(),
        }
    }

    /// One assertion per clause; a leading clause that holds only a time
    /// phrase is carried onto the next clause.
    pub fn extraction(prompt: &str) -> String {
        let record = tagged_block(prompt, "record").unwrap_or("");
        let mut lines = Vec::new();
        let mut pending_time: Option<String> = None;
        for clause in split_clauses(record) {
            let mut time = String::new();
            let mut statement = clause.to_string();
            if let Some(caps) = time_pattern().captures(clause) {
                let m = caps.get(0).expect("whole match");
                let t = caps
                    .name("time")
                    .or_else(|| caps.name("zh"))
                    .expect("one branch matches");
                time = normalize_time(t.as_str());
                statement = format!("{} {}", &clause[..m.start()], &clause[m.end()..]);
            }
            let statement = statement
                .split_whitespace()
                .collect::<Vec<_>>()
                .join(" ")
                .trim_matches(|c: char| !c.is_alphanumeric() && c != '\'' && c != ')')
                .to_string();
            if statement.chars().filter(|c| c.is_alphanumeric()).count() < 3 {
                if !time.is_empty() {
                    pending_time = Some(time);
                }
                continue;
            }
            if time.is_empty() {
                time = pending_time.take().unwrap_or_default();
            } else {
                pending_time = None;
            }
            lines.push(json!({"assert": capitalize(&statement), "relative time": time}).to_string());
        }
        if lines.is_empty() {
            "I could not identify any clinical facts in this record.".to_string()
        } else {
            lines.join("\n")
        }
    }

    fn numbered(block: &str) -> Vec<(usize, String, String)> {
        block
            .lines()
            .filter_map(parse_assertion_line)
            .map(|(i, a, t)| (i, a.to_string(), t.to_string()))
            .collect()
    }

    /// Links consecutive assertions when a content hash of the pair says so,
    /// plus occasional skip links. Identical assertion pairs always get the
    /// same decision, so similar records produce similar networks.
    pub fn network(seed: u64, prompt: &str) -> String {
        let nodes = numbered(tagged_block(prompt, "assertions").unwrap_or(""));
        let mut lines = Vec::new();
        for w in nodes.windows(2) {
            let d = digest(&[&seed.to_le_bytes(), b"adjacent", w[0].1.as_bytes(), w[1].1.as_bytes()]);
            if !d[0].is_multiple_of(4) {
                lines.push(json!({"from": w[0].0, "to": w[1].0}).to_string());
            }
        }
        for w in nodes.windows(3) {
            let d = digest(&[&seed.to_le_bytes(), b"skip", w[0].1.as_bytes(), w[2].1.as_bytes()]);
            if d[0].is_multiple_of(5) {
                lines.push(json!({"from": w[0].0, "to": w[2].0}).to_string());
            }
        }
        if lines.is_empty() {
            "NONE".to_string()
        } else {
            lines.join("\n")
        }
    }

    fn confirm_options() -> Vec<&'static str> {
        vec!["Yes", "No", "Not sure"]
    }

    pub fn personal(prompt: &str) -> String {
        let nodes = numbered(tagged_block(prompt, "assertions").unwrap_or(""));
        let questions: Vec<_> = nodes
            .iter()
            .map(|(i, a, t)| {
                let text = if t.is_empty() {
                    format!("Can you confirm: {a}?")
                } else {
                    format!("Can you confirm: {a} ({t})?")
                };
                json!({
                    "text": text,
                    "kind": "multiple_choice",
                    "options": confirm_options(),
                    "allows_free_text": true,
                    "source_assertion_ids": [i],
                    "rationale": format!("confirms assertion [{i}]"),
                })
            })
            .collect();
        serde_json::to_string_pretty(&questions).expect("json values serialize")
    }

    pub fn disease(prompt: &str) -> String {
        let mut seen = std::collections::HashSet::new();
        let mut questions = Vec::new();
        for (rank, (_, body)) in tagged_blocks(prompt, "pathway").into_iter().enumerate() {
            for (_, a, _) in numbered(body) {
                if seen.insert(a.to_lowercase()) {
                    questions.push(json!({
                        "text": format!("Have you experienced or been told: {a}?"),
                        "kind": "multiple_choice",
                        "options": confirm_options(),
                        "allows_free_text": true,
                        "rationale": format!("pathway {}", rank + 1),
                    }));
                }
            }
        }
        serde_json::to_string_pretty(&questions).expect("json values serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::PromptTemplate;
    use proptest::prelude::*;

    #[test]
    fn embedding_is_deterministic_unit_norm() {
        let m = MockEmbedder::new(42);
        let a = m.embed("fever").unwrap();
        let b = m.embed("fever").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), 8);
        assert!((a.norm() - 1.0).abs() < 1e-9);
        assert_ne!(a, MockEmbedder::new(43).embed("fever").unwrap());
        assert!(matches!(m.embed(""), Err(ProviderError::BadRequest(_))));
    }

    #[test]
    fn punctuation_only_text_still_embeds() {
        let v = MockEmbedder::new(1).embed("?!").unwrap();
        assert!((v.norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn canned_response_wins() {
        let g = MockGenerator::new(0).with_canned("hello", "world");
        assert_eq!(g.generate(&GenerationRequest::new("hello")).unwrap(), "world");
        let other = g.generate(&GenerationRequest::new("hello!")).unwrap();
        assert!(other.starts_with("mock response "));
        assert_eq!(other, g.generate(&GenerationRequest::new("hello!")).unwrap());
        assert!(matches!(
            g.generate(&GenerationRequest::new("")),
            Err(ProviderError::BadRequest(_))
        ));
    }

    #[test]
    fn simulated_extraction_splits_clauses_and_timing() {
        let t = PromptTemplate::builtin(prompt::EXTRACTION, "en").unwrap();
        let p = t
            .render(&[(
                "record",
                "Persistent headache for 3 days. Over 20 years ago, recurrent cough began; no fever.",
            )])
            .unwrap();
        let out = MockGenerator::new(0).generate(&GenerationRequest::new(p)).unwrap();
        let lines: Vec<serde_json::Value> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0]["assert"], "Persistent headache");
        assert_eq!(lines[0]["relative time"], "3 days ago");
        assert_eq!(lines[1]["assert"], "Recurrent cough began");
        assert_eq!(lines[1]["relative time"], "Over 20 years ago");
        assert_eq!(lines[2]["relative time"], "");
    }

    #[test]
    fn scripted_generator_replays_then_repeats() {
        let g = ScriptedGenerator::new(["a", "b"]);
        let r = GenerationRequest::new("p");
        assert_eq!(g.generate(&r).unwrap(), "a");
        assert_eq!(g.generate(&r).unwrap(), "b");
        assert_eq!(g.generate(&r).unwrap(), "b");
        assert_eq!(g.calls(), 3);
    }

    proptest! {
        #[test]
        fn mock_embedding_always_unit_norm(text in ".{1,60}", seed in any::<u64>()) {
            let v = MockEmbedder::new(seed).embed(&text).unwrap();
            prop_assert_eq!(v.dim(), MOCK_EMBEDDING_DIM);
            prop_assert!((v.norm() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn embed_batch_matches_mapping_embed(texts in proptest::collection::vec(".{1,20}", 0..8)) {
            let m = MockEmbedder::new(9);
            let batch = m.embed_batch(&texts).unwrap();
            let single: Vec<_> = texts.iter().map(|t| m.embed(t).unwrap()).collect();
            prop_assert_eq!(batch, single);
        }
    }
}
