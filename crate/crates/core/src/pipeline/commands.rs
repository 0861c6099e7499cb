use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::store::{
    self, read_json, read_jsonl, read_jsonl_or_empty, require, write_json, write_jsonl, AssertionRecord, Timings,
};
use super::{Clock, Outcome, Pipeline, PipelineError};
use crate::clustering::build_disease_knowledge;
use crate::evaluation::measure_generation;
use crate::evaluation::{build_report, check_tau, render_table, CorpusReport, ExternalScore, KeyFactSet};
use crate::extraction::extract_assertions;
use crate::model::{
    validate_corpus, AtomicAssertion, CausalNetwork, DiseaseKnowledge, EmrDocument, Questionnaire, QuestionnaireKind,
};
use crate::network::build_personal_network;
use crate::prompt::{DISEASE_QUESTIONNAIRE, EXTRACTION, NETWORK, PERSONAL_QUESTIONNAIRE};
use crate::questionnaire::{generate_disease, generate_personal, render_text};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SynthesizeTarget {
    All,
    Disease(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GenerateTarget {
    Personal(String),
    Disease(String),
    /// Every record with a network and every synthesized disease.
    All,
}

/// Contents of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRun {
    /// Digest of every input, so an unchanged rerun can reuse the report.
    pub fingerprint: String,
    pub tau: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub personal: Option<CorpusReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disease: Option<CorpusReport>,
}

impl EvaluationRun {
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (title, report) in [
            ("Personal questionnaires", &self.personal),
            ("Disease questionnaires", &self.disease),
        ] {
            if let Some(r) = report {
                if !out.is_empty() {
                    out.push('\n');
                }
                out.push_str(title);
                out.push('\n');
                out.push_str(&render_table(r));
            }
        }
        out
    }
}

fn group_assertions(records: Vec<AssertionRecord>) -> HashMap<String, Vec<AssertionRecord>> {
    let mut grouped: HashMap<String, Vec<AssertionRecord>> = HashMap::new();
    for r in records {
        grouped.entry(r.emr_id.clone()).or_default().push(r);
    }
    grouped
}

fn to_assertions(records: &[AssertionRecord]) -> Vec<AtomicAssertion> {
    records.iter().map(AssertionRecord::to_assertion).collect()
}

impl Pipeline {
    fn load_corpus(&self) -> Result<Vec<EmrDocument>, PipelineError> {
        let path = self.run.corpus();
        require(&path, "extract --corpus")?;
        read_jsonl(&path)
    }

    fn load_assertions(&self) -> Result<HashMap<String, Vec<AssertionRecord>>, PipelineError> {
        let path = self.run.assertions();
        require(&path, "extract")?;
        Ok(group_assertions(read_jsonl(&path)?))
    }

    fn load_networks(&self) -> Result<Vec<CausalNetwork>, PipelineError> {
        let path = self.run.networks();
        require(&path, "network")?;
        read_jsonl(&path)
    }

    /// Stage 1. With `corpus`, the records are validated and copied into the
    /// run directory first; without it the copy from an earlier run is used.
    pub fn extract(&self, corpus: Option<&Path>) -> Result<Outcome, PipelineError> {
        let docs: Vec<EmrDocument> = match corpus {
            Some(path) => {
                let docs: Vec<EmrDocument> = read_jsonl(path)?;
                let report = validate_corpus(&docs);
                if !report.is_empty() {
                    return Err(PipelineError::InvalidCorpus(report.to_string()));
                }
                write_jsonl(&self.run.corpus(), &docs)?;
                docs
            }
            None => self.load_corpus()?,
        };
        let existing = group_assertions(read_jsonl_or_empty(&self.run.assertions())?);
        let template = self.template(EXTRACTION)?;
        let settings = self.config.generation();

        let todo: Vec<&EmrDocument> = docs
            .iter()
            .filter(|d| self.force || !existing.contains_key(&d.id))
            .collect();
        let fresh: HashMap<&str, _> = self.pool.install(|| {
            todo.par_iter()
                .map(|d| {
                    (
                        d.id.as_str(),
                        extract_assertions(d, self.generator.as_ref(), &template, &settings),
                    )
                })
                .collect()
        });

        let mut outcome = Outcome::default();
        let mut rows = Vec::new();
        for doc in &docs {
            match fresh.get(doc.id.as_str()) {
                Some(Ok(assertions)) => {
                    outcome.produced += 1;
                    rows.extend(assertions.iter().map(|a| AssertionRecord::from_assertion(&doc.id, a)));
                }
                Some(Err(e)) => outcome.fail(&doc.id, e),
                None => {
                    outcome.cached += 1;
                    rows.extend(existing[&doc.id].iter().cloned());
                }
            }
        }
        write_jsonl(&self.run.assertions(), &rows)?;
        Ok(outcome)
    }

    /// Stage 2a. A stored network is reused while its nodes still equal the
    /// record's assertions.
    pub fn network(&self) -> Result<Outcome, PipelineError> {
        let docs = self.load_corpus()?;
        let assertions = self.load_assertions()?;
        let existing: HashMap<String, CausalNetwork> = read_jsonl_or_empty::<CausalNetwork>(&self.run.networks())?
            .into_iter()
            .map(|n| (n.emr_id.clone(), n))
            .collect();
        let template = self.template(NETWORK)?;
        let settings = self.config.generation();

        let inputs: Vec<(&EmrDocument, Vec<AtomicAssertion>)> = docs
            .iter()
            .filter_map(|d| assertions.get(&d.id).map(|r| (d, to_assertions(r))))
            .collect();
        let is_cached =
            |d: &EmrDocument, a: &[AtomicAssertion]| !self.force && existing.get(&d.id).is_some_and(|n| n.nodes == a);
        let fresh: HashMap<&str, _> = self.pool.install(|| {
            inputs
                .par_iter()
                .filter(|(d, a)| !is_cached(d, a))
                .map(|(d, a)| {
                    (
                        d.id.as_str(),
                        build_personal_network(d, a, self.generator.as_ref(), &template, &settings),
                    )
                })
                .collect()
        });

        let mut outcome = Outcome::default();
        let mut rows = Vec::new();
        for (doc, _) in &inputs {
            match fresh.get(doc.id.as_str()) {
                Some(Ok(net)) => {
                    outcome.produced += 1;
                    rows.push(net.clone());
                }
                Some(Err(e)) => outcome.fail(&doc.id, e),
                None => {
                    outcome.cached += 1;
                    rows.push(existing[&doc.id].clone());
                }
            }
        }
        write_jsonl(&self.run.networks(), &rows)?;
        Ok(outcome)
    }

    /// Stage 2b/c: per-disease knowledge. A stored file is reused while its
    /// cutoff matches and it still accounts for every usable network.
    pub fn synthesize(&self, target: &SynthesizeTarget, cutoff: Option<f64>) -> Result<Outcome, PipelineError> {
        let cutoff = cutoff.unwrap_or(self.config.cluster_cutoff);
        if !(0.0..=2.0).contains(&cutoff) {
            return Err(PipelineError::Config(format!("cutoff must be in [0, 2], got {cutoff}")));
        }
        let docs = self.load_corpus()?;
        let networks: HashMap<String, CausalNetwork> = self
            .load_networks()?
            .into_iter()
            .map(|n| (n.emr_id.clone(), n))
            .collect();

        let mut groups: BTreeMap<&str, Vec<CausalNetwork>> = BTreeMap::new();
        for doc in &docs {
            if doc.disease_code.trim().is_empty() {
                log::warn!("{}: no disease code, left out of synthesis", doc.id);
                continue;
            }
            if let Some(net) = networks.get(&doc.id) {
                groups.entry(doc.disease_code.as_str()).or_default().push(net.clone());
            }
        }
        if let SynthesizeTarget::Disease(code) = target {
            if !docs.iter().any(|d| &d.disease_code == code) {
                return Err(PipelineError::UnknownSubject {
                    what: "disease code",
                    id: code.clone(),
                });
            }
            groups.entry(code.as_str()).or_default();
            groups.retain(|k, _| k == code);
        }

        let opts = self.config.embed_options();
        let is_cached = |code: &str, nets: &[CausalNetwork]| {
            if self.force {
                return false;
            }
            let usable = nets.iter().filter(|n| n.has_edges()).count();
            read_json::<DiseaseKnowledge>(&self.run.knowledge(code)).is_ok_and(|dk| {
                dk.cutoff == cutoff && dk.entries.iter().map(|e| e.member_count).sum::<usize>() == usable
            })
        };
        let results: Vec<(&str, Option<Result<DiseaseKnowledge, String>>)> = self.pool.install(|| {
            groups
                .par_iter()
                .map(|(code, nets)| {
                    if is_cached(code, nets) {
                        return (*code, None);
                    }
                    let built = build_disease_knowledge(code, nets, &self.embedder, &opts, cutoff)
                        .map_err(|e| e.to_string())
                        .and_then(|dk| {
                            let report = dk.validate();
                            if report.is_empty() {
                                Ok(dk)
                            } else {
                                Err(format!("invalid knowledge: {report}"))
                            }
                        });
                    (*code, Some(built))
                })
                .collect()
        });

        let mut outcome = Outcome::default();
        for (code, result) in results {
            match result {
                None => outcome.cached += 1,
                Some(Ok(dk)) => {
                    write_json(&self.run.knowledge(code), &dk)?;
                    outcome.produced += 1;
                }
                Some(Err(e)) => outcome.fail(code, e),
            }
        }
        Ok(outcome)
    }

    fn knowledge_codes(&self) -> Result<Vec<String>, PipelineError> {
        let dir = self.run.knowledge_dir();
        if !dir.exists() {
            return Ok(Vec::new());
        }
        let mut codes = Vec::new();
        for entry in std::fs::read_dir(&dir).map_err(|e| PipelineError::io(&dir, e))? {
            let path = entry.map_err(|e| PipelineError::io(&dir, e))?.path();
            if path.extension().is_some_and(|x| x == "json") {
                codes.push(read_json::<DiseaseKnowledge>(&path)?.disease_code);
            }
        }
        codes.sort();
        Ok(codes)
    }

    /// Stage 3. Generation times are kept in `timings.json` for evaluation.
    pub fn generate(&self, target: &GenerateTarget) -> Result<Outcome, PipelineError> {
        let mut personal: Vec<String> = Vec::new();
        let mut disease: Vec<String> = Vec::new();
        match target {
            GenerateTarget::Personal(id) => personal.push(id.clone()),
            GenerateTarget::Disease(code) => disease.push(code.clone()),
            GenerateTarget::All => {
                personal = self.load_networks()?.into_iter().map(|n| n.emr_id).collect();
                disease = self.knowledge_codes()?;
            }
        }

        let mut personal_inputs = Vec::new();
        if !personal.is_empty() {
            let assertions = self.load_assertions()?;
            let networks: HashMap<String, CausalNetwork> = self
                .load_networks()?
                .into_iter()
                .map(|n| (n.emr_id.clone(), n))
                .collect();
            for id in &personal {
                let (Some(records), Some(net)) = (assertions.get(id), networks.get(id)) else {
                    return Err(PipelineError::UnknownSubject {
                        what: "record with a network",
                        id: id.clone(),
                    });
                };
                personal_inputs.push((id.clone(), to_assertions(records), net.clone()));
            }
        }
        let mut disease_inputs = Vec::new();
        for code in &disease {
            let path = self.run.knowledge(code);
            require(&path, &format!("synthesize --disease {code}"))?;
            disease_inputs.push(read_json::<DiseaseKnowledge>(&path)?);
        }

        let settings = self.config.generation();
        let personal_template = self.template(PERSONAL_QUESTIONNAIRE)?;
        let disease_template = self.template(DISEASE_QUESTIONNAIRE)?;
        let gen = self.generator.as_ref();
        let fresh = |kind, subject: &str| self.force || !self.run.questionnaire(kind, subject).exists();

        type Generated = (QuestionnaireKind, String, Option<(f64, Result<Questionnaire, String>)>);
        let timed = |task: &dyn Fn() -> Result<Questionnaire, String>| {
            let t = measure_generation(task);
            let secs = match self.clock {
                Clock::Wall => t.elapsed_sec,
                Clock::Fixed(s) => s,
            };
            (secs, t.result)
        };
        let results: Vec<Generated> = self.pool.install(|| {
            let p = personal_inputs.par_iter().map(|(id, a, net)| {
                let kind = QuestionnaireKind::Personal;
                let out = fresh(kind, id).then(|| {
                    timed(&|| {
                        generate_personal(id, a, net, gen, &personal_template, &settings).map_err(|e| e.to_string())
                    })
                });
                (kind, id.clone(), out)
            });
            let d = disease_inputs.par_iter().map(|dk| {
                let kind = QuestionnaireKind::Disease;
                let out = fresh(kind, &dk.disease_code).then(|| {
                    timed(&|| generate_disease(dk, gen, &disease_template, &settings).map_err(|e| e.to_string()))
                });
                (kind, dk.disease_code.clone(), out)
            });
            p.chain(d).collect()
        });

        let mut timings: Timings = if self.run.timings().exists() {
            read_json(&self.run.timings())?
        } else {
            Timings::new()
        };
        let mut outcome = Outcome::default();
        for (kind, subject, result) in results {
            match result {
                None => outcome.cached += 1,
                Some((secs, Ok(q))) => {
                    let report = q.validate();
                    if !report.is_empty() {
                        outcome.fail(&subject, format!("invalid questionnaire: {report}"));
                        continue;
                    }
                    write_json(&self.run.questionnaire(kind, &subject), &q)?;
                    store::write_atomic(&self.run.questionnaire_text(kind, &subject), render_text(&q).as_bytes())?;
                    timings.entry(kind).or_default().insert(subject, secs);
                    outcome.produced += 1;
                }
                Some((secs, Err(e))) => outcome.fail(&subject, format!("{e} (after {secs:.3} s)")),
            }
        }
        if outcome.produced > 0 {
            write_json(&self.run.timings(), &timings)?;
        }
        Ok(outcome)
    }

    fn load_questionnaires(&self, kind: QuestionnaireKind) -> Result<Vec<(PathBuf, Questionnaire)>, PipelineError> {
        let dir = self.run.questionnaire_dir(kind);
        if !dir.exists() {
            return Ok(Vec::new());
        }
        let mut paths = Vec::new();
        for entry in std::fs::read_dir(&dir).map_err(|e| PipelineError::io(&dir, e))? {
            let path = entry.map_err(|e| PipelineError::io(&dir, e))?.path();
            if path.extension().is_some_and(|x| x == "json") {
                paths.push(path);
            }
        }
        paths.sort();
        paths.into_iter().map(|p| Ok((p.clone(), read_json(&p)?))).collect()
    }

    fn fact_sets(
        &self,
        kind: QuestionnaireKind,
        questionnaires: &[Questionnaire],
        annotated: &HashMap<String, KeyFactSet>,
    ) -> Result<Vec<KeyFactSet>, PipelineError> {
        let mut assertions = None;
        let mut sets = Vec::new();
        for q in questionnaires {
            if let Some(fs) = annotated.get(&q.subject) {
                sets.push(fs.clone());
                continue;
            }
            match kind {
                QuestionnaireKind::Personal => {
                    if assertions.is_none() {
                        assertions = Some(self.load_assertions()?);
                    }
                    if let Some(records) = assertions.as_ref().and_then(|a| a.get(&q.subject)) {
                        sets.push(KeyFactSet::from_assertions(&q.subject, &to_assertions(records)));
                    }
                }
                QuestionnaireKind::Disease => {
                    let path = self.run.knowledge(&q.subject);
                    if path.exists() {
                        sets.push(KeyFactSet::from_knowledge(&read_json(&path)?));
                    }
                }
            }
        }
        Ok(sets)
    }

    /// Scores every stored questionnaire and writes `report.json` and
    /// `report.txt`. Annotated key facts win over facts derived from the
    /// record's assertions or the disease's representative networks.
    pub fn evaluate(&self, tau: Option<f64>) -> Result<(Outcome, EvaluationRun), PipelineError> {
        let tau = tau.unwrap_or(self.config.tau);
        check_tau(tau)?;
        let personal = self.load_questionnaires(QuestionnaireKind::Personal)?;
        let disease = self.load_questionnaires(QuestionnaireKind::Disease)?;
        if personal.is_empty() && disease.is_empty() {
            return Err(PipelineError::MissingArtifact {
                path: self.run.root().join("questionnaires"),
                produced_by: "generate".into(),
            });
        }
        require(&self.run.timings(), "generate")?;
        let timings: Timings = read_json(&self.run.timings())?;

        let keyfacts_path = self.config.keyfacts.clone().unwrap_or_else(|| self.run.keyfacts());
        let annotated: HashMap<String, KeyFactSet> = if self.config.keyfacts.is_some() {
            read_jsonl::<KeyFactSet>(&keyfacts_path)?
        } else {
            read_jsonl_or_empty(&keyfacts_path)?
        }
        .into_iter()
        .map(|f| (f.subject.clone(), f))
        .collect();
        let scores: Vec<ExternalScore> = match &self.config.external_scores {
            Some(path) => read_jsonl(path)?,
            None => read_jsonl_or_empty(&self.run.root().join("external_scores.jsonl"))?,
        };

        let mut inputs = Vec::new();
        for (kind, stored) in [
            (QuestionnaireKind::Personal, personal),
            (QuestionnaireKind::Disease, disease),
        ] {
            let qs: Vec<Questionnaire> = stored.into_iter().map(|(_, q)| q).collect();
            let facts = self.fact_sets(kind, &qs, &annotated)?;
            inputs.push((kind, qs, facts));
        }

        let mut hasher = Sha256::new();
        let digest_part = |h: &mut Sha256, v: &dyn erased::Json| {
            h.update(v.json().as_bytes());
            h.update([0u8]);
        };
        digest_part(&mut hasher, &tau);
        digest_part(&mut hasher, &self.config.embed_options());
        digest_part(&mut hasher, &(format!("{:?}", self.config.provider), self.config.seed));
        digest_part(&mut hasher, &timings);
        digest_part(&mut hasher, &scores);
        for (_, qs, facts) in &inputs {
            digest_part(&mut hasher, qs);
            digest_part(&mut hasher, facts);
        }
        let fingerprint: String = hasher.finalize().iter().map(|b| format!("{b:02x}")).collect();

        if !self.force && self.run.report().exists() {
            if let Ok(stored) = read_json::<EvaluationRun>(&self.run.report()) {
                if stored.fingerprint == fingerprint {
                    return Ok((
                        Outcome {
                            cached: 1,
                            ..Outcome::default()
                        },
                        stored,
                    ));
                }
            }
        }

        let mut run = EvaluationRun {
            fingerprint,
            tau,
            personal: None,
            disease: None,
        };
        for (kind, qs, facts) in inputs {
            if qs.is_empty() {
                continue;
            }
            let kind_timings = timings.get(&kind).cloned().unwrap_or_default();
            let report = build_report(&qs, &facts, &kind_timings, &scores, &self.embedder, tau)?;
            match kind {
                QuestionnaireKind::Personal => run.personal = Some(report),
                QuestionnaireKind::Disease => run.disease = Some(report),
            }
        }
        write_json(&self.run.report(), &run)?;
        store::write_atomic(&self.run.report_text(), run.render().as_bytes())?;
        Ok((
            Outcome {
                produced: 1,
                ..Outcome::default()
            },
            run,
        ))
    }

    /// The stored evaluation as a text table.
    pub fn report(&self) -> Result<String, PipelineError> {
        let path = self.run.report();
        require(&path, "evaluate")?;
        Ok(read_json::<EvaluationRun>(&path)?.render())
    }
}

/// Object-safe serialization for fingerprinting heterogeneous inputs.
mod erased {
    pub trait Json {
        fn json(&self) -> String;
    }

    impl<T: serde::Serialize + ?Sized> Json for T {
        fn json(&self) -> String {
            serde_json::to_string(self).unwrap_or_default()
        }
    }
}
