//! The welder pneumoconiosis record carried through every stage with
//! recorded model outputs.

mod common;

use common::fixture;
use emrq_core::extraction::{build_extraction_prompt, extract_assertions};
use emrq_core::network::{build_network_prompt, build_personal_network};
use emrq_core::prompt::{PromptTemplate, EXTRACTION, NETWORK, PERSONAL_QUESTIONNAIRE};
use emrq_core::providers::MockGenerator;
use emrq_core::questionnaire::{build_personal_prompt, generate_personal, order_assertions};
use emrq_core::{validate_network, EmrDocument, GenerationSettings};

fn read(name: &str) -> String {
    std::fs::read_to_string(fixture(name)).unwrap()
}

#[test]
fn recorded_walkthrough() {
    let emr: EmrDocument = serde_json::from_str(&read("walkthrough_emr.json")).unwrap();
    let settings = GenerationSettings::default();
    let t_extract = PromptTemplate::builtin(EXTRACTION, "en").unwrap();
    let t_network = PromptTemplate::builtin(NETWORK, "en").unwrap();
    let t_personal = PromptTemplate::builtin(PERSONAL_QUESTIONNAIRE, "en").unwrap();

    let p1 = build_extraction_prompt(&emr, &t_extract).unwrap();
    let gen = MockGenerator::new(0).with_canned(&p1, read("walkthrough_extraction.jsonl"));
    let assertions = extract_assertions(&emr, &gen, &t_extract, &settings).unwrap();
    assert_eq!(assertions.len(), 5);
    assert!(assertions
        .iter()
        .any(|a| a.assert == "Patient developed recurrent cough" && a.relative_time == "Over 20 years ago"));

    let p2 = build_network_prompt(&emr, &assertions, &t_network).unwrap();
    let gen = gen.with_canned(&p2, read("walkthrough_network.jsonl"));
    let net = build_personal_network(&emr, &assertions, &gen, &t_network, &settings).unwrap();
    assert!(validate_network(&net).is_empty());
    // The pneumoconiosis diagnosis leads into the respiratory symptoms.
    assert!(net.edges.contains(&(0, 2)));
    assert!(net.nodes[0].assert.contains("Pneumoconiosis"));
    assert_eq!(order_assertions(&net), vec![0, 1, 2, 4, 3]);

    let p3 = build_personal_prompt(&assertions, &net, &t_personal).unwrap();
    let gen = gen.with_canned(&p3, read("walkthrough_questionnaire.json"));
    let q = generate_personal(&emr.id, &assertions, &net, &gen, &t_personal, &settings).unwrap();
    assert!(q.validate().is_empty());
    assert!(q
        .questions
        .iter()
        .any(|x| x.text.contains("recurrent cough") && x.text.contains("start")));
    assert!(q
        .questions
        .iter()
        .any(|x| x.text.contains("chest CT") && x.text.contains("nodule")));
    assert_eq!(q.subject, "walkthrough");
}
