//! Prompt template checks shared with the acceptance run.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spatial_lm::corpus::ocr::{Annotations, KeyValue, QaPair, Statement};
use spatial_lm::corpus::{generate_corpus, SynthesisConfig};
use spatial_lm::instruct::*;

const DOC: &str = "acme invoice total 42";

pub fn owned(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

fn golden() -> BTreeMap<String, String> {
    include_str!("../golden/templates.tsv")
        .lines()
        .map(|l| {
            let (k, v) = l.split_once('\t').unwrap();
            (k.to_string(), v.to_string())
        })
        .collect()
}

fn doc() -> AnnotatedDoc {
    AnnotatedDoc {
        doc_id: "inv-1".into(),
        tokens: vec![],
        boxes: vec![],
        text: DOC.into(),
        annotations: Annotations {
            class_label: Some("invoice".into()),
            kie: vec![KeyValue {
                key: "total".into(),
                value: "42".into(),
            }],
            vqa: vec![QaPair {
                question: "What is the total?".into(),
                answers: vec!["42".into()],
            }],
            nli: vec![Statement {
                statement: "The total is 42".into(),
                entailed: true,
            }],
        },
    }
}

fn universe() -> Universe {
    Universe {
        keys: owned(&["date", "total", "vendor"]).into_iter().collect(),
        classes: owned(&["form", "invoice", "letter"]).into_iter().collect(),
    }
}

pub fn golden_templates() {
    let g = golden();
    let with = |instruction: String| format!("{DOC} {instruction}");
    let cases = [
        ("vqa", vqa_instruction("What is the total?")),
        ("nli", nli_instruction("The total is 42")),
        ("kie_extraction", kie_extraction_instruction("total")),
        ("kie_mcq", kie_mcq_instruction("42", &owned(&["date", "total", "vendor"]))),
        ("kie_internal_classification", kie_internal_instruction("42")),
        ("cls_mcq", cls_mcq_instruction(&owned(&["form", "invoice", "letter"]))),
        ("cls_internal_classification", cls_internal_instruction()),
    ];
    assert_eq!(cases.len(), g.len());
    for (name, instruction) in cases {
        assert_eq!(with(instruction), g[name], "{name}");
    }
}

pub fn rendered_records() {
    let d = doc();
    let u = universe();
    let cfg = RenderConfig {
        mcq_choices: 3,
        absent_keys: 1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let recs = render_all(&d, Split::Train, &u, &cfg, &mut rng).unwrap();
    let g = golden();
    for r in &recs {
        let p = r.prompt(&d.text);
        match (r.task, r.template) {
            (Task::Vqa, _) => assert_eq!(p, g["vqa"]),
            (Task::Nli, _) => assert_eq!((p.as_str(), r.response.as_str()), (g["nli"].as_str(), "Yes")),
            (Task::Kie, Template::Extraction) if r.response != "None" => assert_eq!(p, g["kie_extraction"]),
            (Task::Kie, Template::Extraction) => {
                let key = r.key.as_deref().unwrap();
                assert_ne!(key, "total");
                assert_eq!(p, format!("{DOC} {}", kie_extraction_instruction(key)));
            }
            (Task::Kie, Template::Mcq) => {
                assert_eq!(p, format!("{DOC} {}", kie_mcq_instruction("42", &r.choices)));
                let set: BTreeSet<_> = r.choices.iter().cloned().collect();
                assert_eq!(set, u.keys);
            }
            (Task::Kie, Template::InternalClassification) => assert_eq!(p, g["kie_internal_classification"]),
            (Task::Cls, Template::Mcq) => assert_eq!(p, format!("{DOC} {}", cls_mcq_instruction(&r.choices))),
            (Task::Cls, _) => assert_eq!(p, g["cls_internal_classification"]),
        }
    }
    assert_eq!(recs.len(), 8);
}

pub fn flattening() {
    let d = doc();
    let u = universe();
    let cfg = RenderConfig {
        mcq_choices: 3,
        absent_keys: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let train = render(&d, Task::Kie, Template::Mcq, Split::Train, &u, &cfg, &mut rng).unwrap();
    let flat = flatten_mcq(train.clone());
    assert_eq!(flat.len(), 3);
    let firsts: BTreeSet<_> = flat.iter().map(|r| r.choices[0].clone()).collect();
    assert_eq!(firsts.len(), 3);
    assert!(flat.iter().all(|r| r.response == "total" && r.instruction.contains("\"42\"")));

    let test = render(&d, Task::Cls, Template::Mcq, Split::Test, &u, &cfg, &mut rng).unwrap();
    assert_eq!(flatten_mcq(test.clone()), test);
    assert_eq!(test.len(), 1);
}

pub fn prompt_set_hygiene() {
    let corpus = generate_corpus(&SynthesisConfig::default()).unwrap();
    let set = PromptSet::build(&corpus, &RenderConfig::default(), 0).unwrap();
    assert_eq!(set.records.len(), set.encoded.len());

    let mut ids: BTreeMap<Split, BTreeSet<&str>> = BTreeMap::new();
    for r in &set.records {
        assert!(r.task.templates(r.split).contains(&r.template), "{r:?}");
        if !r.choices.is_empty() {
            assert!(r.choices.contains(&r.response));
        }
        ids.entry(r.split).or_default().insert(&r.doc_id);
    }
    assert!(ids[&Split::Train].is_disjoint(&ids[&Split::Test]));

    // Recount the table independently of `dataset_stats`.
    let stats = dataset_stats(&set.records);
    for task in Task::ALL {
        for split in [Split::Train, Split::Test] {
            let n = set.records.iter().filter(|r| r.task == task && r.split == split).count();
            assert_eq!(stats.get(task, split), n);
        }
    }
    assert!(stats.get(Task::Kie, Split::Test) > 0 && stats.get(Task::Cls, Split::Test) > 0);
    assert_eq!(dataset_stats(&[]).counts.values().flat_map(|m| m.values()).sum::<usize>(), 0);
}
