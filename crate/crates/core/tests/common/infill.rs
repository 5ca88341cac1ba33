//! Fuzzed block documents and the infill round-trip check.

#![allow(dead_code)]

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spatial_lm::infill::{build_infill_sequence, reconstruct, sample_blocks, BlockDocument, InfillExample, SpecialVocab};
use spatial_lm::spatial::BBox;

const TEXT_VOCAB: u32 = 100;

pub fn specials() -> SpecialVocab {
    SpecialVocab::after(TEXT_VOCAB)
}

/// Random document: block lengths, then one token and one box per position.
pub fn arb_doc() -> impl Strategy<Value = BlockDocument> {
    prop::collection::vec(1usize..6, 1..25)
        .prop_flat_map(|lens| {
            let n: usize = lens.iter().sum();
            (
                Just(lens),
                prop::collection::vec(0..TEXT_VOCAB, n),
                prop::collection::vec((0.0..0.5f64, 0.0..0.5f64, 0.0..0.5f64, 0.0..0.5f64), n),
            )
        })
        .prop_map(|(lens, tokens, raw)| {
            let mut spans = Vec::new();
            let mut at = 0;
            for l in lens {
                spans.push((at, at + l));
                at += l;
            }
            let boxes = raw
                .into_iter()
                .map(|(l, t, w, h)| BBox::new(l, t, l + w, t + h).unwrap())
                .collect();
            BlockDocument::new("fuzz", tokens, boxes, &spans).unwrap()
        })
}

pub fn build(doc: &BlockDocument, rate: f64, seed: u64) -> (Vec<usize>, InfillExample) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sampled = sample_blocks(doc, rate, &mut rng).unwrap();
    let ex = build_infill_sequence(doc, &sampled, &specials(), &mut rng).unwrap();
    (sampled, ex)
}

pub fn count(ids: &[u32], id: u32) -> usize {
    ids.iter().filter(|&&t| t == id).count()
}

/// Reconstruction plus the [M]/[S]/[E] count invariants for one draw.
pub fn round_trip(doc: &BlockDocument, rate: f64, seed: u64) -> Result<(), TestCaseError> {
    let sp = specials();
    let (sampled, ex) = build(doc, rate, seed);
    prop_assert_eq!(reconstruct(&ex, &sp).unwrap(), doc.tokens.clone());

    let m = sampled.len();
    let masked_tokens: usize = sampled.iter().map(|&b| doc.blocks[b].len()).sum();
    if m > 0 {
        let context = doc.len() - masked_tokens + m;
        prop_assert_eq!(ex.context_len, context);
        prop_assert_eq!(ex.len(), context + sampled.iter().map(|&b| 1 + doc.blocks[b].len()).sum::<usize>());
        prop_assert_eq!(ex.supervised(), masked_tokens + m);
        prop_assert_eq!(count(&ex.input_ids, sp.mask), m);
        prop_assert_eq!(count(&ex.input_ids, sp.start), m);
        prop_assert_eq!(count(&ex.targets, sp.end), m);
        // [E] is a target only; [M] stands alone for any block length.
        prop_assert_eq!(count(&ex.input_ids, sp.end), 0);
    } else {
        prop_assert_eq!(ex.len(), doc.len());
        prop_assert_eq!(ex.supervised(), doc.len() - 1);
    }
    prop_assert_eq!(ex.input_boxes.len(), ex.len());
    prop_assert_eq!(ex.position_ids.len(), ex.len());
    Ok(())
}

/// Runs `round_trip` on `cases` fuzzed documents.
pub fn fuzz_round_trip(cases: u32) -> Result<(), String> {
    let mut runner = TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    });
    runner
        .run(&(arb_doc(), 0.0..0.5f64, any::<u64>()), |(doc, rate, seed)| round_trip(&doc, rate, seed))
        .map_err(|e| e.to_string())
}
