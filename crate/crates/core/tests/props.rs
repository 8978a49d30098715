//! Property tests for the library's cross-module invariants.

use std::collections::BTreeSet;

use proptest::prelude::*;

use kgner_core::eval::span_f1;
use kgner_core::kg::{rank_entities, shortlist, CandidateIndex, Triple, TripleStore};
use kgner_core::ner::{Crf, TagLattice, TagSet};
use kgner_core::rng::Rng;
use kgner_core::tags::{convert_tags, extract_spans, Scheme, Span};
use kgner_core::tensor::{Tape, Tensor};

fn vec_strategy(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, 1..max_len)
}

proptest! {
    #[test]
    fn softmax_normalizes(values in vec_strategy(64)) {
        let mut tape = Tape::new(0, false);
        let x = tape.leaf(Tensor::vector(values).with_grad());
        let s = tape.softmax(x).unwrap();
        let out = tape.value(s).data();
        let sum: f64 = out.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9);
        prop_assert!(out.iter().all(|&p| p > 0.0 && p < 1.0 || out.len() == 1));
    }

    #[test]
    fn softmax_normalizes_per_row(rows in 1usize..6, cols in 1usize..8, seed in 0u64..500) {
        let mut rng = Rng::new(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.normal(0.0, 3.0)).collect();
        let mut tape = Tape::new(0, false);
        let x = tape.leaf(Tensor::new(vec![rows, cols], data).unwrap().with_grad());
        let s = tape.softmax(x).unwrap();
        let out = tape.value(s);
        for i in 0..rows {
            let sum: f64 = out.row(i).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn evaluation_is_bitwise_deterministic(values in vec_strategy(32), seed in 0u64..1000) {
        let n = values.len();
        let run = || {
            let mut tape = Tape::new(seed, true);
            let x = tape.leaf(Tensor::vector(values.clone()).with_grad());
            let d = tape.dropout(x, 0.25).unwrap();
            let s = tape.softmax(d).unwrap();
            let l = tape.lse_all(s).unwrap();
            (tape.value(s).data().to_vec(), tape.value(l).scalar_value(), n)
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn log_sum_exp_bounds(values in vec_strategy(48)) {
        let mut tape = Tape::new(0, false);
        let x = tape.leaf(Tensor::vector(values.clone()).with_grad());
        let l = tape.lse_all(x).unwrap();
        let got = tape.value(l).scalar_value();
        let mx = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(got >= mx - 1e-12);
        prop_assert!(got <= mx + (values.len() as f64).ln() + 1e-12);
    }
}

// ── kg-store invariants ──────────────────────────────────────────────

fn triple_strategy() -> impl Strategy<Value = Vec<(u8, u8, u8)>> {
    prop::collection::vec((0u8..8, 0u8..4, 0u8..8), 1..40)
}

fn store_from(raw: &[(u8, u8, u8)]) -> TripleStore {
    let names = ["Ari", "Aria", "Bello", "Belloc", "Cordo", "Cordova", "Drax", "Draxel"];
    let rels = ["knows", "leads", "near", "sells"];
    let triples: Vec<Triple> = raw
        .iter()
        .map(|&(s, r, o)| Triple {
            subject: names[s as usize].to_string(),
            relation: rels[r as usize].to_string(),
            object: names[o as usize].to_string(),
        })
        .collect();
    TripleStore::from_triples(triples).unwrap()
}

proptest! {
    #[test]
    fn shortlist_is_pure_and_bounded(raw in triple_strategy(), k1 in 1usize..4, k2 in 1usize..4) {
        let store = store_from(&raw);
        let index = CandidateIndex::build(&store, &[3, 4]);
        for word in ["Ari", "bello", "Cordova", "xyzzy"] {
            let a = shortlist(&index, &store, word, k1, k2);
            let b = shortlist(&index, &store, word, k1, k2);
            prop_assert_eq!(&a.pairs, &b.pairs);
            prop_assert!(a.pairs.len() <= k1 * k2);
            let entities: BTreeSet<u32> = a.pairs.iter().map(|p| p.0).collect();
            prop_assert!(entities.len() <= k1);
            for &(e, r) in &a.pairs {
                prop_assert!((e as usize) < store.entity_vocab.len());
                prop_assert!((r as usize) < store.relation_vocab.len());
            }
        }
    }

    #[test]
    fn adding_subject_triple_never_lowers_rank(raw in triple_strategy()) {
        let store = store_from(&raw);
        let all: BTreeSet<u32> = (0..store.entity_vocab.len() as u32).collect();
        let before = rank_entities(&store, &all);
        // add one more triple with the first entity as subject
        let target = store.entity_vocab.name(0).to_string();
        let mut triples = store.triples.clone();
        triples.push(Triple {
            subject: target.clone(),
            relation: "extra".to_string(),
            object: store.entity_vocab.name(0).to_string(),
        });
        let bigger = TripleStore::from_triples(triples).unwrap();
        let all2: BTreeSet<u32> = before
            .iter()
            .map(|&id| bigger.entity_vocab.id(store.entity_vocab.name(id)).unwrap())
            .collect();
        let after = rank_entities(&bigger, &all2);
        let pos = |ranked: &[u32], vocab: &kgner_core::kg::Vocab, name: &str| {
            ranked.iter().position(|&id| vocab.name(id) == name).unwrap()
        };
        let before_pos = pos(&before, &store.entity_vocab, &target);
        let after_pos = pos(&after, &bigger.entity_vocab, &target);
        prop_assert!(after_pos <= before_pos);
    }
}

// ── tag scheme and evaluation invariants ─────────────────────────────

fn bio_strategy() -> impl Strategy<Value = Vec<String>> {
    // random segmentation rendered as valid BIO
    prop::collection::vec((0usize..4, 1usize..4), 1..8).prop_map(|segments| {
        let types = ["PER", "LOC", "ORG", "MISC"];
        let mut tags = Vec::new();
        for (i, (ty, len)) in segments.into_iter().enumerate() {
            if i % 2 == 0 {
                for _ in 0..len {
                    tags.push("O".to_string());
                }
            } else {
                tags.push(format!("B-{}", types[ty]));
                for _ in 1..len {
                    tags.push(format!("I-{}", types[ty]));
                }
            }
        }
        tags
    })
}

proptest! {
    #[test]
    fn scheme_round_trip_is_identity(tags in bio_strategy()) {
        let bioes = convert_tags(&tags, Scheme::Bio, Scheme::Bioes).unwrap();
        let back = convert_tags(&bioes, Scheme::Bioes, Scheme::Bio).unwrap();
        prop_assert_eq!(&back, &tags);
        let a = extract_spans(&tags, Scheme::Bio).unwrap();
        let b = extract_spans(&bioes, Scheme::Bioes).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn span_f1_symmetric_under_reordering(
        seed in 0u64..500,
        n in 2usize..6,
    ) {
        let mut rng = Rng::new(seed);
        let sentence = |rng: &mut Rng| -> Vec<Span> {
            (0..rng.below(3))
                .map(|_| {
                    let start = rng.below(5);
                    Span {
                        start,
                        end: start + 1 + rng.below(3),
                        label: ["PER", "LOC"][rng.below(2)].to_string(),
                    }
                })
                .collect()
        };
        let gold: Vec<Vec<Span>> = (0..n).map(|_| sentence(&mut rng)).collect();
        let pred: Vec<Vec<Span>> = (0..n).map(|_| sentence(&mut rng)).collect();
        let direct = span_f1(&gold, &pred);
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        let gold_r: Vec<Vec<Span>> = order.iter().map(|&i| gold[i].clone()).collect();
        let pred_r: Vec<Vec<Span>> = order.iter().map(|&i| pred[i].clone()).collect();
        let reordered = span_f1(&gold_r, &pred_r);
        prop_assert_eq!(direct, reordered);
    }

    #[test]
    fn gold_path_probability_in_unit_interval(
        seed in 0u64..500,
        n in 1usize..5,
        m in 2usize..4,
    ) {
        let mut rng = Rng::new(seed);
        let crf = Crf::new(TagSet::unconstrained(m));
        let d = m + 2;
        let trans = Tensor::new(vec![d, d], (0..d * d).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap();
        let emissions = Tensor::new(vec![n, m], (0..n * m).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap();
        let lattice = TagLattice::new(emissions).unwrap();
        let gold: Vec<usize> = (0..n).map(|_| rng.below(m)).collect();
        let nll = crf.nll(&lattice, &trans, &gold).unwrap();
        prop_assert!(nll >= -1e-9, "nll {}", nll);
        let p = (-nll).exp();
        prop_assert!(p > 0.0 && p <= 1.0 + 1e-9);
    }
}

// ── fusion invariants ────────────────────────────────────────────────

proptest! {
    #[test]
    fn fused_vector_stays_in_value_span(seed in 0u64..300, n in 1usize..5) {
        use kgner_core::fusion::FusionLayer;
        use kgner_core::tensor::ParamSet;
        let mut rng = Rng::new(seed);
        let (h, cd) = (4, 6);
        let layer = FusionLayer::new("fusion", h, cd);
        let mut params = ParamSet::new();
        layer.register(&mut params, &mut rng);
        let mut tape = Tape::new(0, false);
        let bound = tape.bind(&params);
        let q = tape.constant(Tensor::vector((0..h).map(|_| rng.normal(0.0, 1.0)).collect()));

        // all candidates identical: fused vector equals the common value
        let row: Vec<f64> = (0..cd).map(|_| rng.normal(0.0, 1.0)).collect();
        let mut data = Vec::new();
        for _ in 0..n {
            data.extend_from_slice(&row);
        }
        let cands = Tensor::new(vec![n, cd], data).unwrap();
        let (g, w) = layer.fuse(&mut tape, &bound, q, Some(&cands)).unwrap();
        if let Some(w) = w {
            let ws = tape.value(w).data();
            prop_assert!((ws.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let single = Tensor::new(vec![1, cd], row).unwrap();
        let (g1, _) = layer.fuse(&mut tape, &bound, q, Some(&single)).unwrap();
        let (a, b) = (tape.value(g).data(), tape.value(g1).data());
        for (x, y) in a.iter().zip(b) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }
}
