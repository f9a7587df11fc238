//! Invariants checked over generated inputs.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use schemex::aggregate::{aggregate, integrity_check, records_from_table, CanonMap, SourceId};
use schemex::document::{chunk_spans, validate_document};
use schemex::eval::{bipartite_match, compute_metrics, Comparator, MatchConfig, Row};
use schemex::gateway::{
    Backend, BackendFailure, BackendReply, Gateway, MockBackend, MockScript, ProfileConfig, PromptRequest, Usage,
};
use schemex::rev::{self, RevConfig, RevContext};
use schemex::schema::{coerce_value, parse_schema, validate_values};
use schemex::units::UnitTable;
use schemex::value::FieldValue;
use serde_json::{json, Value};

use common::*;

fn rng(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

// Documents

fn arb_document() -> impl Strategy<Value = Value> {
    (1usize..4, 0usize..5, 0usize..3, 0usize..3, any::<bool>()).prop_map(|(pages, chunks, tables, figures, title)| {
        let mut d = json!({
            "doc_id": "doc",
            "source_uri": "doc.pdf",
            "chunks": (0..chunks).map(|i| json!({"chunk_index": i, "text": format!("chunk {i}"), "page_number": 1 + i % pages})).collect::<Vec<_>>(),
            "tables": (0..tables).map(|i| json!({"table_id": format!("t{i}"), "page_number": 1 + i % pages, "caption": "c",
                "cells": [["a", "b"], ["1", "2"]], "header_rows": 1})).collect::<Vec<_>>(),
            "figures": (0..figures).map(|i| if i % 2 == 0 {
                json!({"figure_id": format!("f{i}"), "page_number": 1, "caption": "decay", "caption_source": "extracted",
                       "is_scientific": true, "structured": {"axes": [{"label": "t", "unit": "h", "scale": "log"}],
                       "legend": ["a"], "series": [{"name": "a", "points": [[0, 1.5], ["x", 2.0]]}]}})
            } else {
                json!({"figure_id": format!("f{i}"), "page_number": pages, "caption": "", "caption_source": "generated", "is_scientific": false})
            }).collect::<Vec<_>>(),
            "page_images": (1..=pages).map(|p| json!({"page_number": p, "uri": format!("p{p}.png")})).collect::<Vec<_>>(),
        });
        if title {
            d["title"] = json!("A title");
        }
        d
    })
}

fn arb_json() -> impl Strategy<Value = Value> {
    let leaf = prop_oneof![
        Just(Value::Null),
        any::<bool>().prop_map(Value::Bool),
        any::<i64>().prop_map(|i| json!(i)),
        "[a-z0-9 ]{0,6}".prop_map(Value::String),
    ];
    leaf.prop_recursive(4, 32, 6, |inner| {
        prop_oneof![
            prop::collection::vec(inner.clone(), 0..4).prop_map(Value::Array),
            prop::collection::btree_map(
                prop_oneof![
                    Just("doc_id".to_string()),
                    Just("chunks".to_string()),
                    Just("page_number".to_string()),
                    Just("text".to_string()),
                    Just("figures".to_string()),
                    "[a-z_]{1,8}"
                ],
                inner,
                0..5
            )
            .prop_map(|m| Value::Object(m.into_iter().collect())),
        ]
    })
}

proptest! {
    #[test]
    fn document_round_trip(raw in arb_document()) {
        let d = validate_document(&raw).unwrap();
        let again = validate_document(&d.to_json()).unwrap();
        prop_assert_eq!(d, again);
    }

    #[test]
    fn validate_document_is_total(raw in arb_json()) {
        let _ = validate_document(&raw);
        let mut doc = json!({"doc_id": "x", "chunks": [], "page_images": []});
        doc["chunks"] = raw;
        let _ = validate_document(&doc);
    }

    #[test]
    fn chunks_reconstruct_the_input(text in "[a-zé .!?\n]{0,400}", max in 5usize..80, overlap in 0usize..40) {
        prop_assume!(overlap < max);
        let spans = chunk_spans(&text, max, overlap);
        let mut rebuilt = String::new();
        for s in &spans {
            prop_assert!(text[s.start..s.end].chars().count() <= max);
            rebuilt.push_str(&text[s.start + s.overlap..s.end]);
        }
        prop_assert_eq!(rebuilt, text);
    }
}

// Store

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn store_matches_brute_force_with_filters(seed in any::<u64>(), n in 1usize..300, k in 1usize..12) {
        let mut r = rng(seed);
        let (store, raw) = random_store(&mut r, n);
        for e in store.entries() {
            prop_assert!((e.vector.norm() - 1.0).abs() < 1e-9);
        }
        let q = random_text(&mut r);
        let doc = format!("d{}", r.random_range(0..5));
        for filter in [None, Some(doc.as_str())] {
            let f = filter.map(schemex::store::QueryFilter::doc);
            let got: Vec<(String, f64)> = store
                .query(&q, k, f.as_ref())
                .unwrap()
                .into_iter()
                .map(|h| (h.entry_id, h.score))
                .collect();
            prop_assert!(same_ranking(&got, &oracle_ranking(&raw, &q, filter), k));
            let again: Vec<(String, f64)> = store.query(&q, k, f.as_ref()).unwrap().into_iter().map(|h| (h.entry_id, h.score)).collect();
            prop_assert_eq!(got, again);
        }
    }
}

// Schemas

proptest! {
    #[test]
    fn schemas_survive_serialization(seed in any::<u64>()) {
        let s = random_schema(&mut rng(seed));
        let text = serde_json::to_string(&s.to_json()).unwrap();
        let back = parse_schema(&serde_json::from_str(&text).unwrap()).unwrap();
        prop_assert_eq!(back, s);
    }

    #[test]
    fn coercion_is_idempotent(seed in any::<u64>(), raw in prop_oneof![
        "[0-9]{1,3}(\\.[0-9]{1,2})?( ?(C|F|%|h|mL))?",
        "(true|false|yes|no|1|0)",
        "[a-z]{1,6}( [a-z]{1,4})?",
        "[0-9]{1,2}; ?[0-9]{1,2}",
    ]) {
        let s = random_schema(&mut rng(seed));
        for f in &s.fields {
            if let Ok(c) = coerce_value(f, &raw) {
                let again = coerce_value(f, &c.value.to_string()).unwrap();
                prop_assert_eq!(again.value, c.value);
            }
        }
    }
}

// Gateway

proptest! {
    #[test]
    fn retries_are_bounded_and_backoff_grows(fails in 0usize..6, retries in 0u32..4, base in 1u64..50) {
        let mut script = MockScript::default();
        let req = PromptRequest::new("p", "sys", "hello");
        script.push(&req, "fine");
        let backend = Arc::new(MockBackend::new(&script));
        backend.fail_next((0..fails).map(|i| if i % 2 == 0 { BackendFailure::Timeout } else { BackendFailure::RateLimited }));
        let mut cfg = ProfileConfig::mock();
        cfg.max_retries = retries;
        cfg.backoff_base_ms = base;
        cfg.backoff_max_ms = base * 4;
        let gw = Gateway::builder().profile("p", cfg, backend).sleeper(|_| {}).build();
        let out = gw.complete(&req);
        prop_assert_eq!(out.is_ok(), fails <= retries as usize);
        for e in gw.audit() {
            prop_assert!(e.retry_count <= retries);
            prop_assert!(e.backoff_ms.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(e.backoff_ms.iter().all(|&b| b <= base * 4));
        }
    }
}

// Extraction loop

/// Answers every extraction prompt with rows drawn from a generator seeded by
/// the prompt itself, so replies are arbitrary but repeatable.
struct Chaos {
    seed: u64,
}

impl Backend for Chaos {
    fn call(&self, req: &PromptRequest, _: &ProfileConfig) -> Result<BackendReply, BackendFailure> {
        let fp = req.fingerprint();
        let mut r = rng(self.seed ^ u64::from_str_radix(&fp[..15], 16).unwrap());
        let ids: Vec<String> = req
            .user
            .lines()
            .filter_map(|l| l.strip_prefix('[').and_then(|l| l.split(']').next()).map(str::to_string))
            .collect();
        let targets: Vec<String> = req
            .user
            .lines()
            .find_map(|l| l.strip_prefix("Target fields: "))
            .map(|l| l.split(", ").map(str::to_string).collect())
            .unwrap_or_default();
        let known: BTreeMap<String, String> = req
            .user
            .lines()
            .find_map(|l| l.strip_prefix("Known values: "))
            .map(|l| {
                l.split(", ")
                    .filter_map(|kv| kv.split_once('='))
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .collect()
            })
            .unwrap_or_default();
        let rows: Vec<Value> = (0..r.random_range(0..4))
            .map(|_| {
                let mut row = serde_json::Map::new();
                for f in ["virus", "temperature", "humidity", "medium"] {
                    if !targets.iter().any(|t| t == f) && !(known.contains_key(f) && r.random_bool(0.7)) {
                        continue;
                    }
                    let value = match known.get(f) {
                        Some(v) if r.random_bool(0.8) => json!(v),
                        _ if r.random_bool(0.2) => Value::Null,
                        _ => match f {
                            "virus" => json!(["MS2", "Phi6"].choose(&mut r).unwrap()),
                            "temperature" => json!([json!(4), json!("77 F"), json!(25.0), json!("cold")].choose(&mut r).unwrap()),
                            "humidity" => json!([30, 50, 150].choose(&mut r).unwrap()),
                            _ => json!(["saline", "broth", "gel"].choose(&mut r).unwrap()),
                        },
                    };
                    let cited: Vec<&String> = ids.iter().filter(|_| r.random_bool(0.3)).collect();
                    let mut cell = json!({"value": value, "evidence": cited});
                    if r.random_bool(0.8) {
                        cell["confidence"] = json!(r.random_range(0.3..1.0));
                    }
                    if r.random_bool(0.1) {
                        cell["evidence"] = json!(["nowhere:text:0"]);
                    }
                    row.insert(f.to_string(), cell);
                }
                Value::Object(row)
            })
            .collect();
        Ok(BackendReply {
            text: json!({ "rows": rows }).to_string(),
            usage: Usage::default(),
        })
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn extraction_loop_invariants(seed in any::<u64>(), max_rounds in 1u32..5, k in 1usize..6) {
        let mut r = rng(seed);
        let (store, _) = random_store(&mut r, 40);
        let doc = validate_document(&json!({"doc_id": "d1", "chunks": [], "page_images": []})).unwrap();
        let schema = virus_schema();
        let units = UnitTable::builtin();
        let config = RevConfig { k, max_rounds, confidence_threshold: 0.7 };
        let gateway = Gateway::mock("mock", Arc::new(Chaos { seed }));
        let ctx = RevContext { schema: &schema, store: &store, gateway: &gateway, profile: "mock", units: &units, config: &config };
        let out = rev::run(&doc, &ctx).unwrap();

        prop_assert!(!out.rounds.is_empty() && out.rounds.len() <= max_rounds as usize);
        for (i, t) in out.rounds.iter().enumerate() {
            prop_assert_eq!(t.round as usize, i + 1);
        }

        // Pending sets only shrink.
        let mut asked: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for t in &out.rounds[1..] {
            for q in &t.requests {
                let id = q.record_id.clone().unwrap();
                let now: BTreeSet<String> = q.targets.iter().cloned().collect();
                if let Some(before) = asked.get(&id) {
                    prop_assert!(now.is_subset(before), "{} grew: {:?} -> {:?}", id, before, now);
                }
                asked.insert(id, now);
            }
        }

        for rec in &out.records {
            prop_assert!(validate_values(&rec.values, &schema).is_empty(), "{:?}", rec);
            for (field, v) in &rec.values {
                match v {
                    Some(_) => {
                        let p = &rec.provenance[field];
                        prop_assert_eq!(&p.doc_id, "d1");
                        prop_assert!(!p.evidence.is_empty());
                        for e in &p.evidence {
                            let entry = store.get(&e.entry_id).expect("evidence exists");
                            prop_assert_eq!(&entry.doc_id, "d1");
                        }
                    }
                    None => {
                        prop_assert!(!rec.provenance.contains_key(field));
                        prop_assert!(rec.null_reasons.contains_key(field));
                    }
                }
            }
        }
    }
}

// Aggregation

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn aggregation_invariants(seed in any::<u64>()) {
        let mut r = rng(seed);
        let records = random_records(&mut r);
        let schema = virus_schema();
        let units = UnitTable::builtin();
        let canon = CanonMap::builtin();
        let agg = aggregate(&records, &schema, &options(&units, &canon)).unwrap();

        let mut shuffled = records.clone();
        shuffled.shuffle(&mut r);
        let again = aggregate(&shuffled, &schema, &options(&units, &canon)).unwrap();
        prop_assert_eq!(&again.table, &agg.table);
        prop_assert_eq!(&again.log, &agg.log);

        let rerun = aggregate(&records_from_table(&agg.table, &schema), &schema, &options(&units, &canon)).unwrap();
        prop_assert_eq!(&rerun.table, &agg.table);

        let known: BTreeSet<SourceId> = records
            .iter()
            .map(|r| SourceId { doc_id: r.doc_id.clone(), record_id: r.record_id.clone() })
            .collect();
        let mut table = agg.table.clone();
        prop_assert!(integrity_check(&mut table, &schema, &known).is_empty());

        // Every record lands in exactly one row or is logged as ungrouped.
        let logged = serde_json::to_string(&agg.log).unwrap();
        for rec in &records {
            let rows = agg
                .table
                .iter()
                .filter(|row| row.support.values().flatten().any(|s| s.record_id == rec.record_id))
                .count()
                + agg.table.iter().filter(|row| {
                    row.conflicts.iter().any(|c| c.candidates.iter().any(|cand| cand.sources.iter().any(|s| s.record_id == rec.record_id)))
                        && !row.support.values().flatten().any(|s| s.record_id == rec.record_id)
                }).count();
            prop_assert!(rows == 1 || (rows == 0 && logged.contains(&rec.record_id)), "{} in {} rows", rec.record_id, rows);
        }
    }
}

// Evaluation

fn arb_rows(max: usize) -> impl Strategy<Value = Vec<Row>> {
    prop::collection::vec((0i64..3, 0i64..3, 0i64..4), 0..=max).prop_map(|rows| {
        rows.into_iter()
            .map(|(a, b, c)| {
                [("a", a), ("b", b), ("c", c)]
                    .into_iter()
                    .map(|(k, v)| (k.to_string(), Some(FieldValue::Integer(v))))
                    .collect()
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn metric_invariants(gt in arb_rows(6), ext in arb_rows(6)) {
        let config = MatchConfig { key_fields: vec!["a".into(), "b".into()], ..MatchConfig::default() };
        let cmp = Comparator { config: &config, canon: None };
        let keys = config.key_fields.clone();
        let fields = vec!["c".to_string()];
        let m = bipartite_match(&gt, &ext, &keys, &cmp);
        let gts: BTreeSet<usize> = m.pairs.iter().map(|p| p.gt).collect();
        let exts: BTreeSet<usize> = m.pairs.iter().map(|p| p.ext).collect();
        prop_assert_eq!(gts.len(), m.pairs.len());
        prop_assert_eq!(exts.len(), m.pairs.len());
        prop_assert!(m.pairs.iter().all(|p| p.similarity >= config.candidate_threshold));

        let fwd = compute_metrics(&m, &gt, &ext, &fields, &cmp);
        for x in [fwd.precision, fwd.recall, fwd.f1, fwd.accuracy] {
            prop_assert!((0.0..=1.0).contains(&x));
        }
        if fwd.precision + fwd.recall > 0.0 {
            let h = 2.0 * fwd.precision * fwd.recall / (fwd.precision + fwd.recall);
            prop_assert!((fwd.f1 - h).abs() < 1e-12);
        }

        let back = bipartite_match(&ext, &gt, &keys, &cmp);
        let rev = compute_metrics(&back, &ext, &gt, &fields, &cmp);
        prop_assert_eq!(fwd.precision, rev.recall);
        prop_assert_eq!(fwd.recall, rev.precision);

        // A perfect copy of an unmatched gt row never lowers recall.
        if let Some(&g) = m.unmatched_gt.first() {
            let mut more = ext.clone();
            more.push(gt[g].clone());
            let m2 = bipartite_match(&gt, &more, &keys, &cmp);
            prop_assert!(compute_metrics(&m2, &gt, &more, &fields, &cmp).recall >= fwd.recall);
        }
    }
}
