//! Generators and independent oracles shared by the property and acceptance
//! suites.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::rngs::StdRng;
use rand::seq::IndexedRandom;
use rand::Rng;
use schemex::aggregate::{AggregateOptions, CanonMap};
use schemex::record::{ExtractionRecord, Provenance};
use schemex::schema::{Dtype, FieldSpec, Schema};
use schemex::store::{HashedEmbedder, Modality, SourceRef, StoreEntry, VectorStore};
use schemex::units::UnitTable;
use schemex::value::FieldValue;

const NAMES: &[&str] = &[
    "virus", "temperature", "humidity", "surface", "medium", "ph", "duration", "log_reduction",
    "titre", "method", "strain", "replicates", "salinity", "uv_dose", "volume",
];
const UNITS: &[&str] = &["C", "F", "K", "%", "h", "min", "s", "mL", "L"];
const WORDS: &[&str] = &["steel", "glass", "saline", "broth", "plastic", "paper", "skin", "air"];

fn scalar(rng: &mut StdRng) -> Dtype {
    [Dtype::String, Dtype::Float, Dtype::Integer, Dtype::Boolean, Dtype::Categorical]
        .choose(rng)
        .unwrap()
        .clone()
}

/// A valid schema with 1 to 8 fields and at least one key.
pub fn random_schema(rng: &mut StdRng) -> Schema {
    let n = rng.random_range(1..=8);
    let mut names: Vec<&str> = NAMES.to_vec();
    let mut fields = Vec::new();
    for i in 0..n {
        let name = names.remove(rng.random_range(0..names.len()));
        let dtype = if rng.random_bool(0.15) {
            Dtype::ListOf(Box::new(scalar(rng)))
        } else {
            scalar(rng)
        };
        let mut f = FieldSpec::new(name, dtype.clone());
        if *dtype.scalar() == Dtype::Categorical {
            let k = rng.random_range(1..=4);
            f.vocabulary = WORDS[..k].iter().map(|w| w.to_string()).collect();
        }
        if dtype.scalar().is_numeric() {
            if rng.random_bool(0.5) {
                f = f.unit(UNITS.choose(rng).unwrap());
            }
            if rng.random_bool(0.4) {
                let lo = rng.random_range(-100..50) as f64;
                f = f.range(lo, lo + rng.random_range(1..200) as f64);
            }
        }
        if i == 0 || rng.random_bool(0.3) {
            f.is_key = true;
        }
        if rng.random_bool(0.3) {
            f.required = true;
        }
        if rng.random_bool(0.5) {
            f.description = format!("{name} as reported");
        }
        fields.push(f);
    }
    // Keys need not come first.
    let shift = rng.random_range(0..fields.len());
    fields.rotate_left(shift);
    Schema::new(&format!("s{}", rng.random_range(0..1000)), "generated", fields).expect("generator yields valid schemas")
}

const VOCAB: &[&str] = &[
    "virus", "ms2", "phi6", "phage", "surface", "steel", "glass", "humidity", "relative", "temperature",
    "decay", "log", "reduction", "titre", "survival", "droplet", "saline", "incubated", "hours", "days",
    "measured", "assay", "plaque", "infectivity", "aerosol", "sunlight", "dark", "room", "cold", "warm",
    "high", "low", "rate", "constant", "half", "life", "sample", "control", "figure", "table",
];

pub fn random_text(rng: &mut StdRng) -> String {
    let n = rng.random_range(1..=12);
    (0..n).map(|_| *VOCAB.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

/// A store of `n` random text entries spread over up to 5 documents.
pub fn random_store(rng: &mut StdRng, n: usize) -> (VectorStore, Vec<(String, String, String)>) {
    let mut store = VectorStore::new(Arc::new(HashedEmbedder::default()));
    let mut raw = Vec::with_capacity(n);
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let text = random_text(rng);
        let doc = format!("d{}", rng.random_range(0..5));
        let id = format!("{doc}:text:{i}");
        entries.push(StoreEntry {
            entry_id: id.clone(),
            doc_id: doc.clone(),
            modality: Modality::Text,
            source: SourceRef::Chunk(i),
            vector: store.embed(&text).unwrap(),
            text_surrogate: text.clone(),
        });
        raw.push((id, doc, text));
    }
    store.index(entries).unwrap();
    (store, raw)
}

/// Hashed bag-of-words written out from the embedder description: lowercase
/// alphanumeric runs, FNV-1a 64 modulo the dimension, counts, unit length.
pub fn oracle_embed(text: &str, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0f64; dim];
    let mut token = String::new();
    let flush = |token: &mut String, v: &mut Vec<f64>| {
        if !token.is_empty() {
            let mut h: u64 = 14695981039346656037;
            for b in token.to_lowercase().bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(1099511628211);
            }
            v[(h % dim as u64) as usize] += 1.0;
            token.clear();
        }
    };
    for c in text.chars() {
        if c.is_alphanumeric() {
            token.push(c);
        } else {
            flush(&mut token, &mut v);
        }
    }
    flush(&mut token, &mut v);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / norm).collect()
}

/// Brute-force ranking of every matching entry: score, then sort by score
/// descending and id ascending.
pub fn oracle_ranking(raw: &[(String, String, String)], query: &str, doc: Option<&str>) -> Vec<(String, f64)> {
    let q = oracle_embed(query, 256);
    let mut all: Vec<(String, f64)> = raw
        .iter()
        .filter(|(_, d, _)| doc.is_none_or(|x| x == d))
        .map(|(id, _, text)| {
            let e = oracle_embed(text, 256);
            let s: f64 = q.iter().zip(&e).map(|(a, b)| a * b).sum();
            (id.clone(), s.clamp(-1.0, 1.0))
        })
        .collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    all
}

/// `got` is the oracle's top k, allowing only swaps between entries whose
/// oracle scores agree within 1e-12 (rounding-level ties).
pub fn same_ranking(got: &[(String, f64)], oracle: &[(String, f64)], k: usize) -> bool {
    let want = &oracle[..k.min(oracle.len())];
    let score: BTreeMap<&str, f64> = oracle.iter().map(|(id, s)| (id.as_str(), *s)).collect();
    let mut ids: Vec<&str> = got.iter().map(|g| g.0.as_str()).collect();
    ids.sort();
    ids.dedup();
    ids.len() == got.len()
        && got.len() == want.len()
        && got.iter().zip(want).all(|(g, w)| {
            let Some(&s) = score.get(g.0.as_str()) else {
                return false;
            };
            (g.1 - s).abs() < 1e-12 && (g.0 == w.0 || (s - w.1).abs() < 1e-12)
        })
}

/// Maximum total weight over all partial injections rows -> cols.
pub fn brute_force_weight(w: &[Vec<Option<i64>>]) -> i64 {
    fn go(w: &[Vec<Option<i64>>], r: usize, used: &mut [bool]) -> i64 {
        if r == w.len() {
            return 0;
        }
        let mut best = go(w, r + 1, used);
        for c in 0..used.len() {
            if let (false, Some(x)) = (used[c], w[r][c]) {
                used[c] = true;
                best = best.max(x + go(w, r + 1, used));
                used[c] = false;
            }
        }
        best
    }
    let m = w.first().map_or(0, Vec::len);
    go(w, 0, &mut vec![false; m])
}

pub fn virus_schema() -> Schema {
    Schema::new(
        "virus_survival",
        "",
        vec![
            FieldSpec::new("virus", Dtype::String).key().required(),
            FieldSpec::new("temperature", Dtype::Float).unit("C").key(),
            FieldSpec::new("humidity", Dtype::Float).unit("%").range(0.0, 100.0),
            FieldSpec::new("medium", Dtype::Categorical).vocabulary(&["saline", "broth"]),
        ],
    )
    .unwrap()
}

pub fn record(doc: &str, idx: usize, values: &[(&str, FieldValue)], units: &[(&str, &str)]) -> ExtractionRecord {
    let mut r = ExtractionRecord::new(doc, idx);
    for (k, v) in values {
        r.set(
            k,
            v.clone(),
            0.9,
            Provenance {
                doc_id: doc.into(),
                evidence: Vec::new(),
                round: 1,
            },
        );
    }
    for (k, u) in units {
        r.units.insert(k.to_string(), u.to_string());
    }
    r
}

/// Records over a handful of conditions in mixed units, with some gaps and
/// disagreements.
pub fn random_records(rng: &mut StdRng) -> Vec<ExtractionRecord> {
    let n = rng.random_range(0..12);
    let mut per_doc: BTreeMap<String, usize> = BTreeMap::new();
    (0..n)
        .map(|_| {
            let doc = format!("p{}", rng.random_range(0..4));
            let idx = per_doc.entry(doc.clone()).or_default();
            *idx += 1;
            let mut values = Vec::new();
            let mut units = Vec::new();
            if rng.random_bool(0.9) {
                values.push(("virus", FieldValue::Text(["MS2", "Phi6", "T4"].choose(rng).unwrap().to_string())));
            }
            let c = *[4.0, 25.0, 37.0].choose(rng).unwrap();
            if rng.random_bool(0.5) {
                values.push(("temperature", FieldValue::Float(c * 9.0 / 5.0 + 32.0)));
                units.push(("temperature", "F"));
            } else {
                values.push(("temperature", FieldValue::Float(c)));
            }
            if rng.random_bool(0.8) {
                values.push(("humidity", FieldValue::Float(*[30.0, 50.0, 150.0].choose(rng).unwrap())));
            }
            if rng.random_bool(0.7) {
                values.push(("medium", FieldValue::Text(["saline", "broth"].choose(rng).unwrap().to_string())));
            }
            record(&doc, *idx - 1, &values, &units)
        })
        .collect()
}

pub fn options<'a>(units: &'a UnitTable, canon: &'a CanonMap) -> AggregateOptions<'a> {
    AggregateOptions {
        precision: 2,
        units,
        canon,
        proposer: None,
    }
}
