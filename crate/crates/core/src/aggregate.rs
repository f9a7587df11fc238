//! Cross-document reduce step: unit normalization, canonicalization,
//! grouping by key fields, conflict resolution by voting, integrity checks.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::gateway::{Gateway, GatewayError, JsonShape, PromptRequest, StructuredTarget};
use crate::record::{ExtractionRecord, NullReason};
use crate::schema::{value_matches_dtype, Dtype, FieldSpec, Schema};
use crate::units::{canonical_symbol, UnitTable};
use crate::value::FieldValue;

pub const DEFAULT_PRECISION: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CanonSource {
    StaticTable,
    LlmProposed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanonEntry {
    pub variant: String,
    pub canonical: String,
    pub source: CanonSource,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CanonError {
    #[error("`{canonical}` is itself mapped to `{other}`, so it cannot be a canonical form")]
    NotFixedPoint { canonical: String, other: String },
    #[error("variant `{0}` is already mapped")]
    Duplicate(String),
    #[error("cannot read canonicalization map: {0}")]
    Io(String),
    #[error("malformed canonicalization map: {0}")]
    Malformed(String),
}

/// Variant term to canonical term. Lookups ignore case and surrounding
/// whitespace; every canonical term maps to itself.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanonMap {
    entries: BTreeMap<String, CanonEntry>,
}

fn canon_key(term: &str) -> String {
    term.trim().to_lowercase()
}

impl CanonMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Common spellings of the field names used in environmental survival
    /// studies.
    pub fn builtin() -> Self {
        let mut m = Self::new();
        for (v, c) in [
            ("temp.", "temperature"),
            ("temp", "temperature"),
            ("rh", "humidity"),
            ("relative_humidity", "humidity"),
            ("relative humidity", "humidity"),
        ] {
            m.insert(v, c, CanonSource::StaticTable).expect("builtin map is consistent");
        }
        m
    }

    pub fn entries(&self) -> impl Iterator<Item = &CanonEntry> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lookup(&self, term: &str) -> Option<&str> {
        self.entries
            .get(&canon_key(term))
            .map(|e| e.canonical.as_str())
    }

    pub fn canon(&self, term: &str) -> String {
        self.lookup(term).unwrap_or(term).to_string()
    }

    pub fn knows(&self, term: &str) -> bool {
        let k = canon_key(term);
        self.entries.contains_key(&k) || self.entries.values().any(|e| canon_key(&e.canonical) == k)
    }

    /// Add a mapping, keeping every canonical term a fixed point.
    pub fn insert(&mut self, variant: &str, canonical: &str, source: CanonSource) -> Result<(), CanonError> {
        let key = canon_key(variant);
        if let Some(prev) = self.entries.get(&key) {
            if prev.canonical == canonical {
                return Ok(());
            }
            return Err(CanonError::Duplicate(variant.to_string()));
        }
        let mut next = self.clone();
        next.entries.insert(
            key,
            CanonEntry {
                variant: variant.trim().to_string(),
                canonical: canonical.to_string(),
                source,
            },
        );
        for e in next.entries.values() {
            let c = next.canon(&e.canonical);
            if c != e.canonical {
                return Err(CanonError::NotFixedPoint {
                    canonical: e.canonical.clone(),
                    other: c,
                });
            }
        }
        *self = next;
        Ok(())
    }

    /// Reads either `{"entries": [{variant, canonical, source}]}` or a plain
    /// `{"variant": "canonical"}` object (treated as a static table).
    pub fn from_json(v: &Value) -> Result<Self, CanonError> {
        let mut m = Self::new();
        match v.get("entries") {
            Some(Value::Array(items)) => {
                for item in items {
                    let e: CanonEntry = serde_json::from_value(item.clone())
                        .map_err(|e| CanonError::Malformed(e.to_string()))?;
                    m.insert(&e.variant, &e.canonical, e.source)?;
                }
            }
            _ => {
                let obj = v
                    .as_object()
                    .ok_or_else(|| CanonError::Malformed("expected a JSON object".into()))?;
                for (variant, c) in obj {
                    let c = c.as_str().ok_or_else(|| {
                        CanonError::Malformed(format!("`{variant}` must map to a string"))
                    })?;
                    m.insert(variant, c, CanonSource::StaticTable)?;
                }
            }
        }
        Ok(m)
    }

    pub fn to_json(&self) -> Value {
        json!({ "entries": self.entries.values().collect::<Vec<_>>() })
    }

    pub fn load(path: &Path) -> Result<Self, CanonError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CanonError::Io(format!("{}: {e}", path.display())))?;
        let v: Value =
            serde_json::from_str(&text).map_err(|e| CanonError::Malformed(e.to_string()))?;
        Self::from_json(&v)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SourceId {
    pub doc_id: String,
    pub record_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportEntry {
    pub doc_id: String,
    pub record_id: String,
    /// Value as reported by the source, after unit normalization.
    pub value: FieldValue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resolution {
    Majority,
    DeterministicReject,
    UnresolvedNull,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub value: FieldValue,
    pub vote_count: usize,
    pub sources: Vec<SupportEntry>,
    /// Failed a deterministic check (range, vocabulary).
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub rejected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictReport {
    pub field: String,
    pub candidates: Vec<Candidate>,
    pub resolution: Resolution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedRecord {
    pub group_key: Vec<FieldValue>,
    pub values: BTreeMap<String, Option<FieldValue>>,
    pub support: BTreeMap<String, Vec<SupportEntry>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub conflicts: Vec<ConflictReport>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub null_reasons: BTreeMap<String, NullReason>,
}

/// One line of the conflict log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogEntry {
    Conflict {
        group_key: Vec<FieldValue>,
        #[serde(flatten)]
        report: ConflictReport,
    },
    NoConversionPath {
        doc_id: String,
        record_id: String,
        field: String,
        from_unit: String,
        to_unit: String,
    },
    Ungrouped {
        doc_id: String,
        record_id: String,
        missing_keys: Vec<String>,
    },
    DuplicateInput {
        doc_id: String,
        record_id: String,
    },
    CanonProposalRejected {
        variant: String,
        canonical: String,
        reason: String,
    },
    Integrity {
        violation: Violation,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Violation {
    NullKey {
        group_key: Vec<FieldValue>,
        field: String,
    },
    MissingSupport {
        group_key: Vec<FieldValue>,
        field: String,
    },
    UnknownSource {
        group_key: Vec<FieldValue>,
        field: String,
        record_id: String,
    },
    DuplicateGroupKey {
        group_key: Vec<FieldValue>,
    },
}

fn round_to(x: f64, precision: u32) -> f64 {
    let f = 10f64.powi(precision as i32);
    let r = (x * f).round() / f;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

/// Value used for grouping and vote equality: numbers rounded to `precision`.
pub fn rounded(v: &FieldValue, precision: u32) -> FieldValue {
    match v {
        FieldValue::Float(x) => FieldValue::Float(round_to(*x, precision)),
        FieldValue::List(items) => {
            FieldValue::List(items.iter().map(|i| rounded(i, precision)).collect())
        }
        other => other.clone(),
    }
}

fn cmp_values(a: &[FieldValue], b: &[FieldValue]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        let o = x.total_cmp(y);
        if o != Ordering::Equal {
            return o;
        }
    }
    a.len().cmp(&b.len())
}

fn convert_value(v: &FieldValue, f: &dyn Fn(f64) -> f64, dtype: &Dtype) -> Option<FieldValue> {
    match (v, dtype.scalar()) {
        (FieldValue::List(items), _) => items
            .iter()
            .map(|i| convert_value(i, f, dtype.scalar()))
            .collect::<Option<Vec<_>>>()
            .map(FieldValue::List),
        (FieldValue::Integer(i), Dtype::Integer) => {
            let y = f(*i as f64);
            let r = y.round();
            ((y - r).abs() <= 1e-9 && r.abs() < 9.0e15).then_some(FieldValue::Integer(r as i64))
        }
        (FieldValue::Integer(i), _) => Some(FieldValue::Float(f(*i as f64))),
        (FieldValue::Float(x), _) => Some(FieldValue::Float(f(*x))),
        (other, _) => Some(other.clone()),
    }
}

/// Express every numeric field in its schema unit. A value without a
/// detected unit is taken to be in the schema unit already. Values with no
/// conversion path (or that stop being integral) become null and are logged.
pub fn normalize_units(
    record: &ExtractionRecord,
    schema: &Schema,
    units: &UnitTable,
) -> (ExtractionRecord, Vec<LogEntry>) {
    let mut out = record.clone();
    let mut log = Vec::new();
    for spec in &schema.fields {
        let Some(target) = &spec.unit else {
            continue;
        };
        let Some(v) = record.value(&spec.name) else {
            out.units.remove(&spec.name);
            continue;
        };
        if !spec.dtype.scalar().is_numeric() {
            continue;
        }
        let from = record
            .units
            .get(&spec.name)
            .map(|u| canonical_symbol(u))
            .unwrap_or_else(|| target.clone());
        let converted = if from == *target {
            Some(v.clone())
        } else {
            units
                .path(&from, target)
                .and_then(|a| convert_value(v, &|x| a.apply(x), &spec.dtype))
        };
        match converted {
            Some(nv) => {
                out.values.insert(spec.name.clone(), Some(nv));
                out.units.insert(spec.name.clone(), target.clone());
            }
            None => {
                out.set_null(&spec.name, NullReason::UnresolvedConflict);
                log.push(LogEntry::NoConversionPath {
                    doc_id: record.doc_id.clone(),
                    record_id: record.record_id.clone(),
                    field: spec.name.clone(),
                    from_unit: from,
                    to_unit: target.clone(),
                });
            }
        }
    }
    (out, log)
}

fn canon_text_value(v: &FieldValue, spec: &FieldSpec, canon: &CanonMap) -> FieldValue {
    match v {
        FieldValue::Text(s) => {
            let c = canon.canon(s);
            if *spec.dtype.scalar() == Dtype::Categorical && !spec.vocabulary.contains(&c) {
                v.clone()
            } else {
                FieldValue::Text(c)
            }
        }
        FieldValue::List(items) => {
            FieldValue::List(items.iter().map(|i| canon_text_value(i, spec, canon)).collect())
        }
        other => other.clone(),
    }
}

fn is_text_field(spec: &FieldSpec) -> bool {
    matches!(spec.dtype.scalar(), Dtype::String | Dtype::Categorical)
}

/// Rename field keys and map text values through `canon`.
pub fn canonicalize_record(r: &ExtractionRecord, schema: &Schema, canon: &CanonMap) -> ExtractionRecord {
    let rename = |name: &str| -> String {
        if schema.field(name).is_some() {
            return name.to_string();
        }
        let c = canon.canon(name);
        if schema.field(&c).is_some() {
            c
        } else {
            name.to_string()
        }
    };
    fn remap<V: Clone>(m: &BTreeMap<String, V>, rename: &dyn Fn(&str) -> String) -> BTreeMap<String, V> {
        let mut out = BTreeMap::new();
        // Exact schema names win over renamed variants.
        for (k, v) in m {
            let n = rename(k);
            if n == *k || !m.contains_key(&n) {
                out.entry(n).or_insert_with(|| v.clone());
            }
        }
        out
    }
    let mut out = r.clone();
    out.values = remap(&r.values, &rename);
    out.confidence = remap(&r.confidence, &rename);
    out.provenance = remap(&r.provenance, &rename);
    out.null_reasons = remap(&r.null_reasons, &rename);
    out.units = remap(&r.units, &rename);
    for spec in schema.fields.iter().filter(|f| is_text_field(f)) {
        if let Some(Some(v)) = out.values.get(&spec.name) {
            let c = canon_text_value(v, spec, canon);
            out.values.insert(spec.name.clone(), Some(c));
        }
    }
    out
}

pub const CANON_SYSTEM: &str = "You normalize terminology in scientific data tables. \
Reply with JSON only: {\"mappings\": {\"<variant>\": \"<canonical>\"}}. \
Map a term only when it is a lexical or morphological variant of another listed term or of a vocabulary entry; omit terms that are already canonical.";

/// Text values not covered by `canon`, per field, sorted.
pub fn unseen_terms(records: &[ExtractionRecord], schema: &Schema, canon: &CanonMap) -> BTreeMap<String, BTreeSet<String>> {
    fn collect(v: &FieldValue, out: &mut BTreeSet<String>) {
        match v {
            FieldValue::Text(s) => {
                out.insert(s.clone());
            }
            FieldValue::List(items) => items.iter().for_each(|i| collect(i, out)),
            _ => {}
        }
    }
    let mut out: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for spec in schema.fields.iter().filter(|f| is_text_field(f)) {
        let mut terms = BTreeSet::new();
        for r in records {
            if let Some(v) = r.value(&spec.name) {
                collect(v, &mut terms);
            }
        }
        terms.retain(|t| !canon.knows(t));
        if !terms.is_empty() {
            out.insert(spec.name.clone(), terms);
        }
    }
    out
}

/// One batched call asking the model to map unseen terms. Proposals are
/// merged only if they keep the map's fixed points intact.
pub fn propose_canon(
    records: &[ExtractionRecord],
    schema: &Schema,
    canon: &mut CanonMap,
    gateway: &Gateway,
    profile: &str,
) -> Result<Vec<LogEntry>, GatewayError> {
    let unseen = unseen_terms(records, schema, canon);
    if unseen.is_empty() {
        return Ok(Vec::new());
    }
    let mut user = String::new();
    for (field, terms) in &unseen {
        let spec = schema.field(field).expect("unseen terms come from schema fields");
        user.push_str(&format!("Field {field}"));
        if !spec.vocabulary.is_empty() {
            user.push_str(&format!(" (vocabulary: {})", spec.vocabulary.join(", ")));
        }
        user.push_str(":\n");
        for t in terms {
            user.push_str(&format!("- {t}\n"));
        }
    }
    let shape = JsonShape::new("canon_mappings", |v: &Value| {
        let m = v
            .get("mappings")
            .and_then(Value::as_object)
            .ok_or("expected {\"mappings\": {...}}")?;
        if m.values().any(|c| !c.is_string()) {
            return Err("every mapping must be a string".into());
        }
        Ok(v.clone())
    });
    let req = PromptRequest::new(profile, CANON_SYSTEM, &user);
    let out = gateway.complete_structured(&req, &StructuredTarget::Shape(&shape))?;
    let all: BTreeSet<&String> = unseen.values().flatten().collect();
    let mut log = Vec::new();
    let mut proposals: Vec<(String, String)> = out.value["mappings"]
        .as_object()
        .map(|m| {
            m.iter()
                .map(|(k, v)| (k.clone(), v.as_str().unwrap_or_default().to_string()))
                .collect()
        })
        .unwrap_or_default();
    proposals.sort();
    for (variant, canonical) in proposals {
        if !all.contains(&variant) || variant == canonical {
            continue;
        }
        if let Err(e) = canon.insert(&variant, &canonical, CanonSource::LlmProposed) {
            log.push(LogEntry::CanonProposalRejected {
                variant,
                canonical,
                reason: e.to_string(),
            });
        }
    }
    Ok(log)
}

/// Records sharing the same rounded key tuple.
#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub key: Vec<FieldValue>,
    pub members: Vec<ExtractionRecord>,
}

/// Partition by rounded key tuple, sorted by key. Records with a null key
/// field cannot be grouped and are returned separately.
pub fn group(
    records: &[ExtractionRecord],
    schema: &Schema,
    precision: u32,
) -> (Vec<Group>, Vec<ExtractionRecord>) {
    let keys = schema.key_names();
    let mut groups: Vec<Group> = Vec::new();
    let mut ungrouped = Vec::new();
    for r in records {
        let key: Option<Vec<FieldValue>> = keys
            .iter()
            .map(|k| r.value(k).map(|v| rounded(v, precision)))
            .collect();
        let Some(key) = key else {
            ungrouped.push(r.clone());
            continue;
        };
        match groups.iter_mut().find(|g| cmp_values(&g.key, &key) == Ordering::Equal) {
            Some(g) => g.members.push(r.clone()),
            None => groups.push(Group {
                key,
                members: vec![r.clone()],
            }),
        }
    }
    groups.sort_by(|a, b| cmp_values(&a.key, &b.key));
    for g in &mut groups {
        g.members
            .sort_by(|a, b| (&a.doc_id, &a.record_id).cmp(&(&b.doc_id, &b.record_id)));
    }
    (groups, ungrouped)
}

/// Range and vocabulary checks on a unit-normalized value.
pub fn passes_checks(spec: &FieldSpec, v: &FieldValue) -> bool {
    if !value_matches_dtype(spec, &spec.dtype, v) {
        return false;
    }
    let Some((lo, hi)) = spec.range else {
        return true;
    };
    let nums: Vec<f64> = match v {
        FieldValue::List(items) => items.iter().filter_map(FieldValue::as_f64).collect(),
        other => other.as_f64().into_iter().collect(),
    };
    nums.iter().all(|x| *x >= lo && *x <= hi)
}

/// Merge one group into a row: key fields take the group key, other fields
/// are voted on.
pub fn resolve_conflicts(g: &Group, schema: &Schema, precision: u32) -> AggregatedRecord {
    let mut row = AggregatedRecord {
        group_key: g.key.clone(),
        values: BTreeMap::new(),
        support: BTreeMap::new(),
        conflicts: Vec::new(),
        null_reasons: BTreeMap::new(),
    };
    let support_of = |r: &ExtractionRecord, v: &FieldValue| SupportEntry {
        doc_id: r.doc_id.clone(),
        record_id: r.record_id.clone(),
        value: v.clone(),
    };
    let mut key_iter = g.key.iter();
    for spec in &schema.fields {
        if spec.is_key {
            let k = key_iter.next().expect("key tuple matches key fields").clone();
            row.values.insert(spec.name.clone(), Some(k));
            row.support.insert(
                spec.name.clone(),
                g.members
                    .iter()
                    .map(|r| support_of(r, r.value(&spec.name).expect("grouped records have keys")))
                    .collect(),
            );
            continue;
        }
        // Buckets of equal (rounded) values, each with its sources.
        let mut buckets: Vec<(FieldValue, Vec<SupportEntry>)> = Vec::new();
        for r in &g.members {
            let Some(v) = r.value(&spec.name) else {
                continue;
            };
            let key = rounded(v, precision);
            match buckets.iter_mut().find(|(k, _)| k.total_cmp(&key) == Ordering::Equal) {
                Some((_, s)) => s.push(support_of(r, v)),
                None => buckets.push((key, vec![support_of(r, v)])),
            }
        }
        if buckets.is_empty() {
            row.values.insert(spec.name.clone(), None);
            row.null_reasons
                .insert(spec.name.clone(), NullReason::AbsentInEvidence);
            continue;
        }
        let mut candidates: Vec<Candidate> = buckets
            .into_iter()
            .map(|(_, sources)| {
                let value = sources
                    .iter()
                    .map(|s| &s.value)
                    .min_by(|a, b| a.total_cmp(b))
                    .expect("bucket is non-empty")
                    .clone();
                let vote_count = sources
                    .iter()
                    .map(|s| (&s.doc_id, &s.record_id))
                    .collect::<BTreeSet<_>>()
                    .len();
                Candidate {
                    rejected: !passes_checks(spec, &value),
                    value,
                    vote_count,
                    sources,
                }
            })
            .collect();
        candidates.sort_by(|a, b| {
            b.vote_count
                .cmp(&a.vote_count)
                .then_with(|| a.value.total_cmp(&b.value))
        });
        let total: usize = candidates.iter().filter(|c| !c.rejected).map(|c| c.vote_count).sum();
        let winner = candidates
            .iter()
            .find(|c| !c.rejected)
            .filter(|c| 2 * c.vote_count > total);
        let contested = candidates.len() > 1 || candidates.iter().any(|c| c.rejected);
        let resolution = match winner {
            Some(w) => {
                row.values.insert(spec.name.clone(), Some(w.value.clone()));
                row.support.insert(spec.name.clone(), w.sources.clone());
                Resolution::Majority
            }
            None => {
                row.values.insert(spec.name.clone(), None);
                row.null_reasons
                    .insert(spec.name.clone(), NullReason::UnresolvedConflict);
                if total == 0 {
                    Resolution::DeterministicReject
                } else {
                    Resolution::UnresolvedNull
                }
            }
        };
        if contested || winner.is_none() {
            row.conflicts.push(ConflictReport {
                field: spec.name.clone(),
                candidates,
                resolution,
            });
        }
    }
    row
}

fn dedup_list(v: &mut FieldValue) {
    if let FieldValue::List(items) = v {
        let mut kept: Vec<FieldValue> = Vec::with_capacity(items.len());
        for i in items.drain(..) {
            if !kept.iter().any(|k| k.total_cmp(&i) == Ordering::Equal) {
                kept.push(i);
            }
        }
        *items = kept;
    }
}

/// Repair what can be repaired (duplicate list items, identical duplicate
/// rows) and report what cannot.
pub fn integrity_check(
    table: &mut Vec<AggregatedRecord>,
    schema: &Schema,
    known: &BTreeSet<SourceId>,
) -> Vec<Violation> {
    let mut out = Vec::new();
    for row in table.iter_mut() {
        for v in row.values.values_mut().flatten() {
            dedup_list(v);
        }
    }
    let mut kept: Vec<AggregatedRecord> = Vec::with_capacity(table.len());
    for row in table.drain(..) {
        match kept
            .iter()
            .find(|k| cmp_values(&k.group_key, &row.group_key) == Ordering::Equal)
        {
            Some(k) if *k == row => {}
            Some(_) => out.push(Violation::DuplicateGroupKey {
                group_key: row.group_key.clone(),
            }),
            None => kept.push(row),
        }
    }
    *table = kept;
    for row in table.iter() {
        for spec in &schema.fields {
            let v = row.values.get(&spec.name).and_then(Option::as_ref);
            if spec.is_key && v.is_none() {
                out.push(Violation::NullKey {
                    group_key: row.group_key.clone(),
                    field: spec.name.clone(),
                });
            }
            if v.is_none() {
                continue;
            }
            let support = row.support.get(&spec.name).map(Vec::as_slice).unwrap_or(&[]);
            if support.is_empty() {
                out.push(Violation::MissingSupport {
                    group_key: row.group_key.clone(),
                    field: spec.name.clone(),
                });
            }
            for s in support {
                let id = SourceId {
                    doc_id: s.doc_id.clone(),
                    record_id: s.record_id.clone(),
                };
                if !known.contains(&id) {
                    out.push(Violation::UnknownSource {
                        group_key: row.group_key.clone(),
                        field: spec.name.clone(),
                        record_id: s.record_id.clone(),
                    });
                }
            }
        }
    }
    out
}

pub struct AggregateOptions<'a> {
    pub precision: u32,
    pub units: &'a UnitTable,
    pub canon: &'a CanonMap,
    /// Gateway and profile for canonicalization proposals; off when `None`.
    pub proposer: Option<(&'a Gateway, &'a str)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregation {
    pub table: Vec<AggregatedRecord>,
    pub log: Vec<LogEntry>,
    /// The canonicalization map after any accepted proposals.
    pub canon: CanonMap,
}

/// Full reduce: dedup, normalize units, canonicalize, group, vote, check.
/// Output depends only on the set of input records.
pub fn aggregate(
    records: &[ExtractionRecord],
    schema: &Schema,
    opts: &AggregateOptions<'_>,
) -> Result<Aggregation, GatewayError> {
    let mut log = Vec::new();
    let mut input: Vec<&ExtractionRecord> = records.iter().collect();
    input.sort_by_cached_key(|r| (r.doc_id.clone(), r.record_id.clone(), r.to_json_line()));
    let mut seen = BTreeSet::new();
    let mut unique = Vec::new();
    for r in input {
        let id = SourceId {
            doc_id: r.doc_id.clone(),
            record_id: r.record_id.clone(),
        };
        if seen.insert(id) {
            unique.push(r.clone());
        } else {
            log.push(LogEntry::DuplicateInput {
                doc_id: r.doc_id.clone(),
                record_id: r.record_id.clone(),
            });
        }
    }

    let mut canon = opts.canon.clone();
    let mut normalized: Vec<ExtractionRecord> = unique
        .iter()
        .map(|r| canonicalize_record(r, schema, &canon))
        .map(|r| {
            let (r, l) = normalize_units(&r, schema, opts.units);
            log.extend(l);
            r
        })
        .collect();
    if let Some((gw, profile)) = opts.proposer {
        log.extend(propose_canon(&normalized, schema, &mut canon, gw, profile)?);
        normalized = normalized
            .iter()
            .map(|r| canonicalize_record(r, schema, &canon))
            .collect();
    }

    let (groups, ungrouped) = group(&normalized, schema, opts.precision);
    for r in &ungrouped {
        log.push(LogEntry::Ungrouped {
            doc_id: r.doc_id.clone(),
            record_id: r.record_id.clone(),
            missing_keys: schema
                .key_names()
                .into_iter()
                .filter(|k| r.value(k).is_none())
                .collect(),
        });
    }
    let mut table: Vec<AggregatedRecord> = groups
        .iter()
        .map(|g| resolve_conflicts(g, schema, opts.precision))
        .collect();
    for row in &table {
        for c in &row.conflicts {
            log.push(LogEntry::Conflict {
                group_key: row.group_key.clone(),
                report: c.clone(),
            });
        }
    }
    let known: BTreeSet<SourceId> = seen;
    for v in integrity_check(&mut table, schema, &known) {
        log.push(LogEntry::Integrity { violation: v });
    }
    Ok(Aggregation { table, log, canon })
}

/// Rebuild per-source records from a table's support lists and conflict
/// candidates, so a table can be fed back into [`aggregate`].
pub fn records_from_table(table: &[AggregatedRecord], schema: &Schema) -> Vec<ExtractionRecord> {
    let mut by_source: BTreeMap<SourceId, ExtractionRecord> = BTreeMap::new();
    let mut put = |s: &SupportEntry, field: &str| {
        let id = SourceId {
            doc_id: s.doc_id.clone(),
            record_id: s.record_id.clone(),
        };
        let r = by_source.entry(id).or_insert_with(|| {
            let mut r = ExtractionRecord::new(&s.doc_id, 0);
            r.record_id = s.record_id.clone();
            r
        });
        r.values.insert(field.to_string(), Some(s.value.clone()));
        r.confidence.insert(field.to_string(), 1.0);
        if let Some(u) = schema.field(field).and_then(|f| f.unit.clone()) {
            r.units.insert(field.to_string(), u);
        }
    };
    for row in table {
        for (field, support) in &row.support {
            for s in support {
                put(s, field);
            }
        }
        for c in &row.conflicts {
            for cand in &c.candidates {
                for s in &cand.sources {
                    put(s, &c.field);
                }
            }
        }
    }
    let mut out: Vec<ExtractionRecord> = by_source.into_values().collect();
    for r in &mut out {
        for f in &schema.fields {
            if !r.values.contains_key(&f.name) {
                r.set_null(&f.name, NullReason::AbsentInEvidence);
            }
        }
    }
    out
}

pub fn table_to_json(table: &[AggregatedRecord]) -> String {
    let mut s = serde_json::to_string_pretty(table).expect("table serializes");
    s.push('\n');
    s
}

pub fn log_to_jsonl(log: &[LogEntry]) -> String {
    let mut s = String::new();
    for e in log {
        s.push_str(&serde_json::to_string(e).expect("log entry serializes"));
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::Provenance;
    use crate::schema::parse_schema;

    fn schema() -> Schema {
        parse_schema(&json!({"fields": [
            {"name": "virus", "dtype": "string", "required": true, "is_key": true},
            {"name": "temperature", "dtype": "float", "unit": "C", "is_key": true, "range": [-80, 100]},
            {"name": "survival_hours", "dtype": "float", "unit": "h", "range": [0, 10000]},
            {"name": "media", "dtype": "list_of(string)"}
        ]}))
        .unwrap()
    }

    fn rec(doc: &str, virus: &str, temp: f64, unit: &str, survival: Option<f64>) -> ExtractionRecord {
        let mut r = ExtractionRecord::new(doc, 0);
        let p = Provenance {
            doc_id: doc.into(),
            evidence: vec![],
            round: 1,
        };
        r.set("virus", FieldValue::Text(virus.into()), 1.0, p.clone());
        r.set("temperature", FieldValue::Float(temp), 1.0, p.clone());
        r.units.insert("temperature".into(), unit.into());
        match survival {
            Some(s) => r.set("survival_hours", FieldValue::Float(s), 1.0, p),
            None => r.set_null("survival_hours", NullReason::AbsentInEvidence),
        }
        r.set_null("media", NullReason::AbsentInEvidence);
        r
    }

    fn run(records: &[ExtractionRecord]) -> Aggregation {
        let units = UnitTable::builtin();
        let canon = CanonMap::builtin();
        aggregate(
            records,
            &schema(),
            &AggregateOptions {
                precision: 2,
                units: &units,
                canon: &canon,
                proposer: None,
            },
        )
        .unwrap()
    }

    #[test]
    fn fahrenheit_boiling_and_freezing_points() {
        let s = schema();
        let units = UnitTable::builtin();
        for (f, c) in [(212.0, 100.0), (32.0, 0.0)] {
            let (r, log) = normalize_units(&rec("d", "MS2", f, "F", None), &s, &units);
            assert!(log.is_empty());
            let got = r.value("temperature").unwrap().as_f64().unwrap();
            assert!((got - c).abs() <= 1e-9, "{f} F gave {got}");
            let (again, _) = normalize_units(&r, &s, &units);
            assert_eq!(again, r);
        }
    }

    #[test]
    fn missing_conversion_path_nulls_the_value() {
        let (r, log) = normalize_units(&rec("d", "MS2", 5.0, "mL", None), &schema(), &UnitTable::builtin());
        assert_eq!(r.value("temperature"), None);
        assert_eq!(r.null_reasons["temperature"], NullReason::UnresolvedConflict);
        assert!(matches!(log[0], LogEntry::NoConversionPath { .. }));
    }

    #[test]
    fn three_sources_collapse_to_one_row() {
        let out = run(&[
            rec("d1", "MS2", 77.0, "F", Some(10.0)),
            rec("d2", "MS2", 25.0, "C", Some(10.0)),
            rec("d3", "MS2", 25.0, "C", Some(10.0)),
        ]);
        assert_eq!(out.table.len(), 1);
        let row = &out.table[0];
        assert_eq!(row.values["temperature"], Some(FieldValue::Float(25.0)));
        assert_eq!(row.support["temperature"].len(), 3);
        assert_eq!(row.support["survival_hours"].len(), 3);
        assert!(row.conflicts.is_empty());
    }

    #[test]
    fn canon_map_field_names_and_fixed_points() {
        let canon = CanonMap::builtin();
        assert_eq!(canon.canon("temp."), "temperature");
        assert_eq!(canon.canon("temperature"), "temperature");
        let mut r = ExtractionRecord::new("d", 0);
        r.values.insert("temp.".into(), Some(FieldValue::Float(20.0)));
        r.values.insert("virus".into(), Some(FieldValue::Text("MS2".into())));
        let once = canonicalize_record(&r, &schema(), &canon);
        assert_eq!(once.value("temperature"), Some(&FieldValue::Float(20.0)));
        assert_eq!(canonicalize_record(&once, &schema(), &canon), once);

        let mut m = CanonMap::new();
        m.insert("a", "b", CanonSource::StaticTable).unwrap();
        assert!(matches!(
            m.insert("b", "a", CanonSource::LlmProposed),
            Err(CanonError::NotFixedPoint { .. })
        ));
        assert!(matches!(
            m.insert("c", "a", CanonSource::LlmProposed),
            Err(CanonError::NotFixedPoint { .. })
        ));
    }

    #[test]
    fn grouping_rounds_numeric_keys() {
        let (g, _) = group(
            &[rec("d1", "MS2", 25.0, "C", None), rec("d2", "MS2", 25.004, "C", None)],
            &schema(),
            2,
        );
        assert_eq!(g.len(), 1);
        let (g, _) = group(
            &[rec("d1", "MS2", 25.0, "C", None), rec("d2", "PhiX174", 25.0, "C", None)],
            &schema(),
            2,
        );
        assert_eq!(g.len(), 2);
    }

    fn voted(values: &[Option<f64>]) -> AggregatedRecord {
        let members = values
            .iter()
            .enumerate()
            .map(|(i, v)| rec(&format!("d{i}"), "MS2", 25.0, "C", *v))
            .collect();
        let g = Group {
            key: vec![FieldValue::Text("MS2".into()), FieldValue::Float(25.0)],
            members,
        };
        resolve_conflicts(&g, &schema(), 2)
    }

    #[test]
    fn voting_rules() {
        let row = voted(&[Some(5.0), Some(5.0), Some(7.0)]);
        assert_eq!(row.values["survival_hours"], Some(FieldValue::Float(5.0)));
        assert_eq!(row.conflicts[0].resolution, Resolution::Majority);

        let row = voted(&[Some(5.0), Some(7.0)]);
        assert_eq!(row.values["survival_hours"], None);
        assert_eq!(row.conflicts[0].resolution, Resolution::UnresolvedNull);
        assert_eq!(row.conflicts[0].candidates.len(), 2);

        let row = voted(&[Some(50000.0)]);
        assert_eq!(row.values["survival_hours"], None);
        assert_eq!(row.conflicts[0].resolution, Resolution::DeterministicReject);

        let row = voted(&[Some(5.0)]);
        assert_eq!(row.values["survival_hours"], Some(FieldValue::Float(5.0)));
        assert!(row.conflicts.is_empty());
    }

    #[test]
    fn integrity_repairs_lists_and_flags_unknown_sources() {
        let s = schema();
        let mut table = vec![AggregatedRecord {
            group_key: vec![FieldValue::Text("MS2".into()), FieldValue::Float(25.0)],
            values: BTreeMap::from([
                ("virus".into(), Some(FieldValue::Text("MS2".into()))),
                ("temperature".into(), Some(FieldValue::Float(25.0))),
                ("survival_hours".into(), None),
                (
                    "media".into(),
                    Some(FieldValue::List(vec![
                        FieldValue::Text("a".into()),
                        FieldValue::Text("a".into()),
                        FieldValue::Text("b".into()),
                    ])),
                ),
            ]),
            support: BTreeMap::new(),
            conflicts: vec![],
            null_reasons: BTreeMap::new(),
        }];
        let entry = |f: &str, v: FieldValue, rid: &str| {
            (
                f.to_string(),
                vec![SupportEntry {
                    doc_id: "d1".into(),
                    record_id: rid.into(),
                    value: v,
                }],
            )
        };
        table[0].support.extend([
            entry("virus", FieldValue::Text("MS2".into()), "d1#r0"),
            entry("temperature", FieldValue::Float(25.0), "d1#r0"),
            entry("media", FieldValue::Text("a".into()), "d1#r0"),
        ]);
        let known = BTreeSet::from([SourceId {
            doc_id: "d1".into(),
            record_id: "d1#r0".into(),
        }]);
        assert!(integrity_check(&mut table, &s, &known).is_empty());
        assert_eq!(
            table[0].values["media"],
            Some(FieldValue::List(vec![FieldValue::Text("a".into()), FieldValue::Text("b".into())]))
        );
        table[0].support.extend([entry("virus", FieldValue::Text("MS2".into()), "d1#r9")]);
        let v = integrity_check(&mut table, &s, &known);
        assert_eq!(v.len(), 1);
        assert!(matches!(v[0], Violation::UnknownSource { .. }));
    }

    #[test]
    fn aggregate_is_idempotent() {
        let s = schema();
        let first = run(&[
            rec("d1", "MS2", 77.0, "F", Some(10.0)),
            rec("d2", "MS2", 25.0, "C", Some(12.0)),
            rec("d3", "PhiX174", 4.0, "C", Some(300.0)),
        ]);
        let again = run(&records_from_table(&first.table, &s));
        assert_eq!(again.table, first.table);
    }

    #[test]
    fn null_keys_are_logged_not_dropped_silently() {
        let mut r = rec("d1", "MS2", 25.0, "C", None);
        r.set_null("temperature", NullReason::AbsentInEvidence);
        let out = run(&[r]);
        assert!(out.table.is_empty());
        assert!(matches!(&out.log[0], LogEntry::Ungrouped { missing_keys, .. } if missing_keys == &["temperature"]));
    }
}
