//! Retrieval, extraction and verification loop for one document.
//!
//! Round 1 retrieves evidence for every schema field and asks for all rows.
//! Each later round sends one follow-up per record that still has pending
//! fields (null, or below the confidence threshold), anchored on the record's
//! known key values. The loop stops when nothing is pending or the round
//! budget is spent; whatever is still missing is labeled null.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::document::Document;
use crate::gateway::{Gateway, GatewayError, PromptRequest, StructuredTarget};
use crate::record::{EvidenceRef, ExtractionRecord, NullReason, Provenance};
use crate::schema::{coerce_json, value_matches_dtype, FieldSpec, Schema};
use crate::store::{rank_order, QueryFilter, QueryResult, StoreError, VectorStore};
use crate::units::UnitTable;
use crate::value::FieldValue;

/// Confidence removed from values the model did not attribute to any entry.
pub const UNCITED_PENALTY: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RevConfig {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_max_rounds")]
    pub max_rounds: u32,
    #[serde(default = "default_threshold")]
    pub confidence_threshold: f64,
}

fn default_k() -> usize {
    5
}
fn default_max_rounds() -> u32 {
    3
}
fn default_threshold() -> f64 {
    0.7
}

impl Default for RevConfig {
    fn default() -> Self {
        Self {
            k: default_k(),
            max_rounds: default_max_rounds(),
            confidence_threshold: default_threshold(),
        }
    }
}

impl RevConfig {
    pub fn check(&self) -> Result<(), RevError> {
        if self.k == 0 {
            return Err(RevError::InvalidConfig("k must be at least 1".into()));
        }
        if self.max_rounds == 0 {
            return Err(RevError::InvalidConfig("max_rounds must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(RevError::InvalidConfig(
                "confidence_threshold must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum RevError {
    #[error("invalid REV configuration: {0}")]
    InvalidConfig(String),
    #[error("document {doc_id}, round {round}: {source}")]
    Gateway {
        doc_id: String,
        round: u32,
        #[source]
        source: GatewayError,
    },
    #[error("document {doc_id}: {source}")]
    Store {
        doc_id: String,
        #[source]
        source: StoreError,
    },
}

/// Everything one loop needs besides the document.
#[derive(Clone, Copy)]
pub struct RevContext<'a> {
    pub schema: &'a Schema,
    pub store: &'a VectorStore,
    pub gateway: &'a Gateway,
    pub profile: &'a str,
    pub units: &'a UnitTable,
    pub config: &'a RevConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestTrace {
    /// Record the follow-up was sent for; `None` in round 1.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub record_id: Option<String>,
    pub targets: Vec<String>,
    pub queries: Vec<String>,
    pub retrieved: Vec<String>,
    pub fingerprint: String,
    pub rows_returned: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub doc_id: String,
    pub round: u32,
    pub requests: Vec<RequestTrace>,
    /// `record_id.field` for every value set in this round.
    pub filled: Vec<String>,
    pub new_records: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RevOutcome {
    pub records: Vec<ExtractionRecord>,
    pub rounds: Vec<RoundTrace>,
    /// Records dropped because a required key stayed null.
    pub dropped: Vec<ExtractionRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub complete: bool,
    pub pending_fields: BTreeMap<String, Vec<String>>,
    pub low_confidence_fields: BTreeMap<String, Vec<String>>,
}

pub const EXTRACTION_SYSTEM: &str = "You extract structured experimental records from evidence taken from one scientific publication. \
Reply with JSON only, in the form {\"rows\": [{\"<field>\": {\"value\": ..., \"confidence\": <0..1>, \"evidence\": [\"<entry id>\", ...]}}]}. \
Return one row per distinct experimental condition. Use null for values the evidence does not state. \
Cite the bracketed entry ids that support each value.";

fn dtype_label(spec: &FieldSpec) -> String {
    match &spec.unit {
        Some(u) => format!("{}, {}", spec.dtype, u),
        None => spec.dtype.to_string(),
    }
}

/// One retrieval query per pending field. With `prior`, the record's filled
/// key values are appended as context anchors.
///
/// Panics if `pending` is empty.
pub fn formulate_queries(
    schema: &Schema,
    pending: &[String],
    prior: Option<&ExtractionRecord>,
) -> Vec<String> {
    assert!(!pending.is_empty(), "formulate_queries needs at least one pending field");
    let anchors = prior.map(|r| anchor_text(schema, r)).unwrap_or_default();
    pending
        .iter()
        .map(|name| {
            let mut q = match schema.field(name) {
                Some(spec) => {
                    let mut q = format!("{} ({})", spec.name, dtype_label(spec));
                    if !spec.description.is_empty() {
                        q.push_str(": ");
                        q.push_str(&spec.description);
                    }
                    q
                }
                None => name.clone(),
            };
            if !schema.description.is_empty() {
                q.push_str(" - ");
                q.push_str(&schema.description);
            }
            if !anchors.is_empty() {
                q.push_str(" | context: ");
                q.push_str(&anchors);
            }
            q
        })
        .collect()
}

fn anchor_text(schema: &Schema, r: &ExtractionRecord) -> String {
    schema
        .key_fields()
        .filter_map(|k| r.value(&k.name).map(|v| format!("{}={}", k.name, v)))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Union of the top-k results of every query, restricted to one document,
/// ordered by best score then entry id.
pub fn retrieve(
    store: &VectorStore,
    doc_id: &str,
    queries: &[String],
    k: usize,
) -> Result<Vec<QueryResult>, StoreError> {
    let filter = QueryFilter::doc(doc_id);
    let mut best: BTreeMap<String, QueryResult> = BTreeMap::new();
    for q in queries {
        for r in store.query(q, k, Some(&filter))? {
            match best.get(&r.entry_id) {
                Some(prev) if prev.score >= r.score => {}
                _ => {
                    best.insert(r.entry_id.clone(), r);
                }
            }
        }
    }
    let mut out: Vec<QueryResult> = best.into_values().collect();
    out.sort_by(rank_order);
    Ok(out)
}

/// The user prompt for one extraction call.
pub fn extraction_prompt(
    schema: &Schema,
    targets: &[String],
    known: &str,
    evidence: &[QueryResult],
    store: &VectorStore,
) -> String {
    let mut p = format!("Schema: {}", schema.schema_id);
    if !schema.description.is_empty() {
        p.push_str(" - ");
        p.push_str(&schema.description);
    }
    p.push_str("\nFields:\n");
    for f in &schema.fields {
        p.push_str(&format!("- {} ({}", f.name, dtype_label(f)));
        if f.is_key {
            p.push_str(", key");
        }
        if f.required {
            p.push_str(", required");
        }
        p.push(')');
        if !f.vocabulary.is_empty() {
            p.push_str(&format!(" one of [{}]", f.vocabulary.join(", ")));
        }
        if let Some((lo, hi)) = f.range {
            p.push_str(&format!(" range [{lo}, {hi}]"));
        }
        if !f.description.is_empty() {
            p.push_str(": ");
            p.push_str(&f.description);
        }
        p.push('\n');
    }
    p.push_str(&format!("Target fields: {}\n", targets.join(", ")));
    if !known.is_empty() {
        p.push_str(&format!("Known values: {known}\n"));
    }
    p.push_str("Evidence:\n");
    for r in evidence {
        let text = store
            .get(&r.entry_id)
            .map(|e| e.text_surrogate.as_str())
            .unwrap_or("");
        p.push_str(&format!("[{}] ({}) {}\n", r.entry_id, r.modality.as_str(), text));
    }
    p
}

/// One extracted row before it is attached to a record.
#[derive(Debug, Clone, PartialEq)]
pub struct RowDraft {
    pub cells: BTreeMap<String, Cell>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Value {
        value: FieldValue,
        confidence: f64,
        evidence: Vec<EvidenceRef>,
        unit: Option<String>,
    },
    Null(NullReason),
}

impl RowDraft {
    fn value(&self, field: &str) -> Option<&FieldValue> {
        match self.cells.get(field) {
            Some(Cell::Value { value, .. }) => Some(value),
            _ => None,
        }
    }
}

/// Result of one extraction call.
#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub rows: Vec<RowDraft>,
    pub fingerprint: String,
    pub diagnostic: Option<String>,
}

/// Ask the model for rows under `schema` given retrieved evidence.
///
/// A reply that stays invalid after repair yields no rows and a diagnostic;
/// other gateway failures are returned.
pub fn extract(
    doc_id: &str,
    evidence: &[QueryResult],
    targets: &[String],
    known: &str,
    ctx: &RevContext<'_>,
) -> Result<Extraction, GatewayError> {
    assert!(!evidence.is_empty(), "extract needs evidence");
    let user = extraction_prompt(ctx.schema, targets, known, evidence, ctx.store);
    let req = PromptRequest::new(ctx.profile, EXTRACTION_SYSTEM, &user);
    let fingerprint = req.fingerprint();
    let out = match ctx
        .gateway
        .complete_structured(&req, &StructuredTarget::Rows(ctx.schema))
    {
        Ok(out) => out,
        Err(GatewayError::StructureInvalidAfterRepair { last_error, .. }) => {
            return Ok(Extraction {
                rows: Vec::new(),
                fingerprint,
                diagnostic: Some(format!("{doc_id}: extraction reply unusable: {last_error}")),
            })
        }
        Err(e) => return Err(e),
    };
    let all_evidence: Vec<EvidenceRef> = evidence
        .iter()
        .filter_map(|r| ctx.store.get(&r.entry_id))
        .map(|e| EvidenceRef {
            modality: e.modality,
            source: e.source.clone(),
            entry_id: e.entry_id.clone(),
        })
        .collect();
    let rows = out.value["rows"]
        .as_array()
        .map(|rows| {
            rows.iter()
                .map(|row| read_row(row, ctx.schema, &all_evidence))
                .collect()
        })
        .unwrap_or_default();
    Ok(Extraction {
        rows,
        fingerprint,
        diagnostic: None,
    })
}

fn read_row(row: &Value, schema: &Schema, all_evidence: &[EvidenceRef]) -> RowDraft {
    let mut cells = BTreeMap::new();
    let Some(obj) = row.as_object() else {
        return RowDraft { cells };
    };
    for (name, cell) in obj {
        let Some(spec) = schema.field(name) else {
            continue;
        };
        if cell.get("coercion_error").is_some() {
            cells.insert(name.clone(), Cell::Null(NullReason::CoercionFailed));
            continue;
        }
        // The gateway already coerced the value; this recovers its dtype.
        let value = match coerce_json(spec, &cell["value"]) {
            Ok(Some(c)) => c.value,
            Ok(None) => {
                cells.insert(name.clone(), Cell::Null(NullReason::AbsentInEvidence));
                continue;
            }
            Err(_) => {
                cells.insert(name.clone(), Cell::Null(NullReason::CoercionFailed));
                continue;
            }
        };
        let cited: BTreeSet<&str> = cell["evidence"]
            .as_array()
            .map(|ids| ids.iter().filter_map(Value::as_str).collect())
            .unwrap_or_default();
        let mut confidence = cell["confidence"].as_f64().unwrap_or(1.0);
        let mut evidence: Vec<EvidenceRef> = all_evidence
            .iter()
            .filter(|e| cited.contains(e.entry_id.as_str()))
            .cloned()
            .collect();
        if evidence.is_empty() {
            evidence = all_evidence.to_vec();
            confidence -= UNCITED_PENALTY;
        }
        cells.insert(
            name.clone(),
            Cell::Value {
                value,
                confidence: confidence.clamp(0.0, 1.0),
                evidence,
                unit: cell["unit"].as_str().map(str::to_string),
            },
        );
    }
    RowDraft { cells }
}

fn numbers_equal(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

pub(crate) fn same_value(a: &FieldValue, b: &FieldValue) -> bool {
    match (a.as_f64(), b.as_f64()) {
        (Some(x), Some(y)) => numbers_equal(x, y),
        _ => a == b,
    }
}

/// A row belongs to a record when none of the key values it states conflict
/// with the record's key values.
fn row_fits(row: &RowDraft, record: &ExtractionRecord, schema: &Schema) -> bool {
    schema.key_fields().all(|k| match (row.value(&k.name), record.value(&k.name)) {
        (Some(a), Some(b)) => same_value(a, b),
        _ => true,
    })
}

fn has_all_keys(row: &RowDraft, schema: &Schema) -> bool {
    schema.key_fields().all(|k| row.value(&k.name).is_some())
}

/// Record built from a row; fields the row does not mention are null.
fn record_from_row(
    doc_id: &str,
    index: usize,
    row: &RowDraft,
    schema: &Schema,
    round: u32,
) -> ExtractionRecord {
    let mut r = ExtractionRecord::new(doc_id, index);
    for f in &schema.fields {
        match row.cells.get(&f.name) {
            Some(Cell::Value {
                value,
                confidence,
                evidence,
                unit,
            }) => {
                r.set(
                    &f.name,
                    value.clone(),
                    *confidence,
                    Provenance {
                        doc_id: doc_id.to_string(),
                        evidence: evidence.clone(),
                        round,
                    },
                );
                if let Some(u) = unit {
                    r.units.insert(f.name.clone(), u.clone());
                }
            }
            Some(Cell::Null(reason)) => r.set_null(&f.name, *reason),
            None => r.set_null(&f.name, NullReason::AbsentInEvidence),
        }
    }
    r
}

/// Fill `fields` of `record` from `row` where the row improves on them.
/// Returns the names of the fields that changed.
fn merge_row(
    record: &mut ExtractionRecord,
    row: &RowDraft,
    fields: &[String],
    round: u32,
) -> Vec<String> {
    let mut changed = Vec::new();
    for f in fields {
        match row.cells.get(f) {
            Some(Cell::Value {
                value,
                confidence,
                evidence,
                unit,
            }) => {
                let old = record.value(f).map(|_| record.confidence.get(f).copied().unwrap_or(0.0));
                if old.is_some_and(|c| c >= *confidence) {
                    continue;
                }
                record.set(
                    f,
                    value.clone(),
                    *confidence,
                    Provenance {
                        doc_id: record.doc_id.clone(),
                        evidence: evidence.clone(),
                        round,
                    },
                );
                match unit {
                    Some(u) => record.units.insert(f.clone(), u.clone()),
                    None => record.units.remove(f),
                };
                changed.push(f.clone());
            }
            Some(Cell::Null(NullReason::CoercionFailed)) if record.value(f).is_none() => {
                record.null_reasons.insert(f.clone(), NullReason::CoercionFailed);
            }
            _ => {}
        }
    }
    changed
}

/// Deterministic checks: vocabulary, unit compatibility and range (after
/// conversion to the schema unit). A failing field gets confidence 0.
pub fn check_field(spec: &FieldSpec, r: &ExtractionRecord, units: &UnitTable) -> bool {
    let Some(v) = r.value(&spec.name) else {
        return true;
    };
    if !value_matches_dtype(spec, &spec.dtype, v) {
        return false;
    }
    let detected = r.units.get(&spec.name);
    let convert = |x: f64| -> Option<f64> {
        match (detected, &spec.unit) {
            (Some(from), Some(to)) => units.convert(x, from, to),
            _ => Some(x),
        }
    };
    let numbers: Vec<f64> = match v {
        FieldValue::List(items) => items.iter().filter_map(FieldValue::as_f64).collect(),
        other => other.as_f64().into_iter().collect(),
    };
    for x in numbers {
        let Some(x) = convert(x) else {
            return false;
        };
        if let Some((lo, hi)) = spec.range {
            if x < lo || x > hi {
                return false;
            }
        }
    }
    if let (Some(from), Some(to)) = (detected, &spec.unit) {
        if !units.compatible(from, to) {
            return false;
        }
    }
    true
}

/// Apply deterministic checks, then report what is still pending.
pub fn verify(
    records: &mut [ExtractionRecord],
    schema: &Schema,
    units: &UnitTable,
    config: &RevConfig,
) -> VerificationReport {
    let mut report = VerificationReport {
        complete: true,
        ..Default::default()
    };
    for r in records.iter_mut() {
        let mut pending = Vec::new();
        let mut low = Vec::new();
        for spec in &schema.fields {
            if r.value(&spec.name).is_none() {
                pending.push(spec.name.clone());
                continue;
            }
            if !check_field(spec, r, units) {
                r.confidence.insert(spec.name.clone(), 0.0);
            }
            let c = r.confidence.get(&spec.name).copied().unwrap_or(0.0);
            if c < config.confidence_threshold {
                pending.push(spec.name.clone());
                low.push(spec.name.clone());
            }
        }
        if !pending.is_empty() {
            report.complete = false;
            report.pending_fields.insert(r.record_id.clone(), pending);
        }
        if !low.is_empty() {
            report.low_confidence_fields.insert(r.record_id.clone(), low);
        }
    }
    report
}

fn gateway_err(doc_id: &str, round: u32) -> impl FnOnce(GatewayError) -> RevError + '_ {
    move |source| RevError::Gateway {
        doc_id: doc_id.to_string(),
        round,
        source,
    }
}

/// Run the loop for one indexed document.
pub fn run(doc: &Document, ctx: &RevContext<'_>) -> Result<RevOutcome, RevError> {
    ctx.config.check()?;
    let doc_id = doc.doc_id.as_str();
    let store_err = |source| RevError::Store {
        doc_id: doc_id.to_string(),
        source,
    };
    let k = ctx.config.k;
    let mut records: Vec<ExtractionRecord> = Vec::new();
    let mut rounds = Vec::new();

    // Round 1: every field, no anchors.
    let targets = ctx.schema.field_names();
    let queries = formulate_queries(ctx.schema, &targets, None);
    let evidence = retrieve(ctx.store, doc_id, &queries, k).map_err(store_err)?;
    let mut trace = RoundTrace {
        doc_id: doc_id.to_string(),
        round: 1,
        requests: Vec::new(),
        filled: Vec::new(),
        new_records: Vec::new(),
        diagnostics: Vec::new(),
    };
    if evidence.is_empty() {
        trace
            .diagnostics
            .push(format!("{doc_id}: no indexed evidence"));
        rounds.push(trace);
        return Ok(RevOutcome {
            records,
            rounds,
            dropped: Vec::new(),
        });
    }
    let ex = extract(doc_id, &evidence, &targets, "", ctx).map_err(gateway_err(doc_id, 1))?;
    trace.requests.push(RequestTrace {
        record_id: None,
        targets: targets.clone(),
        queries,
        retrieved: evidence.iter().map(|r| r.entry_id.clone()).collect(),
        fingerprint: ex.fingerprint,
        rows_returned: ex.rows.len(),
    });
    trace.diagnostics.extend(ex.diagnostic);
    for row in &ex.rows {
        let r = record_from_row(doc_id, records.len(), row, ctx.schema, 1);
        for f in &ctx.schema.fields {
            if r.value(&f.name).is_some() {
                trace.filled.push(format!("{}.{}", r.record_id, f.name));
            }
        }
        trace.new_records.push(r.record_id.clone());
        records.push(r);
    }
    let mut report = verify(&mut records, ctx.schema, ctx.units, ctx.config);
    rounds.push(trace);

    let mut round = 1;
    while !report.complete && round < ctx.config.max_rounds {
        round += 1;
        let mut trace = RoundTrace {
            doc_id: doc_id.to_string(),
            round,
            requests: Vec::new(),
            filled: Vec::new(),
            new_records: Vec::new(),
            diagnostics: Vec::new(),
        };
        let snapshot: Vec<(usize, Vec<String>)> = records
            .iter()
            .enumerate()
            .filter_map(|(i, r)| report.pending_fields.get(&r.record_id).map(|p| (i, p.clone())))
            .collect();
        for (i, pending) in snapshot {
            let queries = formulate_queries(ctx.schema, &pending, Some(&records[i]));
            let evidence = retrieve(ctx.store, doc_id, &queries, k).map_err(store_err)?;
            if evidence.is_empty() {
                continue;
            }
            let known = anchor_text(ctx.schema, &records[i]);
            let ex = extract(doc_id, &evidence, &pending, &known, ctx)
                .map_err(gateway_err(doc_id, round))?;
            trace.requests.push(RequestTrace {
                record_id: Some(records[i].record_id.clone()),
                targets: pending.clone(),
                queries,
                retrieved: evidence.iter().map(|r| r.entry_id.clone()).collect(),
                fingerprint: ex.fingerprint,
                rows_returned: ex.rows.len(),
            });
            trace.diagnostics.extend(ex.diagnostic);
            let mut attached = false;
            for row in &ex.rows {
                if !attached && row_fits(row, &records[i], ctx.schema) {
                    attached = true;
                    for f in merge_row(&mut records[i], row, &pending, round) {
                        trace.filled.push(format!("{}.{}", records[i].record_id, f));
                    }
                } else if has_all_keys(row, ctx.schema)
                    && !records.iter().any(|r| row_fits(row, r, ctx.schema))
                {
                    let r = record_from_row(doc_id, records.len(), row, ctx.schema, round);
                    for f in &ctx.schema.fields {
                        if r.value(&f.name).is_some() {
                            trace.filled.push(format!("{}.{}", r.record_id, f.name));
                        }
                    }
                    trace.new_records.push(r.record_id.clone());
                    records.push(r);
                }
            }
        }
        report = verify(&mut records, ctx.schema, ctx.units, ctx.config);
        rounds.push(trace);
    }

    for r in records.iter_mut() {
        for f in &ctx.schema.fields {
            if r.value(&f.name).is_none() && r.null_reasons.get(&f.name) != Some(&NullReason::CoercionFailed) {
                r.set_null(&f.name, NullReason::AbsentInEvidence);
            }
        }
    }
    let (records, dropped): (Vec<_>, Vec<_>) = records.into_iter().partition(|r| {
        ctx.schema
            .key_fields()
            .filter(|k| k.required)
            .all(|k| r.value(&k.name).is_some())
    });
    if let Some(last) = rounds.last_mut() {
        for r in &dropped {
            last.diagnostics.push(format!(
                "{}: dropped, required key field still null",
                r.record_id
            ));
        }
    }
    Ok(RevOutcome {
        records,
        rounds,
        dropped,
    })
}
