//! Row-level scoring of an extracted table against ground truth.
//!
//! Ground-truth rows are paired with extracted rows by maximum-weight
//! bipartite matching on key-field similarity; precision and recall count
//! matched rows, accuracy counts agreeing non-key fields inside matched pairs.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::aggregate::{AggregatedRecord, CanonMap};
use crate::assignment::max_weight_matching;
use crate::schema::{coerce_json, coerce_value, FieldSpec, Schema};
use crate::units::UnitTable;
use crate::value::FieldValue;

pub type Row = BTreeMap<String, Option<FieldValue>>;

/// Ground-truth column naming the source paper, used for per-paper scores.
pub const DOC_COLUMN: &str = "doc_id";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StringNormalizer {
    Exact,
    #[default]
    CasefoldTrim,
    /// Map through the canonicalization table, then casefold and trim.
    Canonicalized,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccuracyScope {
    /// Non-key fields present in the ground truth.
    #[default]
    NonKey,
    /// Every schema field present in the ground truth.
    AllFields,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchConfig {
    /// Defaults to the schema's key fields when empty.
    #[serde(default)]
    pub key_fields: Vec<String>,
    #[serde(default = "default_rel_tol")]
    pub numeric_rel_tol: f64,
    #[serde(default = "default_abs_tol")]
    pub numeric_abs_tol: f64,
    #[serde(default)]
    pub string_normalizer: StringNormalizer,
    #[serde(default = "default_threshold")]
    pub candidate_threshold: f64,
    #[serde(default)]
    pub accuracy_scope: AccuracyScope,
}

fn default_rel_tol() -> f64 {
    0.05
}
fn default_abs_tol() -> f64 {
    1e-6
}
fn default_threshold() -> f64 {
    0.5
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            key_fields: Vec::new(),
            numeric_rel_tol: default_rel_tol(),
            numeric_abs_tol: default_abs_tol(),
            string_normalizer: StringNormalizer::default(),
            candidate_threshold: default_threshold(),
            accuracy_scope: AccuracyScope::default(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("invalid match configuration: {0}")]
    InvalidConfig(String),
    #[error("cannot read ground truth {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("ground truth row {row}, column `{column}`: {reason}")]
    BadCell {
        row: usize,
        column: String,
        reason: String,
    },
    #[error("malformed ground truth: {0}")]
    Malformed(String),
}

impl MatchConfig {
    /// Key fields to match on, resolved against the schema.
    pub fn keys(&self, schema: &Schema) -> Result<Vec<String>, EvalError> {
        let keys = if self.key_fields.is_empty() {
            schema.key_names()
        } else {
            self.key_fields.clone()
        };
        if keys.is_empty() {
            return Err(EvalError::InvalidConfig("no key fields".into()));
        }
        if let Some(k) = keys.iter().find(|k| schema.field(k).is_none()) {
            return Err(EvalError::InvalidConfig(format!("key field `{k}` is not in the schema")));
        }
        if !(self.numeric_rel_tol >= 0.0 && self.numeric_abs_tol >= 0.0) {
            return Err(EvalError::InvalidConfig("tolerances must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.candidate_threshold) {
            return Err(EvalError::InvalidConfig("candidate_threshold must lie in [0, 1]".into()));
        }
        Ok(keys)
    }
}

/// Everything field comparison needs besides the values.
#[derive(Clone, Copy)]
pub struct Comparator<'a> {
    pub config: &'a MatchConfig,
    pub canon: Option<&'a CanonMap>,
}

impl Comparator<'_> {
    fn normalize(&self, s: &str) -> String {
        match self.config.string_normalizer {
            StringNormalizer::Exact => s.to_string(),
            StringNormalizer::CasefoldTrim => s.trim().to_lowercase(),
            StringNormalizer::Canonicalized => {
                let c = self.canon.map_or_else(|| s.to_string(), |m| m.canon(s));
                c.trim().to_lowercase()
            }
        }
    }

    fn same(&self, ext: &FieldValue, gt: &FieldValue) -> bool {
        match (ext, gt) {
            (FieldValue::List(a), FieldValue::List(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| self.same(x, y))
            }
            (FieldValue::Text(a), FieldValue::Text(b)) => self.normalize(a) == self.normalize(b),
            (FieldValue::Bool(a), FieldValue::Bool(b)) => a == b,
            _ => match (ext.as_f64(), gt.as_f64()) {
                (Some(a), Some(b)) => {
                    (a - b).abs()
                        <= self
                            .config
                            .numeric_abs_tol
                            .max(self.config.numeric_rel_tol * b.abs())
                }
                _ => false,
            },
        }
    }

    /// 1 or 0. Numeric tolerance is relative to the ground-truth value `gt`.
    pub fn field_similarity(&self, ext: Option<&FieldValue>, gt: Option<&FieldValue>) -> f64 {
        match (ext, gt) {
            (None, None) => 1.0,
            (Some(a), Some(b)) if self.same(a, b) => 1.0,
            _ => 0.0,
        }
    }

    /// Number of key fields on which the rows agree.
    pub fn key_agreement(&self, keys: &[String], gt: &Row, ext: &Row) -> usize {
        keys.iter()
            .filter(|k| {
                let e = ext.get(*k).and_then(Option::as_ref);
                let g = gt.get(*k).and_then(Option::as_ref);
                self.field_similarity(e, g) == 1.0
            })
            .count()
    }
}

/// Extracted rows whose key similarity reaches the threshold, best first.
/// Rows agreeing on no key field are never candidates.
pub fn candidate_matches(
    gt_row: &Row,
    ext_rows: &[Row],
    keys: &[String],
    cmp: &Comparator<'_>,
) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64)> = ext_rows
        .iter()
        .enumerate()
        .filter_map(|(j, e)| {
            let c = cmp.key_agreement(keys, gt_row, e);
            let s = c as f64 / keys.len() as f64;
            (c > 0 && s >= cmp.config.candidate_threshold).then_some((j, s))
        })
        .collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pair {
    pub gt: usize,
    pub ext: usize,
    pub similarity: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub pairs: Vec<Pair>,
    pub unmatched_gt: Vec<usize>,
    pub unmatched_ext: Vec<usize>,
}

/// Maximum total key similarity over candidate edges; among equal totals the
/// one with most pairs, then the lexicographically smallest `(gt, ext)` pair
/// list. Preferring more pairs keeps the pair count symmetric in gt and ext.
pub fn bipartite_match(gt: &[Row], ext: &[Row], keys: &[String], cmp: &Comparator<'_>) -> MatchResult {
    // Similarity is agreement / |keys|, so integer agreement counts are
    // exact proportional weights.
    let mut weights = vec![vec![None; ext.len()]; gt.len()];
    for (i, g) in gt.iter().enumerate() {
        for (j, s) in candidate_matches(g, ext, keys, cmp) {
            weights[i][j] = Some((s * keys.len() as f64).round() as i64);
        }
    }
    // One extra unit per pair, scaled so it can never outweigh similarity.
    let scale = gt.len().min(ext.len()) as i64 + 1;
    let scaled: Vec<Vec<Option<i64>>> = weights
        .iter()
        .map(|r| r.iter().map(|w| w.map(|w| w * scale + 1)).collect())
        .collect();
    let assignment = max_weight_matching(&scaled);
    let mut pairs = Vec::new();
    let mut used = vec![false; ext.len()];
    let mut unmatched_gt = Vec::new();
    for (i, a) in assignment.iter().enumerate() {
        match a {
            Some(j) => {
                used[*j] = true;
                pairs.push(Pair {
                    gt: i,
                    ext: *j,
                    similarity: weights[i][*j].unwrap_or(0) as f64 / keys.len() as f64,
                });
            }
            None => unmatched_gt.push(i),
        }
    }
    let unmatched_ext = (0..ext.len()).filter(|&j| !used[j]).collect();
    MatchResult {
        pairs,
        unmatched_gt,
        unmatched_ext,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub n_gt: usize,
    pub n_ext: usize,
    pub n_matched: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub per_field_accuracy: BTreeMap<String, f64>,
    pub counts: Counts,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Precision, recall and F1 from row counts; zero denominators give 0.
pub fn prf(counts: Counts) -> (f64, f64, f64) {
    let p = ratio(counts.n_matched, counts.n_ext);
    let r = ratio(counts.n_matched, counts.n_gt);
    let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f1)
}

/// Fields scored for accuracy: schema fields present in the ground truth,
/// without key fields unless the scope says otherwise.
pub fn accuracy_fields(schema: &Schema, gt_columns: &[String], keys: &[String], scope: AccuracyScope) -> Vec<String> {
    schema
        .fields
        .iter()
        .map(|f| &f.name)
        .filter(|n| gt_columns.contains(n))
        .filter(|n| scope == AccuracyScope::AllFields || !keys.contains(n))
        .cloned()
        .collect()
}

pub fn compute_metrics(
    m: &MatchResult,
    gt: &[Row],
    ext: &[Row],
    fields: &[String],
    cmp: &Comparator<'_>,
) -> Metrics {
    let counts = Counts {
        n_gt: gt.len(),
        n_ext: ext.len(),
        n_matched: m.pairs.len(),
    };
    let (precision, recall, f1) = prf(counts);
    let mut correct_total = 0;
    let mut per_field_accuracy = BTreeMap::new();
    for f in fields {
        let correct = m
            .pairs
            .iter()
            .filter(|p| {
                let e = ext[p.ext].get(f).and_then(Option::as_ref);
                let g = gt[p.gt].get(f).and_then(Option::as_ref);
                cmp.field_similarity(e, g) == 1.0
            })
            .count();
        correct_total += correct;
        per_field_accuracy.insert(f.clone(), ratio(correct, m.pairs.len()));
    }
    Metrics {
        precision,
        recall,
        f1,
        accuracy: ratio(correct_total, m.pairs.len() * fields.len()),
        per_field_accuracy,
        counts,
    }
}

/// Ground-truth rows with the column names they came with.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub columns: Vec<String>,
    pub rows: Vec<Row>,
    /// Value of the [`DOC_COLUMN`] per row, when present.
    pub doc_ids: Vec<Option<String>>,
}

fn cell_from_text(
    spec: &FieldSpec,
    raw: &str,
    units: &UnitTable,
    row: usize,
) -> Result<Option<FieldValue>, EvalError> {
    if raw.trim().is_empty() {
        return Ok(None);
    }
    let bad = |reason: String| EvalError::BadCell {
        row,
        column: spec.name.clone(),
        reason,
    };
    let c = coerce_value(spec, raw).map_err(|e| bad(e.to_string()))?;
    to_schema_unit(spec, c.value, c.unit.as_deref(), units).map(Some).ok_or_else(|| {
        bad(format!(
            "no conversion from {} to {}",
            c.unit.unwrap_or_default(),
            spec.unit.clone().unwrap_or_default()
        ))
    })
}

fn to_schema_unit(spec: &FieldSpec, v: FieldValue, unit: Option<&str>, units: &UnitTable) -> Option<FieldValue> {
    let (Some(from), Some(to)) = (unit, &spec.unit) else {
        return Some(v);
    };
    let a = units.path(from, to)?;
    Some(match v {
        FieldValue::Float(x) => FieldValue::Float(a.apply(x)),
        FieldValue::Integer(i) => FieldValue::Float(a.apply(i as f64)),
        FieldValue::List(items) => FieldValue::List(
            items
                .into_iter()
                .map(|i| i.as_f64().map_or(i, |x| FieldValue::Float(a.apply(x))))
                .collect(),
        ),
        other => other,
    })
}

/// Parse ground truth from CSV text. The header names the fields; cells are
/// coerced under the schema and converted to schema units. Columns that are
/// not schema fields are ignored, except [`DOC_COLUMN`].
pub fn ground_truth_from_csv(text: &str, schema: &Schema, units: &UnitTable) -> Result<GroundTruth, EvalError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::Headers)
        .from_reader(text.as_bytes());
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| EvalError::Malformed(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut gt = GroundTruth {
        columns: headers.clone(),
        rows: Vec::new(),
        doc_ids: Vec::new(),
    };
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| EvalError::Malformed(e.to_string()))?;
        let mut row = Row::new();
        let mut doc = None;
        for (h, cell) in headers.iter().zip(rec.iter()) {
            if h == DOC_COLUMN {
                doc = Some(cell.trim().to_string()).filter(|d| !d.is_empty());
            } else if let Some(spec) = schema.field(h) {
                row.insert(h.clone(), cell_from_text(spec, cell, units, i)?);
            }
        }
        gt.rows.push(row);
        gt.doc_ids.push(doc);
    }
    Ok(gt)
}

/// Parse ground truth from a JSON array of rows, either plain
/// `{field: value}` objects or aggregated-table rows with a `values` map.
pub fn ground_truth_from_json(v: &Value, schema: &Schema, units: &UnitTable) -> Result<GroundTruth, EvalError> {
    let items = v
        .as_array()
        .ok_or_else(|| EvalError::Malformed("expected a JSON array of rows".into()))?;
    let mut columns = BTreeSet::new();
    let mut gt = GroundTruth {
        columns: Vec::new(),
        rows: Vec::new(),
        doc_ids: Vec::new(),
    };
    for (i, item) in items.iter().enumerate() {
        let obj = item
            .get("values")
            .unwrap_or(item)
            .as_object()
            .ok_or_else(|| EvalError::Malformed(format!("row {i} is not an object")))?;
        let mut row = Row::new();
        for (k, raw) in obj {
            columns.insert(k.clone());
            let Some(spec) = schema.field(k) else {
                continue;
            };
            let bad = |reason: String| EvalError::BadCell {
                row: i,
                column: k.clone(),
                reason,
            };
            let cell = match coerce_json(spec, raw).map_err(|e| bad(e.to_string()))? {
                None => None,
                Some(c) => Some(
                    to_schema_unit(spec, c.value, c.unit.as_deref(), units)
                        .ok_or_else(|| bad("no unit conversion".into()))?,
                ),
            };
            row.insert(k.clone(), cell);
        }
        gt.doc_ids.push(
            item.get(DOC_COLUMN)
                .or_else(|| obj.get(DOC_COLUMN))
                .and_then(Value::as_str)
                .map(str::to_string),
        );
        gt.rows.push(row);
    }
    gt.columns = columns.into_iter().collect();
    Ok(gt)
}

pub fn load_ground_truth(path: &Path, schema: &Schema, units: &UnitTable) -> Result<GroundTruth, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|e| EvalError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        let v: Value = serde_json::from_str(&text).map_err(|e| EvalError::Malformed(e.to_string()))?;
        ground_truth_from_json(&v, schema, units)
    } else {
        ground_truth_from_csv(&text, schema, units)
    }
}

/// Extracted rows of an aggregated table, with the documents supporting each.
pub fn table_rows(table: &[AggregatedRecord]) -> (Vec<Row>, Vec<BTreeSet<String>>) {
    table
        .iter()
        .map(|r| {
            let docs = r
                .support
                .values()
                .flatten()
                .map(|s| s.doc_id.clone())
                .collect();
            (r.values.clone(), docs)
        })
        .unzip()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub summary: Metrics,
    pub matching: MatchResult,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_paper: BTreeMap<String, Metrics>,
}

/// Score a table against ground truth, overall and per paper when the ground
/// truth names papers.
pub fn evaluate(
    dataset: &str,
    table: &[AggregatedRecord],
    gt: &GroundTruth,
    schema: &Schema,
    cmp: &Comparator<'_>,
) -> Result<EvalReport, EvalError> {
    let keys = cmp.config.keys(schema)?;
    let fields = accuracy_fields(schema, &gt.columns, &keys, cmp.config.accuracy_scope);
    let (ext, ext_docs) = table_rows(table);
    let matching = bipartite_match(&gt.rows, &ext, &keys, cmp);
    let summary = compute_metrics(&matching, &gt.rows, &ext, &fields, cmp);
    let mut per_paper = BTreeMap::new();
    let papers: BTreeSet<&String> = gt.doc_ids.iter().flatten().collect();
    for p in papers {
        let g: Vec<Row> = gt
            .rows
            .iter()
            .zip(&gt.doc_ids)
            .filter(|(_, d)| d.as_ref() == Some(p))
            .map(|(r, _)| r.clone())
            .collect();
        let e: Vec<Row> = ext
            .iter()
            .zip(&ext_docs)
            .filter(|(_, d)| d.contains(p))
            .map(|(r, _)| r.clone())
            .collect();
        let m = bipartite_match(&g, &e, &keys, cmp);
        per_paper.insert(p.clone(), compute_metrics(&m, &g, &e, &fields, cmp));
    }
    Ok(EvalReport {
        dataset: dataset.to_string(),
        summary,
        matching,
        per_paper,
    })
}

/// Plain-text table: one line per dataset with the four scores.
pub fn text_table(reports: &[(&str, &Metrics)]) -> String {
    let width = reports
        .iter()
        .map(|(n, _)| n.len())
        .max()
        .unwrap_or(0)
        .max("Dataset".len());
    let mut s = format!(
        "{:<width$}  {:>9}  {:>9}  {:>9}  {:>9}\n",
        "Dataset", "Precision", "Recall", "F1-score", "Accuracy"
    );
    for (name, m) in reports {
        s.push_str(&format!(
            "{:<width$}  {:>9.3}  {:>9.3}  {:>9.3}  {:>9.3}\n",
            name, m.precision, m.recall, m.f1, m.accuracy
        ));
    }
    s
}
