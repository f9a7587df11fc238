//! Canonical parsed-publication representation.
//!
//! A [`Document`] is what the PDF bridge emits and what every other stage
//! consumes: ordered text chunks, table grids, figure records (optionally with
//! structured chart data) and references to full-page images. Documents are
//! only built through [`validate_document`], so a value of this type always
//! satisfies its invariants.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

pub const DEFAULT_MAX_CHARS: usize = 1600;
pub const DEFAULT_OVERLAP_CHARS: usize = 200;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DocumentError {
    #[error("missing or empty field `{0}`")]
    MissingField(String),
    #[error("`{path}`: {reason}")]
    InvalidValue { path: String, reason: String },
    #[error("`{path}` references page {page}, which has no page image")]
    BadReference { path: String, page: u32 },
    #[error("duplicate identifier `{id}` at `{path}`")]
    DuplicateId { path: String, id: String },
    #[error("malformed JSON: {0}")]
    Json(String),
}

impl DocumentError {
    pub fn path(&self) -> Option<&str> {
        match self {
            DocumentError::MissingField(p) => Some(p),
            DocumentError::InvalidValue { path, .. }
            | DocumentError::BadReference { path, .. }
            | DocumentError::DuplicateId { path, .. } => Some(path),
            DocumentError::Json(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    pub chunks: Vec<Chunk>,
    pub tables: Vec<TableBlock>,
    pub figures: Vec<FigureRecord>,
    pub page_images: Vec<PageImageRef>,
    #[serde(default)]
    pub source_uri: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_index: usize,
    pub text: String,
    pub page_number: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub section_hint: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionSource {
    Extracted,
    Generated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FigureRecord {
    pub figure_id: String,
    pub page_number: u32,
    pub caption: String,
    pub caption_source: CaptionSource,
    pub is_scientific: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub structured: Option<FigureJson>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisScale {
    Linear,
    Log,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
    pub scale: AxisScale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PointX {
    Number(f64),
    Label(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    pub points: Vec<(PointX, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FigureJson {
    pub axes: Vec<Axis>,
    pub legend: Vec<String>,
    pub series: Vec<Series>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableBlock {
    pub table_id: String,
    pub page_number: u32,
    pub caption: String,
    pub cells: Vec<Vec<String>>,
    pub header_rows: usize,
}

impl TableBlock {
    pub fn column_count(&self) -> usize {
        self.cells.first().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageImageRef {
    pub page_number: u32,
    pub uri: String,
}

impl Document {
    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("document serializes")
    }

    pub fn page_numbers(&self) -> BTreeSet<u32> {
        self.page_images.iter().map(|p| p.page_number).collect()
    }
}

pub fn parse_document(text: &str) -> Result<Document, DocumentError> {
    let raw: Value = serde_json::from_str(text).map_err(|e| DocumentError::Json(e.to_string()))?;
    validate_document(&raw)
}

/// Parse either a single JSON document or a JSON-lines stream of documents.
pub fn parse_documents(text: &str) -> Result<Vec<Document>, DocumentError> {
    let trimmed = text.trim_start();
    if trimmed.is_empty() {
        return Ok(Vec::new());
    }
    if let Ok(v) = serde_json::from_str::<Value>(text) {
        return match v {
            Value::Array(items) => items.iter().map(validate_document).collect(),
            other => Ok(vec![validate_document(&other)?]),
        };
    }
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let v: Value = serde_json::from_str(line)
                .map_err(|e| DocumentError::Json(format!("line {}: {e}", i + 1)))?;
            validate_document(&v)
        })
        .collect()
}

/// Check a raw JSON value against the canonical document contract.
///
/// Ragged table rows are padded with empty cells. Every other violation is
/// reported with the JSON path of the offending value.
pub fn validate_document(raw: &Value) -> Result<Document, DocumentError> {
    let root = Obj::root(raw)?;
    let doc_id = root.req_str("doc_id")?;
    if doc_id.trim().is_empty() {
        return Err(DocumentError::MissingField("doc_id".into()));
    }
    let title = root.opt_str("title")?;
    let source_uri = root.opt_str("source_uri")?.unwrap_or_default();

    let mut page_images = Vec::new();
    let mut pages = HashSet::new();
    for (i, item) in root.opt_array("page_images")?.iter().enumerate() {
        let o = Obj::at(item, format!("page_images[{i}]"))?;
        let page_number = o.req_page("page_number")?;
        let uri = o.req_str("uri")?;
        if uri.trim().is_empty() {
            return Err(DocumentError::MissingField(o.child("uri")));
        }
        if !pages.insert(page_number) {
            return Err(DocumentError::DuplicateId {
                path: o.child("page_number"),
                id: page_number.to_string(),
            });
        }
        page_images.push(PageImageRef { page_number, uri });
    }

    let mut chunks = Vec::new();
    for (i, item) in root.opt_array("chunks")?.iter().enumerate() {
        let o = Obj::at(item, format!("chunks[{i}]"))?;
        let chunk_index = o.req_uint("chunk_index")? as usize;
        if chunk_index != i {
            return Err(DocumentError::InvalidValue {
                path: o.child("chunk_index"),
                reason: format!("expected {i}, chunk indices must be contiguous from 0"),
            });
        }
        let text = o.req_str("text")?;
        if text.trim().is_empty() {
            return Err(DocumentError::MissingField(o.child("text")));
        }
        chunks.push(Chunk {
            chunk_index,
            text,
            page_number: o.req_page("page_number")?,
            section_hint: o.opt_str("section_hint")?,
        });
    }

    let mut ids: BTreeMap<String, String> = BTreeMap::new();
    let mut claim = |id: &str, path: String| -> Result<(), DocumentError> {
        if id.trim().is_empty() {
            return Err(DocumentError::MissingField(path));
        }
        if ids.insert(id.to_string(), path.clone()).is_some() {
            return Err(DocumentError::DuplicateId {
                path,
                id: id.to_string(),
            });
        }
        Ok(())
    };
    let check_page = |page: u32, path: String| -> Result<(), DocumentError> {
        if pages.contains(&page) {
            Ok(())
        } else {
            Err(DocumentError::BadReference { path, page })
        }
    };

    let mut tables = Vec::new();
    for (i, item) in root.opt_array("tables")?.iter().enumerate() {
        let o = Obj::at(item, format!("tables[{i}]"))?;
        let table_id = o.req_str("table_id")?;
        claim(&table_id, o.child("table_id"))?;
        let page_number = o.req_page("page_number")?;
        check_page(page_number, o.child("page_number"))?;
        let mut cells = Vec::new();
        for (r, row) in o.opt_array("cells")?.iter().enumerate() {
            let path = format!("{}[{r}]", o.child("cells"));
            let row = row.as_array().ok_or_else(|| DocumentError::InvalidValue {
                path: path.clone(),
                reason: "expected an array of strings".into(),
            })?;
            let row = row
                .iter()
                .enumerate()
                .map(|(c, cell)| match cell {
                    Value::String(s) => Ok(s.clone()),
                    Value::Null => Ok(String::new()),
                    Value::Number(n) => Ok(n.to_string()),
                    _ => Err(DocumentError::InvalidValue {
                        path: format!("{path}[{c}]"),
                        reason: "expected a string cell".into(),
                    }),
                })
                .collect::<Result<Vec<_>, _>>()?;
            cells.push(row);
        }
        let width = cells.iter().map(Vec::len).max().unwrap_or(0);
        for row in &mut cells {
            row.resize(width, String::new());
        }
        tables.push(TableBlock {
            table_id,
            page_number,
            caption: o.opt_str("caption")?.unwrap_or_default(),
            cells,
            header_rows: o.opt_uint("header_rows")?.unwrap_or(0) as usize,
        });
    }

    let mut figures = Vec::new();
    for (i, item) in root.opt_array("figures")?.iter().enumerate() {
        let o = Obj::at(item, format!("figures[{i}]"))?;
        let figure_id = o.req_str("figure_id")?;
        claim(&figure_id, o.child("figure_id"))?;
        let page_number = o.req_page("page_number")?;
        check_page(page_number, o.child("page_number"))?;
        let caption_source = match o.opt_str("caption_source")?.as_deref() {
            None | Some("extracted") => CaptionSource::Extracted,
            Some("generated") => CaptionSource::Generated,
            Some(other) => {
                return Err(DocumentError::InvalidValue {
                    path: o.child("caption_source"),
                    reason: format!("unknown caption source `{other}`"),
                })
            }
        };
        let is_scientific = o.req_bool("is_scientific")?;
        let structured = match o.get("structured") {
            None | Some(Value::Null) => None,
            Some(v) => {
                if !is_scientific {
                    return Err(DocumentError::InvalidValue {
                        path: o.child("structured"),
                        reason: "structured data is only allowed on scientific figures".into(),
                    });
                }
                Some(validate_figure_json(v, &o.child("structured"))?)
            }
        };
        figures.push(FigureRecord {
            figure_id,
            page_number,
            caption: o.opt_str("caption")?.unwrap_or_default(),
            caption_source,
            is_scientific,
            structured,
        });
    }

    Ok(Document {
        doc_id,
        title,
        chunks,
        tables,
        figures,
        page_images,
        source_uri,
    })
}

fn validate_figure_json(v: &Value, path: &str) -> Result<FigureJson, DocumentError> {
    let o = Obj::at(v, path.to_string())?;
    let mut axes = Vec::new();
    for (i, a) in o.opt_array("axes")?.iter().enumerate() {
        let ao = Obj::at(a, format!("{}[{i}]", o.child("axes")))?;
        let scale = match ao.opt_str("scale")?.as_deref() {
            None | Some("linear") => AxisScale::Linear,
            Some("log") => AxisScale::Log,
            Some(other) => {
                return Err(DocumentError::InvalidValue {
                    path: ao.child("scale"),
                    reason: format!("unknown axis scale `{other}`"),
                })
            }
        };
        axes.push(Axis {
            label: ao.req_str("label")?,
            unit: ao.opt_str("unit")?,
            scale,
        });
    }
    let legend = o
        .opt_array("legend")?
        .iter()
        .enumerate()
        .map(|(i, l)| {
            l.as_str()
                .map(str::to_string)
                .ok_or_else(|| DocumentError::InvalidValue {
                    path: format!("{}[{i}]", o.child("legend")),
                    reason: "expected a string".into(),
                })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut series = Vec::new();
    for (i, s) in o.opt_array("series")?.iter().enumerate() {
        let so = Obj::at(s, format!("{}[{i}]", o.child("series")))?;
        let mut points = Vec::new();
        for (p, pt) in so.opt_array("points")?.iter().enumerate() {
            let ppath = format!("{}[{p}]", so.child("points"));
            let bad = |reason: &str| DocumentError::InvalidValue {
                path: ppath.clone(),
                reason: reason.to_string(),
            };
            let pair = pt
                .as_array()
                .filter(|a| a.len() == 2)
                .ok_or_else(|| bad("expected an [x, y] pair"))?;
            let x = match &pair[0] {
                Value::Number(n) => PointX::Number(n.as_f64().ok_or_else(|| bad("bad x"))?),
                Value::String(s) => PointX::Label(s.clone()),
                _ => return Err(bad("x must be a number or a string")),
            };
            let y = pair[1]
                .as_f64()
                .filter(|y| y.is_finite())
                .ok_or_else(|| bad("y must be a finite number"))?;
            points.push((x, y));
        }
        series.push(Series {
            name: so.req_str("name")?,
            points,
        });
    }
    Ok(FigureJson {
        axes,
        legend,
        series,
    })
}

/// Path-tracking view over a JSON object.
struct Obj<'a> {
    path: String,
    map: &'a Map<String, Value>,
}

impl<'a> Obj<'a> {
    fn root(v: &'a Value) -> Result<Self, DocumentError> {
        Self::at(v, String::new())
    }

    fn at(v: &'a Value, path: String) -> Result<Self, DocumentError> {
        match v.as_object() {
            Some(map) => Ok(Self { path, map }),
            None => Err(DocumentError::InvalidValue {
                path: if path.is_empty() { "$".into() } else { path },
                reason: "expected an object".into(),
            }),
        }
    }

    fn child(&self, key: &str) -> String {
        if self.path.is_empty() {
            key.to_string()
        } else {
            format!("{}.{key}", self.path)
        }
    }

    fn get(&self, key: &str) -> Option<&'a Value> {
        self.map.get(key)
    }

    fn invalid(&self, key: &str, reason: &str) -> DocumentError {
        DocumentError::InvalidValue {
            path: self.child(key),
            reason: reason.to_string(),
        }
    }

    fn req_str(&self, key: &str) -> Result<String, DocumentError> {
        match self.get(key) {
            None | Some(Value::Null) => Err(DocumentError::MissingField(self.child(key))),
            Some(Value::String(s)) => Ok(s.clone()),
            Some(_) => Err(self.invalid(key, "expected a string")),
        }
    }

    fn opt_str(&self, key: &str) -> Result<Option<String>, DocumentError> {
        match self.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.clone())),
            Some(_) => Err(self.invalid(key, "expected a string")),
        }
    }

    fn req_bool(&self, key: &str) -> Result<bool, DocumentError> {
        match self.get(key) {
            None | Some(Value::Null) => Err(DocumentError::MissingField(self.child(key))),
            Some(Value::Bool(b)) => Ok(*b),
            Some(_) => Err(self.invalid(key, "expected a boolean")),
        }
    }

    fn opt_uint(&self, key: &str) -> Result<Option<u64>, DocumentError> {
        match self.get(key) {
            None | Some(Value::Null) => Ok(None),
            Some(v) => v
                .as_u64()
                .map(Some)
                .ok_or_else(|| self.invalid(key, "expected a non-negative integer")),
        }
    }

    fn req_uint(&self, key: &str) -> Result<u64, DocumentError> {
        self.opt_uint(key)?
            .ok_or_else(|| DocumentError::MissingField(self.child(key)))
    }

    fn req_page(&self, key: &str) -> Result<u32, DocumentError> {
        let n = self.req_uint(key)?;
        if n == 0 || n > u32::MAX as u64 {
            return Err(self.invalid(key, "page numbers start at 1"));
        }
        Ok(n as u32)
    }

    fn opt_array(&self, key: &str) -> Result<&'a [Value], DocumentError> {
        match self.get(key) {
            None | Some(Value::Null) => Ok(&[]),
            Some(Value::Array(a)) => Ok(a),
            Some(_) => Err(self.invalid(key, "expected an array")),
        }
    }
}

/// Byte span of one chunk. `overlap` bytes at the start repeat the tail of the
/// previous chunk; `text[start + overlap..end]` is new content.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkSpan {
    pub start: usize,
    pub overlap: usize,
    pub end: usize,
}

/// Split `full_text` into windows of at most `max_chars` characters.
///
/// Each window ends at the last blank-line paragraph break that fits, else the
/// last sentence end (`.`, `!` or `?` followed by whitespace), else exactly at
/// the limit. Panics if `overlap_chars >= max_chars`.
pub fn chunk_spans(full_text: &str, max_chars: usize, overlap_chars: usize) -> Vec<ChunkSpan> {
    assert!(
        max_chars > overlap_chars,
        "max_chars ({max_chars}) must exceed overlap_chars ({overlap_chars})"
    );
    // Char-boundary byte offsets, with the end of text as a final entry.
    let bounds: Vec<usize> = full_text
        .char_indices()
        .map(|(b, _)| b)
        .chain(std::iter::once(full_text.len()))
        .collect();
    let chars: Vec<char> = full_text.chars().collect();
    let n = chars.len();
    let mut spans = Vec::new();
    let mut start = 0usize;
    while start < n {
        let overlap = if spans.is_empty() {
            0
        } else {
            overlap_chars.min(start)
        };
        let budget = max_chars - overlap;
        let limit = start + budget;
        let end = if limit >= n {
            n
        } else {
            split_point(&chars, start, limit)
        };
        spans.push(ChunkSpan {
            start: bounds[start - overlap],
            overlap: bounds[start] - bounds[start - overlap],
            end: bounds[end],
        });
        start = end;
    }
    spans
}

/// Character position in `(start, limit]` at which to end the chunk.
fn split_point(chars: &[char], start: usize, limit: usize) -> usize {
    // Paragraph break: "\n\n" fully inside the window, split right after it.
    let mut p = limit;
    while p >= start + 2 {
        if chars[p - 1] == '\n' && chars[p - 2] == '\n' && p > start {
            return p;
        }
        p -= 1;
    }
    // Sentence end: terminator followed by whitespace, split after the whitespace.
    let mut p = limit;
    while p >= start + 2 {
        if chars[p - 1].is_whitespace() && matches!(chars[p - 2], '.' | '!' | '?') {
            return p;
        }
        p -= 1;
    }
    limit
}

pub fn chunk_text(full_text: &str, max_chars: usize, overlap_chars: usize) -> Vec<Chunk> {
    chunk_spans(full_text, max_chars, overlap_chars)
        .into_iter()
        .enumerate()
        .map(|(i, s)| Chunk {
            chunk_index: i,
            text: full_text[s.start..s.end].to_string(),
            page_number: 1,
            section_hint: None,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn minimal() -> Value {
        json!({
            "doc_id": "d1",
            "chunks": [{"chunk_index": 0, "text": "a", "page_number": 1}],
            "tables": [],
            "figures": [],
            "page_images": [{"page_number": 1, "uri": "p1.png"}]
        })
    }

    #[test]
    fn minimal_document_validates() {
        let d = validate_document(&minimal()).unwrap();
        assert_eq!(d.doc_id, "d1");
        assert_eq!(d.chunks.len(), 1);
        assert_eq!(d.page_images[0].uri, "p1.png");
    }

    #[test]
    fn empty_doc_id_is_missing() {
        let mut v = minimal();
        v["doc_id"] = json!("");
        assert_eq!(
            validate_document(&v),
            Err(DocumentError::MissingField("doc_id".into()))
        );
    }

    #[test]
    fn dangling_figure_page() {
        let mut v = minimal();
        v["figures"] = json!([{
            "figure_id": "f1", "page_number": 9, "caption": "", "caption_source": "extracted",
            "is_scientific": false
        }]);
        let err = validate_document(&v).unwrap_err();
        assert_eq!(
            err,
            DocumentError::BadReference {
                path: "figures[0].page_number".into(),
                page: 9
            }
        );
    }

    #[test]
    fn duplicate_ids_and_bad_chunk_order() {
        let mut v = minimal();
        v["tables"] = json!([
            {"table_id": "t1", "page_number": 1, "caption": "", "cells": [], "header_rows": 0},
            {"table_id": "t1", "page_number": 1, "caption": "", "cells": [], "header_rows": 0}
        ]);
        assert!(matches!(
            validate_document(&v),
            Err(DocumentError::DuplicateId { ref path, .. }) if path == "tables[1].table_id"
        ));

        let mut v = minimal();
        v["chunks"][0]["chunk_index"] = json!(3);
        assert!(matches!(
            validate_document(&v),
            Err(DocumentError::InvalidValue { ref path, .. }) if path == "chunks[0].chunk_index"
        ));
    }

    #[test]
    fn whitespace_chunk_rejected() {
        let mut v = minimal();
        v["chunks"][0]["text"] = json!("  \n ");
        assert_eq!(
            validate_document(&v),
            Err(DocumentError::MissingField("chunks[0].text".into()))
        );
    }

    #[test]
    fn ragged_tables_are_padded() {
        let mut v = minimal();
        v["tables"] = json!([{
            "table_id": "t1", "page_number": 1, "caption": "c",
            "cells": [["a", "b", "c"], ["1"], ["2", "3"]], "header_rows": 1
        }]);
        let d = validate_document(&v).unwrap();
        assert!(d.tables[0].cells.iter().all(|r| r.len() == 3));
        assert_eq!(d.tables[0].cells[1], vec!["1", "", ""]);
    }

    #[test]
    fn structured_requires_scientific_and_finite_y() {
        let mut v = minimal();
        v["figures"] = json!([{
            "figure_id": "f1", "page_number": 1, "caption": "logo", "caption_source": "extracted",
            "is_scientific": false,
            "structured": {"axes": [], "legend": [], "series": []}
        }]);
        assert!(matches!(
            validate_document(&v),
            Err(DocumentError::InvalidValue { ref path, .. }) if path == "figures[0].structured"
        ));

        v["figures"][0]["is_scientific"] = json!(true);
        v["figures"][0]["structured"]["series"] = json!([{"name": "s", "points": [[1, "NaN"]]}]);
        assert!(matches!(
            validate_document(&v),
            Err(DocumentError::InvalidValue { ref path, .. })
                if path == "figures[0].structured.series[0].points[0]"
        ));
    }

    #[test]
    fn non_object_input_is_an_error_not_a_panic() {
        for v in [json!(null), json!(3), json!("x"), json!([1, 2]), json!({"doc_id": 5})] {
            assert!(validate_document(&v).is_err());
        }
    }

    #[test]
    fn chunk_empty_and_short() {
        assert!(chunk_text("", 500, 0).is_empty());
        let text = "x".repeat(100);
        let chunks = chunk_text(&text, 500, 50);
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].text, text);
    }

    #[test]
    fn chunk_splits_on_blank_line() {
        // Two 300-char paragraphs: the window of 350 chars contains the blank
        // line at offset 300..302, so the first chunk ends right after it.
        let p1 = "a".repeat(300);
        let p2 = "b".repeat(300);
        let text = format!("{p1}\n\n{p2}");
        let chunks = chunk_text(&text, 350, 0);
        assert_eq!(chunks.len(), 2);
        assert_eq!(chunks[0].text, format!("{p1}\n\n"));
        assert_eq!(chunks[1].text, p2);
    }

    #[test]
    fn chunk_falls_back_to_sentence_then_hard_split() {
        let text = "One two three. Four five six. Seven";
        let chunks = chunk_text(text, 20, 0);
        assert_eq!(chunks[0].text, "One two three. ");
        let hard = chunk_text(&"z".repeat(25), 10, 0);
        assert_eq!(
            hard.iter().map(|c| c.text.len()).collect::<Vec<_>>(),
            vec![10, 10, 5]
        );
    }

    #[test]
    fn overlap_spans_reconstruct() {
        let text = "Alpha beta. Gamma delta.\n\nEpsilon zeta eta theta. Iota kappa lambda.";
        let spans = chunk_spans(text, 24, 6);
        let mut rebuilt = String::new();
        for s in &spans {
            assert!(text[s.start..s.end].chars().count() <= 24);
            rebuilt.push_str(&text[s.start + s.overlap..s.end]);
        }
        assert_eq!(rebuilt, text);
        assert!(spans[1..].iter().all(|s| s.overlap > 0));
    }
}
