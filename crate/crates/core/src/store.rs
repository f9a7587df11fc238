//! Evidence index: embeds text chunks, linearized tables and figure summaries
//! and answers exact cosine top-k queries.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::document::{Document, FigureJson, FigureRecord, PointX, TableBlock};

pub const STORE_FORMAT_VERSION: u32 = 1;
pub const HASHED_DIMENSION: usize = 256;
pub const DEFAULT_K: usize = 5;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("embedding service unavailable: {0}")]
    ServiceUnavailable(String),
    #[error("embedding has dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("embedding contains non-finite values")]
    NonFinite,
    #[error("entry id `{0}` already indexed")]
    DuplicateEntryId(String),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("I/O failure on {path}: {reason}")]
    IoFailure { path: String, reason: String },
    #[error("store format version {found} is not supported (expected {expected})")]
    FormatVersionMismatch { found: u32, expected: u32 },
    #[error("store was built with embedder `{found}`, loader has `{expected}`")]
    EmbedderMismatch { expected: String, found: String },
    #[error("malformed store file: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Table,
    Figure,
}

impl Modality {
    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Table => "table",
            Modality::Figure => "figure",
        }
    }
}

/// Pointer back into the source document.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SourceRef {
    Chunk(usize),
    Id(String),
}

impl std::fmt::Display for SourceRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SourceRef::Chunk(i) => write!(f, "chunk {i}"),
            SourceRef::Id(s) => f.write_str(s),
        }
    }
}

/// Unit-norm embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    /// L2-normalize `values`; `None` for zero, empty or non-finite input.
    pub fn normalized(values: Vec<f64>) -> Option<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return None;
        }
        Some(Self(values.into_iter().map(|v| v / norm).collect()))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &EmbeddingVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub trait Embedder: Send + Sync {
    /// Identifies the embedding space; persisted stores record it.
    fn tag(&self) -> String;
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> Result<EmbeddingVector, StoreError>;

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, StoreError> {
        texts.iter().map(|t| self.embed(t)).collect()
    }
}

/// Deterministic hashed bag-of-words: lowercase alphanumeric tokens, FNV-1a
/// into a fixed number of buckets, counts, then L2 normalization.
#[derive(Debug, Clone)]
pub struct HashedEmbedder {
    dimension: usize,
}

impl Default for HashedEmbedder {
    fn default() -> Self {
        Self::new(HASHED_DIMENSION)
    }
}

impl HashedEmbedder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0);
        Self { dimension }
    }

    pub fn bucket(&self, token: &str) -> usize {
        (fnv1a64(token.as_bytes()) % self.dimension as u64) as usize
    }
}

pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl Embedder for HashedEmbedder {
    fn tag(&self) -> String {
        format!("hashed-bow-fnv1a-{}", self.dimension)
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, StoreError> {
        let mut counts = vec![0.0; self.dimension];
        let mut any = false;
        for tok in tokenize(text) {
            counts[self.bucket(&tok)] += 1.0;
            any = true;
        }
        if !any {
            return Err(StoreError::EmptyText);
        }
        EmbeddingVector::normalized(counts).ok_or(StoreError::EmptyText)
    }
}

/// Client for a JSON-over-HTTP embedding service:
/// `POST {"model": .., "texts": [..]}` answered by `{"vectors": [[..], ..]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpEmbedderConfig {
    pub endpoint: String,
    #[serde(default)]
    pub model: String,
    pub dimension: usize,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_embed_retries")]
    pub max_retries: u32,
    #[serde(default = "default_embed_timeout")]
    pub timeout_ms: u64,
    #[serde(default = "default_embed_backoff")]
    pub backoff_base_ms: u64,
}

fn default_embed_retries() -> u32 {
    3
}
fn default_embed_timeout() -> u64 {
    30_000
}
fn default_embed_backoff() -> u64 {
    250
}

pub struct HttpEmbedder {
    cfg: HttpEmbedderConfig,
    agent: ureq::Agent,
}

impl HttpEmbedder {
    pub fn new(cfg: HttpEmbedderConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
            .build()
            .into();
        Self { cfg, agent }
    }

    fn request(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, String> {
        #[derive(Deserialize)]
        struct Reply {
            vectors: Vec<Vec<f64>>,
        }
        let body = serde_json::json!({ "model": self.cfg.model, "texts": texts });
        let mut req = self.agent.post(&self.cfg.endpoint);
        if let Some(var) = &self.cfg.api_key_env {
            if let Ok(key) = std::env::var(var) {
                req = req.header("Authorization", &format!("Bearer {key}"));
            }
        }
        let mut resp = req.send_json(&body).map_err(|e| e.to_string())?;
        let reply: Reply = resp.body_mut().read_json().map_err(|e| e.to_string())?;
        Ok(reply.vectors)
    }
}

impl Embedder for HttpEmbedder {
    fn tag(&self) -> String {
        format!("http:{}:{}", self.cfg.model, self.cfg.dimension)
    }

    fn dimension(&self) -> usize {
        self.cfg.dimension
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, StoreError> {
        let mut v = self.embed_batch(&[text.to_string()])?;
        v.pop().ok_or_else(|| StoreError::ServiceUnavailable("empty reply".into()))
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, StoreError> {
        if texts.iter().any(|t| t.trim().is_empty()) {
            return Err(StoreError::EmptyText);
        }
        let mut last = String::new();
        for attempt in 0..=self.cfg.max_retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(
                    self.cfg.backoff_base_ms.saturating_mul(1 << (attempt - 1).min(16)),
                ));
            }
            match self.request(texts) {
                Ok(vectors) => {
                    if vectors.len() != texts.len() {
                        return Err(StoreError::ServiceUnavailable(format!(
                            "asked for {} vectors, got {}",
                            texts.len(),
                            vectors.len()
                        )));
                    }
                    return vectors
                        .into_iter()
                        .map(|v| {
                            if v.len() != self.cfg.dimension {
                                return Err(StoreError::DimensionMismatch {
                                    expected: self.cfg.dimension,
                                    got: v.len(),
                                });
                            }
                            EmbeddingVector::normalized(v).ok_or(StoreError::NonFinite)
                        })
                        .collect();
                }
                Err(e) => last = e,
            }
        }
        Err(StoreError::ServiceUnavailable(last))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreEntry {
    pub entry_id: String,
    pub doc_id: String,
    pub modality: Modality,
    #[serde(rename = "ref")]
    pub source: SourceRef,
    pub text_surrogate: String,
    pub vector: EmbeddingVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub entry_id: String,
    pub doc_id: String,
    pub modality: Modality,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QueryFilter {
    pub doc_id: Option<String>,
    pub modality: Option<Modality>,
}

impl QueryFilter {
    pub fn doc(doc_id: &str) -> Self {
        Self {
            doc_id: Some(doc_id.to_string()),
            modality: None,
        }
    }

    fn accepts(&self, e: &StoreEntry) -> bool {
        self.doc_id.as_deref().is_none_or(|d| d == e.doc_id)
            && self.modality.is_none_or(|m| m == e.modality)
    }
}

/// Ranking order: score descending, then entry id ascending.
pub fn rank_order(a: &QueryResult, b: &QueryResult) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.entry_id.cmp(&b.entry_id))
}

pub struct VectorStore {
    embedder: Arc<dyn Embedder>,
    entries: Vec<StoreEntry>,
    by_id: HashMap<String, usize>,
}

impl std::fmt::Debug for VectorStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VectorStore")
            .field("embedder", &self.embedder.tag())
            .field("entries", &self.entries.len())
            .finish()
    }
}

#[derive(Serialize, Deserialize)]
struct StoreFile {
    format_version: u32,
    dimension: usize,
    embedder: String,
    entries: Vec<StoreEntry>,
}

impl VectorStore {
    pub fn new(embedder: Arc<dyn Embedder>) -> Self {
        Self {
            embedder,
            entries: Vec::new(),
            by_id: HashMap::new(),
        }
    }

    pub fn embedder(&self) -> &Arc<dyn Embedder> {
        &self.embedder
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[StoreEntry] {
        &self.entries
    }

    pub fn get(&self, entry_id: &str) -> Option<&StoreEntry> {
        self.by_id.get(entry_id).map(|&i| &self.entries[i])
    }

    pub fn embed(&self, text: &str) -> Result<EmbeddingVector, StoreError> {
        if text.trim().is_empty() {
            return Err(StoreError::EmptyText);
        }
        self.embedder.embed(text)
    }

    /// Insert a batch atomically: nothing is inserted if any entry is invalid.
    pub fn index(&mut self, entries: Vec<StoreEntry>) -> Result<usize, StoreError> {
        let dim = self.embedder.dimension();
        let mut fresh = std::collections::HashSet::new();
        for e in &entries {
            if self.by_id.contains_key(&e.entry_id) || !fresh.insert(e.entry_id.as_str()) {
                return Err(StoreError::DuplicateEntryId(e.entry_id.clone()));
            }
            if e.vector.dimension() != dim {
                return Err(StoreError::DimensionMismatch {
                    expected: dim,
                    got: e.vector.dimension(),
                });
            }
            if (e.vector.norm() - 1.0).abs() > 1e-9 {
                return Err(StoreError::NonFinite);
            }
        }
        let n = entries.len();
        for e in entries {
            self.by_id.insert(e.entry_id.clone(), self.entries.len());
            self.entries.push(e);
        }
        Ok(n)
    }

    pub fn query(
        &self,
        text: &str,
        k: usize,
        filter: Option<&QueryFilter>,
    ) -> Result<Vec<QueryResult>, StoreError> {
        let q = self.embed(text)?;
        self.query_vector(&q, k, filter)
    }

    pub fn query_vector(
        &self,
        q: &EmbeddingVector,
        k: usize,
        filter: Option<&QueryFilter>,
    ) -> Result<Vec<QueryResult>, StoreError> {
        if k == 0 {
            return Err(StoreError::ZeroK);
        }
        let mut scored: Vec<QueryResult> = self
            .entries
            .iter()
            .filter(|e| filter.is_none_or(|f| f.accepts(e)))
            .map(|e| QueryResult {
                entry_id: e.entry_id.clone(),
                doc_id: e.doc_id.clone(),
                modality: e.modality,
                score: q.dot(&e.vector).clamp(-1.0, 1.0),
            })
            .collect();
        if scored.len() > k {
            scored.select_nth_unstable_by(k - 1, rank_order);
            scored.truncate(k);
        }
        scored.sort_by(rank_order);
        Ok(scored)
    }

    pub fn persist(&self, path: &Path) -> Result<(), StoreError> {
        let file = StoreFile {
            format_version: STORE_FORMAT_VERSION,
            dimension: self.embedder.dimension(),
            embedder: self.embedder.tag(),
            entries: self.entries.clone(),
        };
        let text = serde_json::to_string(&file).map_err(|e| StoreError::Malformed(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| StoreError::IoFailure {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }

    pub fn load(path: &Path, embedder: Arc<dyn Embedder>) -> Result<Self, StoreError> {
        let text = std::fs::read_to_string(path).map_err(|e| StoreError::IoFailure {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        // Check the version before trusting the rest of the layout.
        let raw: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| StoreError::Malformed(e.to_string()))?;
        let found = raw
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| StoreError::Malformed("missing format_version".into()))?;
        if found != u64::from(STORE_FORMAT_VERSION) {
            return Err(StoreError::FormatVersionMismatch {
                found: found.min(u64::from(u32::MAX)) as u32,
                expected: STORE_FORMAT_VERSION,
            });
        }
        let file: StoreFile =
            serde_json::from_value(raw).map_err(|e| StoreError::Malformed(e.to_string()))?;
        if file.embedder != embedder.tag() {
            return Err(StoreError::EmbedderMismatch {
                expected: embedder.tag(),
                found: file.embedder,
            });
        }
        if file.dimension != embedder.dimension() {
            return Err(StoreError::DimensionMismatch {
                expected: embedder.dimension(),
                got: file.dimension,
            });
        }
        let mut store = Self::new(embedder);
        store.index(file.entries)?;
        Ok(store)
    }

    /// Embed and index every evidence segment of `doc`. Returns the number of
    /// entries inserted; segments without any indexable token are skipped.
    pub fn index_document(&mut self, doc: &Document) -> Result<usize, StoreError> {
        let segments = document_segments(doc);
        let texts: Vec<String> = segments.iter().map(|s| s.text.clone()).collect();
        let keep: Vec<bool> = texts.iter().map(|t| tokenize(t).next().is_some()).collect();
        let to_embed: Vec<String> = texts
            .iter()
            .zip(&keep)
            .filter(|(_, k)| **k)
            .map(|(t, _)| t.clone())
            .collect();
        let mut vectors = self.embedder.embed_batch(&to_embed)?.into_iter();
        let mut entries = Vec::new();
        for (seg, k) in segments.into_iter().zip(keep) {
            if !k {
                continue;
            }
            let vector = vectors.next().expect("one vector per embedded segment");
            entries.push(StoreEntry {
                entry_id: seg.entry_id,
                doc_id: doc.doc_id.clone(),
                modality: seg.modality,
                source: seg.source,
                text_surrogate: seg.text,
                vector,
            });
        }
        self.index(entries)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub entry_id: String,
    pub modality: Modality,
    pub source: SourceRef,
    pub text: String,
}

pub fn entry_id(doc_id: &str, modality: Modality, source: &SourceRef) -> String {
    match source {
        SourceRef::Chunk(i) => format!("{doc_id}:{}:{i}", modality.as_str()),
        SourceRef::Id(s) => format!("{doc_id}:{}:{s}", modality.as_str()),
    }
}

/// Text surrogates for every indexable part of a document: chunks as-is,
/// tables linearized, and scientific figures summarized.
pub fn document_segments(doc: &Document) -> Vec<Segment> {
    let mut out = Vec::new();
    for c in &doc.chunks {
        let source = SourceRef::Chunk(c.chunk_index);
        out.push(Segment {
            entry_id: entry_id(&doc.doc_id, Modality::Text, &source),
            modality: Modality::Text,
            source,
            text: c.text.clone(),
        });
    }
    for t in &doc.tables {
        let source = SourceRef::Id(t.table_id.clone());
        out.push(Segment {
            entry_id: entry_id(&doc.doc_id, Modality::Table, &source),
            modality: Modality::Table,
            source,
            text: linearize_table(t),
        });
    }
    for f in doc.figures.iter().filter(|f| f.is_scientific) {
        let source = SourceRef::Id(f.figure_id.clone());
        out.push(Segment {
            entry_id: entry_id(&doc.doc_id, Modality::Figure, &source),
            modality: Modality::Figure,
            source,
            text: summarize_figure(f),
        });
    }
    out
}

/// Caption line followed by one `header: cell | header: cell` line per data row.
pub fn linearize_table(t: &TableBlock) -> String {
    let header_rows = t.header_rows.min(t.cells.len());
    let width = t.column_count();
    let headers: Vec<String> = (0..width)
        .map(|c| {
            t.cells[..header_rows]
                .iter()
                .map(|r| r[c].trim())
                .filter(|s| !s.is_empty())
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();
    let mut out = String::new();
    if !t.caption.trim().is_empty() {
        out.push_str(t.caption.trim());
        out.push('\n');
    }
    for row in &t.cells[header_rows..] {
        let line = row
            .iter()
            .zip(&headers)
            .map(|(cell, h)| {
                if h.is_empty() {
                    cell.trim().to_string()
                } else {
                    format!("{h}: {}", cell.trim())
                }
            })
            .collect::<Vec<_>>()
            .join(" | ");
        out.push_str(&line);
        out.push('\n');
    }
    out.trim_end().to_string()
}

pub fn summarize_figure(f: &FigureRecord) -> String {
    let mut out = f.caption.trim().to_string();
    if let Some(s) = &f.structured {
        let summary = summarize_figure_json(s);
        if !summary.is_empty() {
            if !out.is_empty() {
                out.push('\n');
            }
            out.push_str(&summary);
        }
    }
    out
}

pub fn summarize_figure_json(s: &FigureJson) -> String {
    let mut parts = Vec::new();
    for a in &s.axes {
        let scale = match a.scale {
            crate::document::AxisScale::Linear => "linear",
            crate::document::AxisScale::Log => "log",
        };
        match &a.unit {
            Some(u) => parts.push(format!("axis: {} ({u}, {scale})", a.label)),
            None => parts.push(format!("axis: {} ({scale})", a.label)),
        }
    }
    for se in &s.series {
        let mut line = format!("series: {} ({} points", se.name, se.points.len());
        let ys = se.points.iter().map(|(_, y)| *y);
        if let (Some(lo), Some(hi)) = (ys.clone().reduce(f64::min), ys.reduce(f64::max)) {
            let _ = write!(line, ", y-range {lo}..{hi}");
        }
        let xs: Vec<String> = se
            .points
            .iter()
            .map(|(x, y)| match x {
                PointX::Number(n) => format!("({n}, {y})"),
                PointX::Label(l) => format!("({l}, {y})"),
            })
            .collect();
        if !xs.is_empty() {
            let _ = write!(line, "; points {}", xs.join(" "));
        }
        line.push(')');
        parts.push(line);
    }
    parts.join("; ")
}
