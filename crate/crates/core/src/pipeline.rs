//! Run configuration and the staged workflow: ingest, extract, aggregate,
//! evaluate. Every stage reads and writes plain files so stages can be run
//! one at a time or composed with [`run`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregate::{
    aggregate, log_to_jsonl, table_to_json, AggregateOptions, AggregatedRecord, CanonMap, DEFAULT_PRECISION,
};
use crate::document::{parse_documents, Document, DocumentError};
use crate::eval::{evaluate, load_ground_truth, text_table, Comparator, EvalError, EvalReport, MatchConfig};
use crate::gateway::{AuditEntry, Gateway, GatewayConfig, GatewayError, MockScript};
use crate::record::{read_records_jsonl, write_records_jsonl, ExtractionRecord};
use crate::rev::{self, RevConfig, RevContext, RevError, RoundTrace};
use crate::schema::{generate_schema, parse_schema_str, Schema, SchemaError, SchemaGenError};
use crate::store::{Embedder, HashedEmbedder, HttpEmbedder, HttpEmbedderConfig, StoreError, VectorStore, HASHED_DIMENSION};
use crate::units::{UnitError, UnitTable};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbedderConfig {
    Hashed {
        #[serde(default = "default_dimension")]
        dimension: usize,
    },
    Http(HttpEmbedderConfig),
}

fn default_dimension() -> usize {
    HASHED_DIMENSION
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig::Hashed {
            dimension: HASHED_DIMENSION,
        }
    }
}

impl EmbedderConfig {
    pub fn build(&self) -> Arc<dyn Embedder> {
        match self {
            EmbedderConfig::Hashed { dimension } => Arc::new(HashedEmbedder::new(*dimension)),
            EmbedderConfig::Http(c) => Arc::new(HttpEmbedder::new(c.clone())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregationConfig {
    #[serde(default = "default_precision")]
    pub precision: u32,
    #[serde(default)]
    pub canon_map: Option<PathBuf>,
    #[serde(default)]
    pub unit_rules: Option<PathBuf>,
    /// Send unseen terms to the gateway for canonicalization proposals.
    #[serde(default)]
    pub llm_canonicalization: bool,
}

fn default_precision() -> u32 {
    DEFAULT_PRECISION
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self {
            precision: DEFAULT_PRECISION,
            canon_map: None,
            unit_rules: None,
            llm_canonicalization: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default)]
    pub ground_truth: Option<PathBuf>,
    #[serde(default = "default_dataset")]
    pub dataset: String,
    #[serde(default, rename = "match")]
    pub matching: MatchConfig,
}

fn default_dataset() -> String {
    "corpus".into()
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ground_truth: None,
            dataset: default_dataset(),
            matching: MatchConfig::default(),
        }
    }
}

/// One JSON file describing a whole run. Relative paths are resolved against
/// the directory holding the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub corpus_dir: PathBuf,
    #[serde(default)]
    pub schema: Option<PathBuf>,
    #[serde(default)]
    pub instruction: Option<String>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub rev: RevConfig,
    #[serde(default)]
    pub aggregation: AggregationConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default = "GatewayConfig::mock_only")]
    pub gateway: GatewayConfig,
    #[serde(default)]
    pub mock_script: Option<PathBuf>,
    #[serde(default)]
    pub embedder: EmbedderConfig,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_jobs() -> usize {
    1
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("gateway failure: {0}")]
    Gateway(String),
}

impl PipelineError {
    /// Process exit code for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 1,
            PipelineError::Data(_) => 2,
            PipelineError::Gateway(_) => 3,
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Config(e.to_string())
}

fn data_err(e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Data(e.to_string())
}

impl From<GatewayError> for PipelineError {
    fn from(e: GatewayError) -> Self {
        PipelineError::Gateway(e.to_string())
    }
}

impl From<RevError> for PipelineError {
    fn from(e: RevError) -> Self {
        match e {
            RevError::Gateway { .. } => PipelineError::Gateway(e.to_string()),
            RevError::InvalidConfig(_) => PipelineError::Config(e.to_string()),
            RevError::Store { .. } => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<UnitError> for PipelineError {
    fn from(e: UnitError) -> Self {
        config_err(e)
    }
}

impl From<EvalError> for PipelineError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::InvalidConfig(_) | EvalError::Io { .. } => config_err(e),
            _ => data_err(e),
        }
    }
}

fn read(path: &Path) -> Result<String, PipelineError> {
    std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| data_err(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, text).map_err(|e| data_err(format!("{}: {e}", path.display())))
}

impl RunConfig {
    /// Minimal config for a corpus directory and a schema file.
    pub fn new(corpus_dir: &Path, schema: &Path, output_dir: &Path) -> Self {
        Self {
            corpus_dir: corpus_dir.to_path_buf(),
            schema: Some(schema.to_path_buf()),
            instruction: None,
            output_dir: output_dir.to_path_buf(),
            rev: RevConfig::default(),
            aggregation: AggregationConfig::default(),
            eval: EvalConfig::default(),
            gateway: GatewayConfig::mock_only(),
            mock_script: None,
            embedder: EmbedderConfig::default(),
            jobs: 1,
        }
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = read(path)?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        cfg.check()?;
        Ok(cfg)
    }

    /// Make every relative path relative to `base`.
    pub fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus_dir);
        fix(&mut self.output_dir);
        for p in [
            &mut self.schema,
            &mut self.mock_script,
            &mut self.aggregation.canon_map,
            &mut self.aggregation.unit_rules,
            &mut self.eval.ground_truth,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn check(&self) -> Result<(), PipelineError> {
        match (&self.schema, &self.instruction) {
            (Some(_), Some(_)) => return Err(config_err("give either `schema` or `instruction`, not both")),
            (None, None) => return Err(config_err("one of `schema` or `instruction` is required")),
            _ => {}
        }
        self.rev.check().map_err(config_err)?;
        if self.jobs == 0 {
            return Err(config_err("jobs must be at least 1"));
        }
        let must_exist = [
            Some(&self.corpus_dir),
            self.schema.as_ref(),
            self.mock_script.as_ref(),
            self.aggregation.canon_map.as_ref(),
            self.aggregation.unit_rules.as_ref(),
        ];
        for p in must_exist.into_iter().flatten() {
            if !p.exists() {
                return Err(config_err(format!("{} does not exist", p.display())));
            }
        }
        if self.gateway.default_profile().is_none() {
            return Err(config_err("gateway has no profiles"));
        }
        if let Some(p) = &self.gateway.default_profile {
            if !self.gateway.profiles.contains_key(p) {
                return Err(config_err(format!("default profile `{p}` is not configured")));
            }
        }
        Ok(())
    }

    pub fn profile(&self) -> &str {
        self.gateway.default_profile().unwrap_or("mock")
    }

    pub fn paths(&self) -> OutputPaths {
        OutputPaths::in_dir(&self.output_dir)
    }

    pub fn gateway(&self) -> Result<Gateway, PipelineError> {
        let script = match &self.mock_script {
            Some(p) => Some(MockScript::load(p).map_err(|e| config_err(format!("{}: {e}", p.display())))?),
            None => None,
        };
        Ok(Gateway::from_config(&self.gateway, script.as_ref()))
    }

    pub fn units(&self) -> Result<UnitTable, PipelineError> {
        match &self.aggregation.unit_rules {
            Some(p) => {
                let user = UnitTable::load(p)?;
                Ok(UnitTable::builtin_with(user.rules())?)
            }
            None => Ok(UnitTable::builtin()),
        }
    }

    pub fn canon_map(&self) -> Result<CanonMap, PipelineError> {
        match &self.aggregation.canon_map {
            Some(p) => CanonMap::load(p).map_err(config_err),
            None => Ok(CanonMap::builtin()),
        }
    }

    /// The schema file, or a schema generated from the instruction.
    pub fn schema(&self, gateway: &Gateway) -> Result<Schema, PipelineError> {
        match (&self.schema, &self.instruction) {
            (Some(p), _) => load_schema(p),
            (None, Some(instruction)) => generate_schema(instruction, gateway, self.profile())
                .map(|g| g.schema)
                .map_err(|e| match e {
                    SchemaGenError::Gateway(g) => g.into(),
                    other => PipelineError::Gateway(other.to_string()),
                }),
            (None, None) => Err(config_err("no schema configured")),
        }
    }
}

pub fn load_schema(path: &Path) -> Result<Schema, PipelineError> {
    let text = read(path)?;
    parse_schema_str(&text).map_err(|e: SchemaError| config_err(format!("{}: {e}", path.display())))
}

/// Where each stage reads and writes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputPaths {
    pub store: PathBuf,
    pub records: PathBuf,
    pub rev_audit: PathBuf,
    pub gateway_audit: PathBuf,
    pub table: PathBuf,
    pub conflicts: PathBuf,
    pub canon_map: PathBuf,
    pub metrics: PathBuf,
    pub metrics_text: PathBuf,
}

impl OutputPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            store: dir.join("store.json"),
            records: dir.join("records.jsonl"),
            rev_audit: dir.join("rev_audit.jsonl"),
            gateway_audit: dir.join("gateway_audit.jsonl"),
            table: dir.join("table.json"),
            conflicts: dir.join("conflicts.jsonl"),
            canon_map: dir.join("canon_map.json"),
            metrics: dir.join("metrics.json"),
            metrics_text: dir.join("metrics.txt"),
        }
    }
}

/// Document files of a corpus directory (`*.json`, `*.jsonl`), sorted.
pub fn corpus_files(dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| config_err(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .is_some_and(|e| e.eq_ignore_ascii_case("json") || e.eq_ignore_ascii_case("jsonl"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Parse and validate documents from files (`-` reads stdin); doc ids must be
/// unique across all of them.
pub fn load_documents(files: &[PathBuf]) -> Result<Vec<Document>, PipelineError> {
    let mut seen: BTreeMap<String, PathBuf> = BTreeMap::new();
    let mut docs = Vec::new();
    for f in files {
        let text = if f.as_os_str() == "-" {
            std::io::read_to_string(std::io::stdin()).map_err(|e| data_err(format!("stdin: {e}")))?
        } else {
            std::fs::read_to_string(f).map_err(|e| data_err(format!("{}: {e}", f.display())))?
        };
        let parsed = parse_documents(&text).map_err(|e: DocumentError| data_err(format!("{}: {e}", f.display())))?;
        for d in parsed {
            if let Some(prev) = seen.get(&d.doc_id) {
                return Err(data_err(format!(
                    "duplicate doc_id `{}` in {} and {}",
                    d.doc_id,
                    prev.display(),
                    f.display()
                )));
            }
            seen.insert(d.doc_id.clone(), f.clone());
            docs.push(d);
        }
    }
    Ok(docs)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IngestSummary {
    pub documents: usize,
    pub entries: usize,
    pub per_document: BTreeMap<String, usize>,
}

/// Validate, embed and index documents into a fresh store.
pub fn ingest(docs: &[Document], embedder: Arc<dyn Embedder>) -> Result<(VectorStore, IngestSummary), PipelineError> {
    let mut store = VectorStore::new(embedder);
    let mut summary = IngestSummary::default();
    for d in docs {
        let n = store.index_document(d).map_err(|e| match e {
            StoreError::ServiceUnavailable(_) => PipelineError::Gateway(format!("{}: {e}", d.doc_id)),
            other => data_err(format!("{}: {other}", d.doc_id)),
        })?;
        summary.documents += 1;
        summary.entries += n;
        summary.per_document.insert(d.doc_id.clone(), n);
    }
    Ok((store, summary))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExtractOutput {
    pub records: Vec<ExtractionRecord>,
    pub rounds: Vec<RoundTrace>,
    pub gateway_audit: Vec<AuditEntry>,
}

/// Run the REV loop for every document, `jobs` documents at a time. Output
/// order follows document order regardless of scheduling.
#[allow(clippy::too_many_arguments)]
pub fn extract(
    docs: &[Document],
    schema: &Schema,
    store: &VectorStore,
    gateway: &Gateway,
    profile: &str,
    units: &UnitTable,
    config: &RevConfig,
    jobs: usize,
) -> Result<ExtractOutput, PipelineError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(config_err)?;
    let results: Vec<Result<(rev::RevOutcome, Vec<AuditEntry>), RevError>> = pool.install(|| {
        docs.par_iter()
            .map(|d| {
                let gw = gateway.fork(&d.doc_id);
                let ctx = RevContext {
                    schema,
                    store,
                    gateway: &gw,
                    profile,
                    units,
                    config,
                };
                rev::run(d, &ctx).map(|o| (o, gw.audit()))
            })
            .collect()
    });
    let mut out = ExtractOutput::default();
    for r in results {
        let (o, audit) = r?;
        out.records.extend(o.records);
        out.rounds.extend(o.rounds);
        out.gateway_audit.extend(audit);
    }
    Ok(out)
}

fn jsonl<T: Serialize>(items: &[T]) -> String {
    let mut s = String::new();
    for i in items {
        s.push_str(&serde_json::to_string(i).expect("serializable"));
        s.push('\n');
    }
    s
}

/// `ingest` stage: documents to a persisted store.
pub fn cmd_ingest(files: &[PathBuf], embedder: &EmbedderConfig, store_path: &Path) -> Result<IngestSummary, PipelineError> {
    let docs = load_documents(files)?;
    let (store, summary) = ingest(&docs, embedder.build())?;
    if let Some(dir) = store_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(data_err)?;
    }
    store.persist(store_path).map_err(data_err)?;
    Ok(summary)
}

/// `extract` stage: persisted store to records plus audit trails.
pub fn cmd_extract(cfg: &RunConfig, store_path: &Path, paths: &OutputPaths) -> Result<usize, PipelineError> {
    let gateway = cfg.gateway()?;
    let schema = cfg.schema(&gateway)?;
    let store = VectorStore::load(store_path, cfg.embedder.build()).map_err(|e| match e {
        StoreError::IoFailure { .. } => config_err(format!("{}: {e}", store_path.display())),
        other => data_err(format!("{}: {other}", store_path.display())),
    })?;
    let docs = load_documents(&corpus_files(&cfg.corpus_dir)?)?;
    let units = cfg.units()?;
    let out = extract(&docs, &schema, &store, &gateway, cfg.profile(), &units, &cfg.rev, cfg.jobs)?;
    write(&paths.records, &write_records_jsonl(&out.records))?;
    write(&paths.rev_audit, &jsonl(&out.rounds))?;
    write(&paths.gateway_audit, &jsonl(&out.gateway_audit))?;
    Ok(out.records.len())
}

/// `aggregate` stage: records to the unified table and conflict log.
pub fn cmd_aggregate(cfg: &RunConfig, records_path: &Path, paths: &OutputPaths) -> Result<usize, PipelineError> {
    let gateway = cfg.gateway()?;
    let schema = cfg.schema(&gateway)?;
    let text = read(records_path)?;
    let records = read_records_jsonl(&text).map_err(|e| data_err(format!("{}: {e}", records_path.display())))?;
    let units = cfg.units()?;
    let canon = cfg.canon_map()?;
    let proposer = cfg.aggregation.llm_canonicalization.then(|| (&gateway, cfg.profile()));
    let agg = aggregate(
        &records,
        &schema,
        &AggregateOptions {
            precision: cfg.aggregation.precision,
            units: &units,
            canon: &canon,
            proposer,
        },
    )?;
    write(&paths.table, &table_to_json(&agg.table))?;
    write(&paths.conflicts, &log_to_jsonl(&agg.log))?;
    if cfg.aggregation.llm_canonicalization {
        let mut text = serde_json::to_string_pretty(&agg.canon.to_json()).expect("serializable");
        text.push('\n');
        write(&paths.canon_map, &text)?;
    }
    Ok(agg.table.len())
}

/// `evaluate` stage: unified table against ground truth.
pub fn cmd_evaluate(
    cfg: &RunConfig,
    table_path: &Path,
    ground_truth: Option<&Path>,
    paths: &OutputPaths,
) -> Result<EvalReport, PipelineError> {
    let gt_path = ground_truth
        .map(Path::to_path_buf)
        .or_else(|| cfg.eval.ground_truth.clone())
        .ok_or_else(|| config_err("no ground truth configured"))?;
    if !gt_path.exists() {
        return Err(config_err(format!("{} does not exist", gt_path.display())));
    }
    let gateway = cfg.gateway()?;
    let schema = cfg.schema(&gateway)?;
    let units = cfg.units()?;
    let canon = cfg.canon_map()?;
    let table: Vec<AggregatedRecord> = serde_json::from_str(&read(table_path)?)
        .map_err(|e| data_err(format!("{}: {e}", table_path.display())))?;
    let gt = load_ground_truth(&gt_path, &schema, &units)?;
    let cmp = Comparator {
        config: &cfg.eval.matching,
        canon: Some(&canon),
    };
    let report = evaluate(&cfg.eval.dataset, &table, &gt, &schema, &cmp)?;
    let mut json = serde_json::to_string_pretty(&report).expect("serializable");
    json.push('\n');
    write(&paths.metrics, &json)?;
    let mut rows: Vec<(&str, &crate::eval::Metrics)> = vec![(report.dataset.as_str(), &report.summary)];
    rows.extend(report.per_paper.iter().map(|(k, v)| (k.as_str(), v)));
    write(&paths.metrics_text, &text_table(&rows))?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub ingest: IngestSummary,
    pub records: usize,
    pub rows: usize,
    pub report: Option<EvalReport>,
}

/// All stages in sequence; evaluation runs when ground truth is configured.
pub fn run(cfg: &RunConfig) -> Result<RunSummary, PipelineError> {
    let paths = cfg.paths();
    let ingest = cmd_ingest(&corpus_files(&cfg.corpus_dir)?, &cfg.embedder, &paths.store)?;
    let records = cmd_extract(cfg, &paths.store, &paths)?;
    let rows = cmd_aggregate(cfg, &paths.records, &paths)?;
    let report = match &cfg.eval.ground_truth {
        Some(gt) => Some(cmd_evaluate(cfg, &paths.table, Some(gt), &paths)?),
        None => None,
    };
    Ok(RunSummary {
        ingest,
        records,
        rows,
        report,
    })
}
