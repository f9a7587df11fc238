//! Staged pipeline and CLI behaviour on the fixture corpus.

use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use schemex::aggregate::{aggregate, records_from_table, table_to_json, AggregateOptions, AggregatedRecord, CanonMap};
use schemex::pipeline::{self, corpus_files, load_documents, PipelineError, RunConfig};
use schemex::record::read_records_jsonl;
use schemex::units::UnitTable;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn config(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::load(&fixtures().join("config.json")).unwrap();
    cfg.output_dir = out.to_path_buf();
    cfg
}

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_schemex")).args(args).output().unwrap()
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn run_matches_goldens() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path());
    let summary = pipeline::run(&cfg).unwrap();
    assert_eq!(summary.ingest.documents, 2);
    let paths = cfg.paths();
    for (name, got) in [
        ("records.jsonl", &paths.records),
        ("rev_audit.jsonl", &paths.rev_audit),
        ("table.json", &paths.table),
        ("metrics.json", &paths.metrics),
        ("metrics.txt", &paths.metrics_text),
    ] {
        assert_eq!(read(got), read(&fixtures().join("golden").join(name)), "{name}");
    }
}

#[test]
fn ingest_counts_every_indexed_segment() {
    let docs = load_documents(&corpus_files(&fixtures().join("corpus")).unwrap()).unwrap();
    // d1: 4 chunks, 1 table, 1 scientific figure (the logo is skipped).
    // d2: 2 chunks, 1 table.
    let expected: usize = docs
        .iter()
        .map(|d| d.chunks.len() + d.tables.len() + d.figures.iter().filter(|f| f.is_scientific).count())
        .sum();
    assert_eq!(expected, 9);
    let (_, summary) = pipeline::ingest(&docs, pipeline::EmbedderConfig::default().build()).unwrap();
    assert_eq!(summary.entries, expected);
    assert_eq!(summary.per_document["d1"], 6);

    let (store, summary) = pipeline::ingest(&[], pipeline::EmbedderConfig::default().build()).unwrap();
    assert!(store.is_empty());
    assert_eq!(summary.entries, 0);
}

#[test]
fn parallel_extraction_equals_sequential() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut cfg = config(a.path());
    cfg.jobs = 1;
    pipeline::run(&cfg).unwrap();
    let mut cfg = config(b.path());
    cfg.jobs = 4;
    pipeline::run(&cfg).unwrap();
    for f in ["records.jsonl", "rev_audit.jsonl", "gateway_audit.jsonl", "table.json"] {
        assert_eq!(read(&a.path().join(f)), read(&b.path().join(f)), "{f}");
    }
}

#[test]
fn aggregating_the_table_again_changes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path());
    pipeline::run(&cfg).unwrap();
    let gw = cfg.gateway().unwrap();
    let schema = cfg.schema(&gw).unwrap();
    let table: Vec<AggregatedRecord> = serde_json::from_str(&read(&cfg.paths().table)).unwrap();
    let units = UnitTable::builtin();
    let canon = CanonMap::builtin();
    let opts = AggregateOptions {
        precision: cfg.aggregation.precision,
        units: &units,
        canon: &canon,
        proposer: None,
    };
    let again = aggregate(&records_from_table(&table, &schema), &schema, &opts).unwrap();
    assert_eq!(table_to_json(&again.table), read(&cfg.paths().table));

    let records = read_records_jsonl(&read(&cfg.paths().records)).unwrap();
    assert_eq!(records.len(), 4);
}

#[test]
fn empty_corpus_gives_empty_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    std::fs::create_dir(&corpus).unwrap();
    let mut cfg = config(&tmp.path().join("out"));
    cfg.corpus_dir = corpus;
    cfg.eval.ground_truth = None;
    let s = pipeline::run(&cfg).unwrap();
    assert_eq!((s.records, s.rows), (0, 0));
    assert_eq!(read(&cfg.paths().records), "");
    assert_eq!(read(&cfg.paths().table), "[]\n");
    assert!(s.report.is_none());
}

#[test]
fn missing_inputs_are_config_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path());
    cfg.schema = Some(tmp.path().join("nope.json"));
    assert!(matches!(cfg.check(), Err(PipelineError::Config(_))));

    let cfg = config(tmp.path());
    pipeline::run(&cfg).unwrap();
    let err = pipeline::cmd_evaluate(&cfg, &cfg.paths().table, Some(&tmp.path().join("gt.csv")), &cfg.paths()).unwrap_err();
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn unscripted_prompt_is_a_gateway_failure() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("empty_script.json"), "[]").unwrap();
    let mut cfg = config(tmp.path());
    cfg.mock_script = Some(tmp.path().join("empty_script.json"));
    let err = pipeline::run(&cfg).unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");
}

#[test]
fn cli_staged_equals_composed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixtures().join("config.json");
    let cfg = cfg.to_str().unwrap();
    let staged = tmp.path().join("staged");
    let composed = tmp.path().join("composed");
    let s = staged.to_str().unwrap();
    let store = staged.join("store.json");
    for args in [
        vec!["ingest", "-c", cfg, "--store", store.to_str().unwrap()],
        vec!["extract", "-c", cfg, "--output-dir", s, "--jobs", "1"],
        vec!["aggregate", "-c", cfg, "--output-dir", s],
        vec!["evaluate", "-c", cfg, "--output-dir", s],
    ] {
        let out = cli(&args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = cli(&["run", "-c", cfg, "--output-dir", composed.to_str().unwrap()]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("Precision"));
    for f in ["store.json", "records.jsonl", "table.json", "conflicts.jsonl", "metrics.json", "metrics.txt"] {
        assert_eq!(read(&staged.join(f)), read(&composed.join(f)), "{f}");
    }
}

#[test]
fn cli_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = cli(&["run", "-c", tmp.path().join("none.json").to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(1));

    let d1 = fixtures().join("corpus/d1.json");
    let copy = tmp.path().join("copy.json");
    std::fs::copy(&d1, &copy).unwrap();
    let dup = cli(&["ingest", d1.to_str().unwrap(), copy.to_str().unwrap(), "--store", tmp.path().join("s.json").to_str().unwrap()]);
    assert_eq!(dup.status.code(), Some(2));
    let err = String::from_utf8_lossy(&dup.stderr);
    assert!(err.contains("d1.json") && err.contains("copy.json"), "{err}");

    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"doc_id": "x", "chunks": [{"chunk_index": 0, "text": "  ", "page_number": 1}]}"#).unwrap();
    let out = cli(&["ingest", bad.to_str().unwrap(), "--store", tmp.path().join("s.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn cli_ingest_reads_json_lines_from_stdin() {
    let tmp = tempfile::tempdir().unwrap();
    let d1: serde_json::Value = serde_json::from_str(&read(&fixtures().join("corpus/d1.json"))).unwrap();
    let stream = format!("{}\n{}", d1, read(&fixtures().join("corpus/d2.jsonl")));
    let mut child = Command::new(env!("CARGO_BIN_EXE_schemex"))
        .args(["ingest", "-", "--store", tmp.path().join("s.json").to_str().unwrap()])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    use std::io::Write;
    child.stdin.take().unwrap().write_all(stream.as_bytes()).unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("2 documents, 9 entries"));
}

#[test]
fn cli_schema_commands() {
    let schema = fixtures().join("schema.json");
    let out = cli(&["schema", "validate", schema.to_str().unwrap()]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("keys: virus, temperature"));

    let tmp = tempfile::tempdir().unwrap();
    let broken = tmp.path().join("broken.json");
    std::fs::write(&broken, r#"{"fields": [{"name": "a", "dtype": "string"}]}"#).unwrap();
    assert_eq!(cli(&["schema", "validate", broken.to_str().unwrap()]).status.code(), Some(1));

    let generated = tmp.path().join("generated.json");
    let out = cli(&[
        "schema",
        "generate",
        "--instruction",
        "Extract virus survival measurements: virus, temperature, relative humidity and log reduction.",
        "--mock-script",
        fixtures().join("mock_script.json").to_str().unwrap(),
        "--out",
        generated.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        pipeline::load_schema(&generated).unwrap(),
        pipeline::load_schema(&schema).unwrap()
    );

    let out = cli(&["schema", "generate", "--instruction", "something unscripted"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn instruction_config_generates_the_schema() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path());
    cfg.schema = None;
    cfg.instruction =
        Some("Extract virus survival measurements: virus, temperature, relative humidity and log reduction.".into());
    cfg.check().unwrap();
    pipeline::run(&cfg).unwrap();
    assert_eq!(read(&cfg.paths().table), read(&fixtures().join("golden/table.json")));
}
