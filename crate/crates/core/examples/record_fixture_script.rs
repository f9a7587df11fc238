//! Regenerate `fixtures/mock_script.json` from the content rules in
//! `fixtures/mock_rules.json`.
//!
//! The rules answer prompts by substring; the recorder stores the exact
//! fingerprints the pipeline produces, so the committed script replays
//! byte-for-byte.
//!
//!     cargo run --example record_fixture_script [fixture_dir]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use schemex::gateway::{Gateway, MockScript, RecordingBackend, Rule, RuleBackend};
use schemex::pipeline::{self, corpus_files, load_documents, RunConfig};
use schemex::schema::generate_schema;

pub const INSTRUCTION: &str =
    "Extract virus survival measurements: virus, temperature, relative humidity and log reduction.";

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn run(dir: &Path) -> Result<MockScript, Box<dyn std::error::Error>> {
    let cfg = RunConfig::load(&dir.join("config.json"))?;
    let rules: Vec<Rule> = serde_json::from_str(&std::fs::read_to_string(dir.join("mock_rules.json"))?)?;
    let recorder = Arc::new(RecordingBackend::new(RuleBackend::new(rules)));
    let gateway = Gateway::mock(cfg.profile(), recorder.clone());

    let schema = pipeline::load_schema(cfg.schema.as_ref().ok_or("config needs a schema path")?)?;
    let generated = generate_schema(INSTRUCTION, &gateway, cfg.profile())?;
    assert_eq!(generated.schema, schema, "schema rule should echo the fixture schema");

    let docs = load_documents(&corpus_files(&cfg.corpus_dir)?)?;
    let (store, _) = pipeline::ingest(&docs, cfg.embedder.build())?;
    let units = cfg.units()?;
    pipeline::extract(&docs, &schema, &store, &gateway, cfg.profile(), &units, &cfg.rev, 1)?;
    Ok(recorder.script())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(fixture_dir);
    let script = run(&dir)?;
    let out = dir.join("mock_script.json");
    script.save(&out)?;
    println!("{} entries -> {}", script.entries.len(), out.display());
    Ok(())
}
