//! The whole workflow on the fixture corpus with the scripted gateway:
//! ingest, extract, aggregate, evaluate.
//!
//!     cargo run --example end_to_end [output_dir]

use std::path::{Path, PathBuf};

use schemex::pipeline::{self, RunConfig, RunSummary};

pub fn run(output_dir: &Path) -> Result<RunSummary, Box<dyn std::error::Error>> {
    let mut cfg = RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/config.json"))?;
    cfg.output_dir = output_dir.to_path_buf();
    let summary = pipeline::run(&cfg)?;
    println!(
        "{} documents, {} store entries, {} records, {} table rows",
        summary.ingest.documents, summary.ingest.entries, summary.records, summary.rows
    );
    print!("{}", std::fs::read_to_string(cfg.paths().metrics_text)?);
    Ok(summary)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let tmp = tempfile::tempdir()?;
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| tmp.path().to_path_buf());
    run(&out).map(|_| ())
}
