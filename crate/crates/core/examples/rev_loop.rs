//! Run the retrieve-extract-verify loop on one fixture document. The first
//! round leaves a humidity value missing; the anchored follow-up fills it.

use std::path::Path;

use schemex::pipeline::{self, corpus_files, load_documents, RunConfig};
use schemex::rev::{self, RevContext, RevOutcome};

pub fn run() -> Result<RevOutcome, Box<dyn std::error::Error>> {
    let cfg = RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/config.json"))?;
    let gateway = cfg.gateway()?;
    let schema = cfg.schema(&gateway)?;
    let docs = load_documents(&corpus_files(&cfg.corpus_dir)?)?;
    let (store, _) = pipeline::ingest(&docs, cfg.embedder.build())?;
    let units = cfg.units()?;
    let ctx = RevContext {
        schema: &schema,
        store: &store,
        gateway: &gateway,
        profile: cfg.profile(),
        units: &units,
        config: &cfg.rev,
    };
    let out = rev::run(&docs[0], &ctx)?;
    for r in &out.rounds {
        println!("round {}: {} request(s), filled {:?}", r.round, r.requests.len(), r.filled);
        for q in r.requests.iter().flat_map(|q| &q.queries) {
            println!("  query: {q}");
        }
    }
    for r in &out.records {
        println!("{}", r.to_json_line());
    }
    Ok(out)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    run().map(|_| ())
}
