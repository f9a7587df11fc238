//! Index the fixture corpus with the hashed embedder, query it, and reload a
//! persisted copy.

use std::sync::Arc;

use schemex::pipeline::{corpus_files, load_documents};
use schemex::store::{HashedEmbedder, QueryFilter, QueryResult, VectorStore};

pub fn run() -> Result<Vec<QueryResult>, Box<dyn std::error::Error>> {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/corpus");
    let docs = load_documents(&corpus_files(&dir)?)?;
    let embedder = Arc::new(HashedEmbedder::default());
    let mut store = VectorStore::new(embedder.clone());
    for d in &docs {
        store.index_document(d)?;
    }
    let query = "relative humidity during incubation";
    let hits = store.query(query, 3, None)?;
    println!("top 3 for {query:?}:");
    for h in &hits {
        println!("  {:.4} {}", h.score, h.entry_id);
    }
    let only_d2 = store.query(query, 3, Some(&QueryFilter::doc("d2")))?;
    println!("restricted to d2: {:?}", only_d2.iter().map(|h| &h.entry_id).collect::<Vec<_>>());

    let tmp = tempfile::tempdir()?;
    let path = tmp.path().join("store.json");
    store.persist(&path)?;
    let reloaded = VectorStore::load(&path, embedder)?;
    assert_eq!(reloaded.query(query, 3, None)?, hits);
    println!("reloaded store answers identically ({} entries)", reloaded.len());
    Ok(hits)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    run().map(|_| ())
}
