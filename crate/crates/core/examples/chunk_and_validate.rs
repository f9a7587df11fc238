//! Split raw text into overlapping chunks, wrap them in a Document, validate
//! it and list the segments the store would index.

use schemex::document::{chunk_text, validate_document, Document};
use schemex::store::document_segments;
use serde_json::json;

const TEXT: &str = "MS2 was dried on steel coupons and held at 77 F for 24 h. \
Infectivity fell by 1.0 log10 units.\n\n\
A second set of coupons was stored at 4 C. There MS2 lost 1.2 log10 units. \
Relative humidity stayed at 50 % in both rooms.";

pub fn run() -> Result<Document, Box<dyn std::error::Error>> {
    let chunks = chunk_text(TEXT, 120, 30);
    let raw = json!({
        "doc_id": "demo",
        "chunks": chunks,
        "tables": [{"table_id": "t1", "page_number": 1, "caption": "Log reduction",
                    "cells": [["temperature", "log reduction"], ["77 F", "1.0"], ["4 C", "1.2"]],
                    "header_rows": 1}],
        "page_images": [{"page_number": 1, "uri": "demo/page-1.png"}]
    });
    let doc = validate_document(&raw)?;
    for c in &doc.chunks {
        println!("chunk {} ({} chars): {:?}", c.chunk_index, c.text.chars().count(), c.text);
    }
    for s in document_segments(&doc) {
        println!("{} [{}] {}", s.entry_id, s.modality.as_str(), s.text);
    }
    Ok(doc)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    run().map(|_| ())
}
