//! Merge three records of the same condition reported in different units,
//! then show a voting conflict that cannot be settled.

use schemex::aggregate::{aggregate, AggregateOptions, Aggregation, CanonMap, DEFAULT_PRECISION};
use schemex::record::{ExtractionRecord, Provenance};
use schemex::schema::{parse_schema, Schema};
use schemex::units::UnitTable;
use schemex::value::FieldValue;
use serde_json::json;

pub fn schema() -> Schema {
    parse_schema(&json!({
        "schema_id": "virus_survival",
        "fields": [
            {"name": "virus", "dtype": "string", "required": true, "is_key": true},
            {"name": "temperature", "dtype": "float", "unit": "C", "is_key": true},
            {"name": "humidity", "dtype": "float", "unit": "%"}
        ]
    }))
    .expect("valid schema")
}

pub fn record(doc: &str, temp: f64, unit: &str, humidity: Option<f64>) -> ExtractionRecord {
    let mut r = ExtractionRecord::new(doc, 0);
    let p = Provenance {
        doc_id: doc.into(),
        evidence: Vec::new(),
        round: 1,
    };
    r.set("virus", FieldValue::Text("MS2".into()), 0.9, p.clone());
    r.set("temperature", FieldValue::Float(temp), 0.9, p.clone());
    r.units.insert("temperature".into(), unit.into());
    if let Some(h) = humidity {
        r.set("humidity", FieldValue::Float(h), 0.9, p);
    }
    r
}

pub fn run() -> Result<(Aggregation, Aggregation), Box<dyn std::error::Error>> {
    let s = schema();
    let units = UnitTable::builtin();
    let canon = CanonMap::builtin();
    let opts = AggregateOptions {
        precision: DEFAULT_PRECISION,
        units: &units,
        canon: &canon,
        proposer: None,
    };
    let records = vec![
        record("a", 77.0, "F", Some(50.0)),
        record("b", 25.0, "C", Some(50.0)),
        record("c", 25.0, "C", None),
    ];
    let merged = aggregate(&records, &s, &opts)?;
    for row in &merged.table {
        println!("{:?} <- {} source(s)", row.values, row.support["temperature"].len());
    }

    let split = vec![record("a", 25.0, "C", Some(40.0)), record("b", 25.0, "C", Some(60.0))];
    let tied = aggregate(&split, &s, &opts)?;
    println!("tie: humidity = {:?}, conflicts = {}", tied.table[0].values["humidity"], tied.table[0].conflicts.len());
    Ok((merged, tied))
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    run().map(|_| ())
}
