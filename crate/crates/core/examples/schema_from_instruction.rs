//! Draft a schema from a plain-language instruction through the scripted
//! mock gateway, then check that a broken schema is rejected.

use std::path::Path;
use std::sync::Arc;

use schemex::gateway::{Gateway, MockBackend, MockScript};
use schemex::schema::{generate_schema, parse_schema, Schema};
use serde_json::json;

pub const INSTRUCTION: &str =
    "Extract virus survival measurements: virus, temperature, relative humidity and log reduction.";

pub fn run() -> Result<Schema, Box<dyn std::error::Error>> {
    let script = MockScript::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/mock_script.json"))?;
    let gateway = Gateway::mock("mock", Arc::new(MockBackend::new(&script)));
    let generated = generate_schema(INSTRUCTION, &gateway, "mock")?;
    let s = generated.schema;
    println!("{} ({} repairs)", s.schema_id, generated.repairs);
    for f in &s.fields {
        println!(
            "  {:<14} {:<6} unit={:<4} key={}",
            f.name,
            f.dtype.to_string(),
            f.unit.as_deref().unwrap_or("-"),
            f.is_key
        );
    }
    let broken = json!({"fields": [{"name": "phase", "dtype": "categorical", "is_key": true}]});
    println!("categorical without vocabulary: {}", parse_schema(&broken).unwrap_err());
    Ok(s)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    run().map(|_| ())
}
