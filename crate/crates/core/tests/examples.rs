//! Every runnable example, driven through its `run` function.

#[allow(dead_code)]
#[path = "../examples/chunk_and_validate.rs"]
mod chunk_and_validate;
#[allow(dead_code)]
#[path = "../examples/retrieval.rs"]
mod retrieval;
#[allow(dead_code)]
#[path = "../examples/schema_from_instruction.rs"]
mod schema_from_instruction;
#[allow(dead_code)]
#[path = "../examples/rev_loop.rs"]
mod rev_loop;
#[allow(dead_code)]
#[path = "../examples/aggregate_units.rs"]
mod aggregate_units;
#[allow(dead_code)]
#[path = "../examples/evaluate_matching.rs"]
mod evaluate_matching;
#[allow(dead_code)]
#[path = "../examples/end_to_end.rs"]
mod end_to_end;
#[allow(dead_code)]
#[path = "../examples/record_fixture_script.rs"]
mod record_fixture_script;

use schemex::gateway::MockScript;
use schemex::record::NullReason;
use schemex::value::FieldValue;

#[test]
fn chunking_example() {
    let doc = chunk_and_validate::run().unwrap();
    assert_eq!(doc.chunks.len(), 3);
    assert!(doc.chunks.iter().all(|c| c.text.chars().count() <= 120));
}

#[test]
fn retrieval_example() {
    let hits = retrieval::run().unwrap();
    assert_eq!(hits.len(), 3);
    assert_eq!(hits[0].entry_id, "d2:text:1");
}

#[test]
fn schema_example() {
    let s = schema_from_instruction::run().unwrap();
    assert_eq!(s.key_names(), vec!["virus", "temperature"]);
}

#[test]
fn rev_example() {
    let out = rev_loop::run().unwrap();
    assert_eq!(out.rounds.len(), 2);
    assert_eq!(out.rounds[1].filled, vec!["d1#r1.humidity"]);
    assert_eq!(out.records[1].provenance["humidity"].round, 2);
}

#[test]
fn aggregation_example() {
    let (merged, tied) = aggregate_units::run().unwrap();
    assert_eq!(merged.table.len(), 1);
    assert_eq!(merged.table[0].values["temperature"], Some(FieldValue::Float(25.0)));
    assert_eq!(tied.table[0].values["humidity"], None);
    assert_eq!(tied.table[0].null_reasons["humidity"], NullReason::UnresolvedConflict);
}

#[test]
fn evaluation_example() {
    let m = evaluate_matching::run();
    assert_eq!((m.counts.n_gt, m.counts.n_ext, m.counts.n_matched), (4, 5, 2));
    assert!((m.f1 - 4.0 / 9.0).abs() < 1e-12);
}

#[test]
fn end_to_end_example() {
    let tmp = tempfile::tempdir().unwrap();
    let s = end_to_end::run(tmp.path()).unwrap();
    assert_eq!(s.rows, 3);
    assert!(s.report.is_some());
}

#[test]
fn committed_mock_script_is_current() {
    let dir = record_fixture_script::fixture_dir();
    let fresh = record_fixture_script::run(&dir).unwrap();
    let committed = MockScript::load(&dir.join("mock_script.json")).unwrap();
    assert_eq!(fresh, committed, "rerun `cargo run --example record_fixture_script`");
}
