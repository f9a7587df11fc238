//! Match extracted rows to ground truth and score them.

use schemex::eval::{bipartite_match, compute_metrics, Comparator, MatchConfig, Metrics, Row};
use schemex::value::FieldValue;

fn row(virus: &str, temp: f64, humidity: f64) -> Row {
    [
        ("virus", FieldValue::Text(virus.into())),
        ("temperature", FieldValue::Float(temp)),
        ("humidity", FieldValue::Float(humidity)),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), Some(v)))
    .collect()
}

pub fn run() -> Metrics {
    let gt = vec![
        row("MS2", 25.0, 50.0),
        row("MS2", 4.0, 50.0),
        row("Phi6", 25.0, 30.0),
        row("Phi6", 37.0, 30.0),
    ];
    let ext = vec![
        row("ms2 ", 25.0, 50.0),
        row("MS2", 4.1, 55.0),
        row("T4", 60.0, 10.0),
        row("Qbeta", 90.0, 10.0),
        row("PRD1", 70.0, 10.0),
    ];
    let config = MatchConfig {
        key_fields: vec!["virus".into(), "temperature".into()],
        ..MatchConfig::default()
    };
    let cmp = Comparator {
        config: &config,
        canon: None,
    };
    let m = bipartite_match(&gt, &ext, &config.key_fields, &cmp);
    for p in &m.pairs {
        println!("gt {} <-> ext {} (key similarity {:.2})", p.gt, p.ext, p.similarity);
    }
    let metrics = compute_metrics(&m, &gt, &ext, &["humidity".to_string()], &cmp);
    println!(
        "P={:.3} R={:.3} F1={:.3} accuracy={:.3}",
        metrics.precision, metrics.recall, metrics.f1, metrics.accuracy
    );
    metrics
}

fn main() {
    run();
}
