use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::store::{Modality, SourceRef};
use crate::value::FieldValue;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EvidenceRef {
    pub modality: Modality,
    #[serde(rename = "ref")]
    pub source: SourceRef,
    pub entry_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub doc_id: String,
    pub evidence: Vec<EvidenceRef>,
    pub round: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NullReason {
    AbsentInEvidence,
    CoercionFailed,
    UnresolvedConflict,
}

/// One extracted row. Every schema field is present in `values`; null values
/// carry a reason and no provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionRecord {
    pub record_id: String,
    pub doc_id: String,
    pub values: BTreeMap<String, Option<FieldValue>>,
    pub confidence: BTreeMap<String, f64>,
    pub provenance: BTreeMap<String, Provenance>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub null_reasons: BTreeMap<String, NullReason>,
    /// Unit detected next to a raw value, when it differs from nothing at all.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub units: BTreeMap<String, String>,
}

impl ExtractionRecord {
    pub fn new(doc_id: &str, index: usize) -> Self {
        Self {
            record_id: format!("{doc_id}#r{index}"),
            doc_id: doc_id.to_string(),
            values: BTreeMap::new(),
            confidence: BTreeMap::new(),
            provenance: BTreeMap::new(),
            null_reasons: BTreeMap::new(),
            units: BTreeMap::new(),
        }
    }

    pub fn value(&self, field: &str) -> Option<&FieldValue> {
        self.values.get(field).and_then(Option::as_ref)
    }

    pub fn set(&mut self, field: &str, value: FieldValue, confidence: f64, provenance: Provenance) {
        self.values.insert(field.to_string(), Some(value));
        self.confidence
            .insert(field.to_string(), confidence.clamp(0.0, 1.0));
        self.provenance.insert(field.to_string(), provenance);
        self.null_reasons.remove(field);
    }

    pub fn set_null(&mut self, field: &str, reason: NullReason) {
        self.values.insert(field.to_string(), None);
        self.confidence.insert(field.to_string(), 0.0);
        self.provenance.remove(field);
        self.units.remove(field);
        self.null_reasons.insert(field.to_string(), reason);
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

pub fn read_records_jsonl(text: &str) -> Result<Vec<ExtractionRecord>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

pub fn write_records_jsonl(records: &[ExtractionRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.to_json_line());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_lines_round_trip() {
        let mut r = ExtractionRecord::new("d1", 0);
        r.set(
            "virus",
            FieldValue::Text("MS2".into()),
            0.9,
            Provenance {
                doc_id: "d1".into(),
                evidence: vec![EvidenceRef {
                    modality: Modality::Text,
                    source: SourceRef::Chunk(0),
                    entry_id: "d1:text:0".into(),
                }],
                round: 1,
            },
        );
        r.set_null("humidity", NullReason::AbsentInEvidence);
        let text = write_records_jsonl(&[r.clone()]);
        assert!(text.contains("\"absent_in_evidence\""));
        assert!(text.contains("\"ref\":0"));
        assert_eq!(read_records_jsonl(&text).unwrap(), vec![r]);
    }
}
