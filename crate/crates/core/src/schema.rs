//! Typed extraction schemas, value coercion and schema generation from
//! natural-language instructions.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::gateway::{Gateway, GatewayError, JsonShape, PromptRequest, StructuredTarget};
use crate::units::canonical_symbol;
use crate::value::FieldValue;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchemaError {
    #[error("field `{field}`: unknown dtype `{dtype}`")]
    UnknownDtype { field: String, dtype: String },
    #[error("field `{0}`: categorical dtype needs a non-empty vocabulary")]
    MissingVocabulary(String),
    #[error("field `{0}`: vocabulary is only allowed on categorical fields")]
    UnexpectedVocabulary(String),
    #[error("schema has no key field")]
    NoKeyField,
    #[error("schema has no fields")]
    NoFields,
    #[error("duplicate field name `{0}`")]
    DuplicateFieldName(String),
    #[error("field `{field}`: {reason}")]
    InvalidRange { field: String, reason: String },
    #[error("field name `{0}` is not canonical (lowercase, trimmed, underscores for spaces)")]
    InvalidFieldName(String),
    #[error("malformed schema: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Dtype {
    String,
    Float,
    Integer,
    Boolean,
    Categorical,
    ListOf(Box<Dtype>),
}

impl Dtype {
    pub fn parse(s: &str) -> Option<Dtype> {
        let s = s.trim();
        match s {
            "string" => Some(Dtype::String),
            "float" => Some(Dtype::Float),
            "integer" => Some(Dtype::Integer),
            "boolean" => Some(Dtype::Boolean),
            "categorical" => Some(Dtype::Categorical),
            _ => {
                let inner = s.strip_prefix("list_of(")?.strip_suffix(')')?;
                match Dtype::parse(inner)? {
                    Dtype::ListOf(_) => None,
                    d => Some(Dtype::ListOf(Box::new(d))),
                }
            }
        }
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self, Dtype::Float | Dtype::Integer)
    }

    /// The element type for lists, the type itself otherwise.
    pub fn scalar(&self) -> &Dtype {
        match self {
            Dtype::ListOf(inner) => inner,
            d => d,
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dtype::String => f.write_str("string"),
            Dtype::Float => f.write_str("float"),
            Dtype::Integer => f.write_str("integer"),
            Dtype::Boolean => f.write_str("boolean"),
            Dtype::Categorical => f.write_str("categorical"),
            Dtype::ListOf(inner) => write!(f, "list_of({inner})"),
        }
    }
}

impl Serialize for Dtype {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FieldSpec {
    pub name: String,
    pub dtype: Dtype,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub vocabulary: Vec<String>,
    pub required: bool,
    pub is_key: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub range: Option<(f64, f64)>,
    #[serde(skip_serializing_if = "String::is_empty")]
    pub description: String,
}

impl FieldSpec {
    pub fn new(name: &str, dtype: Dtype) -> Self {
        Self {
            name: name.to_string(),
            dtype,
            unit: None,
            vocabulary: Vec::new(),
            required: false,
            is_key: false,
            range: None,
            description: String::new(),
        }
    }

    pub fn unit(mut self, unit: &str) -> Self {
        self.unit = Some(canonical_symbol(unit));
        self
    }

    pub fn key(mut self) -> Self {
        self.is_key = true;
        self
    }

    pub fn required(mut self) -> Self {
        self.required = true;
        self
    }

    pub fn range(mut self, min: f64, max: f64) -> Self {
        self.range = Some((min, max));
        self
    }

    pub fn vocabulary(mut self, words: &[&str]) -> Self {
        self.vocabulary = words.iter().map(|w| w.to_string()).collect();
        self
    }

    pub fn describe(mut self, text: &str) -> Self {
        self.description = text.to_string();
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Schema {
    pub schema_id: String,
    #[serde(skip_serializing_if = "String::is_empty")]
    pub description: String,
    pub fields: Vec<FieldSpec>,
}

impl Schema {
    /// Build and validate a schema in code.
    pub fn new(
        schema_id: &str,
        description: &str,
        fields: Vec<FieldSpec>,
    ) -> Result<Schema, SchemaError> {
        let s = Schema {
            schema_id: schema_id.to_string(),
            description: description.to_string(),
            fields,
        };
        check_schema(&s)?;
        Ok(s)
    }

    pub fn field(&self, name: &str) -> Option<&FieldSpec> {
        self.fields.iter().find(|f| f.name == name)
    }

    pub fn key_fields(&self) -> impl Iterator<Item = &FieldSpec> {
        self.fields.iter().filter(|f| f.is_key)
    }

    pub fn key_names(&self) -> Vec<String> {
        self.key_fields().map(|f| f.name.clone()).collect()
    }

    pub fn field_names(&self) -> Vec<String> {
        self.fields.iter().map(|f| f.name.clone()).collect()
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("schema serializes")
    }
}

/// Canonical spelling of a field name.
pub fn canonical_term(name: &str) -> String {
    name.trim()
        .to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join("_")
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSchema {
    #[serde(default = "default_schema_id")]
    schema_id: String,
    #[serde(default)]
    description: String,
    fields: Vec<RawField>,
}

fn default_schema_id() -> String {
    "schema".into()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawField {
    name: String,
    dtype: String,
    #[serde(default)]
    unit: Option<String>,
    #[serde(default)]
    vocabulary: Option<Vec<String>>,
    #[serde(default)]
    required: bool,
    #[serde(default)]
    is_key: bool,
    #[serde(default)]
    range: Option<(f64, f64)>,
    #[serde(default)]
    description: String,
}

pub fn parse_schema(raw: &Value) -> Result<Schema, SchemaError> {
    let r: RawSchema =
        serde_json::from_value(raw.clone()).map_err(|e| SchemaError::Malformed(e.to_string()))?;
    let mut fields = Vec::with_capacity(r.fields.len());
    for f in r.fields {
        let dtype = Dtype::parse(&f.dtype).ok_or_else(|| SchemaError::UnknownDtype {
            field: f.name.clone(),
            dtype: f.dtype.clone(),
        })?;
        fields.push(FieldSpec {
            name: f.name,
            dtype,
            unit: f
                .unit
                .filter(|u| !u.trim().is_empty())
                .map(|u| canonical_symbol(&u)),
            vocabulary: f.vocabulary.unwrap_or_default(),
            required: f.required,
            is_key: f.is_key,
            range: f.range,
            description: f.description,
        });
    }
    let schema = Schema {
        schema_id: r.schema_id,
        description: r.description,
        fields,
    };
    check_schema(&schema)?;
    Ok(schema)
}

pub fn parse_schema_str(text: &str) -> Result<Schema, SchemaError> {
    let v: Value = serde_json::from_str(text).map_err(|e| SchemaError::Malformed(e.to_string()))?;
    parse_schema(&v)
}

fn check_schema(s: &Schema) -> Result<(), SchemaError> {
    if s.fields.is_empty() {
        return Err(SchemaError::NoFields);
    }
    let mut names = HashSet::new();
    for f in &s.fields {
        if f.name.is_empty() || canonical_term(&f.name) != f.name {
            return Err(SchemaError::InvalidFieldName(f.name.clone()));
        }
        if !names.insert(f.name.as_str()) {
            return Err(SchemaError::DuplicateFieldName(f.name.clone()));
        }
        let categorical = *f.dtype.scalar() == Dtype::Categorical;
        if categorical && f.vocabulary.iter().all(|w| w.trim().is_empty()) {
            return Err(SchemaError::MissingVocabulary(f.name.clone()));
        }
        if !categorical && !f.vocabulary.is_empty() {
            return Err(SchemaError::UnexpectedVocabulary(f.name.clone()));
        }
        if let Some((lo, hi)) = f.range {
            if !f.dtype.scalar().is_numeric() {
                return Err(SchemaError::InvalidRange {
                    field: f.name.clone(),
                    reason: "range on a non-numeric field".into(),
                });
            }
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                return Err(SchemaError::InvalidRange {
                    field: f.name.clone(),
                    reason: format!("invalid bounds ({lo}, {hi})"),
                });
            }
        }
    }
    if !s.fields.iter().any(|f| f.is_key) {
        return Err(SchemaError::NoKeyField);
    }
    Ok(())
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("cannot coerce `{raw}` to {dtype}: {reason}")]
pub struct CoercionFailure {
    pub raw: String,
    pub dtype: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Coerced {
    pub value: FieldValue,
    /// Canonical symbol of a unit found next to a number, if any.
    pub unit: Option<String>,
}

fn fail(raw: &str, dtype: &Dtype, reason: impl Into<String>) -> CoercionFailure {
    CoercionFailure {
        raw: raw.to_string(),
        dtype: dtype.to_string(),
        reason: reason.into(),
    }
}

/// Split a leading number from a trailing unit: "25 °C" -> (25.0, "°C").
pub fn split_number(raw: &str) -> Option<(f64, &str)> {
    let t = raw.trim();
    let prefix_len = t
        .char_indices()
        .take_while(|(_, c)| c.is_ascii_digit() || matches!(c, '+' | '-' | '.' | 'e' | 'E' | ','))
        .map(|(i, c)| i + c.len_utf8())
        .last()?;
    // Longest parseable prefix wins; exponent markers may belong to the unit.
    for end in (1..=prefix_len).rev() {
        if !t.is_char_boundary(end) {
            continue;
        }
        let head = &t[..end];
        if head.contains(',') && !valid_thousands(head) {
            continue;
        }
        if let Ok(x) = head.replace(',', "").parse::<f64>() {
            if x.is_finite() {
                return Some((x, t[end..].trim()));
            }
        }
    }
    None
}

fn valid_thousands(s: &str) -> bool {
    let s = s.trim_start_matches(['+', '-']);
    let int_part = s.split('.').next().unwrap_or("");
    let groups: Vec<&str> = int_part.split(',').collect();
    groups.len() > 1
        && !groups[0].is_empty()
        && groups[0].len() <= 3
        && groups[1..].iter().all(|g| g.len() == 3)
        && groups.iter().all(|g| g.chars().all(|c| c.is_ascii_digit()))
}

fn coerce_scalar(dtype: &Dtype, spec: &FieldSpec, raw: &str) -> Result<Coerced, CoercionFailure> {
    let t = raw.trim();
    if t.is_empty() {
        return Err(fail(raw, dtype, "empty value"));
    }
    let unit_of = |rest: &str| {
        if rest.is_empty() {
            None
        } else {
            Some(canonical_symbol(rest))
        }
    };
    match dtype {
        Dtype::String => Ok(Coerced {
            value: FieldValue::Text(t.to_string()),
            unit: None,
        }),
        Dtype::Float => {
            let (x, rest) = split_number(t).ok_or_else(|| fail(raw, dtype, "not a number"))?;
            Ok(Coerced {
                value: FieldValue::Float(x),
                unit: unit_of(rest),
            })
        }
        Dtype::Integer => {
            let (x, rest) = split_number(t).ok_or_else(|| fail(raw, dtype, "not a number"))?;
            if x.fract() != 0.0 || x.abs() > 9.0e15 {
                return Err(fail(raw, dtype, "not an exact integer"));
            }
            Ok(Coerced {
                value: FieldValue::Integer(x as i64),
                unit: unit_of(rest),
            })
        }
        Dtype::Boolean => {
            let b = match t.to_lowercase().as_str() {
                "true" | "yes" | "y" | "1" => true,
                "false" | "no" | "n" | "0" => false,
                _ => return Err(fail(raw, dtype, "not a boolean")),
            };
            Ok(Coerced {
                value: FieldValue::Bool(b),
                unit: None,
            })
        }
        Dtype::Categorical => {
            let lower = t.to_lowercase();
            spec.vocabulary
                .iter()
                .find(|w| w.trim().to_lowercase() == lower)
                .map(|w| Coerced {
                    value: FieldValue::Text(w.clone()),
                    unit: None,
                })
                .ok_or_else(|| fail(raw, dtype, "not in vocabulary"))
        }
        Dtype::ListOf(_) => Err(fail(raw, dtype, "nested lists are not supported")),
    }
}

fn merge_units(items: &[Coerced], raw: &str, dtype: &Dtype) -> Result<Option<String>, CoercionFailure> {
    let mut unit: Option<&String> = None;
    for c in items {
        if let Some(u) = &c.unit {
            match unit {
                None => unit = Some(u),
                Some(prev) if prev != u => {
                    return Err(fail(raw, dtype, format!("mixed units {prev} and {u}")))
                }
                _ => {}
            }
        }
    }
    Ok(unit.cloned())
}

/// Parse a raw string into the field's dtype. Numbers may carry a unit
/// ("25 °C"); categorical values match the vocabulary case-insensitively; list
/// items are separated by semicolons.
pub fn coerce_value(spec: &FieldSpec, raw: &str) -> Result<Coerced, CoercionFailure> {
    match &spec.dtype {
        Dtype::ListOf(inner) => {
            let items = raw
                .split(';')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| coerce_scalar(inner, spec, s))
                .collect::<Result<Vec<_>, _>>()?;
            let unit = merge_units(&items, raw, &spec.dtype)?;
            Ok(Coerced {
                value: FieldValue::List(items.into_iter().map(|c| c.value).collect()),
                unit,
            })
        }
        d => coerce_scalar(d, spec, raw),
    }
}

/// Coerce a JSON value. `Ok(None)` for null.
pub fn coerce_json(spec: &FieldSpec, raw: &Value) -> Result<Option<Coerced>, CoercionFailure> {
    fn scalar(spec: &FieldSpec, dtype: &Dtype, v: &Value) -> Result<Coerced, CoercionFailure> {
        match (dtype, v) {
            (Dtype::Float, Value::Number(n)) => Ok(Coerced {
                value: FieldValue::Float(n.as_f64().unwrap_or(f64::NAN)),
                unit: None,
            })
            .and_then(|c| match c.value {
                FieldValue::Float(x) if x.is_finite() => Ok(c),
                _ => Err(fail(&v.to_string(), dtype, "not finite")),
            }),
            (Dtype::Integer, Value::Number(n)) => {
                if let Some(i) = n.as_i64() {
                    Ok(Coerced {
                        value: FieldValue::Integer(i),
                        unit: None,
                    })
                } else {
                    coerce_scalar(dtype, spec, &n.to_string())
                }
            }
            (Dtype::Boolean, Value::Bool(b)) => Ok(Coerced {
                value: FieldValue::Bool(*b),
                unit: None,
            }),
            (_, Value::String(s)) => coerce_scalar(dtype, spec, s),
            (_, Value::Number(n)) => coerce_scalar(dtype, spec, &n.to_string()),
            (_, Value::Bool(b)) => coerce_scalar(dtype, spec, &b.to_string()),
            _ => Err(fail(&v.to_string(), dtype, "unexpected JSON type")),
        }
    }
    match (&spec.dtype, raw) {
        (_, Value::Null) => Ok(None),
        (Dtype::ListOf(inner), Value::Array(items)) => {
            let items = items
                .iter()
                .filter(|v| !v.is_null())
                .map(|v| scalar(spec, inner, v))
                .collect::<Result<Vec<_>, _>>()?;
            let unit = merge_units(&items, &raw.to_string(), &spec.dtype)?;
            Ok(Some(Coerced {
                value: FieldValue::List(items.into_iter().map(|c| c.value).collect()),
                unit,
            }))
        }
        (Dtype::ListOf(_), Value::String(s)) => coerce_value(spec, s).map(Some),
        (d, v) => scalar(spec, d, v).map(Some),
    }
}

/// Structural problems with a record under a schema. Range checks are not
/// included; they are verification concerns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RecordViolation {
    UnknownField(String),
    TypeMismatch { field: String, expected: String },
    NotInVocabulary { field: String, value: String },
    RequiredKeyMissing(String),
}

pub fn value_matches_dtype(spec: &FieldSpec, dtype: &Dtype, v: &FieldValue) -> bool {
    match (dtype, v) {
        (Dtype::String, FieldValue::Text(_)) => true,
        (Dtype::Float, FieldValue::Float(_) | FieldValue::Integer(_)) => true,
        (Dtype::Integer, FieldValue::Integer(_)) => true,
        (Dtype::Boolean, FieldValue::Bool(_)) => true,
        (Dtype::Categorical, FieldValue::Text(s)) => spec.vocabulary.contains(s),
        (Dtype::ListOf(inner), FieldValue::List(items)) => {
            items.iter().all(|i| value_matches_dtype(spec, inner, i))
        }
        _ => false,
    }
}

pub fn validate_values(
    values: &BTreeMap<String, Option<FieldValue>>,
    schema: &Schema,
) -> Vec<RecordViolation> {
    let mut out = Vec::new();
    for (name, v) in values {
        let Some(spec) = schema.field(name) else {
            out.push(RecordViolation::UnknownField(name.clone()));
            continue;
        };
        if let Some(v) = v {
            if !value_matches_dtype(spec, &spec.dtype, v) {
                if *spec.dtype.scalar() == Dtype::Categorical {
                    out.push(RecordViolation::NotInVocabulary {
                        field: name.clone(),
                        value: v.to_string(),
                    });
                } else {
                    out.push(RecordViolation::TypeMismatch {
                        field: name.clone(),
                        expected: spec.dtype.to_string(),
                    });
                }
            }
        }
    }
    for spec in schema.key_fields().filter(|f| f.required) {
        if !matches!(values.get(&spec.name), Some(Some(_))) {
            out.push(RecordViolation::RequiredKeyMissing(spec.name.clone()));
        }
    }
    out
}

#[derive(Debug, Error)]
pub enum SchemaGenError {
    #[error("instruction is empty")]
    EmptyInstruction,
    #[error(transparent)]
    Gateway(GatewayError),
    #[error("generated schema is still invalid after repair: {last_error}")]
    SchemaInvalidAfterRepair {
        last_error: String,
        raw_outputs: Vec<String>,
    },
}

#[derive(Debug, Clone)]
pub struct GeneratedSchema {
    pub schema: Schema,
    /// Every raw model reply, first attempt first.
    pub raw_outputs: Vec<String>,
    pub repairs: u32,
    /// Extra candidate schemas the model proposed, kept verbatim.
    pub alternates: Vec<Value>,
}

pub const SCHEMA_GENERATION_SYSTEM: &str = "You design extraction schemas for scientific literature. \
Reply with one JSON object and nothing else: {\"schema_id\": string, \"description\": string, \
\"fields\": [{\"name\": lowercase_snake_case, \"dtype\": \"string\"|\"float\"|\"integer\"|\"boolean\"|\"categorical\"|\"list_of(<dtype>)\", \
\"unit\": optional canonical unit symbol, \"vocabulary\": [..] only for categorical, \"required\": bool, \
\"is_key\": bool (true for the fields that distinguish one experimental row from another), \
\"range\": optional [min, max], \"description\": string}]}.";

/// Ask the model for a schema matching `instruction`. The reply must pass
/// [`parse_schema`]; one repair round feeds the validation error back.
pub fn generate_schema(
    instruction: &str,
    gateway: &Gateway,
    profile: &str,
) -> Result<GeneratedSchema, SchemaGenError> {
    if instruction.trim().is_empty() {
        return Err(SchemaGenError::EmptyInstruction);
    }
    let req = PromptRequest::new(
        profile,
        SCHEMA_GENERATION_SYSTEM,
        &format!("Instruction: {}", instruction.trim()),
    );
    let shape = JsonShape::new("schema", |v: &Value| {
        // A list of candidates is accepted; the first one must be valid.
        let (first, rest) = match v {
            Value::Array(items) if !items.is_empty() => (&items[0], items[1..].to_vec()),
            Value::Array(_) => return Err("empty list of schemas".to_string()),
            other => (other, Vec::new()),
        };
        let schema = parse_schema(first).map_err(|e| e.to_string())?;
        Ok(json!({ "schema": schema.to_json(), "alternates": rest }))
    });
    let out = gateway
        .complete_structured_with(&req, &StructuredTarget::Shape(&shape), 1)
        .map_err(|e| match e {
            GatewayError::StructureInvalidAfterRepair {
                last_error,
                raw_outputs,
            } => SchemaGenError::SchemaInvalidAfterRepair {
                last_error,
                raw_outputs,
            },
            other => SchemaGenError::Gateway(other),
        })?;
    let schema = parse_schema(&out.value["schema"]).expect("validated by shape");
    let alternates = out.value["alternates"].as_array().cloned().unwrap_or_default();
    Ok(GeneratedSchema {
        schema,
        raw_outputs: out.raw_outputs,
        repairs: out.repairs,
        alternates,
    })
}
