use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::schema::{FieldKind, UnifiedField, UnifiedPrescription};

/// One schema violation, located by a JSON pointer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let path = if self.path.is_empty() { "/" } else { &self.path };
        write!(f, "{path}: {}", self.message)
    }
}

/// All violations found in one candidate document.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaViolationReport {
    pub violations: Vec<Violation>,
}

impl fmt::Display for SchemaViolationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.violations.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join("; "))
    }
}

impl std::error::Error for SchemaViolationReport {}

fn violation(path: &str, message: impl Into<String>) -> Violation {
    Violation {
        path: path.to_string(),
        message: message.into(),
    }
}

/// Validates a candidate JSON document against the unified schema.
pub fn validate_against_schema(text: &str) -> Result<UnifiedPrescription, SchemaViolationReport> {
    let value: Value = serde_json::from_str(text).map_err(|e| SchemaViolationReport {
        violations: vec![violation("", format!("not valid JSON: {e}"))],
    })?;
    validate_value(&value)
}

pub fn validate_value(value: &Value) -> Result<UnifiedPrescription, SchemaViolationReport> {
    let Some(obj) = value.as_object() else {
        return Err(SchemaViolationReport {
            violations: vec![violation("", format!("expected object, got {}", type_name(value)))],
        });
    };
    let mut violations = Vec::new();
    let mut record = UnifiedPrescription::default();
    for (key, v) in obj {
        let path = format!("/{}", key.replace('~', "~0").replace('/', "~1"));
        let Ok(field) = key.parse::<UnifiedField>() else {
            violations.push(violation(&path, "unknown field"));
            continue;
        };
        if v.is_null() {
            continue;
        }
        match field.kind() {
            FieldKind::Text => match v.as_str() {
                Some(s) => *record.text_slot_mut(field).expect("text field") = Some(s.to_string()),
                None => violations.push(violation(
                    &path,
                    format!("expected string or null, got {}", type_name(v)),
                )),
            },
            kind => {
                let Some(n) = v.as_f64().filter(|_| v.is_number()) else {
                    violations.push(violation(
                        &path,
                        format!("expected number or null, got {}", type_name(v)),
                    ));
                    continue;
                };
                let ok = match kind {
                    FieldKind::NonNegative => n >= 0.0,
                    _ => n > 0.0,
                };
                if !ok || !n.is_finite() {
                    let bound = if kind == FieldKind::NonNegative { ">= 0" } else { "> 0" };
                    violations.push(violation(&path, format!("{n} violates {bound}")));
                    continue;
                }
                *record.number_slot_mut(field).expect("numeric field") = Some(n);
            }
        }
    }
    if violations.is_empty() {
        Ok(record)
    } else {
        Err(SchemaViolationReport { violations })
    }
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn full_document_is_accepted() {
        let r = validate_against_schema(
            r#"{"reasoning":"r","patient_id":"1","total_quantity":30,"daily_quantity":null,"refill":0}"#,
        )
        .unwrap();
        assert_eq!(r.total_quantity, Some(30.0));
        assert_eq!(r.refill, Some(0.0));
        assert_eq!(r.daily_quantity, None);
    }

    #[test]
    fn empty_object_is_valid() {
        assert_eq!(validate_against_schema("{}").unwrap(), UnifiedPrescription::default());
    }

    #[test]
    fn negative_total_is_reported() {
        let err = validate_against_schema(r#"{"total_quantity": -5}"#).unwrap_err();
        assert_eq!(err.violations.len(), 1);
        assert_eq!(err.violations[0].path, "/total_quantity");
    }

    #[test]
    fn zero_duration_is_reported() {
        let err = validate_against_schema(r#"{"duration": 0, "frequency": 1}"#).unwrap_err();
        assert_eq!(err.violations[0].path, "/duration");
    }

    #[test]
    fn every_violation_is_listed() {
        let err = validate_against_schema(
            r#"{"patient_id": 12, "refill": "two", "color": "blue", "duration": -1}"#,
        )
        .unwrap_err();
        let mut paths: Vec<_> = err.violations.iter().map(|v| v.path.as_str()).collect();
        paths.sort();
        assert_eq!(paths, ["/color", "/duration", "/patient_id", "/refill"]);
    }

    #[test]
    fn non_object_and_bad_json() {
        assert_eq!(validate_against_schema("[1]").unwrap_err().violations[0].path, "");
        assert!(validate_against_schema("{\"a\":").is_err());
    }

    proptest! {
        #[test]
        fn serialized_records_validate(
            total in proptest::option::of(0.0f64..1e6),
            dur in proptest::option::of(0.001f64..1e4),
            pid in proptest::option::of("[a-z0-9]{0,8}"),
        ) {
            let r = UnifiedPrescription {
                total_quantity: total,
                duration: dur,
                patient_id: pid,
                ..Default::default()
            };
            prop_assert_eq!(validate_against_schema(&r.to_json()).unwrap(), r);
        }
    }
}
