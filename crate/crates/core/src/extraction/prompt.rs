use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::schema::{ClinicFormatSpec, FieldKind, RawRecord, UnifiedField};

pub const SYSTEM_PROMPT: &str = "You are a medical expert, you are tasked with extracting useful information from a prescription. Before answering you should reason about the problem (using the \"reasoning\" field in the JSON response). You need to follow the format described below:";

/// Shared interpretation rules appended to every format prompt.
pub const IMPORTANT_NOTES: &str = r#"- If information is unavailable, set the field to None.
- Convert fractions with space (e.g., '3 1/2') to decimal values (e.g., '3.5').
- For medication frequency: interpret "X10" as 10 days, but only when X is followed by a reasonable number. Don't apply this rule if P follows X or if the number is unusually large.
- Always include detailed step-by-step calculations in the "reasoning" field, particularly for injections and complex dosing regimens.
- Watch for specialized dosing terms: "inject/injection," "patch," "every 4 weeks," "monthly," "weekly," "once a week," "every 7 days," etc.
- For injection medications, carefully analyze the SIG field to determine proper administration schedule.
- Special medications like Vivitrol are injections administered monthly - always note this in your reasoning.
- When extracting daily quantities from dosage instructions, sum all individual doses (e.g., "one tab in morning, half tab at night" = 1.5).
- For duration calculations, extract explicit day counts or convert frequency information (weekly = 7 days, monthly = 30 days, etc.).
- Convert text numbers to numerals: "one" -> 1, "two" -> 2, etc."#;

/// Everything sent to a generative backend for one record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system_prompt: String,
    pub important_notes: String,
    pub format_instructions: String,
    pub record_payload: String,
    pub output_schema: Value,
}

impl PromptBundle {
    /// Prompt text in the order system prompt, format instructions,
    /// important notes, record payload.
    pub fn render(&self) -> String {
        format!(
            "{}\n{}\n\nImportant Notes:\n{}\n\nPrescription record:\n{}",
            self.system_prompt,
            self.format_instructions.trim_matches('\n'),
            self.important_notes,
            self.record_payload
        )
    }
}

/// JSON schema of the unified record: every field optional and nullable,
/// unknown keys rejected, numeric domains enforced.
pub fn output_schema() -> Value {
    let mut props = Map::new();
    for field in UnifiedField::ALL {
        let schema = match field.kind() {
            FieldKind::Text => json!({ "type": ["string", "null"] }),
            FieldKind::NonNegative => json!({ "type": ["number", "null"], "minimum": 0 }),
            FieldKind::Positive => json!({ "type": ["number", "null"], "exclusiveMinimum": 0 }),
        };
        props.insert(field.as_str().to_string(), schema);
    }
    json!({
        "$schema": "http://json-schema.org/draft-07/schema#",
        "title": "UnifiedPrescription",
        "type": "object",
        "properties": props,
        "required": [],
        "additionalProperties": false,
    })
}

pub fn build_prompt(record: &RawRecord, spec: &ClinicFormatSpec) -> Result<PromptBundle> {
    if record.clinic != spec.clinic {
        return Err(Error::ClinicMismatch {
            record: record.clinic.clone(),
            spec: spec.clinic.clone(),
        });
    }
    let payload = record
        .fields()
        .iter()
        .map(|(name, value)| format!("{name}: {value}"))
        .collect::<Vec<_>>()
        .join("\n");
    Ok(PromptBundle {
        system_prompt: SYSTEM_PROMPT.to_string(),
        important_notes: IMPORTANT_NOTES.to_string(),
        format_instructions: spec.prompt_template.clone(),
        record_payload: payload,
        output_schema: output_schema(),
    })
}
