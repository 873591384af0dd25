//! Turning raw clinic records into unified prescriptions, either with the
//! deterministic rule backend or a remote generative endpoint.

mod prompt;
mod remote;
mod rules;
mod validate;

use serde::{Deserialize, Serialize};

use crate::schema::{ClinicId, UnifiedPrescription};

pub use prompt::{build_prompt, output_schema, PromptBundle, IMPORTANT_NOTES, SYSTEM_PROMPT};
pub use remote::{extract_remote, BackendConfig, RemoteExtractor, API_KEY_ENV, ENDPOINT_ENV, MODEL_ENV, UNREACHABLE};
pub use rules::{coerce_number, extract_rules};
pub use validate::{validate_against_schema, validate_value, SchemaViolationReport, Violation};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Rules,
    Remote,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    Transport,
    SchemaInvalid,
    EmptyOutput,
}

/// Result of extracting one raw record. Exactly one of `record` and
/// `failure` is set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractionOutcome {
    pub clinic: ClinicId,
    /// Zero-based position of the record in its clinic's input.
    pub row: usize,
    pub backend: Backend,
    pub record: Option<UnifiedPrescription>,
    pub failure: Option<FailureKind>,
    /// Unit text that accompanied the daily quantity, when known.
    #[serde(default)]
    pub daily_unit: Option<String>,
    #[serde(default)]
    pub error: Option<String>,
    #[serde(default)]
    pub raw_response: Option<String>,
}

impl ExtractionOutcome {
    pub fn success(clinic: ClinicId, row: usize, backend: Backend, record: UnifiedPrescription) -> Self {
        ExtractionOutcome {
            clinic,
            row,
            backend,
            record: Some(record),
            failure: None,
            daily_unit: None,
            error: None,
            raw_response: None,
        }
    }

    pub fn failed(
        clinic: ClinicId,
        row: usize,
        backend: Backend,
        kind: FailureKind,
        error: impl Into<String>,
    ) -> Self {
        ExtractionOutcome {
            clinic,
            row,
            backend,
            record: None,
            failure: Some(kind),
            daily_unit: None,
            error: Some(error.into()),
            raw_response: None,
        }
    }

    pub fn is_success(&self) -> bool {
        self.record.is_some()
    }

    /// True when exactly one of record and failure is present.
    pub fn is_well_formed(&self) -> bool {
        self.record.is_some() != self.failure.is_some()
    }
}
