//! Unified prescription schema, clinic export formats, and raw records.

mod format;
mod prescription;
mod raw;

pub use format::{load_format_spec, ClinicFormatSpec, ClinicId, FieldMapping, FormatRegistry};
pub use prescription::{FieldKind, FieldValue, UnifiedField, UnifiedPrescription};
pub use raw::{is_sentinel, map_raw_fields, RawRecord, Staging};
