use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Field of the unified prescription schema.
///
/// Wire names are lower snake_case for every field, including `refill`,
/// `frequency` and `sig`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnifiedField {
    Reasoning,
    PatientId,
    PrescriptionDate,
    DrugName,
    DrugNameFull,
    TotalQuantity,
    DailyQuantity,
    Refill,
    Duration,
    Frequency,
    DrugStrength,
    DrugForm,
    Sig,
    PrescriberId,
}

/// Value domain of a unified field.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldKind {
    Text,
    /// Finite and `>= 0`.
    NonNegative,
    /// Finite and `> 0`.
    Positive,
}

impl UnifiedField {
    pub const ALL: [UnifiedField; 14] = [
        UnifiedField::Reasoning,
        UnifiedField::PatientId,
        UnifiedField::PrescriptionDate,
        UnifiedField::DrugName,
        UnifiedField::DrugNameFull,
        UnifiedField::TotalQuantity,
        UnifiedField::DailyQuantity,
        UnifiedField::Refill,
        UnifiedField::Duration,
        UnifiedField::Frequency,
        UnifiedField::DrugStrength,
        UnifiedField::DrugForm,
        UnifiedField::Sig,
        UnifiedField::PrescriberId,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            UnifiedField::Reasoning => "reasoning",
            UnifiedField::PatientId => "patient_id",
            UnifiedField::PrescriptionDate => "prescription_date",
            UnifiedField::DrugName => "drug_name",
            UnifiedField::DrugNameFull => "drug_name_full",
            UnifiedField::TotalQuantity => "total_quantity",
            UnifiedField::DailyQuantity => "daily_quantity",
            UnifiedField::Refill => "refill",
            UnifiedField::Duration => "duration",
            UnifiedField::Frequency => "frequency",
            UnifiedField::DrugStrength => "drug_strength",
            UnifiedField::DrugForm => "drug_form",
            UnifiedField::Sig => "sig",
            UnifiedField::PrescriberId => "prescriber_id",
        }
    }

    pub fn kind(self) -> FieldKind {
        match self {
            UnifiedField::TotalQuantity | UnifiedField::DailyQuantity | UnifiedField::Refill => {
                FieldKind::NonNegative
            }
            UnifiedField::Duration | UnifiedField::Frequency => FieldKind::Positive,
            _ => FieldKind::Text,
        }
    }

    pub fn is_numeric(self) -> bool {
        self.kind() != FieldKind::Text
    }
}

impl fmt::Display for UnifiedField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for UnifiedField {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        UnifiedField::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| format!("unknown unified field `{s}`"))
    }
}

/// One prescription in the unified schema. Every field may be absent.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnifiedPrescription {
    #[serde(default)]
    pub reasoning: Option<String>,
    #[serde(default)]
    pub patient_id: Option<String>,
    /// Free text as extracted; canonical `YYYY-MM-DD` after type normalization.
    #[serde(default)]
    pub prescription_date: Option<String>,
    #[serde(default)]
    pub drug_name: Option<String>,
    #[serde(default)]
    pub drug_name_full: Option<String>,
    #[serde(default)]
    pub total_quantity: Option<f64>,
    #[serde(default)]
    pub daily_quantity: Option<f64>,
    #[serde(default)]
    pub refill: Option<f64>,
    #[serde(default)]
    pub duration: Option<f64>,
    #[serde(default)]
    pub frequency: Option<f64>,
    #[serde(default)]
    pub drug_strength: Option<String>,
    #[serde(default)]
    pub drug_form: Option<String>,
    #[serde(default)]
    pub sig: Option<String>,
    #[serde(default)]
    pub prescriber_id: Option<String>,
}

/// A field value, borrowed from a record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FieldValue<'a> {
    Text(&'a str),
    Number(f64),
}

impl UnifiedPrescription {
    pub fn text(&self, field: UnifiedField) -> Option<&str> {
        self.text_slot(field).and_then(|s| s.as_deref())
    }

    pub fn number(&self, field: UnifiedField) -> Option<f64> {
        self.number_slot(field).and_then(|v| *v)
    }

    pub fn value(&self, field: UnifiedField) -> Option<FieldValue<'_>> {
        if field.is_numeric() {
            self.number(field).map(FieldValue::Number)
        } else {
            self.text(field).map(FieldValue::Text)
        }
    }

    /// Mutable slot for a text field; `None` for numeric fields.
    pub fn text_slot_mut(&mut self, field: UnifiedField) -> Option<&mut Option<String>> {
        Some(match field {
            UnifiedField::Reasoning => &mut self.reasoning,
            UnifiedField::PatientId => &mut self.patient_id,
            UnifiedField::PrescriptionDate => &mut self.prescription_date,
            UnifiedField::DrugName => &mut self.drug_name,
            UnifiedField::DrugNameFull => &mut self.drug_name_full,
            UnifiedField::DrugStrength => &mut self.drug_strength,
            UnifiedField::DrugForm => &mut self.drug_form,
            UnifiedField::Sig => &mut self.sig,
            UnifiedField::PrescriberId => &mut self.prescriber_id,
            _ => return None,
        })
    }

    /// Mutable slot for a numeric field; `None` for text fields.
    pub fn number_slot_mut(&mut self, field: UnifiedField) -> Option<&mut Option<f64>> {
        Some(match field {
            UnifiedField::TotalQuantity => &mut self.total_quantity,
            UnifiedField::DailyQuantity => &mut self.daily_quantity,
            UnifiedField::Refill => &mut self.refill,
            UnifiedField::Duration => &mut self.duration,
            UnifiedField::Frequency => &mut self.frequency,
            _ => return None,
        })
    }

    fn text_slot(&self, field: UnifiedField) -> Option<&Option<String>> {
        Some(match field {
            UnifiedField::Reasoning => &self.reasoning,
            UnifiedField::PatientId => &self.patient_id,
            UnifiedField::PrescriptionDate => &self.prescription_date,
            UnifiedField::DrugName => &self.drug_name,
            UnifiedField::DrugNameFull => &self.drug_name_full,
            UnifiedField::DrugStrength => &self.drug_strength,
            UnifiedField::DrugForm => &self.drug_form,
            UnifiedField::Sig => &self.sig,
            UnifiedField::PrescriberId => &self.prescriber_id,
            _ => return None,
        })
    }

    fn number_slot(&self, field: UnifiedField) -> Option<&Option<f64>> {
        Some(match field {
            UnifiedField::TotalQuantity => &self.total_quantity,
            UnifiedField::DailyQuantity => &self.daily_quantity,
            UnifiedField::Refill => &self.refill,
            UnifiedField::Duration => &self.duration,
            UnifiedField::Frequency => &self.frequency,
            _ => return None,
        })
    }

    /// Fields whose values differ between `self` and `other`, bitwise for numbers.
    pub fn changed_fields(&self, other: &UnifiedPrescription) -> Vec<UnifiedField> {
        UnifiedField::ALL
            .into_iter()
            .filter(|&f| {
                if f.is_numeric() {
                    self.number(f).map(f64::to_bits) != other.number(f).map(f64::to_bits)
                } else {
                    self.text(f) != other.text(f)
                }
            })
            .collect()
    }

    /// True when every numeric field present respects its domain.
    pub fn numeric_domains_hold(&self) -> bool {
        UnifiedField::ALL
            .into_iter()
            .filter_map(|f| self.number(f).map(|v| (f.kind(), v)))
            .all(|(kind, v)| match kind {
                FieldKind::NonNegative => v.is_finite() && v >= 0.0,
                FieldKind::Positive => v.is_finite() && v > 0.0,
                FieldKind::Text => true,
            })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("unified prescription is always serializable")
    }
}
