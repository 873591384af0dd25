use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{ClinicFormatSpec, ClinicId, UnifiedField};
use crate::error::{Error, Result};

/// One prescription as exported by a clinic: ordered `name -> value` pairs.
///
/// Values are kept byte-for-byte as ingested.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawRecord {
    pub clinic: ClinicId,
    fields: Vec<(String, String)>,
}

impl RawRecord {
    pub fn new(clinic: ClinicId, fields: Vec<(String, String)>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (name, _) in &fields {
            if !seen.insert(name.trim()) {
                return Err(Error::DuplicateField(name.clone()));
            }
        }
        Ok(RawRecord { clinic, fields })
    }

    pub fn empty(clinic: ClinicId) -> Self {
        RawRecord {
            clinic,
            fields: Vec::new(),
        }
    }

    pub fn fields(&self) -> &[(String, String)] {
        &self.fields
    }

    /// Value of `name`, matched case-sensitively after trimming both sides.
    pub fn get(&self, name: &str) -> Option<&str> {
        let name = name.trim();
        self.fields
            .iter()
            .find(|(n, _)| n.trim() == name)
            .map(|(_, v)| v.as_str())
    }

    pub fn set(&mut self, name: &str, value: impl Into<String>) {
        let value = value.into();
        match self.fields.iter_mut().find(|(n, _)| n.trim() == name.trim()) {
            Some(slot) => slot.1 = value,
            None => self.fields.push((name.to_string(), value)),
        }
    }

    pub fn remove(&mut self, name: &str) -> Option<String> {
        let idx = self.fields.iter().position(|(n, _)| n.trim() == name.trim())?;
        Some(self.fields.remove(idx).1)
    }
}

/// True for values that stand for "no data" in clinic exports.
pub fn is_sentinel(value: &str) -> bool {
    let v = value.trim();
    v.is_empty()
        || ["NULL", "NA", "N/A", "NONE"]
            .iter()
            .any(|s| v.eq_ignore_ascii_case(s))
}

/// Raw strings staged per unified field before any interpretation.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Staging {
    /// Values from the primary mappings.
    pub values: BTreeMap<UnifiedField, String>,
    /// First non-sentinel fallback value per field.
    pub fallback: BTreeMap<UnifiedField, String>,
    /// Source fields the format does not map, in record order.
    pub provenance: Vec<(String, String)>,
}

impl Staging {
    pub fn is_empty(&self) -> bool {
        self.values.is_empty() && self.fallback.is_empty()
    }

    pub fn get(&self, field: UnifiedField) -> Option<&str> {
        self.values.get(&field).map(String::as_str)
    }
}

/// Copies mapped source values into a staging structure, dropping sentinels.
pub fn map_raw_fields(record: &RawRecord, spec: &ClinicFormatSpec) -> Result<Staging> {
    if record.clinic != spec.clinic {
        return Err(Error::ClinicMismatch {
            record: record.clinic.clone(),
            spec: spec.clinic.clone(),
        });
    }
    let mut staging = Staging::default();
    for m in &spec.field_map {
        if let Some(v) = record.get(&m.source).filter(|v| !is_sentinel(v)) {
            staging.values.insert(m.target, v.to_string());
        }
    }
    for m in &spec.fallback {
        if staging.fallback.contains_key(&m.target) {
            continue;
        }
        if let Some(v) = record.get(&m.source).filter(|v| !is_sentinel(v)) {
            staging.fallback.insert(m.target, v.to_string());
        }
    }
    let referenced: HashSet<&str> = spec
        .field_map
        .iter()
        .chain(&spec.fallback)
        .map(|m| m.source.trim())
        .collect();
    staging.provenance = record
        .fields()
        .iter()
        .filter(|(n, _)| !referenced.contains(n.trim()))
        .cloned()
        .collect();
    Ok(staging)
}
