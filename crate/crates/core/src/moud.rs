//! MOUD days per prescription and per patient.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::schema::UnifiedPrescription;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MoudPath {
    ExplicitDuration,
    QuantityRatio,
    Uncomputable,
}

/// Inputs the computation actually read.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MoudInputs {
    pub refill: f64,
    pub duration: Option<f64>,
    pub total_quantity: Option<f64>,
    pub daily_quantity: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoudResult {
    pub id: usize,
    pub patient_id: Option<String>,
    pub moud_days: Option<f64>,
    pub path: MoudPath,
    pub inputs_used: MoudInputs,
}

/// `(refill + 1) * duration` when a duration is known, otherwise
/// `(refill + 1) * total / daily`. An absent refill counts as zero.
pub fn compute_moud_days(id: usize, r: &UnifiedPrescription) -> MoudResult {
    let refill = r.refill.unwrap_or(0.0);
    let fills = refill + 1.0;
    let mut inputs = MoudInputs {
        refill,
        ..Default::default()
    };
    let (days, path) = match (r.duration, r.total_quantity, r.daily_quantity) {
        (Some(d), _, _) if d > 0.0 => {
            inputs.duration = Some(d);
            (Some(fills * d), MoudPath::ExplicitDuration)
        }
        (_, Some(t), Some(q)) if q > 0.0 => {
            inputs.total_quantity = Some(t);
            inputs.daily_quantity = Some(q);
            (Some(fills * (t / q)), MoudPath::QuantityRatio)
        }
        _ => (None, MoudPath::Uncomputable),
    };
    let days = days.filter(|d| d.is_finite() && *d >= 0.0);
    let path = if days.is_some() { path } else { MoudPath::Uncomputable };
    MoudResult {
        id,
        patient_id: r.patient_id.clone(),
        moud_days: days,
        path,
        inputs_used: inputs,
    }
}

/// Days rendered with at most two decimals and no trailing zeros.
pub fn format_days(days: f64) -> String {
    let s = format!("{days:.2}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.to_string() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientCoverage {
    pub patient_id: String,
    pub total_moud_days: f64,
    pub record_count: usize,
    pub uncomputable_count: usize,
}

/// Sums computable days per patient id. Records without a patient id are
/// skipped.
pub fn aggregate_patient(results: &[MoudResult]) -> Vec<PatientCoverage> {
    let mut by_patient: BTreeMap<&str, PatientCoverage> = BTreeMap::new();
    for r in results {
        let Some(pid) = r.patient_id.as_deref() else { continue };
        let entry = by_patient.entry(pid).or_insert_with(|| PatientCoverage {
            patient_id: pid.to_string(),
            total_moud_days: 0.0,
            record_count: 0,
            uncomputable_count: 0,
        });
        entry.record_count += 1;
        match r.moud_days {
            Some(d) => entry.total_moud_days += d,
            None => entry.uncomputable_count += 1,
        }
    }
    by_patient.into_values().collect()
}
