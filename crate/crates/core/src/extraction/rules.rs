use std::sync::LazyLock;

use regex::Regex;

use super::{Backend, ExtractionOutcome};
use crate::error::Result;
use crate::names::strip_strength;
use crate::schema::{map_raw_fields, ClinicFormatSpec, RawRecord, UnifiedField, UnifiedPrescription};
use crate::sig::{self, format_decimal, SigParse};

static LEADING_NUMBER: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^\s*(\d+(?:\.\d+)?|\.\d+)\s*(.*?)\s*$").expect("static regex")
});

/// Reads a leading non-negative number after fraction and number-word
/// normalization. Returns the number and any trailing unit text.
pub fn coerce_number(raw: &str) -> Option<(f64, Option<String>)> {
    let text = sig::normalize_fractions(&sig::words_to_numerals(raw));
    let caps = LEADING_NUMBER.captures(&text)?;
    let n: f64 = caps[1].parse().ok()?;
    let unit = caps
        .get(2)
        .map(|m| m.as_str().to_lowercase())
        .filter(|u| !u.is_empty());
    n.is_finite().then_some((n, unit))
}

fn in_domain(field: UnifiedField, n: f64) -> bool {
    match field {
        UnifiedField::Duration | UnifiedField::Frequency => n > 0.0,
        _ => n >= 0.0,
    }
}

/// Deterministic extraction: column mapping, numeric coercion and SIG
/// parsing. Fails only on a clinic mismatch.
pub fn extract_rules(record: &RawRecord, spec: &ClinicFormatSpec, row: usize) -> Result<ExtractionOutcome> {
    let staging = map_raw_fields(record, spec)?;
    let mut out = UnifiedPrescription::default();

    for field in UnifiedField::ALL {
        if field.is_numeric() || field == UnifiedField::Reasoning {
            continue;
        }
        let Some(v) = staging.get(field).or_else(|| staging.fallback.get(&field).map(String::as_str)) else {
            continue;
        };
        let v = v.trim();
        let v = if field == UnifiedField::DrugName {
            strip_strength(v)
        } else {
            v.to_string()
        };
        if !v.is_empty() {
            *out.text_slot_mut(field).expect("text field") = Some(v);
        }
    }

    let drug = out.drug_name_full.clone().or_else(|| out.drug_name.clone());
    let parsed = out
        .sig
        .as_deref()
        .map(|s| sig::parse_sig(s, drug.as_deref()))
        .unwrap_or_else(|| {
            let (inj, interval) = sig::detect_injectable("", drug.as_deref());
            SigParse {
                is_injectable: inj,
                schedule_interval_days: interval,
                ..Default::default()
            }
        });

    let mut daily_unit = None;
    for &field in &spec.numeric_fields {
        let direct = staging
            .get(field)
            .filter(|_| !spec.derived_from_sig(field))
            .and_then(coerce_number)
            .filter(|(n, _)| in_domain(field, *n));
        let primary = direct.is_some();
        let coerced = direct.or_else(|| {
            staging
                .fallback
                .get(&field)
                .and_then(|v| coerce_number(v))
                .filter(|(n, _)| in_domain(field, *n))
        });
        let Some((mut n, unit)) = coerced else { continue };
        if !primary && sig_value(&parsed, field).is_some() {
            continue;
        }
        if field == UnifiedField::DailyQuantity {
            if spec.daily_is_per_dose {
                match parsed.frequency_per_day {
                    Some(f) if f >= 1.0 => n *= f,
                    Some(_) => {}
                    None => continue,
                }
            }
            daily_unit = unit;
        }
        *out.number_slot_mut(field).expect("numeric field") = Some(n);
    }

    if out.daily_quantity.is_none() {
        if let Some(d) = parsed.daily_quantity {
            out.daily_quantity = Some(d);
            daily_unit = parsed.dose_unit.clone();
        }
    }
    if out.duration.is_none() {
        out.duration = parsed.duration_days;
    }
    if out.frequency.is_none() {
        out.frequency = parsed.frequency_per_day;
    }
    out.reasoning = Some(reasoning(&parsed, &out));

    let mut outcome = ExtractionOutcome::success(record.clinic.clone(), row, Backend::Rules, out);
    outcome.daily_unit = daily_unit;
    Ok(outcome)
}

fn sig_value(parsed: &SigParse, field: UnifiedField) -> Option<f64> {
    match field {
        UnifiedField::DailyQuantity => parsed.daily_quantity,
        UnifiedField::Duration => parsed.duration_days,
        UnifiedField::Frequency => parsed.frequency_per_day,
        _ => None,
    }
}

fn reasoning(parsed: &SigParse, out: &UnifiedPrescription) -> String {
    let mut parts = vec!["rule-based extraction".to_string()];
    if !parsed.notes.is_empty() {
        let rules: Vec<String> = parsed
            .notes
            .iter()
            .map(|r| serde_json::to_value(r).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default())
            .collect();
        parts.push(format!("sig rules: {}", rules.join(", ")));
    }
    if parsed.is_injectable {
        let interval = parsed
            .schedule_interval_days
            .map(format_decimal)
            .unwrap_or_else(|| "unknown".into());
        parts.push(format!("injectable, administered every {interval} days"));
    }
    if let Some(d) = out.daily_quantity {
        parts.push(format!("daily quantity {}", format_decimal(d)));
    }
    parts.join("; ")
}
