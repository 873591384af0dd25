//! Cleaning of extracted records: type normalization, unit plausibility,
//! injectable overrides, imputation from per-drug norms, cross-field checks
//! and deduplication. Every change to a record is paired with a flag.

use std::collections::{BTreeMap, HashMap};
use std::sync::LazyLock;

use chrono::NaiveDate;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::names::normalize_drug_name;
use crate::schema::{is_sentinel, ClinicId, UnifiedField, UnifiedPrescription};
use crate::sig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagRule {
    TotalLtDaily,
    NonsensicalValue,
    NullField,
    Duplicate,
    UnitImplausible,
    ImputedDaily,
    ImputedTotal,
    InjectableOverride,
    TypeNormalized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationFlag {
    /// Id of the record the flag refers to.
    pub record: usize,
    pub rule: FlagRule,
    pub field: Option<UnifiedField>,
    /// Whether the record was changed.
    pub mutated: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostprocessConfig {
    /// Largest believable daily quantity in dispensing units.
    pub plausibility_cap: f64,
    /// Two-digit years below this are 20xx, otherwise 19xx.
    pub year_pivot: u32,
    /// Durations above this many days are treated as nonsensical.
    pub max_duration_days: f64,
    /// An explicit duration this close to the injection interval is kept.
    pub injectable_agreement_days: f64,
    pub impute: bool,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig {
            plausibility_cap: 24.0,
            year_pivot: 50,
            max_duration_days: 400.0,
            injectable_agreement_days: 2.0,
            impute: true,
        }
    }
}

/// An extracted record moving through cleaning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CleanRecord {
    pub id: usize,
    pub clinic: ClinicId,
    pub row: usize,
    pub record: UnifiedPrescription,
    #[serde(default)]
    pub daily_unit: Option<String>,
}

/// Collects flags for one record and applies flagged mutations.
#[derive(Debug)]
pub struct Audit {
    pub id: usize,
    pub flags: Vec<ValidationFlag>,
}

impl Audit {
    pub fn new(id: usize) -> Self {
        Audit { id, flags: Vec::new() }
    }

    fn note(&mut self, rule: FlagRule, field: Option<UnifiedField>, mutated: bool, detail: String) {
        self.flags.push(ValidationFlag {
            record: self.id,
            rule,
            field,
            mutated,
            detail,
        });
    }

    fn set_number(
        &mut self,
        r: &mut UnifiedPrescription,
        field: UnifiedField,
        value: Option<f64>,
        rule: FlagRule,
        detail: String,
    ) {
        let slot = r.number_slot_mut(field).expect("numeric field");
        let changed = slot.map(f64::to_bits) != value.map(f64::to_bits);
        *slot = value;
        self.note(rule, Some(field), changed, detail);
    }

    fn set_text(
        &mut self,
        r: &mut UnifiedPrescription,
        field: UnifiedField,
        value: Option<String>,
        rule: FlagRule,
        detail: String,
    ) {
        let slot = r.text_slot_mut(field).expect("text field");
        let changed = *slot != value;
        *slot = value;
        self.note(rule, Some(field), changed, detail);
    }

    pub fn touched(&self, rule: FlagRule) -> bool {
        self.flags.iter().any(|f| f.rule == rule)
    }
}

static ISO_DATE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^(\d{4})-(\d{1,2})-(\d{1,2})(?:[T ].*)?$").expect("static regex")
});
static US_DATE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^(\d{1,2})[/-](\d{1,2})[/-](\d{4}|\d{2})(?:\s+.*)?$").expect("static regex")
});

/// Parses `YYYY-MM-DD`, `M/D/YY` and `M/D/YYYY`, each optionally followed by
/// a time of day.
pub fn parse_date(text: &str, year_pivot: u32) -> Option<NaiveDate> {
    let t = text.trim();
    let (y, m, d) = if let Some(c) = ISO_DATE.captures(t) {
        (c[1].parse().ok()?, c[2].parse().ok()?, c[3].parse().ok()?)
    } else {
        let c = US_DATE.captures(t)?;
        let mut y: i32 = c[3].parse().ok()?;
        if c[3].len() == 2 {
            y += if (y as u32) < year_pivot { 2000 } else { 1900 };
        }
        (y, c[1].parse().ok()?, c[2].parse().ok()?)
    };
    NaiveDate::from_ymd_opt(y, m, d)
}

/// Canonical date string, or `None` when unparseable.
pub fn canonical_date(text: &str, year_pivot: u32) -> Option<String> {
    parse_date(text, year_pivot).map(|d| d.format("%Y-%m-%d").to_string())
}

/// Drops sentinel text and non-finite numbers and rewrites dates as ISO.
pub fn normalize_types(r: &mut UnifiedPrescription, cfg: &PostprocessConfig, audit: &mut Audit) {
    for field in UnifiedField::ALL {
        if field.is_numeric() {
            if r.number(field).is_some_and(|v| !v.is_finite()) {
                audit.set_number(r, field, None, FlagRule::NullField, "non-finite value".into());
            }
            continue;
        }
        let Some(v) = r.text(field) else { continue };
        if is_sentinel(v) {
            let detail = format!("sentinel value {v:?}");
            audit.set_text(r, field, None, FlagRule::NullField, detail);
        }
    }
    if let Some(raw) = r.prescription_date.clone() {
        match canonical_date(&raw, cfg.year_pivot) {
            Some(iso) if iso != raw => {
                let detail = format!("date {raw:?} rewritten as {iso}");
                audit.set_text(r, UnifiedField::PrescriptionDate, Some(iso), FlagRule::TypeNormalized, detail);
            }
            Some(_) => {}
            None => {
                let detail = format!("unparseable date {raw:?}");
                audit.set_text(r, UnifiedField::PrescriptionDate, None, FlagRule::NullField, detail);
            }
        }
    }
}

static MASS_UNIT: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)^(?:g|gm|grams?|mg|mcg|ug|µg|kg|milligrams?|micrograms?)\b").expect("static regex")
});

/// Clears daily quantities expressed in mass units or above the cap.
pub fn check_units(
    r: &mut UnifiedPrescription,
    daily_unit: &mut Option<String>,
    cfg: &PostprocessConfig,
    audit: &mut Audit,
) {
    let Some(daily) = r.daily_quantity else { return };
    let mass = daily_unit.as_deref().is_some_and(|u| MASS_UNIT.is_match(u.trim()));
    let detail = if mass {
        format!("daily quantity {daily} given in mass unit {:?}", daily_unit.as_deref().unwrap_or(""))
    } else if daily > cfg.plausibility_cap {
        format!("daily quantity {daily} exceeds cap {}", cfg.plausibility_cap)
    } else {
        return;
    };
    audit.set_number(r, UnifiedField::DailyQuantity, None, FlagRule::UnitImplausible, detail);
    *daily_unit = None;
}

/// For injectables, duration becomes the administration interval and the
/// daily quantity is cleared. Returns whether the override applied.
pub fn apply_injectable_override(
    r: &mut UnifiedPrescription,
    daily_unit: &mut Option<String>,
    cfg: &PostprocessConfig,
    audit: &mut Audit,
) -> bool {
    let drug = r.drug_name_full.clone().or_else(|| r.drug_name.clone());
    let (is_injectable, interval) = match r.sig.as_deref() {
        Some(s) => {
            let p = sig::parse_sig(s, drug.as_deref());
            (p.is_injectable, p.schedule_interval_days)
        }
        None => sig::detect_injectable("", drug.as_deref()),
    };
    let (true, Some(interval)) = (is_injectable, interval) else {
        return false;
    };
    match r.duration {
        Some(d) if (d - interval).abs() <= cfg.injectable_agreement_days => audit.note(
            FlagRule::InjectableOverride,
            Some(UnifiedField::Duration),
            false,
            format!("explicit duration {d} agrees with interval {interval}"),
        ),
        _ => audit.set_number(
            r,
            UnifiedField::Duration,
            Some(interval),
            FlagRule::InjectableOverride,
            format!("injectable administered every {interval} days"),
        ),
    }
    if r.daily_quantity.is_some() {
        audit.set_number(
            r,
            UnifiedField::DailyQuantity,
            None,
            FlagRule::InjectableOverride,
            "daily quantity is not meaningful for injectables".into(),
        );
        *daily_unit = None;
    }
    true
}

/// Clears negative, zero-daily, overlong-duration and total < daily values.
pub fn check_cross_field(r: &mut UnifiedPrescription, daily_unit: &mut Option<String>, cfg: &PostprocessConfig, audit: &mut Audit) {
    for field in UnifiedField::ALL.into_iter().filter(|f| f.is_numeric()) {
        let Some(v) = r.number(field) else { continue };
        let positive = matches!(field, UnifiedField::Duration | UnifiedField::Frequency);
        if v < 0.0 || (positive && v == 0.0) {
            audit.set_number(r, field, None, FlagRule::NonsensicalValue, format!("{field} = {v} is out of range"));
        }
    }
    if r.daily_quantity == Some(0.0) {
        let detail = "zero daily quantity".to_string();
        audit.set_number(r, UnifiedField::DailyQuantity, None, FlagRule::NonsensicalValue, detail);
    }
    if let Some(d) = r.duration.filter(|d| *d > cfg.max_duration_days) {
        let detail = format!("duration {d} exceeds {} days", cfg.max_duration_days);
        audit.set_number(r, UnifiedField::Duration, None, FlagRule::NonsensicalValue, detail);
    }
    if let (Some(t), Some(d)) = (r.total_quantity, r.daily_quantity) {
        if t < d {
            let detail = format!("total {t} is below daily {d}");
            audit.set_number(r, UnifiedField::DailyQuantity, None, FlagRule::TotalLtDaily, detail);
        }
    }
    if r.daily_quantity.is_none() {
        *daily_unit = None;
    }
}

/// Typical values per normalized drug name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DrugNorm {
    pub typical_daily: Option<f64>,
    pub median_total: Option<f64>,
    pub daily_count: usize,
    pub total_count: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DrugNormTable {
    pub entries: BTreeMap<String, DrugNorm>,
}

impl DrugNormTable {
    pub fn get(&self, drug_name: &str) -> Option<&DrugNorm> {
        self.entries.get(&normalize_drug_name(drug_name))
    }
}

/// Observations gathered per drug; shards combine with [`merge`](Self::merge).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DrugNormAccumulator {
    obs: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

fn drug_key(r: &UnifiedPrescription) -> Option<String> {
    r.drug_name
        .as_deref()
        .or(r.drug_name_full.as_deref())
        .map(normalize_drug_name)
        .filter(|k| !k.is_empty())
}

fn lower_median(values: &[f64]) -> Option<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.get(v.len().saturating_sub(1) / 2).copied()
}

impl DrugNormAccumulator {
    pub fn add(&mut self, r: &UnifiedPrescription) {
        let Some(key) = drug_key(r) else { return };
        if r.daily_quantity.is_none_or(|d| d <= 0.0) && r.total_quantity.is_none() {
            return;
        }
        let entry = self.obs.entry(key).or_default();
        entry.0.extend(r.daily_quantity.filter(|d| *d > 0.0));
        entry.1.extend(r.total_quantity);
    }

    pub fn merge(mut self, other: DrugNormAccumulator) -> Self {
        for (k, (d, t)) in other.obs {
            let e = self.obs.entry(k).or_default();
            e.0.extend(d);
            e.1.extend(t);
        }
        self
    }

    pub fn finish(&self) -> DrugNormTable {
        let entries = self
            .obs
            .iter()
            .map(|(k, (d, t))| {
                (
                    k.clone(),
                    DrugNorm {
                        typical_daily: lower_median(d),
                        median_total: lower_median(t),
                        daily_count: d.len(),
                        total_count: t.len(),
                    },
                )
            })
            .collect();
        DrugNormTable { entries }
    }
}

pub fn build_drug_norms<'a>(records: impl IntoIterator<Item = &'a UnifiedPrescription>) -> DrugNormTable {
    let mut acc = DrugNormAccumulator::default();
    for r in records {
        acc.add(r);
    }
    acc.finish()
}

/// Fills absent daily and total quantities from the drug's norms, never
/// producing a total below the daily quantity.
pub fn impute_missing(r: &mut UnifiedPrescription, norms: &DrugNormTable, skip_daily: bool, audit: &mut Audit) {
    let norm = drug_key(r).and_then(|k| norms.entries.get(&k));
    if r.daily_quantity.is_none() && !skip_daily {
        match norm.and_then(|n| n.typical_daily) {
            Some(d) if r.total_quantity.is_none_or(|t| t >= d) => audit.set_number(
                r,
                UnifiedField::DailyQuantity,
                Some(d),
                FlagRule::ImputedDaily,
                format!("typical daily quantity {d} for this drug"),
            ),
            _ => audit.note(
                FlagRule::NullField,
                Some(UnifiedField::DailyQuantity),
                false,
                "daily quantity missing and not imputable".into(),
            ),
        }
    }
    if r.total_quantity.is_none() {
        match norm.and_then(|n| n.median_total) {
            Some(t) if r.daily_quantity.is_none_or(|d| t >= d) => audit.set_number(
                r,
                UnifiedField::TotalQuantity,
                Some(t),
                FlagRule::ImputedTotal,
                format!("median total quantity {t} for this drug"),
            ),
            _ => audit.note(
                FlagRule::NullField,
                Some(UnifiedField::TotalQuantity),
                false,
                "total quantity missing and not imputable".into(),
            ),
        }
    }
}

type DedupeKey = (ClinicId, String, String, String, Option<u64>, Option<u64>, Option<u64>);

fn dedupe_key(c: &CleanRecord) -> Option<DedupeKey> {
    let r = &c.record;
    Some((
        c.clinic.clone(),
        r.patient_id.as_deref()?.trim().to_lowercase(),
        r.prescription_date.clone()?,
        drug_key(r).unwrap_or_default(),
        r.total_quantity.map(f64::to_bits),
        r.daily_quantity.map(f64::to_bits),
        r.refill.map(f64::to_bits),
    ))
}

/// Keeps the first record of each duplicate group. Records without a patient
/// id or date are never merged.
pub fn dedupe(records: Vec<CleanRecord>) -> (Vec<CleanRecord>, Vec<ValidationFlag>) {
    let mut seen: HashMap<DedupeKey, usize> = HashMap::new();
    let mut kept = Vec::with_capacity(records.len());
    let mut flags = Vec::new();
    for c in records {
        if let Some(key) = dedupe_key(&c) {
            if let Some(&first) = seen.get(&key) {
                flags.push(ValidationFlag {
                    record: c.id,
                    rule: FlagRule::Duplicate,
                    field: None,
                    mutated: true,
                    detail: format!("duplicate of record {first}; dropped"),
                });
                continue;
            }
            seen.insert(key, c.id);
        }
        kept.push(c);
    }
    (kept, flags)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PostprocessOutput {
    pub records: Vec<CleanRecord>,
    pub flags: Vec<ValidationFlag>,
    pub norms: DrugNormTable,
}

/// Runs every cleaning stage over a corpus. Norms are computed from the
/// corpus unless `norms` is given.
pub fn postprocess(records: Vec<CleanRecord>, cfg: &PostprocessConfig, norms: Option<&DrugNormTable>) -> PostprocessOutput {
    let staged: Vec<(CleanRecord, Audit, bool)> = records
        .into_par_iter()
        .map(|mut c| {
            let mut audit = Audit::new(c.id);
            normalize_types(&mut c.record, cfg, &mut audit);
            check_units(&mut c.record, &mut c.daily_unit, cfg, &mut audit);
            let injectable = apply_injectable_override(&mut c.record, &mut c.daily_unit, cfg, &mut audit);
            check_cross_field(&mut c.record, &mut c.daily_unit, cfg, &mut audit);
            (c, audit, injectable)
        })
        .collect();

    let mut flags: Vec<ValidationFlag> = Vec::new();
    let mut records = Vec::with_capacity(staged.len());
    let mut injectable = HashMap::new();
    for (c, audit, inj) in staged {
        flags.extend(audit.flags);
        injectable.insert(c.id, inj);
        records.push(c);
    }
    let (records, dup_flags) = dedupe(records);
    flags.extend(dup_flags);

    let norms = match norms {
        Some(n) => n.clone(),
        None => build_drug_norms(records.iter().map(|c| &c.record)),
    };

    let mut finished: Vec<(CleanRecord, Audit)> = records
        .into_par_iter()
        .map(|mut c| {
            let mut audit = Audit::new(c.id);
            if cfg.impute {
                let skip_daily = injectable.get(&c.id).copied().unwrap_or(false);
                impute_missing(&mut c.record, &norms, skip_daily, &mut audit);
                if audit.touched(FlagRule::ImputedDaily) {
                    c.daily_unit = None;
                }
            }
            check_cross_field(&mut c.record, &mut c.daily_unit, cfg, &mut audit);
            (c, audit)
        })
        .collect();

    let mut records = Vec::with_capacity(finished.len());
    for (c, audit) in finished.drain(..) {
        flags.extend(audit.flags);
        records.push(c);
    }
    let (records, dup_flags) = dedupe(records);
    flags.extend(dup_flags);
    flags.sort_by_key(|f| f.record);

    PostprocessOutput { records, flags, norms }
}
