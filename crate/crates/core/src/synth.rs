//! Seeded generator of raw clinic exports with exact ground truth and a
//! manifest of planted corruptions.
//!
//! Every record is built from a SIG template with known per-day quantity,
//! duration, total and refills. Corruptions are chosen in the order key,
//! value, missing, mass-unit, duplicate, styling; each rate applies to the
//! records still clean at its step, and the planted count is
//! `round(rate * eligible)`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate};
use rand::seq::{index, IndexedRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::{write_ground_truth, GroundTruthRecord};
use crate::names::{normalize_drug_name, strip_strength};
use crate::schema::{ClinicId, RawRecord};
use crate::sig::format_decimal;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    DailyOnce,
    TwiceDaily,
    ThriceDaily,
    EveryNHours,
    TimeOfDay,
    FractionDose,
    PrnCapped,
    ExplicitDuration,
    XNotation,
    WeeklyInjectable,
    FourWeekInjectable,
    VivitrolMonthly,
}

impl TemplateId {
    pub const ALL: [TemplateId; 12] = [
        TemplateId::DailyOnce,
        TemplateId::TwiceDaily,
        TemplateId::ThriceDaily,
        TemplateId::EveryNHours,
        TemplateId::TimeOfDay,
        TemplateId::FractionDose,
        TemplateId::PrnCapped,
        TemplateId::ExplicitDuration,
        TemplateId::XNotation,
        TemplateId::WeeklyInjectable,
        TemplateId::FourWeekInjectable,
        TemplateId::VivitrolMonthly,
    ];

    pub fn is_injectable(self) -> bool {
        matches!(
            self,
            TemplateId::WeeklyInjectable | TemplateId::FourWeekInjectable | TemplateId::VivitrolMonthly
        )
    }

    /// Templates expressible through a frequency code plus a per-dose amount.
    fn frequency_code_only(self) -> bool {
        matches!(
            self,
            TemplateId::DailyOnce
                | TemplateId::TwiceDaily
                | TemplateId::ThriceDaily
                | TemplateId::EveryNHours
                | TemplateId::VivitrolMonthly
        )
    }

    fn weight(self) -> u32 {
        if self.is_injectable() {
            1
        } else {
            3
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    Key,
    Value,
    Missing,
    MassUnit,
    Duplicate,
    Styling,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionRates {
    /// Patient id altered so the record cannot be matched.
    pub key: f64,
    /// Total quantity increased by one.
    pub value: f64,
    /// Refill column blanked.
    pub missing: f64,
    /// Per-dose amount replaced by a mass such as `250 g`.
    pub mass_unit: f64,
    /// Row emitted twice.
    pub duplicate: f64,
    /// Numbers in the SIG written as words or fractions.
    pub styling: f64,
}

impl CorruptionRates {
    fn get(&self, kind: CorruptionKind) -> f64 {
        match kind {
            CorruptionKind::Key => self.key,
            CorruptionKind::Value => self.value,
            CorruptionKind::Missing => self.missing,
            CorruptionKind::MassUnit => self.mass_unit,
            CorruptionKind::Duplicate => self.duplicate,
            CorruptionKind::Styling => self.styling,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSpec {
    pub seed: u64,
    pub records_per_clinic: usize,
    pub rates: CorruptionRates,
    /// Template pool; empty means all templates.
    pub templates: Vec<TemplateId>,
    /// Clinics to emit; empty means all built-in formats.
    pub clinics: Vec<ClinicId>,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            seed: 2024,
            records_per_clinic: 100,
            rates: CorruptionRates::default(),
            templates: Vec::new(),
            clinics: Vec::new(),
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        if self.records_per_clinic == 0 {
            return Err(Error::GenSpec("records_per_clinic must be positive".into()));
        }
        for kind in CORRUPTION_ORDER {
            let r = self.rates.get(kind);
            if !(r.is_finite() && (0.0..=1.0).contains(&r)) {
                return Err(Error::GenSpec(format!("rate for {kind:?} must lie in [0, 1], got {r}")));
            }
        }
        for c in &self.clinics {
            if !ClinicId::BUILTIN.contains(&c.as_str()) {
                return Err(Error::GenSpec(format!("no generator layout for clinic `{c}`")));
            }
        }
        Ok(())
    }

    fn clinic_list(&self) -> Vec<ClinicId> {
        if self.clinics.is_empty() {
            ClinicId::builtin()
        } else {
            let set: BTreeSet<ClinicId> = self.clinics.iter().cloned().collect();
            set.into_iter().collect()
        }
    }

    fn template_pool(&self) -> Vec<TemplateId> {
        if self.templates.is_empty() {
            TemplateId::ALL.to_vec()
        } else {
            let set: BTreeSet<TemplateId> = self.templates.iter().copied().collect();
            set.into_iter().collect()
        }
    }
}

const CORRUPTION_ORDER: [CorruptionKind; 6] = [
    CorruptionKind::Key,
    CorruptionKind::Value,
    CorruptionKind::Missing,
    CorruptionKind::MassUnit,
    CorruptionKind::Duplicate,
    CorruptionKind::Styling,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpectedEffect {
    /// A perfect extractor cannot match the record.
    Uncovered,
    /// Matched, but at least one compared field disagrees.
    Mismatch,
    /// No effect on the metrics.
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Index into the ground-truth file.
    pub record: usize,
    pub clinic: ClinicId,
    /// Row of the record in its clinic's raw file.
    pub row: usize,
    pub kind: CorruptionKind,
    pub expected: ExpectedEffect,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpectedMetrics {
    pub clinic: String,
    pub ground_truth: usize,
    pub covered: usize,
    pub exact: usize,
    pub coverage_pct: f64,
    pub accuracy_pct: f64,
}

impl ExpectedMetrics {
    fn new(clinic: String, ground_truth: usize, covered: usize, exact: usize) -> Self {
        let pct = |n: usize, d: usize| if d == 0 { 0.0 } else { 100.0 * n as f64 / d as f64 };
        ExpectedMetrics {
            clinic,
            ground_truth,
            covered,
            exact,
            coverage_pct: pct(covered, ground_truth),
            accuracy_pct: pct(exact, covered),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub records_per_clinic: usize,
    pub ground_truth_records: usize,
    pub raw_records: usize,
    pub corruptions: Vec<ManifestEntry>,
    /// Metrics a perfect extractor achieves, per clinic.
    pub expected: Vec<ExpectedMetrics>,
    pub expected_overall: ExpectedMetrics,
}

impl Manifest {
    pub fn entries(&self, kind: CorruptionKind) -> impl Iterator<Item = &ManifestEntry> {
        self.corruptions.iter().filter(move |e| e.kind == kind)
    }

    /// Ground-truth indices where a perfect extractor falls short.
    pub fn affected(&self) -> BTreeSet<usize> {
        self.corruptions
            .iter()
            .filter(|e| e.expected != ExpectedEffect::None)
            .map(|e| e.record)
            .collect()
    }
}

/// Generator-side parameters of one prescription.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenRx {
    pub clinic: ClinicId,
    pub template: TemplateId,
    pub patient_id: String,
    pub date: NaiveDate,
    pub drug_full: String,
    pub daily: Option<f64>,
    pub duration: Option<f64>,
    /// Days one fill lasts.
    pub days_supply: f64,
    pub total: f64,
    pub refill: u32,
    pub moud_days: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub raw: BTreeMap<ClinicId, Vec<RawRecord>>,
    pub ground_truth: Vec<GroundTruthRecord>,
    pub hidden: Vec<HiddenRx>,
    pub manifest: Manifest,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unit {
    Tablet,
    Film,
}

impl Unit {
    fn word(self, q: f64) -> &'static str {
        match (self, q > 1.0) {
            (Unit::Tablet, false) => "tablet",
            (Unit::Tablet, true) => "tablets",
            (Unit::Film, false) => "film",
            (Unit::Film, true) => "films",
        }
    }

    fn short(self) -> &'static str {
        match self {
            Unit::Tablet => "tab",
            Unit::Film => "film",
        }
    }
}

struct Drug {
    name: &'static str,
    generic: &'static str,
    strength: &'static str,
    unit: Unit,
}

const ORAL_DRUGS: [Drug; 5] = [
    Drug { name: "Suboxone 8-2 mg film", generic: "buprenorphine HCl/naloxone HCl", strength: "8 mg-2 mg", unit: Unit::Film },
    Drug { name: "Suboxone 2-0.5 mg film", generic: "buprenorphine HCl/naloxone HCl", strength: "2 mg-0.5 mg", unit: Unit::Film },
    Drug { name: "BUPRENORPHINE HCL-NALOXONE HCL 8-2 MG SL SUBL", generic: "buprenorphine HCl/naloxone HCl", strength: "8 mg-2 mg", unit: Unit::Tablet },
    Drug { name: "Zubsolv 5.7-1.4 mg tablet", generic: "buprenorphine HCl/naloxone HCl", strength: "5.7 mg-1.4 mg", unit: Unit::Tablet },
    Drug { name: "Buprenorphine 8 mg SL tablet", generic: "buprenorphine HCl", strength: "8 mg", unit: Unit::Tablet },
];

const BRIXADI: Drug = Drug { name: "Brixadi 24 mg injection", generic: "buprenorphine extended-release", strength: "24 mg", unit: Unit::Tablet };
const SUBLOCADE: Drug = Drug { name: "Sublocade 300 mg injection", generic: "buprenorphine extended-release", strength: "300 mg", unit: Unit::Tablet };
const VIVITROL: Drug = Drug {
    name: "Vivitrol 380 mg suspension, extended rel recon",
    generic: "naltrexone ER",
    strength: "380 mg",
    unit: Unit::Tablet,
};

/// Words for small whole numbers and halves, numerals otherwise.
fn words(x: f64) -> String {
    const W: [&str; 21] = [
        "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven", "twelve",
        "thirteen", "fourteen", "fifteen", "sixteen", "seventeen", "eighteen", "nineteen", "twenty",
    ];
    if x.fract() == 0.0 && (1.0..=20.0).contains(&x) {
        return W[x as usize].to_string();
    }
    if x == 0.5 {
        return "half".into();
    }
    if x.fract() == 0.5 && (1.0..=20.0).contains(&x) {
        return format!("{} and a half", W[x.trunc() as usize]);
    }
    format_decimal(x)
}

fn fraction(x: f64) -> String {
    match (x.trunc(), x.fract()) {
        (0.0, 0.5) => "1/2".into(),
        (w, 0.5) => format!("{} 1/2", format_decimal(w)),
        _ => format_decimal(x),
    }
}

/// One rendered prescription before format layout.
struct Draft {
    template: TemplateId,
    drug: &'static Drug,
    sig: String,
    styled_sig: Option<String>,
    /// Per-administration amount and frequency code for per-dose layouts.
    dose: f64,
    freq_code: String,
    styled_freq_code: String,
    daily: Option<f64>,
    duration: Option<f64>,
    days_supply: f64,
}

fn draft(template: TemplateId, rng: &mut ChaCha8Rng) -> Draft {
    let oral = ORAL_DRUGS.choose(rng).expect("non-empty");
    let q: f64 = *[1.0, 2.0].choose(rng).expect("non-empty");
    let supply: f64 = *[7.0, 14.0, 28.0, 30.0].choose(rng).expect("non-empty");
    let u = oral.unit;
    let mut d = Draft {
        template,
        drug: oral,
        sig: String::new(),
        styled_sig: None,
        dose: q,
        freq_code: String::new(),
        styled_freq_code: String::new(),
        daily: None,
        duration: None,
        days_supply: supply,
    };
    match template {
        TemplateId::DailyOnce => {
            d.sig = format!("Dissolve {} {} under the tongue once a day", format_decimal(q), u.word(q));
            d.styled_sig = Some(format!("Dissolve {} {} under the tongue once a day", words(q), u.word(q)));
            d.daily = Some(q);
            d.freq_code = "Daily".into();
            d.styled_freq_code = "once a day".into();
        }
        TemplateId::TwiceDaily => {
            d.sig = format!("Place {} {} under the tongue twice daily", format_decimal(q), u.word(q));
            d.styled_sig = Some(format!("Place {} {} under the tongue twice daily", words(q), u.word(q)));
            d.daily = Some(2.0 * q);
            d.freq_code = "BID".into();
            d.styled_freq_code = "twice a day".into();
        }
        TemplateId::ThriceDaily => {
            d.sig = format!("take {} {} by sublingual route 3 times every day", format_decimal(q), u.word(q));
            d.styled_sig = Some(format!(
                "take {} {} by sublingual route three times every day",
                words(q),
                u.word(q)
            ));
            d.daily = Some(3.0 * q);
            d.freq_code = "TID".into();
            d.styled_freq_code = "three times a day".into();
        }
        TemplateId::EveryNHours => {
            let h: f64 = *[6.0, 8.0, 12.0].choose(rng).expect("non-empty");
            d.sig = format!("Place {} {} under the tongue every {} hours", format_decimal(q), u.word(q), h);
            d.styled_sig = Some(format!("Place {} {} under the tongue every {} hours", words(q), u.word(q), words(h)));
            d.daily = Some(q * 24.0 / h);
            d.freq_code = format!("q{h}h");
            d.styled_freq_code = format!("every {} hours", words(h));
        }
        TemplateId::TimeOfDay => {
            let (a, b) = *[(1.0, 0.5), (1.0, 1.0), (2.0, 1.0), (1.0, 2.0)].choose(rng).expect("non-empty");
            let s = u.short();
            d.sig = format!(
                "Take {} {s} in the morning and {} {s} at bedtime",
                format_decimal(a),
                format_decimal(b)
            );
            d.styled_sig = Some(format!("Take {} {s} in morning, {} {s} at night", words(a), words(b)));
            d.daily = Some(a + b);
        }
        TemplateId::FractionDose => {
            let f: f64 = *[0.5, 1.5, 2.5].choose(rng).expect("non-empty");
            d.sig = format!("Take {} {} under the tongue daily", fraction(f), u.word(f));
            d.styled_sig = Some(format!("Take {} {} under the tongue daily", words(f), u.word(f)));
            d.daily = Some(f);
            d.days_supply = *[14.0, 28.0].choose(rng).expect("non-empty");
        }
        TemplateId::PrnCapped => {
            let h: f64 = *[6.0, 8.0].choose(rng).expect("non-empty");
            let days: f64 = *[14.0, 28.0].choose(rng).expect("non-empty");
            d.sig = format!(
                "Place {} {} under the tongue every {} hours as needed for up to {} days.",
                format_decimal(q),
                u.word(q),
                h,
                days
            );
            d.styled_sig = Some(format!(
                "Place {} {} under the tongue every {} hours as needed for up to {} days.",
                words(q),
                u.word(q),
                words(h),
                days
            ));
            d.daily = Some(q * 24.0 / h);
            d.duration = Some(days);
            d.days_supply = days;
        }
        TemplateId::ExplicitDuration => {
            let days: f64 = *[7.0, 14.0, 28.0].choose(rng).expect("non-empty");
            d.sig = format!("Take {} {} twice daily for {} days", format_decimal(q), u.word(q), days);
            d.styled_sig = Some(format!("Take {} {} twice daily for {} days", words(q), u.word(q), words(days)));
            d.daily = Some(2.0 * q);
            d.duration = Some(days);
            d.days_supply = days;
        }
        TemplateId::XNotation => {
            let days: f64 = *[10.0, 14.0, 28.0].choose(rng).expect("non-empty");
            d.sig = format!("{} {} SL BID X{}", format_decimal(q), u.short(), days);
            d.styled_sig = Some(format!("{} {} SL BID X{}", words(q), u.short(), days));
            d.daily = Some(2.0 * q);
            d.duration = Some(days);
            d.days_supply = days;
        }
        TemplateId::WeeklyInjectable => {
            d.drug = &BRIXADI;
            d.sig = "Inject 24 mg subcutaneously once weekly".into();
            d.duration = Some(7.0);
            d.days_supply = 7.0;
        }
        TemplateId::FourWeekInjectable => {
            d.drug = &SUBLOCADE;
            d.sig = "INJECT 300 MG SUBCUTANEOUSLY EVERY 4 WEEKS".into();
            d.styled_sig = Some("INJECT 300 MG SUBCUTANEOUSLY EVERY FOUR WEEKS".into());
            d.duration = Some(28.0);
            d.days_supply = 28.0;
        }
        TemplateId::VivitrolMonthly => {
            d.drug = &VIVITROL;
            d.sig = "Inject 380 mg intramuscularly monthly".into();
            d.duration = Some(30.0);
            d.days_supply = 30.0;
            d.dose = 1.0;
            d.freq_code = "Monthly".into();
            d.styled_freq_code = "once a month".into();
        }
    }
    d
}

/// A generated record with the state its corruptions left it in.
struct Planned {
    hidden: HiddenRx,
    draft: Draft,
    prescriber: String,
    key_corrupted: bool,
    value_corrupted: bool,
    refill_blank: bool,
    mass_unit: bool,
    styled: bool,
}

fn us_date(d: NaiveDate, two_digit_year: bool) -> String {
    if two_digit_year {
        d.format("%-m/%-d/%y").to_string()
    } else {
        d.format("%-m/%-d/%Y").to_string()
    }
}

fn columns(clinic: &str) -> &'static [&'static str] {
    match clinic {
        "hometown" => &[
            "RECORDID",
            "PRESCRIPTION_DATE",
            "GENERIC_NAME",
            "ROUTE_OF_ADMINISTRATION",
            "UNIT_DOSE",
            "PRESCRIBED_QUANTITY",
            "DOSAGE_INSTRUCTIONS",
            "MEDICATION_INDICATION1",
            "ORIGINAL_REFILLS",
            "PRESCRIBER_ID",
        ],
        "providence" => &[
            "record_num",
            "epic_medication_id",
            "epic_medication_name",
            "med_route",
            "dose_unit",
            "dose_instructions",
            "quantity",
            "refill",
            "prescription_date",
            "prescriber_id",
        ],
        "seaport" => &[
            "Record_ID",
            "Prescription_Date",
            "RX_Name",
            "Quantity",
            "Display_Dosage_Unit",
            "SIG",
            "Refills",
            "PRESCRIBER_ID",
        ],
        "st_marys" => &[
            "RecordNumber",
            "Code",
            "Description",
            "PrescriptionDate",
            "UnitDosage",
            "DosageInstructions",
            "DoseQuantity",
            "NumberOfRefillsAuthorized",
            "PrescriberID",
        ],
        "syringa" => &[
            "Record Number",
            "Order Dt/Tm",
            "Order Mnemonic",
            "Dispense Qty",
            "Volume Dose",
            "Volume Dose Unit",
            "Frequency",
            "Refills",
            "Order Last Updt Provider Id",
        ],
        "winterport" => &[
            "RecordID",
            "DrugDescription",
            "PrescribedDate",
            "SUMMARY",
            "ROUTE",
            "INSTRUCTIONS",
            "Refills",
            "DOSE_UNIT",
            "PrescribedQuantity",
            "DoseQuantity",
        ],
        _ => &[],
    }
}

fn render(p: &Planned) -> Result<RawRecord> {
    let h = &p.hidden;
    let d = &p.draft;
    let clinic = h.clinic.as_str();
    let pid = if p.key_corrupted {
        format!("X{}", h.patient_id)
    } else {
        h.patient_id.clone()
    };
    let total = h.total + if p.value_corrupted { 1.0 } else { 0.0 };
    let total_s = format_decimal(total);
    let refill = if p.refill_blank { String::new() } else { h.refill.to_string() };
    let sig = if p.styled {
        d.styled_sig.clone().unwrap_or_else(|| d.sig.clone())
    } else {
        d.sig.clone()
    };
    let injectable = d.template.is_injectable();
    let unit_word = if injectable { "each" } else { d.drug.unit.short() };
    let route = if injectable { "INJECTION" } else { "SUBLINGUAL" };
    let mut values: HashMap<&str, String> = HashMap::new();
    match clinic {
        "hometown" => {
            values.insert("RECORDID", pid);
            values.insert("PRESCRIPTION_DATE", us_date(h.date, true));
            values.insert("GENERIC_NAME", d.drug.generic.into());
            values.insert("ROUTE_OF_ADMINISTRATION", route.into());
            values.insert("UNIT_DOSE", d.drug.strength.into());
            values.insert("PRESCRIBED_QUANTITY", total_s);
            values.insert("DOSAGE_INSTRUCTIONS", sig);
            values.insert("MEDICATION_INDICATION1", "F11.20".into());
            values.insert("ORIGINAL_REFILLS", refill);
            values.insert("PRESCRIBER_ID", p.prescriber.clone());
        }
        "providence" => {
            values.insert("record_num", pid);
            values.insert("epic_medication_id", format!("12{:07}", h.date.ordinal() * 1000 + h.refill));
            values.insert("epic_medication_name", d.drug.name.into());
            values.insert("med_route", route.into());
            values.insert("dose_unit", unit_word.into());
            values.insert("dose_instructions", sig);
            values.insert("quantity", format!("{total_s} {unit_word}"));
            values.insert("refill", refill);
            values.insert("prescription_date", us_date(h.date, true));
            values.insert("prescriber_id", p.prescriber.clone());
        }
        "seaport" => {
            values.insert("Record_ID", pid);
            values.insert("Prescription_Date", us_date(h.date, false));
            values.insert("RX_Name", d.drug.name.into());
            values.insert("Quantity", total_s);
            values.insert("Display_Dosage_Unit", unit_word.into());
            values.insert("SIG", sig);
            values.insert("Refills", refill);
            values.insert("PRESCRIBER_ID", p.prescriber.clone());
        }
        "st_marys" => {
            values.insert("RecordNumber", pid);
            values.insert("Code", "657570300".into());
            values.insert("Description", d.drug.name.into());
            values.insert("PrescriptionDate", us_date(h.date, true));
            values.insert("UnitDosage", " ".into());
            values.insert("DosageInstructions", sig);
            values.insert("DoseQuantity", format!("{total_s} {unit_word}"));
            values.insert("NumberOfRefillsAuthorized", refill);
            values.insert("PrescriberID", p.prescriber.clone());
        }
        "syringa" => {
            let dose = if p.mass_unit {
                "250 g".to_string()
            } else if p.styled {
                words(d.dose)
            } else {
                format_decimal(d.dose)
            };
            values.insert("Record Number", pid);
            values.insert("Order Dt/Tm", format!("{} 09:30", h.date.format("%m/%d/%Y")));
            values.insert("Order Mnemonic", d.drug.name.into());
            values.insert("Dispense Qty", total_s);
            values.insert("Volume Dose", dose);
            values.insert("Volume Dose Unit", unit_word.into());
            let freq = if p.styled { &d.styled_freq_code } else { &d.freq_code };
            values.insert("Frequency", freq.clone());
            values.insert("Refills", refill);
            values.insert("Order Last Updt Provider Id", p.prescriber.clone());
        }
        "winterport" => {
            values.insert("RecordID", pid);
            values.insert("DrugDescription", d.drug.name.into());
            values.insert("PrescribedDate", us_date(h.date, true));
            values.insert("SUMMARY", d.drug.name.into());
            values.insert("ROUTE", if injectable { "INJECTION" } else { "UNDER TONGUE" }.into());
            values.insert("INSTRUCTIONS", sig);
            values.insert("Refills", refill);
            values.insert("DOSE_UNIT", unit_word.into());
            values.insert("PrescribedQuantity", format!("{total_s} {unit_word}"));
            values.insert("DoseQuantity", "NULL".into());
        }
        other => return Err(Error::GenSpec(format!("no generator layout for clinic `{other}`"))),
    }
    let fields = columns(clinic)
        .iter()
        .map(|c| (c.to_string(), values.remove(c).unwrap_or_default()))
        .collect();
    RawRecord::new(h.clinic.clone(), fields)
}

/// Drug name as a faithful extractor reports it for this layout.
fn reported_name(clinic: &str, drug: &Drug) -> &'static str {
    if clinic == "hometown" {
        drug.generic
    } else {
        drug.name
    }
}

fn derive_seed(seed: u64, stream: u64) -> u64 {
    seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17)
}

fn plan_clinic(clinic: &ClinicId, stream: u64, spec: &GenSpec) -> Result<Vec<Planned>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, stream + 1));
    let pool: Vec<TemplateId> = spec
        .template_pool()
        .into_iter()
        .filter(|t| clinic.as_str() != ClinicId::SYRINGA || t.frequency_code_only())
        .collect();
    if pool.is_empty() {
        return Err(Error::GenSpec(format!("no template in the pool fits clinic `{clinic}`")));
    }
    let weights: u32 = pool.iter().map(|t| t.weight()).sum();
    let start = NaiveDate::from_ymd_opt(2019, 1, 1).expect("valid date")
        + Duration::days(rng.random_range(0..365));
    let patients = spec.records_per_clinic.div_ceil(3).max(1) as u64;
    let id_base = 100_000 + 100_000 * stream;
    let mut out = Vec::with_capacity(spec.records_per_clinic);
    for i in 0..spec.records_per_clinic {
        let mut pick = rng.random_range(0..weights);
        let template = *pool
            .iter()
            .find(|t| {
                if pick < t.weight() {
                    true
                } else {
                    pick -= t.weight();
                    false
                }
            })
            .expect("weighted pick");
        let d = draft(template, &mut rng);
        let refill: u32 = rng.random_range(0..=if template.is_injectable() { 2 } else { 3 });
        let total = match d.daily {
            Some(daily) => daily * d.days_supply,
            None => 1.0,
        };
        let length = d.duration.unwrap_or(d.days_supply);
        let hidden = HiddenRx {
            clinic: clinic.clone(),
            template,
            patient_id: (id_base + rng.random_range(0..patients)).to_string(),
            date: start + Duration::days(i as i64),
            drug_full: reported_name(clinic.as_str(), d.drug).to_string(),
            daily: d.daily,
            duration: d.duration,
            days_supply: d.days_supply,
            total,
            refill,
            moud_days: (refill as f64 + 1.0) * length,
        };
        out.push(Planned {
            hidden,
            draft: d,
            prescriber: format!("P{:04}", rng.random_range(0..200)),
            key_corrupted: false,
            value_corrupted: false,
            refill_blank: false,
            mass_unit: false,
            styled: false,
        });
    }
    Ok(out)
}

fn ground_truth_of(h: &HiddenRx) -> GroundTruthRecord {
    GroundTruthRecord {
        clinic: h.clinic.clone(),
        patient_id: h.patient_id.clone(),
        prescription_date: h.date.format("%Y-%m-%d").to_string(),
        drug_name: strip_strength(&h.drug_full),
        drug_name_full: Some(h.drug_full.clone()),
        total_quantity: Some(h.total),
        daily_quantity: h.daily,
        refill: Some(h.refill as f64),
        duration: h.duration,
        moud_days: Some(h.moud_days),
    }
}

fn lower_median(mut v: Vec<f64>) -> Option<f64> {
    v.sort_by(f64::total_cmp);
    v.get(v.len().saturating_sub(1) / 2).copied()
}

pub fn generate(spec: &GenSpec) -> Result<Corpus> {
    spec.validate()?;
    let clinics = spec.clinic_list();
    let mut planned: Vec<Planned> = Vec::new();
    for (i, c) in clinics.iter().enumerate() {
        planned.extend(plan_clinic(c, i as u64, spec)?);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 0));
    let mut touched = vec![false; planned.len()];
    let mut chosen: BTreeMap<CorruptionKind, Vec<usize>> = BTreeMap::new();
    for kind in CORRUPTION_ORDER {
        let eligible: Vec<usize> = (0..planned.len())
            .filter(|&i| !touched[i])
            .filter(|&i| match kind {
                CorruptionKind::MassUnit => {
                    planned[i].hidden.clinic.as_str() == ClinicId::SYRINGA && !planned[i].draft.template.is_injectable()
                }
                CorruptionKind::Styling => planned[i].draft.styled_sig.is_some() || !planned[i].draft.freq_code.is_empty(),
                _ => true,
            })
            .collect();
        let count = (spec.rates.get(kind) * eligible.len() as f64).round() as usize;
        let mut picks: Vec<usize> = index::sample(&mut rng, eligible.len(), count.min(eligible.len()))
            .into_iter()
            .map(|j| eligible[j])
            .collect();
        picks.sort_unstable();
        for &i in &picks {
            touched[i] = true;
            let p = &mut planned[i];
            match kind {
                CorruptionKind::Key => p.key_corrupted = true,
                CorruptionKind::Value => p.value_corrupted = true,
                CorruptionKind::Missing => p.refill_blank = true,
                CorruptionKind::MassUnit => p.mass_unit = true,
                CorruptionKind::Styling => p.styled = true,
                CorruptionKind::Duplicate => {}
            }
        }
        chosen.insert(kind, picks);
    }
    let duplicated: BTreeSet<usize> = chosen[&CorruptionKind::Duplicate].iter().copied().collect();

    let mut raw: BTreeMap<ClinicId, Vec<RawRecord>> = BTreeMap::new();
    let mut row_of = Vec::with_capacity(planned.len());
    for (i, p) in planned.iter().enumerate() {
        let rows = raw.entry(p.hidden.clinic.clone()).or_default();
        row_of.push(rows.len());
        let rec = render(p)?;
        if duplicated.contains(&i) {
            rows.push(rec.clone());
        }
        rows.push(rec);
    }
    for c in &clinics {
        raw.entry(c.clone()).or_default();
    }

    // Per-drug typical daily quantity as the cleaning stage will see it:
    // every oral record except those whose dose was replaced by a mass.
    let mut dailies: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for p in planned.iter().filter(|p| !p.mass_unit) {
        if let Some(d) = p.hidden.daily {
            dailies
                .entry(normalize_drug_name(&strip_strength(&p.hidden.drug_full)))
                .or_default()
                .push(d);
        }
    }
    let typical: BTreeMap<String, f64> = dailies
        .into_iter()
        .filter_map(|(k, v)| lower_median(v).map(|m| (k, m)))
        .collect();

    let mut corruptions = Vec::new();
    for (&kind, picks) in &chosen {
        for &i in picks {
            let h = &planned[i].hidden;
            let (expected, detail) = match kind {
                CorruptionKind::Key => (ExpectedEffect::Uncovered, format!("patient id {} written as X{}", h.patient_id, h.patient_id)),
                CorruptionKind::Value => (
                    ExpectedEffect::Mismatch,
                    format!("total {} written as {}", format_decimal(h.total), format_decimal(h.total + 1.0)),
                ),
                CorruptionKind::Missing => (ExpectedEffect::Mismatch, format!("refill {} blanked", h.refill)),
                CorruptionKind::MassUnit => {
                    let key = normalize_drug_name(&strip_strength(&h.drug_full));
                    let truth = h.daily.expect("oral record");
                    match typical.get(&key) {
                        Some(&m) if m == truth && m <= h.total => (
                            ExpectedEffect::None,
                            format!("dose written as 250 g; imputed daily {} equals truth", format_decimal(m)),
                        ),
                        Some(&m) if m <= h.total => (
                            ExpectedEffect::Mismatch,
                            format!(
                                "dose written as 250 g; imputed daily {} differs from {}",
                                format_decimal(m),
                                format_decimal(truth)
                            ),
                        ),
                        _ => (ExpectedEffect::Mismatch, "dose written as 250 g; daily not imputable".into()),
                    }
                }
                CorruptionKind::Duplicate => (ExpectedEffect::None, "row emitted twice".into()),
                CorruptionKind::Styling => (ExpectedEffect::None, "numbers written as words or fractions".into()),
            };
            corruptions.push(ManifestEntry {
                record: i,
                clinic: h.clinic.clone(),
                row: row_of[i],
                kind,
                expected,
                detail,
            });
        }
    }
    corruptions.sort_by_key(|e| (e.record, e.kind));

    let effect_of: HashMap<usize, ExpectedEffect> = corruptions
        .iter()
        .filter(|e| e.expected != ExpectedEffect::None)
        .map(|e| (e.record, e.expected))
        .collect();
    let mut per_clinic: BTreeMap<&ClinicId, (usize, usize, usize)> = BTreeMap::new();
    for (i, p) in planned.iter().enumerate() {
        let e = per_clinic.entry(&p.hidden.clinic).or_default();
        e.0 += 1;
        match effect_of.get(&i) {
            Some(ExpectedEffect::Uncovered) => {}
            Some(ExpectedEffect::Mismatch) => e.1 += 1,
            _ => {
                e.1 += 1;
                e.2 += 1;
            }
        }
    }
    let expected: Vec<ExpectedMetrics> = per_clinic
        .iter()
        .map(|(c, &(g, cov, ex))| ExpectedMetrics::new(c.to_string(), g, cov, ex))
        .collect();
    let (g, cov, ex) = per_clinic
        .values()
        .fold((0, 0, 0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));

    let manifest = Manifest {
        seed: spec.seed,
        records_per_clinic: spec.records_per_clinic,
        ground_truth_records: planned.len(),
        raw_records: raw.values().map(Vec::len).sum(),
        corruptions,
        expected,
        expected_overall: ExpectedMetrics::new("overall".into(), g, cov, ex),
    };
    let ground_truth = planned.iter().map(|p| ground_truth_of(&p.hidden)).collect();
    let hidden = planned.into_iter().map(|p| p.hidden).collect();
    Ok(Corpus {
        raw,
        ground_truth,
        hidden,
        manifest,
    })
}

/// Writes one clinic's records as CSV with the record's field order as header.
pub fn write_raw_csv(path: &Path, records: &[RawRecord], header: &[&str]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e))?;
    let io = |e: csv::Error| Error::parse(path, e);
    w.write_record(header).map_err(io)?;
    for r in records {
        w.write_record(header.iter().map(|h| r.get(h).unwrap_or(""))).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Lays out `raw/<clinic>.csv`, `ground_truth.csv` and `manifest.json`.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    let raw_dir = dir.join("raw");
    std::fs::create_dir_all(&raw_dir).map_err(|e| Error::io(&raw_dir, e))?;
    for (clinic, records) in &corpus.raw {
        write_raw_csv(&raw_dir.join(format!("{clinic}.csv")), records, columns(clinic.as_str()))?;
    }
    write_ground_truth(&dir.join("ground_truth.csv"), &corpus.ground_truth)?;
    let manifest_path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&corpus.manifest).expect("manifest is serializable");
    std::fs::write(&manifest_path, text + "\n").map_err(|e| Error::io(&manifest_path, e))
}
