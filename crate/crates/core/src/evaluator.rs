//! Coverage and exact-match accuracy of extracted records against ground
//! truth, per clinic and overall.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::names::{canonical_text, normalize_drug_name};
use crate::postprocess::canonical_date;
use crate::schema::{ClinicId, UnifiedPrescription};

pub const GROUND_TRUTH_HEADER: [&str; 10] = [
    "clinic",
    "patient_id",
    "prescription_date",
    "drug_name",
    "drug_name_full",
    "total_quantity",
    "daily_quantity",
    "refill",
    "duration",
    "moud_days",
];

/// Year pivot used when canonicalizing two-digit years in match keys.
const KEY_YEAR_PIVOT: u32 = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRecord {
    pub clinic: ClinicId,
    pub patient_id: String,
    pub prescription_date: String,
    pub drug_name: String,
    pub drug_name_full: Option<String>,
    pub total_quantity: Option<f64>,
    pub daily_quantity: Option<f64>,
    pub refill: Option<f64>,
    pub duration: Option<f64>,
    pub moud_days: Option<f64>,
}

/// One extracted record as seen by the evaluator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredOutput {
    pub clinic: ClinicId,
    pub record: UnifiedPrescription,
    pub moud_days: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompareField {
    TotalQuantity,
    DailyQuantity,
    Refill,
    Duration,
    DrugNameFull,
    MoudDays,
}

impl CompareField {
    pub const ALL: [CompareField; 6] = [
        CompareField::TotalQuantity,
        CompareField::DailyQuantity,
        CompareField::Refill,
        CompareField::Duration,
        CompareField::DrugNameFull,
        CompareField::MoudDays,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CompareField::TotalQuantity => "total_quantity",
            CompareField::DailyQuantity => "daily_quantity",
            CompareField::Refill => "refill",
            CompareField::Duration => "duration",
            CompareField::DrugNameFull => "drug_name_full",
            CompareField::MoudDays => "moud_days",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Absolute tolerance for numeric comparisons, inclusive.
    pub tolerance: f64,
    pub fields: Vec<CompareField>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            tolerance: 0.01,
            fields: CompareField::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MatchKey {
    pub clinic: ClinicId,
    pub patient_id: String,
    pub prescription_date: String,
    pub drug_name: String,
}

fn key_date(raw: &str) -> String {
    canonical_date(raw, KEY_YEAR_PIVOT).unwrap_or_else(|| raw.trim().to_string())
}

impl GroundTruthRecord {
    pub fn key(&self) -> MatchKey {
        MatchKey {
            clinic: self.clinic.clone(),
            patient_id: canonical_text(&self.patient_id),
            prescription_date: key_date(&self.prescription_date),
            drug_name: normalize_drug_name(&self.drug_name),
        }
    }

    fn number(&self, f: CompareField) -> Option<f64> {
        match f {
            CompareField::TotalQuantity => self.total_quantity,
            CompareField::DailyQuantity => self.daily_quantity,
            CompareField::Refill => self.refill,
            CompareField::Duration => self.duration,
            CompareField::MoudDays => self.moud_days,
            CompareField::DrugNameFull => None,
        }
    }
}

impl ScoredOutput {
    pub fn key(&self) -> Option<MatchKey> {
        let r = &self.record;
        let drug = r.drug_name.as_deref().or(r.drug_name_full.as_deref())?;
        Some(MatchKey {
            clinic: self.clinic.clone(),
            patient_id: canonical_text(r.patient_id.as_deref()?),
            prescription_date: key_date(r.prescription_date.as_deref()?),
            drug_name: normalize_drug_name(drug),
        })
    }

    fn number(&self, f: CompareField) -> Option<f64> {
        match f {
            CompareField::TotalQuantity => self.record.total_quantity,
            CompareField::DailyQuantity => self.record.daily_quantity,
            CompareField::Refill => self.record.refill,
            CompareField::Duration => self.record.duration,
            CompareField::MoudDays => self.moud_days,
            CompareField::DrugNameFull => None,
        }
    }
}

fn field_matches(gt: &GroundTruthRecord, out: &ScoredOutput, f: CompareField, tol: f64) -> bool {
    if f == CompareField::DrugNameFull {
        let a = gt.drug_name_full.as_deref().map(canonical_text);
        let b = out.record.drug_name_full.as_deref().map(canonical_text);
        return a == b;
    }
    match (gt.number(f), out.number(f)) {
        (None, None) => true,
        (Some(a), Some(b)) => (a - b).abs() <= tol + 1e-9,
        _ => false,
    }
}

/// Outcome of matching one ground-truth record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordMatch {
    pub ground_truth: usize,
    pub output: Option<usize>,
    pub mismatched: Vec<CompareField>,
}

impl RecordMatch {
    pub fn covered(&self) -> bool {
        self.output.is_some()
    }

    pub fn exact(&self) -> bool {
        self.covered() && self.mismatched.is_empty()
    }
}

/// Pairs each ground-truth record with its best-agreeing output among those
/// sharing its key; ties go to the earliest output.
pub fn match_records(gt: &[GroundTruthRecord], outputs: &[ScoredOutput], cfg: &EvalConfig) -> Vec<RecordMatch> {
    let mut index: HashMap<MatchKey, Vec<usize>> = HashMap::new();
    for (i, o) in outputs.iter().enumerate() {
        if let Some(k) = o.key() {
            index.entry(k).or_default().push(i);
        }
    }
    gt.iter()
        .enumerate()
        .map(|(gi, g)| {
            let candidates = index.get(&g.key()).map(Vec::as_slice).unwrap_or(&[]);
            let best = candidates
                .iter()
                .map(|&oi| {
                    let mismatched: Vec<CompareField> = cfg
                        .fields
                        .iter()
                        .copied()
                        .filter(|&f| !field_matches(g, &outputs[oi], f, cfg.tolerance))
                        .collect();
                    (oi, mismatched)
                })
                .min_by_key(|(oi, m)| (m.len(), *oi));
            match best {
                Some((oi, mismatched)) => RecordMatch {
                    ground_truth: gi,
                    output: Some(oi),
                    mismatched,
                },
                None => RecordMatch {
                    ground_truth: gi,
                    output: None,
                    mismatched: Vec::new(),
                },
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClinicMetrics {
    pub clinic: String,
    pub ground_truth: usize,
    pub covered: usize,
    pub exact: usize,
    /// Covered ground-truth records as a percentage of all ground truth.
    pub coverage_pct: f64,
    /// Exact matches as a percentage of covered records.
    pub accuracy_pct: f64,
    /// Covered records disagreeing on each field.
    pub mismatches: BTreeMap<CompareField, usize>,
}

impl ClinicMetrics {
    fn from_matches<'a>(clinic: String, matches: impl IntoIterator<Item = &'a RecordMatch>) -> Self {
        let mut m = ClinicMetrics {
            clinic,
            ground_truth: 0,
            covered: 0,
            exact: 0,
            coverage_pct: 0.0,
            accuracy_pct: 0.0,
            mismatches: BTreeMap::new(),
        };
        for r in matches {
            m.ground_truth += 1;
            if r.covered() {
                m.covered += 1;
                if r.exact() {
                    m.exact += 1;
                }
                for f in &r.mismatched {
                    *m.mismatches.entry(*f).or_default() += 1;
                }
            }
        }
        m.coverage_pct = percent(m.covered, m.ground_truth);
        m.accuracy_pct = percent(m.exact, m.covered);
        m
    }
}

fn percent(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub clinics: Vec<ClinicMetrics>,
    pub overall: ClinicMetrics,
    pub tolerance: f64,
    pub compared_fields: Vec<CompareField>,
    pub warnings: Vec<String>,
}

impl EvalReport {
    pub fn clinic(&self, id: &str) -> Option<&ClinicMetrics> {
        self.clinics.iter().find(|c| c.clinic == id)
    }
}

/// Ground-truth and covered counts per clinic.
pub fn compute_coverage(gt: &[GroundTruthRecord], outputs: &[ScoredOutput]) -> BTreeMap<ClinicId, (usize, usize)> {
    let matches = match_records(gt, outputs, &EvalConfig::default());
    let mut out: BTreeMap<ClinicId, (usize, usize)> = BTreeMap::new();
    for m in &matches {
        let e = out.entry(gt[m.ground_truth].clinic.clone()).or_default();
        e.0 += 1;
        e.1 += usize::from(m.covered());
    }
    out
}

/// Exact-match count and per-field mismatch histogram per clinic.
pub fn compute_exact_match(
    gt: &[GroundTruthRecord],
    outputs: &[ScoredOutput],
    cfg: &EvalConfig,
) -> BTreeMap<ClinicId, (usize, BTreeMap<CompareField, usize>)> {
    evaluate(gt, outputs, cfg)
        .clinics
        .into_iter()
        .map(|c| (ClinicId::new(&c.clinic).expect("clinic ids round-trip"), (c.exact, c.mismatches)))
        .collect()
}

pub fn evaluate(gt: &[GroundTruthRecord], outputs: &[ScoredOutput], cfg: &EvalConfig) -> EvalReport {
    let matches = match_records(gt, outputs, cfg);
    let mut by_clinic: BTreeMap<&ClinicId, Vec<&RecordMatch>> = BTreeMap::new();
    for m in &matches {
        by_clinic.entry(&gt[m.ground_truth].clinic).or_default().push(m);
    }
    let mut warnings = Vec::new();
    let mut output_clinics: Vec<&ClinicId> = outputs.iter().map(|o| &o.clinic).collect();
    output_clinics.sort();
    output_clinics.dedup();
    for c in output_clinics {
        if !by_clinic.contains_key(c) {
            warnings.push(format!("clinic `{c}` has no ground-truth records; omitted"));
        }
    }
    let clinics = by_clinic
        .into_iter()
        .map(|(c, ms)| ClinicMetrics::from_matches(c.to_string(), ms))
        .collect();
    EvalReport {
        clinics,
        overall: ClinicMetrics::from_matches("overall".into(), &matches),
        tolerance: cfg.tolerance,
        compared_fields: cfg.fields.clone(),
        warnings,
    }
}

/// JSON form and a fixed-width table with coverage and accuracy columns per
/// clinic plus an overall column.
pub fn render_report(report: &EvalReport) -> (String, String) {
    let json = serde_json::to_string_pretty(report).expect("report is serializable");
    let cols: Vec<&ClinicMetrics> = report.clinics.iter().chain([&report.overall]).collect();
    let width = cols.iter().map(|c| c.clinic.len()).max().unwrap_or(0).max(15);
    let mut table = String::new();
    let _ = write!(table, "{:<10}", "");
    for c in &cols {
        let name = if c.clinic == "overall" { "Overall" } else { &c.clinic };
        let _ = write!(table, " {name:^width$}");
    }
    table.push('\n');
    let _ = write!(table, "{:<10}", "");
    let half = (width - 1) / 2;
    let rest = width - 1 - half;
    for _ in &cols {
        let _ = write!(table, " {:>half$} {:>rest$}", "Cov.", "Acc.");
    }
    table.push('\n');
    let _ = write!(table, "{:<10}", "percent");
    for c in &cols {
        let _ = write!(
            table,
            " {:>half$} {:>rest$}",
            format!("{:.2}", c.coverage_pct),
            format!("{:.2}", c.accuracy_pct)
        );
    }
    table.push('\n');
    let _ = write!(table, "{:<10}", "records");
    for c in &cols {
        let _ = write!(
            table,
            " {:>half$} {:>rest$}",
            format!("{}/{}", c.covered, c.ground_truth),
            format!("{}/{}", c.exact, c.covered)
        );
    }
    table.push('\n');
    for w in &report.warnings {
        let _ = writeln!(table, "warning: {w}");
    }
    (json, table)
}

#[derive(Debug, Deserialize)]
struct GroundTruthRow {
    clinic: String,
    patient_id: String,
    prescription_date: String,
    drug_name: String,
    drug_name_full: String,
    total_quantity: String,
    daily_quantity: String,
    refill: String,
    duration: String,
    moud_days: String,
}

pub fn load_ground_truth(path: &Path) -> Result<Vec<GroundTruthRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_ground_truth(file, path)
}

pub fn read_ground_truth(reader: impl std::io::Read, path: &Path) -> Result<Vec<GroundTruthRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::parse(path, e))?.clone();
    if headers.iter().ne(GROUND_TRUTH_HEADER) {
        return Err(Error::GroundTruth {
            path: path.into(),
            row: 1,
            reason: format!("expected header `{}`", GROUND_TRUTH_HEADER.join(",")),
        });
    }
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<GroundTruthRow>().enumerate() {
        let line = i + 2;
        let err = |reason: String| Error::GroundTruth {
            path: path.into(),
            row: line,
            reason,
        };
        let row = row.map_err(|e| err(e.to_string()))?;
        let num = |name: &str, v: &str| -> Result<Option<f64>> {
            if v.is_empty() {
                return Ok(None);
            }
            v.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .map(Some)
                .ok_or_else(|| err(format!("{name} `{v}` is not a number")))
        };
        let required = |name: &str, v: String| -> Result<String> {
            if v.is_empty() {
                Err(err(format!("{name} is required")))
            } else {
                Ok(v)
            }
        };
        out.push(GroundTruthRecord {
            clinic: ClinicId::new(&row.clinic).map_err(|e| err(e.to_string()))?,
            patient_id: required("patient_id", row.patient_id)?,
            prescription_date: required("prescription_date", row.prescription_date)?,
            drug_name: required("drug_name", row.drug_name)?,
            drug_name_full: Some(row.drug_name_full).filter(|s| !s.is_empty()),
            total_quantity: num("total_quantity", &row.total_quantity)?,
            daily_quantity: num("daily_quantity", &row.daily_quantity)?,
            refill: num("refill", &row.refill)?,
            duration: num("duration", &row.duration)?,
            moud_days: num("moud_days", &row.moud_days)?,
        });
    }
    Ok(out)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(crate::sig::format_decimal).unwrap_or_default()
}

pub fn write_ground_truth(path: &Path, records: &[GroundTruthRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e))?;
    let io = |e: csv::Error| Error::parse(path, e);
    w.write_record(GROUND_TRUTH_HEADER).map_err(io)?;
    for g in records {
        w.write_record([
            g.clinic.as_str(),
            &g.patient_id,
            &g.prescription_date,
            &g.drug_name,
            g.drug_name_full.as_deref().unwrap_or(""),
            &fmt_opt(g.total_quantity),
            &fmt_opt(g.daily_quantity),
            &fmt_opt(g.refill),
            &fmt_opt(g.duration),
            &fmt_opt(g.moud_days),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
