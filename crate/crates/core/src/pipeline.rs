//! Stage wiring: read raw exports, extract, clean, compute MOUD days and
//! score. Each stage can run in memory or hand off through files in the
//! output directory; both paths produce the same results.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, load_ground_truth, render_report, EvalReport, ScoredOutput};
use crate::extraction::{extract_rules, Backend, ExtractionOutcome, FailureKind, RemoteExtractor, UNREACHABLE};
use crate::moud::{aggregate_patient, compute_moud_days, format_days, MoudResult, PatientCoverage};
use crate::postprocess::{postprocess, CleanRecord, DrugNormTable, PostprocessOutput};
use crate::schema::{ClinicId, FormatRegistry, RawRecord};

pub const OUTCOMES_FILE: &str = "outcomes.jsonl";
pub const CLEANED_FILE: &str = "cleaned.jsonl";
pub const FLAGS_FILE: &str = "flags.jsonl";
pub const MOUD_FILE: &str = "moud.jsonl";
pub const PATIENTS_FILE: &str = "patients.csv";
pub const NORMS_FILE: &str = "norms.json";
pub const REPORT_JSON_FILE: &str = "report.json";
pub const REPORT_TEXT_FILE: &str = "report.txt";

/// Reads one clinic export. Every column is kept as text.
pub fn read_raw_csv(path: &Path, clinic: &ClinicId) -> Result<Vec<RawRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::parse(path, e))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::parse(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::parse(path, e))?;
        let fields = header.iter().cloned().zip(row.iter().map(str::to_string)).collect();
        out.push(RawRecord::new(clinic.clone(), fields).map_err(|e| Error::parse(path, e))?);
    }
    Ok(out)
}

/// Reads every configured input, in clinic order.
pub fn read_inputs(cfg: &RunConfig) -> Result<Vec<(ClinicId, Vec<RawRecord>)>> {
    cfg.inputs
        .iter()
        .map(|(clinic, path)| Ok((clinic.clone(), read_raw_csv(path, clinic)?)))
        .collect()
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

/// Extracts every record. Outcomes are ordered by clinic, then input row.
pub fn extract_corpus(
    inputs: &[(ClinicId, Vec<RawRecord>)],
    registry: &FormatRegistry,
    cfg: &RunConfig,
) -> Result<Vec<ExtractionOutcome>> {
    let mut items = Vec::new();
    for (clinic, records) in inputs {
        let spec = registry.get(clinic)?;
        items.extend(records.iter().enumerate().map(|(row, r)| (r, spec, row)));
    }
    let rules = |items: &[(&RawRecord, _, usize)]| -> Result<Vec<ExtractionOutcome>> {
        pool(cfg.workers)?.install(|| {
            items
                .par_iter()
                .map(|&(r, spec, row)| extract_rules(r, spec, row))
                .collect()
        })
    };
    match cfg.backend {
        Backend::Rules => rules(&items),
        Backend::Remote => {
            let extractor = RemoteExtractor::new(cfg.remote.clone())?;
            let mut outcomes = extractor.extract_batch(items.iter().copied())?;
            if cfg.fallback_on_invalid {
                for (o, &(r, spec, row)) in outcomes.iter_mut().zip(&items) {
                    if matches!(o.failure, Some(FailureKind::SchemaInvalid | FailureKind::EmptyOutput)) {
                        let mut fb = extract_rules(r, spec, row)?;
                        let kind = serde_json::to_value(o.failure).expect("serializable");
                        fb.error = Some(format!(
                            "rule fallback after {}: {}",
                            kind.as_str().unwrap_or_default(),
                            o.error.as_deref().unwrap_or_default()
                        ));
                        fb.raw_response = o.raw_response.take();
                        *o = fb;
                    }
                }
            }
            Ok(outcomes)
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExtractSummary {
    pub total: usize,
    pub succeeded: usize,
    pub failures: BTreeMap<FailureKind, usize>,
    /// Records re-extracted by the rule backend after invalid remote output.
    pub fell_back: usize,
}

impl ExtractSummary {
    pub fn of(outcomes: &[ExtractionOutcome]) -> Self {
        let mut s = ExtractSummary {
            total: outcomes.len(),
            ..Default::default()
        };
        for k in [FailureKind::Transport, FailureKind::SchemaInvalid, FailureKind::EmptyOutput] {
            s.failures.insert(k, 0);
        }
        for o in outcomes {
            match o.failure {
                Some(k) => *s.failures.entry(k).or_default() += 1,
                None => s.succeeded += 1,
            }
            if o.backend == Backend::Rules && o.raw_response.is_some() {
                s.fell_back += 1;
            }
        }
        s
    }
}

impl fmt::Display for ExtractSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "extracted {} of {} records", self.succeeded, self.total)?;
        for (k, n) in &self.failures {
            let name = serde_json::to_value(k).expect("serializable");
            write!(f, "; {}={}", name.as_str().unwrap_or_default(), n)?;
        }
        if self.fell_back > 0 {
            write!(f, "; rule_fallback={}", self.fell_back)?;
        }
        Ok(())
    }
}

/// True when there was at least one record and no request reached the
/// endpoint.
pub fn endpoint_unreachable(outcomes: &[ExtractionOutcome]) -> bool {
    !outcomes.is_empty()
        && outcomes.iter().all(|o| {
            o.failure == Some(FailureKind::Transport) && o.error.as_deref().is_some_and(|e| e.starts_with(UNREACHABLE))
        })
}

/// Successful outcomes as cleaning input; ids are outcome positions.
pub fn clean_inputs(outcomes: &[ExtractionOutcome]) -> Vec<CleanRecord> {
    outcomes
        .iter()
        .enumerate()
        .filter_map(|(id, o)| {
            o.record.as_ref().map(|r| CleanRecord {
                id,
                clinic: o.clinic.clone(),
                row: o.row,
                record: r.clone(),
                daily_unit: o.daily_unit.clone(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComputeOutput {
    pub post: PostprocessOutput,
    /// One result per cleaned record, in the same order.
    pub moud: Vec<MoudResult>,
    pub patients: Vec<PatientCoverage>,
}

/// Cleans the successful outcomes and computes MOUD days.
pub fn compute(outcomes: &[ExtractionOutcome], cfg: &RunConfig) -> Result<ComputeOutput> {
    let norms = cfg.norms.as_deref().map(load_norms).transpose()?;
    let post = pool(cfg.workers)?.install(|| postprocess(clean_inputs(outcomes), &cfg.postprocess, norms.as_ref()));
    let moud: Vec<MoudResult> = post.records.iter().map(|c| compute_moud_days(c.id, &c.record)).collect();
    let patients = aggregate_patient(&moud);
    Ok(ComputeOutput { post, moud, patients })
}

pub fn load_norms(path: &Path) -> Result<DrugNormTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e))
}

pub fn scored_outputs(records: &[CleanRecord], moud: &[MoudResult]) -> Vec<ScoredOutput> {
    let days: HashMap<usize, Option<f64>> = moud.iter().map(|m| (m.id, m.moud_days)).collect();
    records
        .iter()
        .map(|c| ScoredOutput {
            clinic: c.clinic.clone(),
            record: c.record.clone(),
            moud_days: days.get(&c.id).copied().flatten(),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineRun {
    pub outcomes: Vec<ExtractionOutcome>,
    pub computed: ComputeOutput,
    pub report: Option<EvalReport>,
}

/// All stages in memory, without touching the output directory.
pub fn run_in_memory(cfg: &RunConfig) -> Result<PipelineRun> {
    cfg.validate()?;
    let registry = cfg.registry()?;
    let outcomes = extract_corpus(&read_inputs(cfg)?, &registry, cfg)?;
    let computed = compute(&outcomes, cfg)?;
    let report = match &cfg.ground_truth {
        Some(path) => {
            let gt = load_ground_truth(path)?;
            Some(evaluate(&gt, &scored_outputs(&computed.post.records, &computed.moud), &cfg.eval))
        }
        None => None,
    };
    Ok(PipelineRun {
        outcomes,
        computed,
        report,
    })
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).expect("serializable");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::parse(path, format!("line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Extract stage: writes `outcomes.jsonl` and the resolved config.
pub fn run_extract(cfg: &RunConfig) -> Result<(Vec<ExtractionOutcome>, ExtractSummary)> {
    cfg.validate()?;
    let registry = cfg.registry()?;
    let inputs = read_inputs(cfg)?;
    cfg.write_resolved()?;
    let outcomes = extract_corpus(&inputs, &registry, cfg)?;
    write_jsonl(&cfg.out_dir.join(OUTCOMES_FILE), &outcomes)?;
    let summary = ExtractSummary::of(&outcomes);
    Ok((outcomes, summary))
}

/// Compute stage: reads `outcomes.jsonl`, writes the cleaned corpus, flags,
/// MOUD results, patient totals and drug norms.
pub fn run_compute(cfg: &RunConfig) -> Result<ComputeOutput> {
    cfg.validate()?;
    let outcomes: Vec<ExtractionOutcome> = read_jsonl(&cfg.out_dir.join(OUTCOMES_FILE))?;
    cfg.write_resolved()?;
    let out = compute(&outcomes, cfg)?;
    let dir = &cfg.out_dir;
    write_jsonl(&dir.join(CLEANED_FILE), &out.post.records)?;
    write_jsonl(&dir.join(FLAGS_FILE), &out.post.flags)?;
    write_jsonl(&dir.join(MOUD_FILE), &out.moud)?;
    let norms = serde_json::to_string_pretty(&out.post.norms).expect("serializable");
    write_text(&dir.join(NORMS_FILE), &(norms + "\n"))?;
    let mut csv = String::from("patient_id,total_moud_days,record_count,uncomputable_count\n");
    for p in &out.patients {
        let id = if p.patient_id.contains([',', '"', '\n']) {
            format!("\"{}\"", p.patient_id.replace('"', "\"\""))
        } else {
            p.patient_id.clone()
        };
        csv.push_str(&format!(
            "{id},{},{},{}\n",
            format_days(p.total_moud_days),
            p.record_count,
            p.uncomputable_count
        ));
    }
    write_text(&dir.join(PATIENTS_FILE), &csv)?;
    Ok(out)
}

/// Evaluate stage: scores `cleaned.jsonl` and `moud.jsonl` against the
/// configured ground truth; writes the report as JSON and text.
pub fn run_evaluate(cfg: &RunConfig) -> Result<(EvalReport, String)> {
    cfg.validate()?;
    let gt_path = cfg
        .ground_truth
        .as_ref()
        .ok_or_else(|| Error::Config("evaluation needs a ground-truth path (--ground-truth)".into()))?;
    let gt = load_ground_truth(gt_path)?;
    let records: Vec<CleanRecord> = read_jsonl(&cfg.out_dir.join(CLEANED_FILE))?;
    let moud: Vec<MoudResult> = read_jsonl(&cfg.out_dir.join(MOUD_FILE))?;
    cfg.write_resolved()?;
    let report = evaluate(&gt, &scored_outputs(&records, &moud), &cfg.eval);
    let (json, table) = render_report(&report);
    write_text(&cfg.out_dir.join(REPORT_JSON_FILE), &(json + "\n"))?;
    write_text(&cfg.out_dir.join(REPORT_TEXT_FILE), &table)?;
    Ok((report, table))
}
