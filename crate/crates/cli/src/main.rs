use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rxunify::config::RunConfig;
use rxunify::extraction::Backend;
use rxunify::moud::MoudPath;
use rxunify::pipeline::{endpoint_unreachable, run_compute, run_evaluate, run_extract};
use rxunify::synth::{generate, write_corpus, GenSpec};

/// Harmonize clinic prescription exports, compute MOUD days and score
/// extraction against ground truth.
#[derive(Parser, Debug)]
#[command(name = "rxunify", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic corpus with ground truth and a corruption manifest.
    Generate(GenerateArgs),
    /// Extract unified records from raw exports.
    Extract(RunArgs),
    /// Clean extracted records and compute MOUD days.
    Compute(RunArgs),
    /// Score cleaned records against ground truth.
    Evaluate(RunArgs),
    /// Extract, compute and, with ground truth, evaluate.
    Run(RunArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BackendArg {
    Rules,
    Remote,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long, conflicts_with = "corpus")]
    config: Option<PathBuf>,
    /// Generated corpus directory; uses raw/*.csv and ground_truth.csv.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    ground_truth: Option<PathBuf>,
    /// Drug norm table (norms.json layout) to impute from.
    #[arg(long)]
    norms: Option<PathBuf>,
    /// Re-extract invalid remote output with the rule backend.
    #[arg(long)]
    fallback_on_invalid: bool,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Generator settings (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    records_per_clinic: Option<usize>,
    #[arg(long)]
    key_rate: Option<f64>,
    #[arg(long)]
    value_rate: Option<f64>,
    #[arg(long)]
    missing_rate: Option<f64>,
    #[arg(long)]
    mass_unit_rate: Option<f64>,
    #[arg(long)]
    duplicate_rate: Option<f64>,
    #[arg(long)]
    styling_rate: Option<f64>,
}

const EXIT_FATAL: u8 = 1;
const EXIT_UNREACHABLE: u8 = 2;

fn resolve(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match (&args.config, &args.corpus) {
        (Some(path), _) => RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        (None, Some(dir)) => RunConfig::for_corpus(dir)?,
        (None, None) => RunConfig::default(),
    };
    if let Some(b) = args.backend {
        cfg.backend = match b {
            BackendArg::Rules => Backend::Rules,
            BackendArg::Remote => Backend::Remote,
        };
    }
    if let Some(w) = args.workers {
        cfg.workers = w;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    if let Some(gt) = &args.ground_truth {
        cfg.ground_truth = Some(gt.clone());
    }
    if let Some(n) = &args.norms {
        cfg.norms = Some(n.clone());
    }
    cfg.fallback_on_invalid |= args.fallback_on_invalid;
    cfg.remote = cfg.remote.with_env_overrides();
    Ok(cfg)
}

fn load_gen_spec(path: &Path) -> Result<GenSpec> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let mut spec = match &args.config {
        Some(p) => load_gen_spec(p)?,
        None => GenSpec::default(),
    };
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    if let Some(n) = args.records_per_clinic {
        spec.records_per_clinic = n;
    }
    let rates = &mut spec.rates;
    for (flag, slot) in [
        (args.key_rate, &mut rates.key),
        (args.value_rate, &mut rates.value),
        (args.missing_rate, &mut rates.missing),
        (args.mass_unit_rate, &mut rates.mass_unit),
        (args.duplicate_rate, &mut rates.duplicate),
        (args.styling_rate, &mut rates.styling),
    ] {
        if let Some(v) = flag {
            *slot = v;
        }
    }
    let corpus = generate(&spec)?;
    write_corpus(&corpus, &args.out)?;
    let m = &corpus.manifest;
    println!(
        "wrote {} raw rows ({} ground-truth records, {} corruptions) to {}",
        m.raw_records,
        m.ground_truth_records,
        m.corruptions.len(),
        args.out.display()
    );
    println!(
        "expected for a perfect extractor: coverage {:.2}, accuracy {:.2}",
        m.expected_overall.coverage_pct, m.expected_overall.accuracy_pct
    );
    Ok(())
}

fn cmd_extract(cfg: &RunConfig) -> Result<u8> {
    let (outcomes, summary) = run_extract(cfg)?;
    println!("{summary}");
    if cfg.backend == Backend::Remote && endpoint_unreachable(&outcomes) {
        eprintln!("error: endpoint {} unreachable for every record", cfg.remote.endpoint_url);
        return Ok(EXIT_UNREACHABLE);
    }
    Ok(0)
}

fn cmd_compute(cfg: &RunConfig) -> Result<()> {
    let out = run_compute(cfg)?;
    let computable = out.moud.iter().filter(|m| m.path != MoudPath::Uncomputable).count();
    let mutated = out.post.flags.iter().filter(|f| f.mutated).count();
    println!(
        "cleaned {} records; {} flags ({} mutations); {} of {} computable; {} patients",
        out.post.records.len(),
        out.post.flags.len(),
        mutated,
        computable,
        out.moud.len(),
        out.patients.len()
    );
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig) -> Result<()> {
    let (_, table) = run_evaluate(cfg)?;
    print!("{table}");
    Ok(())
}

fn dispatch(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Generate(a) => cmd_generate(&a).map(|_| 0),
        Command::Extract(a) => cmd_extract(&resolve(&a)?),
        Command::Compute(a) => cmd_compute(&resolve(&a)?).map(|_| 0),
        Command::Evaluate(a) => cmd_evaluate(&resolve(&a)?).map(|_| 0),
        Command::Run(a) => {
            let cfg = resolve(&a)?;
            let code = cmd_extract(&cfg)?;
            if code != 0 {
                return Ok(code);
            }
            cmd_compute(&cfg)?;
            if cfg.ground_truth.is_some() {
                cmd_evaluate(&cfg)?;
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_FATAL } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_FATAL)
        }
    }
}
