//! `corrmeta` command-line interface.
//!
//! Exit codes: 0 success, 1 validation failure (including bad usage),
//! 2 analysis error, 3 comparison failure.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use corrmeta::bias::NfsVariant;
use corrmeta::compare::{self, compare, render_diff};
use corrmeta::dataset::{CodedDataset, FactorMapping};
use corrmeta::fixture;
use corrmeta::report::{self, AnalysisConfig, Format, ModelChoice};
use corrmeta::Factor;

const EXIT_VALIDATION: u8 = 1;
const EXIT_ANALYSIS: u8 = 2;
const EXIT_COMPARISON: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "corrmeta", version, about = "Random-effects meta-analysis of correlations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse and validate the dataset; print per-row diagnostics.
    Validate(InputArgs),
    /// Run the full analysis and write report artifacts.
    Analyze(AnalyzeArgs),
    /// Compare computed cells with a reference table.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
struct InputArgs {
    /// Dataset CSV (defaults to the bundled dataset).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Factor mapping table (defaults to the bundled mapping).
    #[arg(long)]
    mapping: Option<PathBuf>,
    /// Drop factors with fewer effects than this.
    #[arg(long, default_value_t = 3)]
    min_k: usize,
}

#[derive(Debug, Args)]
struct AnalysisArgs {
    #[command(flatten)]
    input: InputArgs,
    /// auto applies random effects when Q is significant at 0.05.
    #[arg(long, default_value = "auto")]
    model: ModelChoice,
    /// Critical value for the fail-safe N.
    #[arg(long, default_value = "two_tailed_196")]
    nfs_variant: NfsVariant,
    /// Analyse only these factors (repeatable or comma-separated).
    #[arg(long, value_delimiter = ',')]
    factor: Vec<Factor>,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    analysis: AnalysisArgs,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Report formats: json, csv, md.
    #[arg(long, value_delimiter = ',', default_value = "json,csv,md")]
    formats: Vec<Format>,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[command(flatten)]
    analysis: AnalysisArgs,
    /// Reference CSV (defaults to the bundled reference).
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Count known-discrepancy cells toward the verdict.
    #[arg(long)]
    include_known: bool,
}

fn load(input: &InputArgs) -> Result<CodedDataset, String> {
    let mapping = match &input.mapping {
        Some(path) => FactorMapping::from_path(path).map_err(|e| e.to_string())?,
        None => FactorMapping::standard(),
    };
    let ds = match &input.data {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| format!("cannot read dataset {}: {e}", path.display()))?;
            CodedDataset::parse_str(&text, mapping)
        }
        None => CodedDataset::parse_str(fixture::DATASET_CSV, mapping),
    }
    .map_err(|e| e.to_string())?;
    Ok(ds.with_min_k(input.min_k))
}

fn config(args: &AnalysisArgs) -> AnalysisConfig {
    AnalysisConfig {
        min_k: args.input.min_k,
        model: args.model,
        nfs_variant: args.nfs_variant,
        factors: (!args.factor.is_empty()).then(|| args.factor.iter().copied().collect()),
        ..AnalysisConfig::default()
    }
}

fn validate(args: &InputArgs) -> ExitCode {
    let ds = match load(args) {
        Ok(ds) => ds.apply_mapping(),
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(EXIT_VALIDATION);
        }
    };
    let ex = ds.exclusions();
    for u in &ex.unmapped {
        eprintln!(
            "warning: unmapped raw factor `{}` ({} effects) excluded",
            u.raw_factor, u.occurrences
        );
    }
    for d in &ex.dropped_factors {
        eprintln!("warning: {} dropped: k = {} < min_k = {}", d.factor, d.k, d.min_k);
    }
    let groups = ds.group_by_factor();
    let effects: usize = groups.values().map(|g| g.k()).sum();
    println!("{effects} effects, {} factors", groups.len());
    ExitCode::SUCCESS
}

fn analyze(args: &AnalyzeArgs) -> ExitCode {
    let ds = match load(&args.analysis.input) {
        Ok(ds) => ds,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(EXIT_VALIDATION);
        }
    };
    let report = match report::run_pipeline(&ds, &config(&args.analysis)) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("analysis failed: {e}");
            return ExitCode::from(EXIT_ANALYSIS);
        }
    };
    let formats: BTreeSet<Format> = args.formats.iter().copied().collect();
    match report::write_artifacts(&report, &args.out, &formats) {
        Ok(paths) => {
            print!("{}", report::render_summary(&report));
            for p in paths {
                log::info!("wrote {}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(EXIT_ANALYSIS)
        }
    }
}

fn run_compare(args: &CompareArgs) -> ExitCode {
    let ds = match load(&args.analysis.input) {
        Ok(ds) => ds,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(EXIT_VALIDATION);
        }
    };
    let reference = match &args.reference {
        Some(path) => compare::load_reference(path),
        None => compare::parse_reference(fixture::REFERENCE_CSV),
    };
    let reference = match reference {
        Ok(r) => r,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(EXIT_COMPARISON);
        }
    };
    let report = match report::run_pipeline(&ds, &config(&args.analysis)) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("analysis failed: {e}");
            return ExitCode::from(EXIT_ANALYSIS);
        }
    };
    let cmp = compare(&report, &reference, args.include_known);
    print!("{}", render_diff(&cmp));
    if cmp.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_COMPARISON)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_VALIDATION)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match &cli.command {
        Command::Validate(args) => validate(args),
        Command::Analyze(args) => analyze(args),
        Command::Compare(args) => run_compare(args),
    }
}
