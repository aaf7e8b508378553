//! Command-line front end for the survey-robustness pipeline.
//!
//! Subcommands mirror the pipeline stages: `perturb` (condition generation),
//! `interview` (run every cell of a plan), `resume` (finish an interrupted
//! run), `extract` (classify raw replies), `analyze` (bias metrics),
//! `report` (report files), plus `oracle`, a self-check that runs the whole
//! pipeline against a synthetic respondent with a known bias profile and
//! asserts the detectors see what the profile implies.
//!
//! Exit codes: 0 on success, 1 on any stage error, failed transport cells,
//! missing provider capability, or violated oracle assertion; 2 when
//! `oracle` finds no applicable assertion in the profile. Credentials are
//! only ever read from the environment variables named in endpoint configs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use likertlab_core::analytics::{self, AnalysisReport, DEFAULT_SMOOTHING_ALPHA};
use likertlab_core::backend::BiasProfile;
use likertlab_core::chat::EndpointConfig;
use likertlab_core::extract::classify_run;
use likertlab_core::perturb::{
    generate_conditions, FixtureProvider, HttpTextProvider, StubProvider, TextProvider,
    TypoSettings,
};
use likertlab_core::runner::journal::{write_jsonl, ConditionRecord};
use likertlab_core::runner::{
    load_plan, render_prompt, resume_experiment, run_experiment, BackendConfig, RunSummary,
};
use likertlab_core::survey::load_questionnaire;
use likertlab_core::{ExperimentPlan, PerturbationKind, RunOptions};

#[derive(Parser)]
#[command(
    name = "likertlab",
    version,
    about = "Measure robustness and response biases of closed-ended survey answers \
             from language-model respondents"
)]
struct Cli {
    /// Seed override applied to the loaded plan or questionnaire run.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Experiment plan file (used by `interview` and `oracle`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output path: run directory, or the dump file for `perturb`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Format for command summaries printed to stdout.
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    format: Format,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the full perturbed condition set for a questionnaire and
    /// write an auditable dump with rendered prompts.
    Perturb {
        /// Questionnaire file.
        questionnaire: PathBuf,
        /// Text provider: stub | table1 | fixture:<path> | http:<config-path>.
        #[arg(long, default_value = "stub")]
        provider: String,
    },
    /// Run every interview cell of a plan into a fresh run directory.
    Interview {
        /// Text provider for condition generation.
        #[arg(long, default_value = "stub")]
        provider: String,
        /// Worker threads (default: available parallelism, capped at 8).
        #[arg(long)]
        max_workers: Option<usize>,
    },
    /// Re-execute the missing or transport-failed cells of a run directory.
    Resume {
        run_dir: PathBuf,
        #[arg(long)]
        max_workers: Option<usize>,
    },
    /// Classify the raw replies of a run into valid labels, refusals, and
    /// invalid answers.
    Extract { run_dir: PathBuf },
    /// Compute per-cell robustness and bias metrics for a classified run.
    Analyze {
        run_dir: PathBuf,
        /// Smoothing pseudo-count added per category for KL divergence.
        #[arg(long, default_value_t = DEFAULT_SMOOTHING_ALPHA)]
        alpha: f64,
    },
    /// Render the report files: wide per-cell table, metric matrices, and
    /// the plain-text summary.
    Report { run_dir: PathBuf },
    /// Run the pipeline against a synthetic respondent with the given bias
    /// profile and assert that the detectors report the implied effects.
    Oracle {
        /// Bias profile file.
        profile: PathBuf,
        /// Independent replications, each with its own seed.
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        /// Repetitions per cell (default: the plan's).
        #[arg(long)]
        reps: Option<u32>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(error) => {
            eprintln!("error: {error:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let Cli {
        seed,
        config,
        out,
        format,
        command,
    } = cli;
    match command {
        Command::Perturb {
            questionnaire,
            provider,
        } => cmd_perturb(
            &questionnaire,
            &provider,
            seed.unwrap_or(0),
            out.as_deref(),
            format,
        ),
        Command::Interview {
            provider,
            max_workers,
        } => cmd_interview(
            config.as_deref(),
            out.as_deref(),
            seed,
            &provider,
            max_workers,
            format,
        ),
        Command::Resume {
            run_dir,
            max_workers,
        } => cmd_resume(&run_dir, max_workers, format),
        Command::Extract { run_dir } => cmd_extract(&run_dir, format),
        Command::Analyze { run_dir, alpha } => cmd_analyze(&run_dir, alpha, format),
        Command::Report { run_dir } => cmd_report(&run_dir, format),
        Command::Oracle {
            profile,
            seeds,
            reps,
        } => cmd_oracle(
            &profile,
            config.as_deref(),
            out.as_deref(),
            seed,
            seeds,
            reps,
            format,
        ),
    }
}

// ---------------------------------------------------------------------------
// Providers
// ---------------------------------------------------------------------------

/// Builds a text provider from its command-line spec.
fn build_provider(spec: &str) -> Result<Box<dyn TextProvider>> {
    if spec == "stub" {
        return Ok(Box::new(StubProvider));
    }
    if spec == "table1" {
        return Ok(Box::new(FixtureProvider::table_one()));
    }
    if let Some(path) = spec.strip_prefix("fixture:") {
        let provider = FixtureProvider::from_file(path)
            .with_context(|| format!("loading provider table {path}"))?;
        return Ok(Box::new(provider));
    }
    if let Some(path) = spec.strip_prefix("http:") {
        let raw = std::fs::read_to_string(path)
            .with_context(|| format!("reading endpoint config {path}"))?;
        let endpoint: EndpointConfig = serde_json::from_str(&raw)
            .with_context(|| format!("parsing endpoint config {path}"))?;
        let provider = HttpTextProvider::new(format!("http:{path}"), endpoint)
            .context("initializing HTTP text provider")?;
        return Ok(Box::new(provider));
    }
    anyhow::bail!(
        "unknown provider {spec:?}; expected stub, table1, fixture:<path>, or http:<config-path>"
    );
}

// ---------------------------------------------------------------------------
// perturb
// ---------------------------------------------------------------------------

fn cmd_perturb(
    questionnaire_path: &Path,
    provider_spec: &str,
    seed: u64,
    out: Option<&Path>,
    format: Format,
) -> Result<ExitCode> {
    let out = out.unwrap_or_else(|| Path::new("conditions.jsonl"));
    let questionnaire = load_questionnaire(questionnaire_path)
        .with_context(|| format!("loading questionnaire {}", questionnaire_path.display()))?;
    let provider = build_provider(provider_spec)?;

    let mut records: Vec<ConditionRecord> = Vec::new();
    let mut skipped = Vec::new();
    for qa in &questionnaire.qa_pairs {
        let generated = generate_conditions(qa, provider.as_ref(), seed, &TypoSettings::default());
        for condition in generated.conditions {
            let rendered_prompt = render_prompt(&condition);
            records.push(ConditionRecord {
                condition,
                rendered_prompt,
            });
        }
        skipped.extend(generated.skipped);
    }
    write_jsonl(out, &records).context("writing condition dump")?;

    let mut per_kind: BTreeMap<String, u64> = BTreeMap::new();
    for record in &records {
        *per_kind
            .entry(record.condition.kind.to_string())
            .or_insert(0) += 1;
    }

    match format {
        Format::Text => {
            println!(
                "wrote {} conditions for {} questions to {}",
                records.len(),
                questionnaire.qa_pairs.len(),
                out.display()
            );
            for kind in PerturbationKind::ALL {
                if let Some(count) = per_kind.get(&kind.to_string()) {
                    println!("  {kind}: {count}");
                }
            }
            if !skipped.is_empty() {
                println!("skipped: {}", skipped.len());
                for skip in &skipped {
                    println!("  {} {}: {}", skip.question_id, skip.kind, skip.reason);
                }
            }
        }
        Format::Json => {
            let value = serde_json::json!({
                "out": out.display().to_string(),
                "questions": questionnaire.qa_pairs.len(),
                "conditions": records.len(),
                "per_kind": per_kind,
                "skipped": skipped,
            });
            println!("{}", serde_json::to_string_pretty(&value)?);
        }
    }

    let missing: Vec<_> = skipped.iter().filter(|skip| skip.provider_caused).collect();
    if !missing.is_empty() {
        for skip in &missing {
            eprintln!(
                "error: provider {provider_spec:?} cannot generate {} for question {}: {}",
                skip.kind, skip.question_id, skip.reason
            );
        }
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// interview / resume
// ---------------------------------------------------------------------------

fn print_run_summary(summary: &RunSummary, format: Format) -> Result<()> {
    match format {
        Format::Text => {
            println!("run directory: {}", summary.run_dir.display());
            println!(
                "conditions: {} (skipped {})",
                summary.conditions, summary.skipped_conditions
            );
            println!(
                "cells: {} (executed {}, completed {}, transport failed {})",
                summary.cells_total, summary.executed, summary.completed, summary.transport_failed
            );
        }
        Format::Json => println!("{}", serde_json::to_string_pretty(summary)?),
    }
    Ok(())
}

/// Shared exit rule for interview and resume: transport failures leave the
/// run incomplete, which callers must see in the exit code.
fn run_exit(summary: &RunSummary) -> ExitCode {
    if summary.transport_failed > 0 {
        eprintln!(
            "error: {} cells failed at the transport level; rerun `resume` once the \
             backend is reachable",
            summary.transport_failed
        );
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn cmd_interview(
    config: Option<&Path>,
    out: Option<&Path>,
    seed: Option<u64>,
    provider_spec: &str,
    max_workers: Option<usize>,
    format: Format,
) -> Result<ExitCode> {
    let config = config.context("interview needs --config <plan.json>")?;
    let out = out.context("interview needs --out <run-dir>")?;
    let mut plan =
        load_plan(config).with_context(|| format!("loading plan {}", config.display()))?;
    if let Some(seed) = seed {
        plan.seed = seed;
    }
    let provider = build_provider(provider_spec)?;
    let options = RunOptions { max_workers };
    let summary = run_experiment(&plan, provider.as_ref(), out, &options)?;
    print_run_summary(&summary, format)?;
    Ok(run_exit(&summary))
}

fn cmd_resume(run_dir: &Path, max_workers: Option<usize>, format: Format) -> Result<ExitCode> {
    let options = RunOptions { max_workers };
    let summary = resume_experiment(run_dir, &options)?;
    print_run_summary(&summary, format)?;
    Ok(run_exit(&summary))
}

// ---------------------------------------------------------------------------
// extract / analyze / report
// ---------------------------------------------------------------------------

fn cmd_extract(run_dir: &Path, format: Format) -> Result<ExitCode> {
    let summary = classify_run(run_dir)?;
    match format {
        Format::Text => {
            println!(
                "classified {} interviews: {} valid, {} refusals, {} invalid",
                summary.total, summary.valid, summary.refusal, summary.invalid
            );
        }
        Format::Json => println!("{}", serde_json::to_string_pretty(&summary)?),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_analyze(run_dir: &Path, alpha: f64, format: Format) -> Result<ExitCode> {
    let report = analytics::analyze_run_to_files(run_dir, alpha)?;
    match format {
        Format::Text => {
            println!(
                "analyzed {} cells (smoothing alpha {}) into {}",
                report.rows.len(),
                report.smoothing_alpha,
                run_dir.join("reports.json").display()
            );
        }
        Format::Json => {
            let value = serde_json::json!({
                "rows": report.rows.len(),
                "smoothing_alpha": report.smoothing_alpha,
                "reports_json": run_dir.join("reports.json").display().to_string(),
            });
            println!("{}", serde_json::to_string_pretty(&value)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_report(run_dir: &Path, format: Format) -> Result<ExitCode> {
    let files = analytics::report::write_report_files(run_dir)?;
    match format {
        Format::Text => {
            for file in &files.files {
                println!("wrote {}", file.display());
            }
            // The plain-text summary is the human entry point; echo it.
            let summary_txt = run_dir.join("reports").join("summary.txt");
            if let Ok(text) = std::fs::read_to_string(&summary_txt) {
                println!();
                print!("{text}");
            }
        }
        Format::Json => {
            let value = serde_json::json!({
                "files": files
                    .files
                    .iter()
                    .map(|f| f.display().to_string())
                    .collect::<Vec<_>>(),
            });
            println!("{}", serde_json::to_string_pretty(&value)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// oracle
// ---------------------------------------------------------------------------

struct OracleAssertion {
    name: &'static str,
    passed: bool,
    detail: String,
}

fn cmd_oracle(
    profile_path: &Path,
    config: Option<&Path>,
    out: Option<&Path>,
    seed: Option<u64>,
    seeds: u64,
    reps: Option<u32>,
    format: Format,
) -> Result<ExitCode> {
    let config = config.context("oracle needs --config <plan.json>")?;
    let base_plan =
        load_plan(config).with_context(|| format!("loading plan {}", config.display()))?;
    let raw = std::fs::read_to_string(profile_path)
        .with_context(|| format!("reading profile {}", profile_path.display()))?;
    let profile: BiasProfile = serde_json::from_str(&raw)
        .with_context(|| format!("parsing profile {}", profile_path.display()))?;
    profile.validate()?;
    anyhow::ensure!(seeds >= 1, "--seeds must be at least 1");

    // Which detector assertions does this profile imply?
    let assert_recency = profile.recency_weight > 0.0;
    let assert_center = profile.center_pull > 0.0;
    let assert_robust = profile.softmax_temperature == 0.0;
    if !(assert_recency || assert_center || assert_robust) {
        let message = "profile implies no detector assertion (needs recency_weight > 0, \
                       center_pull > 0, or softmax_temperature == 0)";
        match format {
            Format::Text => println!("{message}"),
            Format::Json => println!(
                "{}",
                serde_json::to_string_pretty(&serde_json::json!({
                    "profile": profile_path.display().to_string(),
                    "assertions": [],
                    "message": message,
                }))?
            ),
        }
        return Ok(ExitCode::from(2));
    }

    let mut kinds = vec![PerturbationKind::Original];
    if assert_recency || assert_robust {
        kinds.push(PerturbationKind::ResponseOrder);
    }
    if assert_center {
        kinds.push(PerturbationKind::OddScale);
    }

    // Keep run directories when the caller names an output root; otherwise
    // work in a scratch directory that is cleaned up on exit.
    let scratch;
    let root: PathBuf = match out {
        Some(dir) => dir.to_path_buf(),
        None => {
            scratch = tempfile::tempdir().context("creating scratch directory")?;
            scratch.path().to_path_buf()
        }
    };

    let base_seed = seed.unwrap_or(base_plan.seed);
    let reps = reps.unwrap_or(base_plan.repetitions);

    let mut freq_first = Vec::new();
    let mut freq_last = Vec::new();
    let mut center_shifts = Vec::new();
    let mut reversal_cells = 0u64;
    let mut reversal_robust = 0u64;

    for replication in 0..seeds {
        let plan = ExperimentPlan {
            questionnaire: base_plan.questionnaire.clone(),
            backends: vec![BackendConfig::Synthetic {
                name: "oracle-respondent".to_string(),
                profile: profile.clone(),
                seed: None,
            }],
            repetitions: reps,
            seed: base_seed.wrapping_add(replication),
            generation: base_plan.generation.clone(),
            enabled_kinds: kinds.clone(),
            typo: base_plan.typo.clone(),
        };
        let run_dir = root.join(format!("oracle-seed-{replication}"));
        run_experiment(&plan, &StubProvider, &run_dir, &RunOptions::default())?;
        classify_run(&run_dir)?;
        let report = analytics::analyze_run_to_files(&run_dir, DEFAULT_SMOOTHING_ALPHA)?;
        collect_oracle_observations(
            &report,
            &mut freq_first,
            &mut freq_last,
            &mut center_shifts,
            &mut reversal_cells,
            &mut reversal_robust,
        );
    }

    let mut assertions = Vec::new();
    if assert_recency {
        assertions.push(assert_recency_sign(&freq_first, &freq_last));
    }
    if assert_center {
        assertions.push(assert_center_sign(&center_shifts));
    }
    if assert_robust {
        assertions.push(assert_reversal_robustness(reversal_robust, reversal_cells));
    }

    let failed = assertions.iter().filter(|a| !a.passed).count();
    match format {
        Format::Text => {
            for assertion in &assertions {
                let verdict = if assertion.passed { "PASS" } else { "FAIL" };
                println!(
                    "[oracle] {} ... {verdict}: {}",
                    assertion.name, assertion.detail
                );
            }
            println!(
                "{} of {} assertions passed ({} seeds x {} repetitions)",
                assertions.len() - failed,
                assertions.len(),
                seeds,
                reps
            );
        }
        Format::Json => {
            let value = serde_json::json!({
                "profile": profile_path.display().to_string(),
                "seeds": seeds,
                "repetitions": reps,
                "assertions": assertions
                    .iter()
                    .map(|a| serde_json::json!({
                        "name": a.name,
                        "passed": a.passed,
                        "detail": a.detail,
                    }))
                    .collect::<Vec<_>>(),
            });
            println!("{}", serde_json::to_string_pretty(&value)?);
        }
    }
    Ok(if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

/// Pulls the observations the oracle assertions need out of one replication's
/// analysis report.
fn collect_oracle_observations(
    report: &AnalysisReport,
    freq_first: &mut Vec<f64>,
    freq_last: &mut Vec<f64>,
    center_shifts: &mut Vec<f64>,
    reversal_cells: &mut u64,
    reversal_robust: &mut u64,
) {
    for pooled in &report.pooled_recency {
        freq_first.push(pooled.freq_first);
        freq_last.push(pooled.freq_last);
    }
    for row in &report.rows {
        if row.kind == PerturbationKind::OddScale {
            if let Some(shift) = row.center_shift {
                center_shifts.push(shift);
            }
        }
        if row.kind == PerturbationKind::ResponseOrder && !row.degenerate {
            *reversal_cells += 1;
            if row.fully_robust {
                *reversal_robust += 1;
            }
        }
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn assert_recency_sign(freq_first: &[f64], freq_last: &[f64]) -> OracleAssertion {
    if freq_first.is_empty() || freq_last.is_empty() {
        return OracleAssertion {
            name: "recency sign (freq_last > freq_first)",
            passed: false,
            detail: "no reversal cells produced recency measurements".to_string(),
        };
    }
    let first = mean(freq_first);
    let last = mean(freq_last);
    OracleAssertion {
        name: "recency sign (freq_last > freq_first)",
        passed: last > first,
        detail: format!("pooled freq_first {first:.4}, freq_last {last:.4}"),
    }
}

fn assert_center_sign(shifts: &[f64]) -> OracleAssertion {
    let name = "center-shift sign (mean ≤ 0 within noise)";
    if shifts.is_empty() {
        return OracleAssertion {
            name,
            passed: false,
            detail: "no odd-scale cells produced center-shift measurements".to_string(),
        };
    }
    let m = mean(shifts);
    if shifts.len() == 1 {
        return OracleAssertion {
            name,
            passed: m <= 0.0,
            detail: format!("single shift {m:.4}"),
        };
    }
    let n = shifts.len() as f64;
    let var = shifts.iter().map(|s| (s - m).powi(2)).sum::<f64>() / (n - 1.0);
    let sem = (var / n).sqrt();
    OracleAssertion {
        name,
        passed: m <= 3.0 * sem,
        detail: format!(
            "mean shift {m:.4} over {} cells (sem {sem:.4})",
            shifts.len()
        ),
    }
}

fn assert_reversal_robustness(robust: u64, cells: u64) -> OracleAssertion {
    let name = "reversal robustness (robust share == 1)";
    if cells == 0 {
        return OracleAssertion {
            name,
            passed: false,
            detail: "no non-degenerate reversal cells".to_string(),
        };
    }
    OracleAssertion {
        name,
        passed: robust == cells,
        detail: format!("{robust}/{cells} reversal cells fully robust"),
    }
}
