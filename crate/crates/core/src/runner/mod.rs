//! Experiment orchestration: resolves a plan file, generates and persists
//! the condition set, renders prompts, executes the full factorial of
//! (backend × question × condition × repetition) cells across worker threads,
//! and supports resuming an interrupted run without re-executing completed
//! cells.

pub mod journal;

use std::collections::BTreeSet;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Mutex};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::scripted::ScriptError;
use crate::backend::synthetic::ProfileError;
use crate::backend::{
    BackendError, BiasProfile, GenerationParams, HttpBackend, InterviewRequest, RespondentBackend,
    ScriptedBackend, SyntheticRespondent,
};
use crate::chat::EndpointConfig;
use crate::perturb::provider::TextProvider;
use crate::perturb::{
    generate_conditions, PerturbationKind, PerturbedCondition, SkippedCondition, TypoSettings,
};
use crate::survey::{load_questionnaire, Questionnaire, SurveyError};
use crate::util::{derive_seed, sha256_hex};
use journal::{
    latest_by_cell, read_jsonl, write_jsonl, write_line, ConditionRecord, InterviewRecord,
    InterviewStatus, JournalError,
};

// ---------------------------------------------------------------------------
// Plans
// ---------------------------------------------------------------------------

/// One respondent backend as configured in a plan file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendConfig {
    /// Bias-parameterized sampler with a profile and an optional explicit
    /// seed (derived from the plan seed and backend name when omitted).
    Synthetic {
        name: String,
        profile: BiasProfile,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    /// Replay of canned responses keyed by prompt digest.
    Scripted { name: String, script_path: PathBuf },
    /// Live chat-completions endpoint. Credentials come from the environment
    /// variable named in the endpoint config; they are never stored in plans.
    Http {
        name: String,
        endpoint: EndpointConfig,
    },
}

impl BackendConfig {
    pub fn name(&self) -> &str {
        match self {
            BackendConfig::Synthetic { name, .. } => name,
            BackendConfig::Scripted { name, .. } => name,
            BackendConfig::Http { name, .. } => name,
        }
    }
}

/// Plan file as written by hand: the questionnaire is referenced by path
/// (relative paths resolve against the plan file's directory).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanSpec {
    pub questionnaire: PathBuf,
    pub backends: Vec<BackendConfig>,
    pub repetitions: u32,
    pub seed: u64,
    #[serde(default)]
    pub generation: GenerationParams,
    /// Conditions to run; defaults to every kind.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enabled_kinds: Option<Vec<PerturbationKind>>,
    #[serde(default)]
    pub typo: TypoSettings,
}

/// Fully resolved plan: questionnaire inlined, defaults applied. This is
/// what gets persisted into a run directory, so a resume never depends on
/// files outside the run directory except backend scripts and credentials.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub questionnaire: Questionnaire,
    pub backends: Vec<BackendConfig>,
    pub repetitions: u32,
    pub seed: u64,
    #[serde(default)]
    pub generation: GenerationParams,
    pub enabled_kinds: Vec<PerturbationKind>,
    #[serde(default)]
    pub typo: TypoSettings,
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("failed to access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid plan: {message}")]
    Plan { message: String },
    #[error(transparent)]
    Survey(#[from] SurveyError),
    #[error(transparent)]
    Journal(#[from] JournalError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Script(#[from] ScriptError),
    #[error("backend {backend}: {message}")]
    Backend { backend: String, message: String },
    #[error("run directory {path} already contains an interview log; use resume instead")]
    RunDirExists { path: String },
    #[error("run directory is missing {path}")]
    MissingFile { path: String },
    #[error("cell count mismatch: expected {expected}, log holds {actual}")]
    CountMismatch { expected: u64, actual: u64 },
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<(), RunError> {
        if self.repetitions == 0 {
            return Err(RunError::Plan {
                message: "repetitions must be at least 1".to_string(),
            });
        }
        if self.backends.is_empty() {
            return Err(RunError::Plan {
                message: "at least one backend is required".to_string(),
            });
        }
        if self.enabled_kinds.is_empty() {
            return Err(RunError::Plan {
                message: "enabled_kinds must not be empty".to_string(),
            });
        }
        let mut names = BTreeSet::new();
        for backend in &self.backends {
            if backend.name().is_empty() {
                return Err(RunError::Plan {
                    message: "backend names must be non-empty".to_string(),
                });
            }
            if !names.insert(backend.name()) {
                return Err(RunError::Plan {
                    message: format!("duplicate backend name {:?}", backend.name()),
                });
            }
            if let BackendConfig::Synthetic { profile, .. } = backend {
                profile.validate()?;
            }
        }
        let mut kinds = BTreeSet::new();
        for kind in &self.enabled_kinds {
            if !kinds.insert(*kind) {
                return Err(RunError::Plan {
                    message: format!("duplicate enabled kind {kind}"),
                });
            }
        }
        self.generation.validate().map_err(|error| RunError::Plan {
            message: error.to_string(),
        })?;
        Ok(())
    }

    /// Stable content hash of the resolved plan, recorded in manifests so a
    /// run directory can be matched to the plan that produced it.
    pub fn sha256(&self) -> String {
        let canonical = serde_json::to_string(self).expect("plan serialization cannot fail");
        sha256_hex(canonical.as_bytes())
    }
}

/// Loads a plan file and resolves it: questionnaire inlined, relative paths
/// resolved against the plan file's directory, defaults applied, validated.
pub fn load_plan(path: &Path) -> Result<ExperimentPlan, RunError> {
    let display = path.display().to_string();
    let raw = std::fs::read_to_string(path).map_err(|source| RunError::Io {
        path: display.clone(),
        source,
    })?;
    let spec: PlanSpec = serde_json::from_str(&raw).map_err(|source| RunError::Json {
        path: display,
        source,
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let questionnaire_path = resolve_path(base, &spec.questionnaire);
    let questionnaire = load_questionnaire(&questionnaire_path)?;
    let backends = spec
        .backends
        .into_iter()
        .map(|backend| match backend {
            BackendConfig::Scripted { name, script_path } => BackendConfig::Scripted {
                name,
                script_path: resolve_path(base, &script_path),
            },
            other => other,
        })
        .collect();
    let plan = ExperimentPlan {
        questionnaire,
        backends,
        repetitions: spec.repetitions,
        seed: spec.seed,
        generation: spec.generation,
        enabled_kinds: spec
            .enabled_kinds
            .unwrap_or_else(|| PerturbationKind::ALL.to_vec()),
        typo: spec.typo,
    };
    plan.validate()?;
    Ok(plan)
}

fn resolve_path(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

/// Instantiates the runtime backends for a plan. HTTP backends resolve their
/// credentials here, so a missing key fails before any cell executes.
pub fn build_backends(plan: &ExperimentPlan) -> Result<Vec<Box<dyn RespondentBackend>>, RunError> {
    plan.backends
        .iter()
        .map(|config| -> Result<Box<dyn RespondentBackend>, RunError> {
            match config {
                BackendConfig::Synthetic {
                    name,
                    profile,
                    seed,
                } => {
                    let seed = seed.unwrap_or_else(|| derive_seed(plan.seed, &["backend", name]));
                    Ok(Box::new(SyntheticRespondent::new(
                        name.clone(),
                        profile.clone(),
                        seed,
                    )?))
                }
                BackendConfig::Scripted { name, script_path } => Ok(Box::new(
                    ScriptedBackend::from_file(name.clone(), script_path)?,
                )),
                BackendConfig::Http { name, endpoint } => {
                    let backend =
                        HttpBackend::new(name.clone(), endpoint.clone()).map_err(|error| {
                            RunError::Backend {
                                backend: name.clone(),
                                message: error.to_string(),
                            }
                        })?;
                    Ok(Box::new(backend))
                }
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Prompt rendering and condition generation
// ---------------------------------------------------------------------------

/// Renders the interview prompt for a condition. Exactly three lines; the
/// priming suffix (when present) is appended directly after the options list
/// with no separator.
pub fn render_prompt(condition: &PerturbedCondition) -> String {
    format!(
        "Answer the following question: {question}\n\
         This is a list of possible answer options: {options}{priming}\n\
         You must pick one of the answer options. Only answer with the label.",
        question = condition.qa.question.text,
        options = condition.qa.scale.render_options(),
        priming = condition.priming_suffix.as_deref().unwrap_or(""),
    )
}

/// Generates the full condition set for a plan, restricted to its enabled
/// kinds, with prompts rendered. Question order follows the questionnaire;
/// kind order follows the canonical kind list.
pub fn generate_condition_records(
    plan: &ExperimentPlan,
    provider: &dyn TextProvider,
) -> (Vec<ConditionRecord>, Vec<SkippedCondition>) {
    let enabled: BTreeSet<PerturbationKind> = plan.enabled_kinds.iter().copied().collect();
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for qa in &plan.questionnaire.qa_pairs {
        let generated = generate_conditions(qa, provider, plan.seed, &plan.typo);
        for condition in generated.conditions {
            if enabled.contains(&condition.kind) {
                let rendered_prompt = render_prompt(&condition);
                records.push(ConditionRecord {
                    condition,
                    rendered_prompt,
                });
            }
        }
        skipped.extend(
            generated
                .skipped
                .into_iter()
                .filter(|skip| enabled.contains(&skip.kind)),
        );
    }
    (records, skipped)
}

// ---------------------------------------------------------------------------
// Run directory layout and manifest
// ---------------------------------------------------------------------------

/// File layout of a run directory.
#[derive(Clone, Debug)]
pub struct RunPaths {
    root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn plan(&self) -> PathBuf {
        self.root.join("plan.json")
    }

    pub fn conditions(&self) -> PathBuf {
        self.root.join("conditions.jsonl")
    }

    pub fn interviews(&self) -> PathBuf {
        self.root.join("interviews.jsonl")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn classified(&self) -> PathBuf {
        self.root.join("classified.jsonl")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports.json")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }
}

/// Which pipeline stages have completed for a run directory.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageFlags {
    pub conditions_generated: bool,
    pub interviews_complete: bool,
    pub extraction_complete: bool,
    pub analysis_complete: bool,
    pub reports_complete: bool,
}

/// Per-stage record counts. Later-stage counts stay absent until that stage
/// has run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ManifestCounts {
    pub questions: u64,
    pub conditions: u64,
    pub skipped_conditions: u64,
    pub cells_total: u64,
    pub completed: u64,
    pub transport_failed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub valid: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub refusal: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub invalid: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report_rows: Option<u64>,
}

/// Run summary persisted alongside the log: plan hash, per-stage counts,
/// stage completion flags, skipped conditions, tool version.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub plan_sha256: String,
    pub tool_version: String,
    pub stages: StageFlags,
    pub counts: ManifestCounts,
    pub skipped: Vec<SkippedCondition>,
}

pub fn load_manifest(paths: &RunPaths) -> Result<RunManifest, RunError> {
    let path = paths.manifest();
    let display = path.display().to_string();
    let raw = std::fs::read_to_string(&path).map_err(|source| RunError::Io {
        path: display.clone(),
        source,
    })?;
    serde_json::from_str(&raw).map_err(|source| RunError::Json {
        path: display,
        source,
    })
}

pub fn save_manifest(paths: &RunPaths, manifest: &RunManifest) -> Result<(), RunError> {
    let path = paths.manifest();
    let display = path.display().to_string();
    let raw = serde_json::to_string_pretty(manifest).expect("manifest serialization cannot fail");
    std::fs::write(&path, raw).map_err(|source| RunError::Io {
        path: display,
        source,
    })
}

/// Read-modify-write on a run's manifest (used when later pipeline stages
/// record their completion).
pub fn update_manifest(
    paths: &RunPaths,
    update: impl FnOnce(&mut RunManifest),
) -> Result<(), RunError> {
    let mut manifest = load_manifest(paths)?;
    update(&mut manifest);
    save_manifest(paths, &manifest)
}

/// Outcome of a run or resume.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub conditions: u64,
    pub skipped_conditions: u64,
    pub cells_total: u64,
    /// Cells actually executed by this invocation.
    pub executed: u64,
    pub completed: u64,
    pub transport_failed: u64,
}

/// Execution knobs that are not part of the experimental design (and so not
/// part of the plan): worker-thread count.
#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Worker threads; defaults to available parallelism capped at 8.
    pub max_workers: Option<usize>,
}

impl RunOptions {
    fn workers(&self, pending: usize) -> usize {
        let default = std::thread::available_parallelism()
            .map(std::num::NonZeroUsize::get)
            .unwrap_or(1)
            .min(8);
        self.max_workers
            .unwrap_or(default)
            .max(1)
            .min(pending.max(1))
    }
}

// ---------------------------------------------------------------------------
// Execution
// ---------------------------------------------------------------------------

/// One executable cell: indexes into the condition list and backend list.
#[derive(Clone, Copy, Debug)]
struct Cell {
    condition: usize,
    repetition: u32,
    backend: usize,
}

/// Enumerates all cells of a plan in canonical order: condition (question ×
/// kind) outermost, then repetition, then backend innermost. The log of a
/// fresh run is written in exactly this order.
fn enumerate_cells(conditions: usize, repetitions: u32, backends: usize) -> Vec<Cell> {
    let mut cells = Vec::with_capacity(conditions * repetitions as usize * backends);
    for condition in 0..conditions {
        for repetition in 0..repetitions {
            for backend in 0..backends {
                cells.push(Cell {
                    condition,
                    repetition,
                    backend,
                });
            }
        }
    }
    cells
}

fn epoch_millis() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|elapsed| u64::try_from(elapsed.as_millis()).unwrap_or(u64::MAX))
        .unwrap_or(0)
}

/// Executes one cell. Transport failures become records; generation failures
/// (misconfiguration, rejected requests) abort the run so they surface
/// immediately instead of burning the remaining cells.
fn run_cell(
    backend: &dyn RespondentBackend,
    condition: &ConditionRecord,
    repetition: u32,
    params: &GenerationParams,
) -> Result<InterviewRecord, RunError> {
    let request = InterviewRequest {
        question_id: &condition.condition.source_question_id,
        kind: condition.condition.kind,
        repetition,
        rendered_prompt: &condition.rendered_prompt,
        condition: &condition.condition,
    };
    let deterministic = backend.deterministic();
    let timestamp_ms = if deterministic { 0 } else { epoch_millis() };
    let started = Instant::now();
    let outcome = backend.respond(&request, params);
    let latency_ms = if deterministic {
        0
    } else {
        u64::try_from(started.elapsed().as_millis()).unwrap_or(u64::MAX)
    };
    let base = InterviewRecord {
        backend_name: backend.name().to_string(),
        question_id: condition.condition.source_question_id.clone(),
        kind: condition.condition.kind,
        repetition,
        rendered_prompt: condition.rendered_prompt.clone(),
        raw_response: String::new(),
        status: InterviewStatus::Completed,
        error: None,
        timestamp_ms,
        latency_ms,
    };
    match outcome {
        Ok(raw_response) => Ok(InterviewRecord {
            raw_response,
            ..base
        }),
        Err(BackendError::Transport(message)) => Ok(InterviewRecord {
            status: InterviewStatus::TransportFailed,
            error: Some(message),
            ..base
        }),
        Err(BackendError::Generation(message)) => Err(RunError::Backend {
            backend: backend.name().to_string(),
            message,
        }),
    }
}

/// Opens the interview log for appending. A crash can leave a torn final
/// line; appended records must start on a fresh line, so the torn tail is
/// dropped first. Its cell has no completed record and will be re-executed.
fn open_log_for_append(path: &Path) -> Result<std::fs::File, RunError> {
    use std::io::{Read, Seek, SeekFrom};
    fn io_error(path: &Path, source: std::io::Error) -> RunError {
        RunError::Io {
            path: path.display().to_string(),
            source,
        }
    }
    if path.exists() {
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .open(path)
            .map_err(|source| io_error(path, source))?;
        let len = file
            .seek(SeekFrom::End(0))
            .map_err(|source| io_error(path, source))?;
        if len > 0 {
            // Scan backwards in chunks for the last newline.
            let mut keep: Option<u64> = None;
            let mut end = len;
            let mut chunk = vec![0u8; 8192];
            while keep.is_none() && end > 0 {
                let start = end.saturating_sub(chunk.len() as u64);
                let size = (end - start) as usize;
                file.seek(SeekFrom::Start(start))
                    .map_err(|source| io_error(path, source))?;
                file.read_exact(&mut chunk[..size])
                    .map_err(|source| io_error(path, source))?;
                if let Some(offset) = chunk[..size].iter().rposition(|&byte| byte == b'\n') {
                    keep = Some(start + offset as u64 + 1);
                }
                end = start;
            }
            let keep = keep.unwrap_or(0);
            if keep < len {
                log::warn!(
                    "dropping {} bytes of torn trailing line from {}",
                    len - keep,
                    path.display()
                );
                file.set_len(keep)
                    .map_err(|source| io_error(path, source))?;
            }
        }
    }
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|source| io_error(path, source))
}

/// Executes `pending` cells across worker threads, appending each record to
/// the log in pending-list order (a reorder buffer restores order regardless
/// of completion timing). Per-endpoint concurrency limits are enforced inside
/// the HTTP client itself.
fn execute_cells(
    backends: &[Box<dyn RespondentBackend>],
    conditions: &[ConditionRecord],
    pending: &[Cell],
    params: &GenerationParams,
    log_path: &Path,
    options: &RunOptions,
) -> Result<(), RunError> {
    if pending.is_empty() {
        return Ok(());
    }
    let mut log = open_log_for_append(log_path)?;

    let workers = options.workers(pending.len());
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let failure: Mutex<Option<RunError>> = Mutex::new(None);
    let (sender, receiver) = mpsc::channel::<(usize, InterviewRecord)>();

    let writer_result: Result<(), JournalError> = std::thread::scope(|scope| {
        let writer = scope.spawn(move || -> Result<(), JournalError> {
            let mut buffer = std::collections::BTreeMap::new();
            let mut next_write = 0usize;
            for (index, record) in receiver {
                buffer.insert(index, record);
                while let Some(ready) = buffer.remove(&next_write) {
                    write_line(&mut log, &ready)?;
                    next_write += 1;
                }
            }
            // A worker abort can leave gaps; flush stragglers in index order.
            for (_, record) in buffer {
                write_line(&mut log, &record)?;
            }
            Ok(())
        });

        for _ in 0..workers {
            let sender = sender.clone();
            let next = &next;
            let stop = &stop;
            let failure = &failure;
            scope.spawn(move || loop {
                if stop.load(Ordering::Relaxed) {
                    break;
                }
                let index = next.fetch_add(1, Ordering::Relaxed);
                let Some(cell) = pending.get(index) else {
                    break;
                };
                let condition = &conditions[cell.condition];
                let backend = backends[cell.backend].as_ref();
                match run_cell(backend, condition, cell.repetition, params) {
                    Ok(record) => {
                        if sender.send((index, record)).is_err() {
                            break;
                        }
                    }
                    Err(error) => {
                        stop.store(true, Ordering::Relaxed);
                        let mut slot = failure.lock().expect("failure mutex poisoned");
                        slot.get_or_insert(error);
                        break;
                    }
                }
            });
        }
        drop(sender);
        writer.join().expect("log writer thread panicked")
    });
    writer_result?;

    match failure.into_inner().expect("failure mutex poisoned") {
        Some(error) => Err(error),
        None => Ok(()),
    }
}

/// Tallies the logical (latest-per-cell) log state.
fn tally(records: &[InterviewRecord]) -> (u64, u64) {
    let mut completed = 0u64;
    let mut failed = 0u64;
    for record in records {
        match record.status {
            InterviewStatus::Completed => completed += 1,
            InterviewStatus::TransportFailed => failed += 1,
        }
    }
    (completed, failed)
}

// ---------------------------------------------------------------------------
// run / resume
// ---------------------------------------------------------------------------

/// Executes a plan into a fresh run directory: persists the resolved plan and
/// generated conditions, runs every cell, and writes the manifest. Fails if
/// the directory already holds an interview log (resume instead).
pub fn run_experiment(
    plan: &ExperimentPlan,
    provider: &dyn TextProvider,
    out_dir: &Path,
    options: &RunOptions,
) -> Result<RunSummary, RunError> {
    plan.validate()?;
    let paths = RunPaths::new(out_dir);
    std::fs::create_dir_all(out_dir).map_err(|source| RunError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;
    if paths.interviews().exists() {
        return Err(RunError::RunDirExists {
            path: out_dir.display().to_string(),
        });
    }

    let plan_json = serde_json::to_string_pretty(plan).expect("plan serialization cannot fail");
    std::fs::write(paths.plan(), plan_json).map_err(|source| RunError::Io {
        path: paths.plan().display().to_string(),
        source,
    })?;

    let backends = build_backends(plan)?;
    let (conditions, skipped) = generate_condition_records(plan, provider);
    write_jsonl(&paths.conditions(), &conditions)?;

    let cells = enumerate_cells(conditions.len(), plan.repetitions, backends.len());
    let mut manifest = RunManifest {
        plan_sha256: plan.sha256(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        stages: StageFlags {
            conditions_generated: true,
            ..StageFlags::default()
        },
        counts: ManifestCounts {
            questions: plan.questionnaire.qa_pairs.len() as u64,
            conditions: conditions.len() as u64,
            skipped_conditions: skipped.len() as u64,
            cells_total: cells.len() as u64,
            ..ManifestCounts::default()
        },
        skipped: skipped.clone(),
    };
    save_manifest(&paths, &manifest)?;

    let execution = execute_cells(
        &backends,
        &conditions,
        &cells,
        &plan.generation,
        &paths.interviews(),
        options,
    );

    // Whatever happened, reflect the log state in the manifest so the
    // directory stays resumable.
    let log = latest_by_cell(read_jsonl(&paths.interviews()).unwrap_or_default());
    let (completed, transport_failed) = tally(&log);
    manifest.counts.completed = completed;
    manifest.counts.transport_failed = transport_failed;
    manifest.stages.interviews_complete =
        execution.is_ok() && completed + transport_failed == cells.len() as u64;
    save_manifest(&paths, &manifest)?;
    execution?;

    let expected = cells.len() as u64;
    if completed + transport_failed != expected {
        return Err(RunError::CountMismatch {
            expected,
            actual: completed + transport_failed,
        });
    }

    Ok(RunSummary {
        run_dir: out_dir.to_path_buf(),
        conditions: conditions.len() as u64,
        skipped_conditions: skipped.len() as u64,
        cells_total: expected,
        executed: expected,
        completed,
        transport_failed,
    })
}

/// Loads the resolved plan persisted in a run directory.
pub fn load_run_plan(paths: &RunPaths) -> Result<ExperimentPlan, RunError> {
    let path = paths.plan();
    if !path.exists() {
        return Err(RunError::MissingFile {
            path: path.display().to_string(),
        });
    }
    let display = path.display().to_string();
    let raw = std::fs::read_to_string(&path).map_err(|source| RunError::Io {
        path: display.clone(),
        source,
    })?;
    let plan: ExperimentPlan = serde_json::from_str(&raw).map_err(|source| RunError::Json {
        path: display,
        source,
    })?;
    plan.validate()?;
    Ok(plan)
}

/// Loads the persisted condition records of a run directory.
pub fn load_run_conditions(paths: &RunPaths) -> Result<Vec<ConditionRecord>, RunError> {
    let path = paths.conditions();
    if !path.exists() {
        return Err(RunError::MissingFile {
            path: path.display().to_string(),
        });
    }
    Ok(read_jsonl(&path)?)
}

/// Loads the logical interview log of a run directory: latest record per
/// cell, torn final line tolerated.
pub fn load_run_interviews(paths: &RunPaths) -> Result<Vec<InterviewRecord>, RunError> {
    let path = paths.interviews();
    if !path.exists() {
        return Ok(Vec::new());
    }
    Ok(latest_by_cell(read_jsonl(&path)?))
}

/// Resumes an interrupted run: re-executes exactly the cells that have no
/// record yet or whose latest record is a transport failure. Completed cells
/// are never re-run; prompts are replayed from the persisted conditions, not
/// regenerated. Resuming a complete run is a no-op.
pub fn resume_experiment(run_dir: &Path, options: &RunOptions) -> Result<RunSummary, RunError> {
    let paths = RunPaths::new(run_dir);
    let plan = load_run_plan(&paths)?;
    let conditions = load_run_conditions(&paths)?;
    let backends = build_backends(&plan)?;
    let existing = load_run_interviews(&paths)?;

    let done: BTreeSet<journal::CellKey> = existing
        .iter()
        .filter(|record| record.status == InterviewStatus::Completed)
        .map(InterviewRecord::cell_key)
        .collect();

    let all_cells = enumerate_cells(conditions.len(), plan.repetitions, backends.len());
    let pending: Vec<Cell> = all_cells
        .iter()
        .filter(|cell| {
            let condition = &conditions[cell.condition].condition;
            let key = (
                backends[cell.backend].name().to_string(),
                condition.source_question_id.clone(),
                condition.kind,
                cell.repetition,
            );
            !done.contains(&key)
        })
        .copied()
        .collect();
    let executed = pending.len() as u64;

    let execution = execute_cells(
        &backends,
        &conditions,
        &pending,
        &plan.generation,
        &paths.interviews(),
        options,
    );

    let log = latest_by_cell(read_jsonl(&paths.interviews()).unwrap_or_default());
    let (completed, transport_failed) = tally(&log);
    let cells_total = all_cells.len() as u64;
    update_manifest(&paths, |manifest| {
        manifest.counts.completed = completed;
        manifest.counts.transport_failed = transport_failed;
        manifest.stages.interviews_complete =
            execution.is_ok() && completed + transport_failed == cells_total;
    })?;
    execution?;

    if completed + transport_failed != cells_total {
        return Err(RunError::CountMismatch {
            expected: cells_total,
            actual: completed + transport_failed,
        });
    }

    Ok(RunSummary {
        run_dir: run_dir.to_path_buf(),
        conditions: conditions.len() as u64,
        skipped_conditions: load_manifest(&paths)
            .map(|manifest| manifest.counts.skipped_conditions)
            .unwrap_or(0),
        cells_total,
        executed,
        completed,
        transport_failed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perturb::provider::StubProvider;
    use crate::survey::{AnswerOption, AnswerScale, QAPair, Question};

    fn tiny_questionnaire() -> Questionnaire {
        Questionnaire {
            name: "tiny".to_string(),
            qa_pairs: vec![
                QAPair {
                    question: Question {
                        id: "T1".to_string(),
                        category: "alpha".to_string(),
                        text: "How important is testing to you personally?".to_string(),
                    },
                    scale: AnswerScale::new(vec![
                        AnswerOption::substantive(1, "Very important"),
                        AnswerOption::substantive(2, "Rather important"),
                        AnswerOption::substantive(3, "Not very important"),
                        AnswerOption::substantive(4, "Not important at all"),
                        AnswerOption::refusal(-1, "Don't know"),
                    ])
                    .unwrap(),
                },
                QAPair {
                    question: Question {
                        id: "T2".to_string(),
                        category: "beta".to_string(),
                        text: "How much do you trust release pipelines in general?".to_string(),
                    },
                    scale: AnswerScale::new(vec![
                        AnswerOption::substantive(1, "A great deal"),
                        AnswerOption::substantive(2, "Quite a lot"),
                        AnswerOption::substantive(3, "Not very much"),
                        AnswerOption::substantive(4, "None at all"),
                        AnswerOption::refusal(-1, "Don't know"),
                    ])
                    .unwrap(),
                },
            ],
        }
    }

    fn tiny_plan(repetitions: u32) -> ExperimentPlan {
        ExperimentPlan {
            questionnaire: tiny_questionnaire(),
            backends: vec![BackendConfig::Synthetic {
                name: "uniform".to_string(),
                profile: BiasProfile::default(),
                seed: None,
            }],
            repetitions,
            seed: 11,
            generation: GenerationParams::default(),
            enabled_kinds: PerturbationKind::ALL.to_vec(),
            typo: TypoSettings::default(),
        }
    }

    #[test]
    fn prompt_renders_three_lines_with_priming_after_options() {
        let plan = tiny_plan(1);
        let (conditions, _) = generate_condition_records(&plan, &StubProvider);
        let original = conditions
            .iter()
            .find(|c| c.condition.kind == PerturbationKind::Original)
            .unwrap();
        let lines: Vec<&str> = original.rendered_prompt.split('\n').collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("Answer the following question: How important"));
        assert!(lines[1].starts_with("This is a list of possible answer options: ["));
        assert!(lines[1].ends_with("]"));
        assert_eq!(
            lines[2],
            "You must pick one of the answer options. Only answer with the label."
        );

        let primed = conditions
            .iter()
            .find(|c| c.condition.kind == PerturbationKind::EmotionalPriming)
            .unwrap();
        let lines: Vec<&str> = primed.rendered_prompt.split('\n').collect();
        assert!(lines[1].ends_with(
            "]This is very important to my research! You better do not refuse the answer."
        ));
    }

    #[test]
    fn fresh_run_executes_the_full_factorial_in_canonical_order() {
        let plan = tiny_plan(3);
        let dir = tempfile::tempdir().unwrap();
        let summary =
            run_experiment(&plan, &StubProvider, dir.path(), &RunOptions::default()).unwrap();
        // 2 questions × 12 conditions × 3 repetitions × 1 backend.
        assert_eq!(summary.cells_total, 72);
        assert_eq!(summary.completed, 72);
        assert_eq!(summary.transport_failed, 0);
        assert_eq!(summary.skipped_conditions, 0);

        let paths = RunPaths::new(dir.path());
        let records: Vec<InterviewRecord> = read_jsonl(&paths.interviews()).unwrap();
        assert_eq!(records.len(), 72);
        // Canonical order: condition-major, repetition, backend.
        assert_eq!(records[0].question_id, "T1");
        assert_eq!(records[0].kind, PerturbationKind::Original);
        assert_eq!(records[0].repetition, 0);
        assert_eq!(records[1].repetition, 1);
        assert_eq!(records[3].kind, PerturbationKind::ResponseOrder);
        assert!(records
            .iter()
            .all(|r| r.timestamp_ms == 0 && r.latency_ms == 0));

        let manifest = load_manifest(&paths).unwrap();
        assert!(manifest.stages.conditions_generated);
        assert!(manifest.stages.interviews_complete);
        assert_eq!(manifest.counts.cells_total, 72);
        assert_eq!(manifest.counts.completed, 72);
        assert_eq!(manifest.plan_sha256, plan.sha256());
    }

    #[test]
    fn rerunning_into_the_same_directory_is_refused() {
        let plan = tiny_plan(1);
        let dir = tempfile::tempdir().unwrap();
        run_experiment(&plan, &StubProvider, dir.path(), &RunOptions::default()).unwrap();
        let error =
            run_experiment(&plan, &StubProvider, dir.path(), &RunOptions::default()).unwrap_err();
        assert!(matches!(error, RunError::RunDirExists { .. }));
    }

    #[test]
    fn resume_after_truncation_matches_an_uninterrupted_run() {
        let plan = tiny_plan(2);
        let reference_dir = tempfile::tempdir().unwrap();
        run_experiment(
            &plan,
            &StubProvider,
            reference_dir.path(),
            &RunOptions::default(),
        )
        .unwrap();
        let reference_paths = RunPaths::new(reference_dir.path());
        let reference = load_run_interviews(&reference_paths).unwrap();

        let resumed_dir = tempfile::tempdir().unwrap();
        run_experiment(
            &plan,
            &StubProvider,
            resumed_dir.path(),
            &RunOptions::default(),
        )
        .unwrap();
        let paths = RunPaths::new(resumed_dir.path());

        // Drop the second half of the log, tearing the cut line in half.
        let raw = std::fs::read_to_string(paths.interviews()).unwrap();
        let lines: Vec<&str> = raw.lines().collect();
        let keep = lines.len() / 2;
        let mut truncated = lines[..keep].join("\n");
        truncated.push('\n');
        truncated.push_str(&lines[keep][..lines[keep].len() / 2]);
        std::fs::write(paths.interviews(), truncated).unwrap();

        let summary = resume_experiment(resumed_dir.path(), &RunOptions::default()).unwrap();
        assert_eq!(summary.executed, (reference.len() - keep) as u64);
        assert_eq!(summary.completed, reference.len() as u64);

        let resumed = load_run_interviews(&paths).unwrap();
        let as_set = |records: &[InterviewRecord]| -> BTreeSet<String> {
            records
                .iter()
                .map(|r| serde_json::to_string(r).unwrap())
                .collect()
        };
        assert_eq!(as_set(&resumed), as_set(&reference));

        // Resume of a complete run is a no-op.
        let summary = resume_experiment(resumed_dir.path(), &RunOptions::default()).unwrap();
        assert_eq!(summary.executed, 0);
    }

    #[test]
    fn resume_retries_transport_failures_only() {
        let plan = tiny_plan(1);
        let dir = tempfile::tempdir().unwrap();
        run_experiment(&plan, &StubProvider, dir.path(), &RunOptions::default()).unwrap();
        let paths = RunPaths::new(dir.path());

        // Rewrite three records as transport failures.
        let records: Vec<InterviewRecord> = read_jsonl(&paths.interviews()).unwrap();
        let doctored: Vec<InterviewRecord> = records
            .iter()
            .enumerate()
            .map(|(index, record)| {
                let mut record = record.clone();
                if index < 3 {
                    record.status = InterviewStatus::TransportFailed;
                    record.raw_response = String::new();
                    record.error = Some("injected".to_string());
                }
                record
            })
            .collect();
        write_jsonl(&paths.interviews(), &doctored).unwrap();

        let summary = resume_experiment(dir.path(), &RunOptions::default()).unwrap();
        assert_eq!(summary.executed, 3);
        assert_eq!(summary.transport_failed, 0);
        assert_eq!(summary.completed, records.len() as u64);

        // The raw log keeps both attempts; the logical view keeps the retry.
        let raw: Vec<InterviewRecord> = read_jsonl(&paths.interviews()).unwrap();
        assert_eq!(raw.len(), records.len() + 3);
        let logical = load_run_interviews(&paths).unwrap();
        assert_eq!(logical.len(), records.len());
        assert!(logical
            .iter()
            .all(|r| r.status == InterviewStatus::Completed));
    }

    #[test]
    fn scripted_backend_missing_entry_aborts_but_leaves_a_resumable_directory() {
        let dir = tempfile::tempdir().unwrap();
        let script_path = dir.path().join("script.json");
        std::fs::write(&script_path, r#"{"responses": {}}"#).unwrap();
        let mut plan = tiny_plan(1);
        plan.backends = vec![BackendConfig::Scripted {
            name: "empty-script".to_string(),
            script_path,
        }];
        let run_dir = dir.path().join("run");
        let error =
            run_experiment(&plan, &StubProvider, &run_dir, &RunOptions::default()).unwrap_err();
        assert!(matches!(error, RunError::Backend { .. }));
        let manifest = load_manifest(&RunPaths::new(&run_dir)).unwrap();
        assert!(!manifest.stages.interviews_complete);
    }

    #[test]
    fn enabled_kinds_restrict_generated_conditions_and_cells() {
        let mut plan = tiny_plan(2);
        plan.enabled_kinds = vec![PerturbationKind::Original, PerturbationKind::ResponseOrder];
        let dir = tempfile::tempdir().unwrap();
        let summary =
            run_experiment(&plan, &StubProvider, dir.path(), &RunOptions::default()).unwrap();
        // 2 questions × 2 conditions × 2 repetitions × 1 backend.
        assert_eq!(summary.cells_total, 8);
        let conditions = load_run_conditions(&RunPaths::new(dir.path())).unwrap();
        assert_eq!(conditions.len(), 4);
    }

    #[test]
    fn plan_validation_rejects_bad_plans() {
        let mut plan = tiny_plan(0);
        assert!(matches!(plan.validate(), Err(RunError::Plan { .. })));
        plan.repetitions = 1;
        plan.backends.clear();
        assert!(matches!(plan.validate(), Err(RunError::Plan { .. })));
        plan = tiny_plan(1);
        plan.backends.push(plan.backends[0].clone());
        assert!(matches!(plan.validate(), Err(RunError::Plan { .. })));
        plan = tiny_plan(1);
        plan.enabled_kinds.clear();
        assert!(matches!(plan.validate(), Err(RunError::Plan { .. })));
    }

    #[test]
    fn plan_files_load_with_relative_questionnaire_paths() {
        let dir = tempfile::tempdir().unwrap();
        let questionnaire_path = dir.path().join("questions.json");
        let questionnaire_json = crate::survey::questionnaire_to_json(&tiny_questionnaire());
        std::fs::write(&questionnaire_path, questionnaire_json).unwrap();
        let plan_path = dir.path().join("plan.json");
        std::fs::write(
            &plan_path,
            r#"{
                "questionnaire": "questions.json",
                "backends": [
                    {"type": "synthetic", "name": "a", "profile": {}}
                ],
                "repetitions": 5,
                "seed": 3
            }"#,
        )
        .unwrap();
        let plan = load_plan(&plan_path).unwrap();
        assert_eq!(plan.questionnaire.qa_pairs.len(), 2);
        assert_eq!(plan.repetitions, 5);
        assert_eq!(plan.enabled_kinds.len(), 12);
        assert_eq!(plan.generation, GenerationParams::default());
    }

    #[test]
    fn synthetic_backend_seeds_derive_from_plan_seed_and_name() {
        let plan = tiny_plan(1);
        let backends = build_backends(&plan).unwrap();
        assert_eq!(backends[0].name(), "uniform");
        // Same plan, same derived seed: responses reproduce across builds.
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        run_experiment(&plan, &StubProvider, dir_a.path(), &RunOptions::default()).unwrap();
        run_experiment(&plan, &StubProvider, dir_b.path(), &RunOptions::default()).unwrap();
        let a = std::fs::read_to_string(RunPaths::new(dir_a.path()).interviews()).unwrap();
        let b = std::fs::read_to_string(RunPaths::new(dir_b.path()).interviews()).unwrap();
        assert_eq!(a, b, "deterministic runs must be byte-identical");
    }

    #[test]
    fn worker_count_does_not_change_the_log() {
        let plan = tiny_plan(4);
        let dir_serial = tempfile::tempdir().unwrap();
        let dir_parallel = tempfile::tempdir().unwrap();
        run_experiment(
            &plan,
            &StubProvider,
            dir_serial.path(),
            &RunOptions {
                max_workers: Some(1),
            },
        )
        .unwrap();
        run_experiment(
            &plan,
            &StubProvider,
            dir_parallel.path(),
            &RunOptions {
                max_workers: Some(8),
            },
        )
        .unwrap();
        let serial =
            std::fs::read_to_string(RunPaths::new(dir_serial.path()).interviews()).unwrap();
        let parallel =
            std::fs::read_to_string(RunPaths::new(dir_parallel.path()).interviews()).unwrap();
        assert_eq!(serial, parallel);
    }
}
