//! Report rendering: a wide per-cell CSV, per-metric matrices
//! (rows = perturbation kinds, columns = backends), and a run summary in
//! both human-readable and JSON form.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use super::{load_report, robust_share, AnalysisReport, AnalyticsError, BiasReport};
use crate::perturb::PerturbationKind;
use crate::runner::{update_manifest, RunError, RunPaths};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("failed to write {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("failed to write CSV {path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error(transparent)]
    Run(#[from] RunError),
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
}

/// Files produced by report rendering, in the order they were written.
#[derive(Clone, Debug, Default)]
pub struct ReportFiles {
    pub files: Vec<PathBuf>,
}

/// Renders every report file for an analyzed run directory and marks the
/// report stage complete in the manifest.
pub fn write_report_files(run_dir: &Path) -> Result<ReportFiles, ReportError> {
    let paths = RunPaths::new(run_dir);
    let report = load_report(&paths)?;
    let files = render_reports(&report, &paths.reports_dir())?;
    update_manifest(&paths, |manifest| {
        manifest.stages.reports_complete = true;
    })?;
    Ok(files)
}

/// Writes all report files for an in-memory analysis into `dir`.
pub fn render_reports(report: &AnalysisReport, dir: &Path) -> Result<ReportFiles, ReportError> {
    std::fs::create_dir_all(dir).map_err(|source| ReportError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let mut files = ReportFiles::default();

    let wide = dir.join("wide.csv");
    write_wide_csv(report, &wide)?;
    files.files.push(wide);

    let backends = backend_order(&report.rows);
    let kinds = kind_order(&report.rows);
    for (name, metric) in matrix_metrics() {
        let path = dir.join(format!("{name}.csv"));
        write_matrix_csv(report, &backends, &kinds, metric, &path)?;
        files.files.push(path);
    }

    let summary_json = dir.join("summary.json");
    write_summary_json(report, &backends, &summary_json)?;
    files.files.push(summary_json);

    let summary_txt = dir.join("summary.txt");
    write_summary_txt(report, &backends, &summary_txt)?;
    files.files.push(summary_txt);

    Ok(files)
}

/// Backends in first-appearance order (the plan's order).
fn backend_order(rows: &[BiasReport]) -> Vec<String> {
    let mut order = Vec::new();
    for row in rows {
        if !order.contains(&row.backend_name) {
            order.push(row.backend_name.clone());
        }
    }
    order
}

/// Kinds in canonical order, restricted to those present in the rows.
fn kind_order(rows: &[BiasReport]) -> Vec<PerturbationKind> {
    PerturbationKind::ALL
        .into_iter()
        .filter(|kind| rows.iter().any(|row| row.kind == *kind))
        .collect()
}

type MatrixMetric = fn(&AnalysisReport, &str, PerturbationKind) -> Option<f64>;

fn matrix_metrics() -> [(&'static str, MatrixMetric); 5] {
    [
        ("robust_share", metric_robust_share),
        ("mean_kl", metric_mean_kl),
        ("mean_entropy", metric_mean_entropy),
        ("nonresponse_rate", metric_nonresponse),
        ("center_shift", metric_center_shift),
    ]
}

fn group<'a>(
    report: &'a AnalysisReport,
    backend: &'a str,
    kind: PerturbationKind,
) -> impl Iterator<Item = &'a BiasReport> {
    report
        .rows
        .iter()
        .filter(move |row| row.backend_name == backend && row.kind == kind)
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let mut sum = 0.0;
    let mut count = 0u64;
    for value in values {
        sum += value;
        count += 1;
    }
    if count == 0 {
        None
    } else {
        Some(sum / count as f64)
    }
}

fn metric_robust_share(
    report: &AnalysisReport,
    backend: &str,
    kind: PerturbationKind,
) -> Option<f64> {
    robust_share(group(report, backend, kind))
}

fn metric_mean_kl(report: &AnalysisReport, backend: &str, kind: PerturbationKind) -> Option<f64> {
    mean(group(report, backend, kind).filter_map(|row| row.kl))
}

fn metric_mean_entropy(
    report: &AnalysisReport,
    backend: &str,
    kind: PerturbationKind,
) -> Option<f64> {
    mean(group(report, backend, kind).filter_map(|row| row.entropy_perturbed))
}

fn metric_nonresponse(
    report: &AnalysisReport,
    backend: &str,
    kind: PerturbationKind,
) -> Option<f64> {
    mean(group(report, backend, kind).map(|row| row.nonresponse_rate))
}

fn metric_center_shift(
    report: &AnalysisReport,
    backend: &str,
    kind: PerturbationKind,
) -> Option<f64> {
    mean(group(report, backend, kind).filter_map(|row| row.center_shift))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>, ReportError> {
    csv::Writer::from_path(path).map_err(|source| ReportError::Csv {
        path: path.display().to_string(),
        source,
    })
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> ReportError + '_ {
    move |source| ReportError::Csv {
        path: path.display().to_string(),
        source,
    }
}

fn fmt_f64(value: f64) -> String {
    if value.is_infinite() {
        "inf".to_string()
    } else {
        format!("{value}")
    }
}

fn fmt_opt(value: Option<f64>) -> String {
    value.map(fmt_f64).unwrap_or_default()
}

fn write_wide_csv(report: &AnalysisReport, path: &Path) -> Result<(), ReportError> {
    let mut writer = csv_writer(path)?;
    writer
        .write_record([
            "backend",
            "question_id",
            "category",
            "kind",
            "n_total",
            "valid",
            "refusal",
            "invalid",
            "nonresponse_rate",
            "entropy_baseline",
            "entropy_perturbed",
            "kl_smoothed",
            "kl_unsmoothed",
            "fully_robust",
            "degenerate",
            "unaligned_count",
            "center_shift",
            "recency_option",
            "recency_freq_first",
            "recency_freq_last",
            "recency_relative_change",
            "middle_binomial_p",
        ])
        .map_err(csv_err(path))?;
    for row in &report.rows {
        let (recency_option, freq_first, freq_last, relative_change) = match &row.recency {
            Some(stats) => (
                stats.option_text.clone(),
                fmt_f64(stats.freq_first),
                fmt_f64(stats.freq_last),
                fmt_opt(stats.relative_change),
            ),
            None => (String::new(), String::new(), String::new(), String::new()),
        };
        writer
            .write_record([
                row.backend_name.as_str(),
                row.question_id.as_str(),
                row.category.as_str(),
                row.kind.as_str(),
                &row.n_total.to_string(),
                &row.valid.to_string(),
                &row.refusal.to_string(),
                &row.invalid.to_string(),
                &fmt_f64(row.nonresponse_rate),
                &fmt_opt(row.entropy_baseline),
                &fmt_opt(row.entropy_perturbed),
                &fmt_opt(row.kl),
                &row.kl_unsmoothed.map(|v| fmt_f64(v.0)).unwrap_or_default(),
                &row.fully_robust.to_string(),
                &row.degenerate.to_string(),
                &row.unaligned_count.to_string(),
                &fmt_opt(row.center_shift),
                &recency_option,
                &freq_first,
                &freq_last,
                &relative_change,
                &fmt_opt(row.middle_binomial_p),
            ])
            .map_err(csv_err(path))?;
    }
    writer.flush().map_err(|source| ReportError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write_matrix_csv(
    report: &AnalysisReport,
    backends: &[String],
    kinds: &[PerturbationKind],
    metric: MatrixMetric,
    path: &Path,
) -> Result<(), ReportError> {
    let mut writer = csv_writer(path)?;
    let mut header = vec!["kind".to_string()];
    header.extend(backends.iter().cloned());
    writer.write_record(&header).map_err(csv_err(path))?;
    for &kind in kinds {
        let mut record = vec![kind.as_str().to_string()];
        for backend in backends {
            record.push(fmt_opt(metric(report, backend, kind)));
        }
        writer.write_record(&record).map_err(csv_err(path))?;
    }
    writer.flush().map_err(|source| ReportError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Serialize)]
struct SummaryJson<'a> {
    smoothing_alpha: f64,
    row_count: usize,
    /// Sum of per-cell interview counts; equals backends x questions x
    /// conditions x repetitions when no condition was skipped.
    total_interviews: u64,
    backends: &'a [String],
    questions: Vec<String>,
    robust_share_by_backend: BTreeMap<String, Option<f64>>,
    nonresponse_rate_by_backend: BTreeMap<String, Option<f64>>,
    pooled_recency: &'a [super::PooledRecency],
}

fn total_interviews(report: &AnalysisReport) -> u64 {
    report.rows.iter().map(|row| row.n_total).sum()
}

/// Pooled non-response rate per backend: refusals plus invalid responses over
/// all interviews attributed to that backend, across every condition.
fn nonresponse_by_backend(
    report: &AnalysisReport,
    backends: &[String],
) -> BTreeMap<String, Option<f64>> {
    backends
        .iter()
        .map(|backend| {
            let (nonresponse, total) = report
                .rows
                .iter()
                .filter(|row| row.backend_name == *backend)
                .fold((0u64, 0u64), |(nr, total), row| {
                    (nr + row.refusal + row.invalid, total + row.n_total)
                });
            let rate = (total > 0).then(|| nonresponse as f64 / total as f64);
            (backend.clone(), rate)
        })
        .collect()
}

fn summary_questions(report: &AnalysisReport) -> Vec<String> {
    let mut questions = Vec::new();
    for row in &report.rows {
        if !questions.contains(&row.question_id) {
            questions.push(row.question_id.clone());
        }
    }
    questions
}

fn write_summary_json(
    report: &AnalysisReport,
    backends: &[String],
    path: &Path,
) -> Result<(), ReportError> {
    let robust_share_by_backend = backends
        .iter()
        .map(|backend| {
            let share = robust_share(
                report
                    .rows
                    .iter()
                    .filter(|row| row.backend_name == *backend),
            );
            (backend.clone(), share)
        })
        .collect();
    let summary = SummaryJson {
        smoothing_alpha: report.smoothing_alpha,
        row_count: report.rows.len(),
        total_interviews: total_interviews(report),
        backends,
        questions: summary_questions(report),
        robust_share_by_backend,
        nonresponse_rate_by_backend: nonresponse_by_backend(report, backends),
        pooled_recency: &report.pooled_recency,
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serialization");
    std::fs::write(path, json).map_err(|source| ReportError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write_summary_txt(
    report: &AnalysisReport,
    backends: &[String],
    path: &Path,
) -> Result<(), ReportError> {
    use std::fmt::Write as _;
    let questions = summary_questions(report);
    let mut text = String::new();
    let _ = writeln!(text, "run summary");
    let _ = writeln!(text, "===========");
    let _ = writeln!(text, "backends: {}", backends.join(", "));
    let _ = writeln!(text, "questions: {}", questions.len());
    let _ = writeln!(text, "report rows: {}", report.rows.len());
    let _ = writeln!(text, "total interviews: {}", total_interviews(report));
    let _ = writeln!(text, "smoothing alpha: {}", report.smoothing_alpha);
    let _ = writeln!(text);
    let _ = writeln!(text, "robust share by backend (degenerate cells excluded):");
    for backend in backends {
        let share = robust_share(
            report
                .rows
                .iter()
                .filter(|row| row.backend_name == *backend),
        );
        let _ = writeln!(
            text,
            "  {backend}: {}",
            share
                .map(|s| format!("{s:.4}"))
                .unwrap_or_else(|| "n/a".to_string())
        );
    }
    let _ = writeln!(text);
    let _ = writeln!(
        text,
        "non-response rate by backend (refusals + invalid over all interviews):"
    );
    for (backend, rate) in nonresponse_by_backend(report, backends) {
        let _ = writeln!(
            text,
            "  {backend}: {}",
            rate.map(|r| format!("{r:.4}"))
                .unwrap_or_else(|| "n/a".to_string())
        );
    }
    let _ = writeln!(text);
    let _ = writeln!(
        text,
        "pooled recency by backend (baseline-first option share, original vs reversed):"
    );
    if report.pooled_recency.is_empty() {
        let _ = writeln!(text, "  (no reversal cells with valid responses)");
    }
    for pooled in &report.pooled_recency {
        let change = pooled
            .relative_change
            .map(|c| format!("{c:+.4}"))
            .unwrap_or_else(|| "undefined".to_string());
        let _ = writeln!(
            text,
            "  {}: freq_first={:.4} freq_last={:.4} relative_change={} over {} question(s)",
            pooled.backend_name, pooled.freq_first, pooled.freq_last, change, pooled.questions
        );
    }
    std::fs::write(path, text).map_err(|source| ReportError::Io {
        path: path.display().to_string(),
        source,
    })
}
