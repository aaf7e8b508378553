//! Shared helpers for the integration suites: fixture paths, plan builders,
//! a full-pipeline driver, and independent brute-force oracles for the
//! statistics the library computes.
//!
//! The oracles are deliberately written from the textbook definitions —
//! direct summation, no shared code with the library — so that agreement
//! between the two is meaningful evidence of correctness.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use likertlab_core::analytics::{self, AnalysisReport};
use likertlab_core::backend::BiasProfile;
use likertlab_core::extract::classify_run;
use likertlab_core::perturb::TextProvider;
use likertlab_core::runner::{run_experiment, BackendConfig, RunSummary};
use likertlab_core::survey::load_questionnaire;
use likertlab_core::{
    AnswerOption, AnswerScale, ExperimentPlan, PerturbationKind, Questionnaire,
    ResponseDistribution, RunOptions,
};

// ---------------------------------------------------------------------------
// Fixtures
// ---------------------------------------------------------------------------

/// Absolute path of a file under the repository's `fixtures/` directory.
pub fn fixture_path(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(rel)
}

pub fn fixture_questionnaire(rel: &str) -> Questionnaire {
    load_questionnaire(fixture_path(rel)).expect("fixture questionnaire loads")
}

pub fn fixture_profile(rel: &str) -> BiasProfile {
    let path = fixture_path(rel);
    let raw =
        std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()));
    serde_json::from_str(&raw).unwrap_or_else(|e| panic!("parse {}: {e}", path.display()))
}

// ---------------------------------------------------------------------------
// Plans and pipeline driving
// ---------------------------------------------------------------------------

/// Builds a plan over synthetic respondents only. Backend seeds are left
/// unset so they derive from the plan seed, which keeps whole-plan
/// replication a single-knob affair.
pub fn synthetic_plan(
    questionnaire: Questionnaire,
    backends: Vec<(&str, BiasProfile)>,
    repetitions: u32,
    seed: u64,
    enabled_kinds: Vec<PerturbationKind>,
) -> ExperimentPlan {
    ExperimentPlan {
        questionnaire,
        backends: backends
            .into_iter()
            .map(|(name, profile)| BackendConfig::Synthetic {
                name: name.to_string(),
                profile,
                seed: None,
            })
            .collect(),
        repetitions,
        seed,
        generation: Default::default(),
        enabled_kinds,
        typo: Default::default(),
    }
}

/// Runs the full pipeline — interviews, extraction, analysis, report files —
/// into `run_dir` and returns the run summary plus the analysis report.
pub fn run_full_pipeline(
    plan: &ExperimentPlan,
    provider: &dyn TextProvider,
    run_dir: &Path,
) -> (RunSummary, AnalysisReport) {
    let summary =
        run_experiment(plan, provider, run_dir, &RunOptions::default()).expect("interviews run");
    classify_run(run_dir).expect("extraction runs");
    let report = analytics::analyze_run_to_files(run_dir, analytics::DEFAULT_SMOOTHING_ALPHA)
        .expect("analysis runs");
    analytics::report::write_report_files(run_dir).expect("report files render");
    (summary, report)
}

// ---------------------------------------------------------------------------
// Scale and distribution construction
// ---------------------------------------------------------------------------

/// A refusal-free scale with labels `1..=texts.len()`.
pub fn word_scale(texts: &[&str]) -> AnswerScale {
    let options = texts
        .iter()
        .enumerate()
        .map(|(i, text)| AnswerOption::substantive(i as i32 + 1, *text))
        .collect();
    AnswerScale::new(options).expect("test scale is well-formed")
}

pub fn dist_from_pairs(pairs: &[(i32, u64)]) -> ResponseDistribution {
    ResponseDistribution::from_counts(pairs.iter().copied().collect())
}

// ---------------------------------------------------------------------------
// Brute-force oracles
// ---------------------------------------------------------------------------

/// Shannon entropy in nats, straight from the definition −Σ pᵢ·ln pᵢ over
/// the observed categories.
pub fn entropy_oracle(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    assert!(total > 0, "entropy oracle needs at least one observation");
    let mut h = 0.0;
    for &count in counts {
        if count > 0 {
            let p = count as f64 / total as f64;
            h -= p * p.ln();
        }
    }
    h
}

/// KL divergence D(P‖Q) from the definition, with `alpha` pseudo-counts
/// added to both sides over the union of observed categories. With
/// `alpha == 0`, a category observed under P but absent under Q makes the
/// divergence infinite; categories absent under P contribute nothing.
pub fn kl_oracle(p: &BTreeMap<i32, u64>, q: &BTreeMap<i32, u64>, alpha: f64) -> f64 {
    let mut support: Vec<i32> = Vec::new();
    for (&label, &count) in p.iter().chain(q.iter()) {
        if count > 0 && !support.contains(&label) {
            support.push(label);
        }
    }
    let n_p: u64 = p.values().sum();
    let n_q: u64 = q.values().sum();
    assert!(
        n_p > 0 && n_q > 0,
        "KL oracle needs observations on both sides"
    );
    let categories = support.len() as f64;
    let mut sum = 0.0;
    for &label in &support {
        let count_p = p.get(&label).copied().unwrap_or(0) as f64;
        let count_q = q.get(&label).copied().unwrap_or(0) as f64;
        let p_i = (count_p + alpha) / (n_p as f64 + alpha * categories);
        let q_i = (count_q + alpha) / (n_q as f64 + alpha * categories);
        if p_i == 0.0 {
            continue;
        }
        if q_i == 0.0 {
            return f64::INFINITY;
        }
        sum += p_i * (p_i / q_i).ln();
    }
    sum.max(0.0)
}

/// Upper-tail binomial probability P(X ≥ k) for X ~ Binomial(n, p0), by
/// direct summation of the probability mass function.
pub fn binomial_sf_oracle(n: u64, p0: f64, k: u64) -> f64 {
    let mut total = 0.0;
    for i in k..=n {
        total += choose(n, i) * p0.powi(i as i32) * (1.0 - p0).powi((n - i) as i32);
    }
    total.min(1.0)
}

/// Binomial coefficient C(n, k) as a float, multiplicatively. Exact for the
/// small n used in tests (n ≤ 50 stays far under 2⁵³).
fn choose(n: u64, k: u64) -> f64 {
    let k = k.min(n - k);
    let mut result = 1.0;
    for i in 0..k {
        result = result * (n - i) as f64 / (i + 1) as f64;
    }
    result
}

/// Mean and standard error of a sample; SE is the sample standard deviation
/// over √n.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    assert!(
        values.len() >= 2,
        "need at least two values for a standard error"
    );
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
