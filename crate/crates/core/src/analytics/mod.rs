//! Statistics over classified interview logs: response distributions,
//! entropy, KL-divergence against the unperturbed baseline, robustness
//! shares, recency effects, center shifts, middle-option binomial tests, and
//! non-response rates.

pub mod report;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};
use thiserror::Error;

use crate::extract::{load_classified, ClassifiedRecord, ExtractError, Outcome};
use crate::perturb::PerturbationKind;
use crate::runner::{load_run_conditions, load_run_plan, update_manifest, RunError, RunPaths};
use crate::survey::AnswerScale;

/// Pseudo-count added per category when smoothing KL for averaging. Keeps
/// averages finite; exact-robustness checks never smooth.
pub const DEFAULT_SMOOTHING_ALPHA: f64 = 0.5;

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("records span more than one (backend, question, kind) cell: {first} vs {second}")]
    MixedCell { first: String, second: String },
    #[error("no valid responses to compute over")]
    NoValidResponses,
    #[error("scale has no middle option")]
    NoMiddleOption,
    #[error("smoothing alpha must be finite and non-negative, got {alpha}")]
    BadAlpha { alpha: f64 },
    #[error("alignment failure for kind {kind}: {detail}")]
    AlignmentFailure {
        kind: PerturbationKind,
        detail: String,
    },
    #[error("run has no baseline condition for backend {backend_name}, question {question_id}")]
    MissingBaseline {
        backend_name: String,
        question_id: String,
    },
    #[error("run has no condition record for question {question_id}, kind {kind}")]
    MissingCondition {
        question_id: String,
        kind: PerturbationKind,
    },
    #[error("question {question_id} appears in the log but not the plan questionnaire")]
    UnknownQuestion { question_id: String },
    #[error(transparent)]
    Run(#[from] RunError),
    #[error(transparent)]
    Extract(#[from] ExtractError),
}

// ---------------------------------------------------------------------------
// Distributions
// ---------------------------------------------------------------------------

/// Tally of one cell's classified responses. Substantive answers are counted
/// per label; refusals and invalid replies are tracked separately and never
/// enter entropy or KL.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseDistribution {
    pub counts: BTreeMap<i32, u64>,
    pub refusal_count: u64,
    pub invalid_count: u64,
    pub n_total: u64,
}

impl ResponseDistribution {
    /// Builds a distribution directly from per-label counts (test and oracle
    /// convenience).
    pub fn from_counts(counts: BTreeMap<i32, u64>) -> Self {
        let valid: u64 = counts.values().sum();
        Self {
            counts,
            refusal_count: 0,
            invalid_count: 0,
            n_total: valid,
        }
    }

    /// Number of substantive (valid) responses.
    pub fn valid_total(&self) -> u64 {
        self.counts.values().sum()
    }

    /// Count for one label (0 when absent).
    pub fn count(&self, label: i32) -> u64 {
        self.counts.get(&label).copied().unwrap_or(0)
    }

    /// Mean of the valid labels, when there are any.
    pub fn mean_label(&self) -> Option<f64> {
        let n = self.valid_total();
        if n == 0 {
            return None;
        }
        let sum: f64 = self
            .counts
            .iter()
            .map(|(&label, &count)| f64::from(label) * count as f64)
            .sum();
        Some(sum / n as f64)
    }

    /// Labels with non-zero counts.
    pub fn support(&self) -> BTreeSet<i32> {
        self.counts
            .iter()
            .filter(|(_, &count)| count > 0)
            .map(|(&label, _)| label)
            .collect()
    }
}

/// Tallies one cell's records. All records must belong to the same
/// (backend, question, kind) cell; an empty list gives the zero distribution.
pub fn build_distribution(
    records: &[ClassifiedRecord],
) -> Result<ResponseDistribution, AnalyticsError> {
    let mut distribution = ResponseDistribution::default();
    let mut cell: Option<(String, String, PerturbationKind)> = None;
    for record in records {
        let key = (
            record.record.backend_name.clone(),
            record.record.question_id.clone(),
            record.record.kind,
        );
        match &cell {
            None => cell = Some(key),
            Some(current) if *current != key => {
                return Err(AnalyticsError::MixedCell {
                    first: format!("{current:?}"),
                    second: format!("{key:?}"),
                });
            }
            Some(_) => {}
        }
        match record.extraction.outcome {
            Outcome::Valid { label } => *distribution.counts.entry(label).or_insert(0) += 1,
            Outcome::Refusal => distribution.refusal_count += 1,
            Outcome::Invalid => distribution.invalid_count += 1,
        }
        distribution.n_total += 1;
    }
    Ok(distribution)
}

// ---------------------------------------------------------------------------
// Entropy and KL
// ---------------------------------------------------------------------------

/// Shannon entropy in nats of the normalized substantive counts, with
/// `0·ln 0 := 0`. Errors when there are no valid responses.
pub fn entropy(distribution: &ResponseDistribution) -> Result<f64, AnalyticsError> {
    let n = distribution.valid_total();
    if n == 0 {
        return Err(AnalyticsError::NoValidResponses);
    }
    let n = n as f64;
    let mut total = 0.0;
    for &count in distribution.counts.values() {
        if count > 0 {
            let p = count as f64 / n;
            total -= p * p.ln();
        }
    }
    Ok(total)
}

/// `D(P‖Q) = Σ P(i)·ln(P(i)/Q(i))` over the union of the two non-zero
/// supports. With `smoothing_alpha > 0`, that many pseudo-counts are added
/// per category to BOTH distributions before normalizing, which keeps the
/// result finite. With `smoothing_alpha = 0`, a category where `P > 0` but
/// `Q = 0` makes the divergence `+∞` (returned as the infinity sentinel).
pub fn kl_divergence(
    p: &ResponseDistribution,
    q: &ResponseDistribution,
    smoothing_alpha: f64,
) -> Result<f64, AnalyticsError> {
    if smoothing_alpha < 0.0 || !smoothing_alpha.is_finite() {
        return Err(AnalyticsError::BadAlpha {
            alpha: smoothing_alpha,
        });
    }
    let n_p = p.valid_total();
    let n_q = q.valid_total();
    if n_p == 0 || n_q == 0 {
        return Err(AnalyticsError::NoValidResponses);
    }
    let support: BTreeSet<i32> = p.support().union(&q.support()).copied().collect();
    let categories = support.len() as f64;
    let denom_p = n_p as f64 + smoothing_alpha * categories;
    let denom_q = n_q as f64 + smoothing_alpha * categories;

    let mut divergence = 0.0;
    for &label in &support {
        let p_i = (p.count(label) as f64 + smoothing_alpha) / denom_p;
        let q_i = (q.count(label) as f64 + smoothing_alpha) / denom_q;
        if p_i == 0.0 {
            continue; // 0·ln(0/q) := 0
        }
        if q_i == 0.0 {
            return Ok(f64::INFINITY);
        }
        divergence += p_i * (p_i / q_i).ln();
    }
    // Clamp the tiny negative fringe of floating-point rounding: KL ≥ 0.
    Ok(divergence.max(0.0))
}

// ---------------------------------------------------------------------------
// Alignment
// ---------------------------------------------------------------------------

/// A perturbed-cell distribution re-keyed to baseline labels by matching
/// option text. Mass on options with no baseline image (an inserted middle
/// category) is reported separately and excluded from KL support.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignedDistribution {
    pub distribution: ResponseDistribution,
    pub unaligned_count: u64,
}

/// Re-keys a perturbed distribution to baseline labels.
///
/// * `ResponseOrder` and `ParaphraseXReversal` reorder presentation without
///   touching label/text bindings, so alignment must be the identity on
///   labels — verified, not assumed.
/// * `OddScale`/`EvenScale` renumber: options are matched by exact text; the
///   inserted middle has no image and its mass becomes `unaligned_count`.
/// * Every other kind leaves the substantive options untouched: identity,
///   verified against the label sets.
pub fn align(
    perturbed: &ResponseDistribution,
    kind: PerturbationKind,
    baseline_scale: &AnswerScale,
    perturbed_scale: &AnswerScale,
) -> Result<AlignedDistribution, AnalyticsError> {
    let failure = |detail: String| AnalyticsError::AlignmentFailure { kind, detail };

    match kind {
        PerturbationKind::ResponseOrder | PerturbationKind::ParaphraseXReversal => {
            // Full text-match that must come out as the identity on labels.
            let baseline: BTreeMap<&str, i32> = baseline_scale
                .substantive()
                .map(|option| (option.text.as_str(), option.label))
                .collect();
            for option in perturbed_scale.substantive() {
                match baseline.get(option.text.as_str()) {
                    Some(&label) if label == option.label => {}
                    Some(&label) => {
                        return Err(failure(format!(
                            "option {:?} is label {} but baseline binds it to {label}",
                            option.text, option.label
                        )));
                    }
                    None => {
                        return Err(failure(format!(
                            "option {:?} has no baseline counterpart",
                            option.text
                        )));
                    }
                }
            }
            if perturbed_scale.scale_points() != baseline_scale.scale_points() {
                return Err(failure("substantive option counts differ".to_string()));
            }
            Ok(AlignedDistribution {
                distribution: perturbed.clone(),
                unaligned_count: 0,
            })
        }
        PerturbationKind::OddScale | PerturbationKind::EvenScale => {
            let baseline: BTreeMap<&str, i32> = baseline_scale
                .substantive()
                .map(|option| (option.text.as_str(), option.label))
                .collect();
            if baseline.len() != baseline_scale.scale_points() {
                return Err(failure(
                    "baseline option texts are not unique; text matching is ambiguous".to_string(),
                ));
            }
            let mut mapping: BTreeMap<i32, i32> = BTreeMap::new();
            let mut images: BTreeSet<i32> = BTreeSet::new();
            for option in perturbed_scale.substantive() {
                if let Some(&target) = baseline.get(option.text.as_str()) {
                    if !images.insert(target) {
                        return Err(failure(format!(
                            "two perturbed options map to baseline label {target}"
                        )));
                    }
                    mapping.insert(option.label, target);
                }
            }
            let mut counts: BTreeMap<i32, u64> = BTreeMap::new();
            let mut unaligned_count = 0u64;
            for (&label, &count) in &perturbed.counts {
                match mapping.get(&label) {
                    Some(&target) => *counts.entry(target).or_insert(0) += count,
                    None => unaligned_count += count,
                }
            }
            Ok(AlignedDistribution {
                distribution: ResponseDistribution {
                    counts,
                    refusal_count: perturbed.refusal_count,
                    invalid_count: perturbed.invalid_count,
                    n_total: perturbed.n_total,
                },
                unaligned_count,
            })
        }
        _ => {
            // Identity: the perturbation does not touch substantive options.
            let baseline_labels: BTreeSet<i32> = baseline_scale
                .substantive()
                .map(|option| option.label)
                .collect();
            let perturbed_labels: BTreeSet<i32> = perturbed_scale
                .substantive()
                .map(|option| option.label)
                .collect();
            if baseline_labels != perturbed_labels {
                return Err(failure(format!(
                    "substantive labels differ: baseline {baseline_labels:?} vs perturbed {perturbed_labels:?}"
                )));
            }
            Ok(AlignedDistribution {
                distribution: perturbed.clone(),
                unaligned_count: 0,
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Robustness
// ---------------------------------------------------------------------------

/// Robustness verdict for one perturbed cell against its baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Robustness {
    /// Aligned substantive count vectors are exactly equal.
    FullyRobust,
    /// Counts differ.
    Diverged,
    /// One side has no valid responses at all; excluded from robust-share
    /// denominators rather than counted either way.
    NoValidResponses,
}

/// Exact-equality robustness: true verdicts require identical aligned count
/// maps, the count-level equivalent of unsmoothed KL = 0 at equal n.
pub fn robustness(p_aligned: &ResponseDistribution, q: &ResponseDistribution) -> Robustness {
    if p_aligned.valid_total() == 0 || q.valid_total() == 0 {
        return Robustness::NoValidResponses;
    }
    let p_counts: BTreeMap<i32, u64> = p_aligned
        .counts
        .iter()
        .filter(|(_, &count)| count > 0)
        .map(|(&label, &count)| (label, count))
        .collect();
    let q_counts: BTreeMap<i32, u64> = q
        .counts
        .iter()
        .filter(|(_, &count)| count > 0)
        .map(|(&label, &count)| (label, count))
        .collect();
    if p_counts == q_counts {
        Robustness::FullyRobust
    } else {
        Robustness::Diverged
    }
}

/// True iff the aligned empirical count vectors are exactly equal.
pub fn fully_robust(p_aligned: &ResponseDistribution, q: &ResponseDistribution) -> bool {
    robustness(p_aligned, q) == Robustness::FullyRobust
}

/// Fraction of non-degenerate rows that are fully robust; `None` when every
/// row is degenerate (no denominator).
pub fn robust_share<'a>(rows: impl IntoIterator<Item = &'a BiasReport>) -> Option<f64> {
    let mut robust = 0u64;
    let mut considered = 0u64;
    for row in rows {
        if row.degenerate {
            continue;
        }
        considered += 1;
        if row.fully_robust {
            robust += 1;
        }
    }
    if considered == 0 {
        None
    } else {
        Some(robust as f64 / considered as f64)
    }
}

// ---------------------------------------------------------------------------
// Recency, center shift, binomial, non-response
// ---------------------------------------------------------------------------

/// Positional-effect measurement for the option presented first in the
/// baseline order (and therefore last under reversal).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecencyStats {
    /// Text of the tracked option (the baseline-first substantive option).
    pub option_text: String,
    /// Its choice share among valid baseline responses.
    pub freq_first: f64,
    /// Its choice share among valid reversed-condition responses.
    pub freq_last: f64,
    /// `(freq_last − freq_first) / freq_first`; undefined when the option is
    /// never chosen at baseline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relative_change: Option<f64>,
}

/// Measures how the baseline-first substantive option fares when reversal
/// moves it to the last position. The refusal option is never tracked, even
/// when it is presented first.
pub fn recency_effect(
    baseline: &ResponseDistribution,
    reversed_aligned: &ResponseDistribution,
    baseline_scale: &AnswerScale,
) -> Result<RecencyStats, AnalyticsError> {
    let tracked = baseline_scale
        .substantive()
        .next()
        .ok_or(AnalyticsError::NoValidResponses)?;
    let n_first = baseline.valid_total();
    let n_last = reversed_aligned.valid_total();
    if n_first == 0 || n_last == 0 {
        return Err(AnalyticsError::NoValidResponses);
    }
    let freq_first = baseline.count(tracked.label) as f64 / n_first as f64;
    let freq_last = reversed_aligned.count(tracked.label) as f64 / n_last as f64;
    let relative_change = if freq_first > 0.0 {
        Some((freq_last - freq_first) / freq_first)
    } else {
        None
    };
    Ok(RecencyStats {
        option_text: tracked.text.clone(),
        freq_first,
        freq_last,
        relative_change,
    })
}

/// Distance-from-center shift `D_perturbed − D_original`, where
/// `D_x = |mean(valid labels of x) − center_x|` in each side's native labels.
/// Negative values mean the perturbed responses sit closer to their scale's
/// center.
pub fn center_shift(
    baseline: &ResponseDistribution,
    perturbed_native: &ResponseDistribution,
    baseline_center: f64,
    perturbed_center: f64,
) -> Result<f64, AnalyticsError> {
    let mean_baseline = baseline
        .mean_label()
        .ok_or(AnalyticsError::NoValidResponses)?;
    let mean_perturbed = perturbed_native
        .mean_label()
        .ok_or(AnalyticsError::NoValidResponses)?;
    let d_original = (mean_baseline - baseline_center).abs();
    let d_perturbed = (mean_perturbed - perturbed_center).abs();
    Ok(d_perturbed - d_original)
}

/// One-sided exact binomial test: probability of the middle option being
/// chosen at least as often as observed if every substantive option were
/// equally likely (`p₀ = 1/scale_points`). `k = 0` gives 1.0 by definition.
pub fn middle_binomial_test(
    distribution: &ResponseDistribution,
    scale: &AnswerScale,
) -> Result<f64, AnalyticsError> {
    let middle = scale
        .middle_option()
        .ok_or(AnalyticsError::NoMiddleOption)?;
    let n = distribution.valid_total();
    if n == 0 {
        return Err(AnalyticsError::NoValidResponses);
    }
    let k = distribution.count(middle.label);
    if k == 0 {
        return Ok(1.0);
    }
    let p0 = 1.0 / scale.scale_points() as f64;
    let binomial = Binomial::new(p0, n).expect("valid binomial parameters");
    // P(X ≥ k) = P(X > k−1).
    Ok(binomial.sf(k - 1).clamp(0.0, 1.0))
}

/// Share of a cell's interviews that produced no usable answer: refusals plus
/// invalid replies over all records.
pub fn nonresponse_rate(distribution: &ResponseDistribution) -> f64 {
    assert!(distribution.n_total > 0, "nonresponse rate needs records");
    (distribution.refusal_count + distribution.invalid_count) as f64 / distribution.n_total as f64
}

// ---------------------------------------------------------------------------
// Per-cell reports
// ---------------------------------------------------------------------------

/// All metrics for one (backend, question, kind) cell. Optional metrics are
/// present only where the kind defines them and the data supports them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub backend_name: String,
    pub question_id: String,
    pub category: String,
    pub kind: PerturbationKind,
    pub n_total: u64,
    pub valid: u64,
    pub refusal: u64,
    pub invalid: u64,
    /// Entropy (nats) of the baseline cell; absent when it has no valid
    /// responses.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entropy_baseline: Option<f64>,
    /// Entropy (nats) of this cell.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entropy_perturbed: Option<f64>,
    /// KL divergence to baseline with the report's smoothing alpha.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kl: Option<f64>,
    /// Unsmoothed KL divergence; may be the infinity sentinel.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kl_unsmoothed: Option<MaybeInf>,
    pub fully_robust: bool,
    /// True when either side of the comparison had no valid responses; such
    /// rows never count toward robust shares.
    pub degenerate: bool,
    /// Valid responses on options with no baseline image (inserted middle).
    pub unaligned_count: u64,
    pub nonresponse_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center_shift: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recency: Option<RecencyStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub middle_binomial_p: Option<f64>,
}

/// An `f64` that serializes infinity as the string `"inf"` so JSON can carry
/// the unsmoothed-KL sentinel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaybeInf(pub f64);

impl MaybeInf {
    pub fn is_infinite(&self) -> bool {
        self.0.is_infinite()
    }
}

impl Serialize for MaybeInf {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        if self.0.is_finite() {
            serializer.serialize_f64(self.0)
        } else {
            serializer.serialize_str("inf")
        }
    }
}

impl<'de> Deserialize<'de> for MaybeInf {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Number(f64),
            Text(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Number(value) => Ok(MaybeInf(value)),
            Raw::Text(text) if text == "inf" => Ok(MaybeInf(f64::INFINITY)),
            Raw::Text(text) => Err(serde::de::Error::custom(format!(
                "expected a number or \"inf\", got {text:?}"
            ))),
        }
    }
}

/// Recency statistics pooled across every question of one backend: counts
/// are summed before forming shares, so questions with more valid responses
/// weigh proportionally more.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PooledRecency {
    pub backend_name: String,
    /// Questions contributing to the pool.
    pub questions: u64,
    pub freq_first: f64,
    pub freq_last: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relative_change: Option<f64>,
}

/// Full analysis output for a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub smoothing_alpha: f64,
    pub rows: Vec<BiasReport>,
    pub pooled_recency: Vec<PooledRecency>,
}

// ---------------------------------------------------------------------------
// Run analysis
// ---------------------------------------------------------------------------

type CellKey = (String, String, PerturbationKind);

/// Groups classified records into per-cell distributions, preserving
/// first-appearance order of the cells.
pub fn cell_distributions(
    classified: &[ClassifiedRecord],
) -> Result<Vec<(CellKey, ResponseDistribution)>, AnalyticsError> {
    let mut order: Vec<CellKey> = Vec::new();
    let mut grouped: BTreeMap<CellKey, Vec<ClassifiedRecord>> = BTreeMap::new();
    for record in classified {
        let key = (
            record.record.backend_name.clone(),
            record.record.question_id.clone(),
            record.record.kind,
        );
        if !grouped.contains_key(&key) {
            order.push(key.clone());
        }
        grouped.entry(key).or_default().push(record.clone());
    }
    order
        .into_iter()
        .map(|key| {
            let records = grouped.remove(&key).expect("key was inserted");
            Ok((key, build_distribution(&records)?))
        })
        .collect()
}

/// Computes every per-cell metric for a run whose log has been classified,
/// writes nothing: pure computation over the run directory's files.
pub fn analyze_run(run_dir: &Path, smoothing_alpha: f64) -> Result<AnalysisReport, AnalyticsError> {
    if smoothing_alpha < 0.0 || !smoothing_alpha.is_finite() {
        return Err(AnalyticsError::BadAlpha {
            alpha: smoothing_alpha,
        });
    }
    let paths = RunPaths::new(run_dir);
    let plan = load_run_plan(&paths)?;
    let conditions = load_run_conditions(&paths)?;
    let classified = load_classified(&paths)?;

    // Scales per (question, kind) and question categories/order.
    let mut scales: BTreeMap<(String, PerturbationKind), AnswerScale> = BTreeMap::new();
    for record in &conditions {
        scales.insert(
            (
                record.condition.source_question_id.clone(),
                record.condition.kind,
            ),
            record.condition.qa.scale.clone(),
        );
    }
    let categories: BTreeMap<String, String> = plan
        .questionnaire
        .qa_pairs
        .iter()
        .map(|qa| (qa.question.id.clone(), qa.question.category.clone()))
        .collect();

    let cells = cell_distributions(&classified)?;
    let by_cell: BTreeMap<CellKey, &ResponseDistribution> = cells
        .iter()
        .map(|(key, distribution)| (key.clone(), distribution))
        .collect();

    let mut rows = Vec::with_capacity(cells.len());
    for ((backend_name, question_id, kind), distribution) in &cells {
        let category = categories
            .get(question_id)
            .ok_or_else(|| AnalyticsError::UnknownQuestion {
                question_id: question_id.clone(),
            })?
            .clone();
        let baseline_key = (
            backend_name.clone(),
            question_id.clone(),
            PerturbationKind::Original,
        );
        let baseline =
            *by_cell
                .get(&baseline_key)
                .ok_or_else(|| AnalyticsError::MissingBaseline {
                    backend_name: backend_name.clone(),
                    question_id: question_id.clone(),
                })?;
        let baseline_scale = scales
            .get(&(question_id.clone(), PerturbationKind::Original))
            .ok_or_else(|| AnalyticsError::MissingCondition {
                question_id: question_id.clone(),
                kind: PerturbationKind::Original,
            })?;
        let cell_scale = scales.get(&(question_id.clone(), *kind)).ok_or_else(|| {
            AnalyticsError::MissingCondition {
                question_id: question_id.clone(),
                kind: *kind,
            }
        })?;

        let aligned = align(distribution, *kind, baseline_scale, cell_scale)?;
        let verdict = robustness(&aligned.distribution, baseline);
        let degenerate = verdict == Robustness::NoValidResponses;
        let (kl, kl_unsmoothed) = if degenerate {
            (None, None)
        } else {
            (
                Some(kl_divergence(
                    &aligned.distribution,
                    baseline,
                    smoothing_alpha,
                )?),
                Some(MaybeInf(kl_divergence(
                    &aligned.distribution,
                    baseline,
                    0.0,
                )?)),
            )
        };

        let center_shift_value = match kind {
            PerturbationKind::MissingRefusal
            | PerturbationKind::OddScale
            | PerturbationKind::EvenScale => center_shift(
                baseline,
                distribution,
                baseline_scale.center(),
                cell_scale.center(),
            )
            .ok(),
            _ => None,
        };
        let recency = if *kind == PerturbationKind::ResponseOrder {
            recency_effect(baseline, &aligned.distribution, baseline_scale).ok()
        } else {
            None
        };
        let middle_binomial_p = if cell_scale.middle_option().is_some() {
            middle_binomial_test(distribution, cell_scale).ok()
        } else {
            None
        };

        rows.push(BiasReport {
            backend_name: backend_name.clone(),
            question_id: question_id.clone(),
            category,
            kind: *kind,
            n_total: distribution.n_total,
            valid: distribution.valid_total(),
            refusal: distribution.refusal_count,
            invalid: distribution.invalid_count,
            entropy_baseline: entropy(baseline).ok(),
            entropy_perturbed: entropy(distribution).ok(),
            kl,
            kl_unsmoothed,
            fully_robust: verdict == Robustness::FullyRobust,
            degenerate,
            unaligned_count: aligned.unaligned_count,
            nonresponse_rate: nonresponse_rate(distribution),
            center_shift: center_shift_value,
            recency,
            middle_binomial_p,
        });
    }

    let pooled_recency = pool_recency(&cells, &scales);

    Ok(AnalysisReport {
        smoothing_alpha,
        rows,
        pooled_recency,
    })
}

/// Pools recency counts per backend across questions: sums tracked-option
/// and valid counts on both sides before forming shares.
fn pool_recency(
    cells: &[(CellKey, ResponseDistribution)],
    scales: &BTreeMap<(String, PerturbationKind), AnswerScale>,
) -> Vec<PooledRecency> {
    #[derive(Default)]
    struct Pool {
        questions: u64,
        tracked_first: u64,
        valid_first: u64,
        tracked_last: u64,
        valid_last: u64,
    }
    let by_cell: BTreeMap<&CellKey, &ResponseDistribution> =
        cells.iter().map(|(key, dist)| (key, dist)).collect();
    let mut pools: BTreeMap<String, Pool> = BTreeMap::new();
    let mut backend_order: Vec<String> = Vec::new();

    for ((backend_name, question_id, kind), reversed) in cells {
        if *kind != PerturbationKind::ResponseOrder {
            continue;
        }
        let baseline_key = (
            backend_name.clone(),
            question_id.clone(),
            PerturbationKind::Original,
        );
        let Some(baseline) = by_cell.get(&baseline_key) else {
            continue;
        };
        let Some(baseline_scale) = scales.get(&(question_id.clone(), PerturbationKind::Original))
        else {
            continue;
        };
        let Some(tracked) = baseline_scale.substantive().next() else {
            continue;
        };
        if baseline.valid_total() == 0 || reversed.valid_total() == 0 {
            continue;
        }
        if !pools.contains_key(backend_name) {
            backend_order.push(backend_name.clone());
        }
        let pool = pools.entry(backend_name.clone()).or_default();
        pool.questions += 1;
        pool.tracked_first += baseline.count(tracked.label);
        pool.valid_first += baseline.valid_total();
        pool.tracked_last += reversed.count(tracked.label);
        pool.valid_last += reversed.valid_total();
    }

    backend_order
        .into_iter()
        .map(|backend_name| {
            let pool = &pools[&backend_name];
            let freq_first = pool.tracked_first as f64 / pool.valid_first as f64;
            let freq_last = pool.tracked_last as f64 / pool.valid_last as f64;
            let relative_change = if freq_first > 0.0 {
                Some((freq_last - freq_first) / freq_first)
            } else {
                None
            };
            PooledRecency {
                backend_name,
                questions: pool.questions,
                freq_first,
                freq_last,
                relative_change,
            }
        })
        .collect()
}

/// Analyzes a run and persists the results: the full report JSON in the run
/// directory plus a manifest update.
pub fn analyze_run_to_files(
    run_dir: &Path,
    smoothing_alpha: f64,
) -> Result<AnalysisReport, AnalyticsError> {
    let report = analyze_run(run_dir, smoothing_alpha)?;
    let paths = RunPaths::new(run_dir);
    let json = serde_json::to_string_pretty(&report).expect("report serialization cannot fail");
    std::fs::write(paths.reports(), json).map_err(|source| RunError::Io {
        path: paths.reports().display().to_string(),
        source,
    })?;
    update_manifest(&paths, |manifest| {
        manifest.counts.report_rows = Some(report.rows.len() as u64);
        manifest.stages.analysis_complete = true;
    })?;
    Ok(report)
}

/// Loads a persisted analysis report from a run directory.
pub fn load_report(paths: &RunPaths) -> Result<AnalysisReport, AnalyticsError> {
    let path = paths.reports();
    if !path.exists() {
        return Err(AnalyticsError::Run(RunError::MissingFile {
            path: path.display().to_string(),
        }));
    }
    let raw = std::fs::read_to_string(&path).map_err(|source| RunError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&raw).map_err(|source| {
        AnalyticsError::Run(RunError::Json {
            path: path.display().to_string(),
            source,
        })
    })
}
