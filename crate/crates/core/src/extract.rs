//! Rule-based answer extraction: turns raw reply text into a validated
//! classification against the scale the respondent was actually shown.
//!
//! Three rules run over a normalized copy of the reply (lowercased,
//! whitespace collapsed) and their label matches are unioned:
//!
//! * R1 `label=text` — an option rendered the way prompts render it;
//! * R2 standalone integers — maximal digit runs on non-alphanumeric
//!   boundaries (a leading `-` attaches only when not glued to a word),
//!   matching only labels that exist on the scale;
//! * R3 option text — whole option texts on non-alphanumeric boundaries;
//!   spans nested inside a longer matched span are dropped, so "not very
//!   important" does not also match "very important".
//!
//! Exactly one distinct label across all rules is a valid answer (or a
//! refusal, when it is the refusal label); zero or several distinct labels
//! are invalid.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::perturb::PerturbationKind;
use crate::runner::journal::{InterviewRecord, InterviewStatus};
use crate::runner::{
    load_run_conditions, load_run_interviews, update_manifest, RunError, RunPaths,
};
use crate::survey::AnswerScale;

/// Names of the rules recorded in classifications.
pub mod rules {
    /// R1: an option rendered as `label=text`.
    pub const LABEL_EQ_TEXT: &str = "label_eq_text";
    /// R2: a standalone integer equal to an option label.
    pub const STANDALONE_INTEGER: &str = "standalone_integer";
    /// R3: an option's text.
    pub const OPTION_TEXT: &str = "option_text";
    /// No rule matched anything.
    pub const NONE: &str = "none";
    /// Rules matched two or more distinct labels.
    pub const AMBIGUOUS: &str = "ambiguous";
    /// The cell failed at the transport level; there is no reply to parse.
    pub const TRANSPORT: &str = "transport";
}

/// Classification outcome for one reply.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum Outcome {
    /// Exactly one substantive label was named.
    Valid { label: i32 },
    /// Exactly one label was named and it is the scale's refusal option.
    Refusal,
    /// Zero or multiple labels named, or no reply at all.
    Invalid,
}

/// Result of running the rule cascade on one reply.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Extraction {
    #[serde(flatten)]
    pub outcome: Outcome,
    /// The normalized text the winning rule matched, when there is one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matched_span: Option<String>,
    /// Which rule decided the outcome (see [`rules`]).
    pub rule: String,
}

/// An interview record together with its classification.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifiedRecord {
    #[serde(flatten)]
    pub record: InterviewRecord,
    #[serde(flatten)]
    pub extraction: Extraction,
}

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error(transparent)]
    Run(#[from] RunError),
    #[error("no generated condition for question {question_id} kind {kind}")]
    MissingCondition {
        question_id: String,
        kind: PerturbationKind,
    },
}

// ---------------------------------------------------------------------------
// Normalization and span matching
// ---------------------------------------------------------------------------

/// Lowercases and collapses every whitespace run to a single space, trimming
/// the ends. All rule matching happens on this form.
fn normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for ch in text.chars() {
        if ch.is_whitespace() {
            pending_space = !out.is_empty();
        } else {
            if pending_space {
                out.push(' ');
                pending_space = false;
            }
            out.extend(ch.to_lowercase());
        }
    }
    out
}

fn is_boundary(adjacent: Option<char>) -> bool {
    adjacent.is_none_or(|ch| !ch.is_alphanumeric())
}

/// All occurrences of `needle` in `haystack` that sit on non-alphanumeric
/// boundaries. Overlapping occurrences are all reported.
fn boundary_matches(haystack: &str, needle: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    if needle.is_empty() {
        return spans;
    }
    let mut from = 0;
    while let Some(position) = haystack[from..].find(needle) {
        let start = from + position;
        let end = start + needle.len();
        let before = haystack[..start].chars().next_back();
        let after = haystack[end..].chars().next();
        if is_boundary(before) && is_boundary(after) {
            spans.push((start, end));
        }
        from = start + needle.chars().next().expect("non-empty needle").len_utf8();
    }
    spans
}

fn integer_token_regex() -> &'static Regex {
    static PATTERN: OnceLock<Regex> = OnceLock::new();
    PATTERN.get_or_init(|| Regex::new(r"-?[0-9]+").expect("valid pattern"))
}

/// Matches found by one rule: label → first matched span text.
type RuleMatches = BTreeMap<i32, String>;

/// R1: `label=text` (with optional spaces around `=`), boundary-checked.
fn rule_label_eq_text(normalized: &str, scale: &AnswerScale) -> RuleMatches {
    let mut matches = RuleMatches::new();
    for option in scale.options() {
        let label = option.label.to_string();
        let text = normalize(&option.text);
        for needle in [
            format!("{label}={text}"),
            format!("{label} ={text}"),
            format!("{label}= {text}"),
            format!("{label} = {text}"),
        ] {
            if let Some(&(start, end)) = boundary_matches(normalized, &needle).first() {
                matches
                    .entry(option.label)
                    .or_insert_with(|| normalized[start..end].to_string());
            }
        }
    }
    matches
}

/// R2: standalone integers that are labels on the scale. A leading `-` is
/// part of the token only when the character before it is not alphanumeric,
/// so "1-5" reads as the integers 1 and 5, while "(-1)" reads as -1.
fn rule_standalone_integer(normalized: &str, scale: &AnswerScale) -> RuleMatches {
    let mut matches = RuleMatches::new();
    for token in integer_token_regex().find_iter(normalized) {
        let mut start = token.start();
        let end = token.end();
        if normalized[start..].starts_with('-') {
            let before = normalized[..start].chars().next_back();
            if before.is_some_and(char::is_alphanumeric) {
                start += 1;
            }
        }
        let before = normalized[..start].chars().next_back();
        let after = normalized[end..].chars().next();
        if !is_boundary(before) || !is_boundary(after) {
            continue;
        }
        let Ok(label) = normalized[start..end].parse::<i32>() else {
            continue;
        };
        if scale.option_by_label(label).is_some() {
            matches
                .entry(label)
                .or_insert_with(|| normalized[start..end].to_string());
        }
    }
    matches
}

/// R3: whole option texts, boundary-checked, with spans strictly nested in
/// another matched span dropped.
fn rule_option_text(normalized: &str, scale: &AnswerScale) -> RuleMatches {
    let mut spans: Vec<(usize, usize, i32)> = Vec::new();
    for option in scale.options() {
        let needle = normalize(&option.text);
        for (start, end) in boundary_matches(normalized, &needle) {
            spans.push((start, end, option.label));
        }
    }
    let mut matches = RuleMatches::new();
    for &(start, end, label) in &spans {
        let nested = spans.iter().any(|&(outer_start, outer_end, _)| {
            (outer_start, outer_end) != (start, end) && outer_start <= start && end <= outer_end
        });
        if !nested {
            matches
                .entry(label)
                .or_insert_with(|| normalized[start..end].to_string());
        }
    }
    matches
}

// ---------------------------------------------------------------------------
// Classification
// ---------------------------------------------------------------------------

/// Runs the rule cascade on one reply against the scale it was shown with.
/// All paths produce an [`Extraction`]; nothing here can fail.
pub fn extract_label(raw: &str, scale: &AnswerScale) -> Extraction {
    let normalized = normalize(raw);
    let rule_results = [
        (rules::LABEL_EQ_TEXT, rule_label_eq_text(&normalized, scale)),
        (
            rules::STANDALONE_INTEGER,
            rule_standalone_integer(&normalized, scale),
        ),
        (rules::OPTION_TEXT, rule_option_text(&normalized, scale)),
    ];

    let distinct: BTreeSet<i32> = rule_results
        .iter()
        .flat_map(|(_, matches)| matches.keys().copied())
        .collect();

    match distinct.len() {
        0 => Extraction {
            outcome: Outcome::Invalid,
            matched_span: None,
            rule: rules::NONE.to_string(),
        },
        1 => {
            let label = *distinct.iter().next().expect("one element");
            let (rule, span) = rule_results
                .iter()
                .find_map(|(name, matches)| matches.get(&label).map(|span| (*name, span.clone())))
                .expect("label came from one of the rules");
            let option = scale
                .option_by_label(label)
                .expect("matched labels are members of the scale");
            Extraction {
                outcome: if option.refusal {
                    Outcome::Refusal
                } else {
                    Outcome::Valid { label }
                },
                matched_span: Some(span),
                rule: rule.to_string(),
            }
        }
        _ => Extraction {
            outcome: Outcome::Invalid,
            matched_span: None,
            rule: rules::AMBIGUOUS.to_string(),
        },
    }
}

/// Classifies one interview record. Transport failures never reach the rule
/// cascade: they are invalid by definition.
pub fn classify_record(record: &InterviewRecord, scale: &AnswerScale) -> ClassifiedRecord {
    let extraction = match record.status {
        InterviewStatus::TransportFailed => Extraction {
            outcome: Outcome::Invalid,
            matched_span: None,
            rule: rules::TRANSPORT.to_string(),
        },
        InterviewStatus::Completed => extract_label(&record.raw_response, scale),
    };
    ClassifiedRecord {
        record: record.clone(),
        extraction,
    }
}

/// Per-(backend, question, kind) outcome tally.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupCounts {
    pub backend_name: String,
    pub question_id: String,
    pub kind: PerturbationKind,
    pub valid: u64,
    pub refusal: u64,
    pub invalid: u64,
}

impl GroupCounts {
    pub fn total(&self) -> u64 {
        self.valid + self.refusal + self.invalid
    }
}

/// Result of classifying a whole run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifySummary {
    pub total: u64,
    pub valid: u64,
    pub refusal: u64,
    pub invalid: u64,
    pub groups: Vec<GroupCounts>,
}

/// Classifies every record of a run's logical log against the scale its cell
/// presented, in log order.
pub fn classify_records(
    records: &[InterviewRecord],
    scales: &BTreeMap<(String, PerturbationKind), AnswerScale>,
) -> Result<Vec<ClassifiedRecord>, ExtractError> {
    records
        .iter()
        .map(|record| {
            let key = (record.question_id.clone(), record.kind);
            let scale = scales
                .get(&key)
                .ok_or_else(|| ExtractError::MissingCondition {
                    question_id: record.question_id.clone(),
                    kind: record.kind,
                })?;
            Ok(classify_record(record, scale))
        })
        .collect()
}

fn group_counts(classified: &[ClassifiedRecord]) -> Vec<GroupCounts> {
    let mut groups: BTreeMap<(String, String, PerturbationKind), (u64, u64, u64)> = BTreeMap::new();
    for item in classified {
        let key = (
            item.record.backend_name.clone(),
            item.record.question_id.clone(),
            item.record.kind,
        );
        let entry = groups.entry(key).or_insert((0, 0, 0));
        match item.extraction.outcome {
            Outcome::Valid { .. } => entry.0 += 1,
            Outcome::Refusal => entry.1 += 1,
            Outcome::Invalid => entry.2 += 1,
        }
    }
    groups
        .into_iter()
        .map(
            |((backend_name, question_id, kind), (valid, refusal, invalid))| GroupCounts {
                backend_name,
                question_id,
                kind,
                valid,
                refusal,
                invalid,
            },
        )
        .collect()
}

/// Classifies a run directory: reads the logical interview log and the
/// persisted conditions, classifies every record, writes the classified log
/// next to the raw one, and records the tallies in the manifest.
pub fn classify_run(run_dir: &Path) -> Result<ClassifySummary, ExtractError> {
    let paths = RunPaths::new(run_dir);
    let conditions = load_run_conditions(&paths)?;
    let records = load_run_interviews(&paths)?;

    let scales: BTreeMap<(String, PerturbationKind), AnswerScale> = conditions
        .into_iter()
        .map(|record| {
            (
                (
                    record.condition.source_question_id.clone(),
                    record.condition.kind,
                ),
                record.condition.qa.scale,
            )
        })
        .collect();

    let classified = classify_records(&records, &scales)?;
    crate::runner::journal::write_jsonl(&paths.classified(), &classified)
        .map_err(RunError::from)?;

    let groups = group_counts(&classified);
    let (mut valid, mut refusal, mut invalid) = (0u64, 0u64, 0u64);
    for group in &groups {
        valid += group.valid;
        refusal += group.refusal;
        invalid += group.invalid;
    }
    let summary = ClassifySummary {
        total: classified.len() as u64,
        valid,
        refusal,
        invalid,
        groups,
    };

    update_manifest(&paths, |manifest| {
        manifest.counts.valid = Some(summary.valid);
        manifest.counts.refusal = Some(summary.refusal);
        manifest.counts.invalid = Some(summary.invalid);
        manifest.stages.extraction_complete = true;
    })?;
    Ok(summary)
}

/// Loads the classified log of a run directory.
pub fn load_classified(paths: &RunPaths) -> Result<Vec<ClassifiedRecord>, RunError> {
    let path = paths.classified();
    if !path.exists() {
        return Err(RunError::MissingFile {
            path: path.display().to_string(),
        });
    }
    Ok(crate::runner::journal::read_jsonl(&path)?)
}

// ---------------------------------------------------------------------------
// Labeled fixture support
// ---------------------------------------------------------------------------

/// A labeled extraction test case: a raw reply, the scale it was answered
/// against, and the hand-labeled expected outcome.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledCase {
    /// Name of a scale in the fixture's `scales` map.
    pub scale: String,
    pub raw: String,
    pub expected: Outcome,
    /// Short human note on what the case exercises.
    #[serde(default)]
    pub note: String,
}

/// On-disk format of a labeled extraction fixture.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractionFixture {
    pub scales: BTreeMap<String, AnswerScale>,
    pub cases: Vec<LabeledCase>,
}

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("failed to read fixture {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse fixture {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("fixture {path} case {index} references unknown scale {scale:?}")]
    UnknownScale {
        path: String,
        index: usize,
        scale: String,
    },
}

impl ExtractionFixture {
    pub fn load(path: &Path) -> Result<Self, FixtureError> {
        let display = path.display().to_string();
        let raw = std::fs::read_to_string(path).map_err(|source| FixtureError::Io {
            path: display.clone(),
            source,
        })?;
        let fixture: ExtractionFixture =
            serde_json::from_str(&raw).map_err(|source| FixtureError::Parse {
                path: display.clone(),
                source,
            })?;
        for (index, case) in fixture.cases.iter().enumerate() {
            if !fixture.scales.contains_key(&case.scale) {
                return Err(FixtureError::UnknownScale {
                    path: display,
                    index,
                    scale: case.scale.clone(),
                });
            }
        }
        Ok(fixture)
    }

    /// Runs every case, returning the failures as
    /// `(case index, note, expected, actual)`.
    pub fn failures(&self) -> Vec<(usize, String, Outcome, Outcome)> {
        self.cases
            .iter()
            .enumerate()
            .filter_map(|(index, case)| {
                let scale = &self.scales[&case.scale];
                let actual = extract_label(&case.raw, scale).outcome;
                if actual == case.expected {
                    None
                } else {
                    Some((index, case.note.clone(), case.expected, actual))
                }
            })
            .collect()
    }
}
