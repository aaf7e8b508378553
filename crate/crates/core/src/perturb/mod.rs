//! Derives the experimental conditions for a question: the original plus
//! eleven perturbations covering answer-option structure (bias kinds),
//! question phrasing (non-bias kinds), and one combined interaction.
//!
//! Every transform is deterministic: randomized kinds derive their own RNG
//! seed from `(experiment seed, question id, kind)`, so any single condition
//! can be regenerated in isolation.

pub mod provider;
pub mod typo;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::survey::{AnswerOption, AnswerScale, QAPair, ScaleError};
use crate::util::derive_seed;
use provider::DEFAULT_SYNONYM_COUNT;
pub use provider::{FixtureProvider, HttpTextProvider, ProviderError, StubProvider, TextProvider};
use typo::{key_typo, keyboard_typo, letter_swap, KeyboardAdjacency, TypoError};

/// Sentence appended after the answer options under emotional priming.
pub const EMOTIONAL_PRIMING_SUFFIX: &str =
    "This is very important to my research! You better do not refuse the answer.";

// ---------------------------------------------------------------------------
// Kinds
// ---------------------------------------------------------------------------

/// The twelve experimental conditions: the unmodified original plus eleven
/// perturbations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    Original,
    ResponseOrder,
    MissingRefusal,
    OddScale,
    EvenScale,
    EmotionalPriming,
    KeyTypo,
    LetterSwap,
    KeyboardTypo,
    Synonym,
    Paraphrase,
    ParaphraseXReversal,
}

/// Which side of a question/answer pair a kind is allowed to vary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KindClass {
    /// The untouched reference condition.
    Original,
    /// Alters answer options (or the prompt around them); question text is
    /// byte-identical to the source.
    Bias,
    /// Alters question text; the scale is byte-identical to the source.
    NonBias,
    /// Alters both: paraphrased question with reversed options.
    Interaction,
}

impl PerturbationKind {
    /// All kinds in canonical order. This order is stable: it drives seed
    /// derivation context, log ordering, and report rows.
    pub const ALL: [PerturbationKind; 12] = [
        PerturbationKind::Original,
        PerturbationKind::ResponseOrder,
        PerturbationKind::MissingRefusal,
        PerturbationKind::OddScale,
        PerturbationKind::EvenScale,
        PerturbationKind::EmotionalPriming,
        PerturbationKind::KeyTypo,
        PerturbationKind::LetterSwap,
        PerturbationKind::KeyboardTypo,
        PerturbationKind::Synonym,
        PerturbationKind::Paraphrase,
        PerturbationKind::ParaphraseXReversal,
    ];

    /// Stable snake_case identifier; matches the serialized form.
    pub fn as_str(&self) -> &'static str {
        match self {
            PerturbationKind::Original => "original",
            PerturbationKind::ResponseOrder => "response_order",
            PerturbationKind::MissingRefusal => "missing_refusal",
            PerturbationKind::OddScale => "odd_scale",
            PerturbationKind::EvenScale => "even_scale",
            PerturbationKind::EmotionalPriming => "emotional_priming",
            PerturbationKind::KeyTypo => "key_typo",
            PerturbationKind::LetterSwap => "letter_swap",
            PerturbationKind::KeyboardTypo => "keyboard_typo",
            PerturbationKind::Synonym => "synonym",
            PerturbationKind::Paraphrase => "paraphrase",
            PerturbationKind::ParaphraseXReversal => "paraphrase_x_reversal",
        }
    }

    pub fn class(&self) -> KindClass {
        match self {
            PerturbationKind::Original => KindClass::Original,
            PerturbationKind::ResponseOrder
            | PerturbationKind::MissingRefusal
            | PerturbationKind::OddScale
            | PerturbationKind::EvenScale
            | PerturbationKind::EmotionalPriming => KindClass::Bias,
            PerturbationKind::KeyTypo
            | PerturbationKind::LetterSwap
            | PerturbationKind::KeyboardTypo
            | PerturbationKind::Synonym
            | PerturbationKind::Paraphrase => KindClass::NonBias,
            PerturbationKind::ParaphraseXReversal => KindClass::Interaction,
        }
    }
}

impl std::fmt::Display for PerturbationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PerturbationKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PerturbationKind::ALL
            .into_iter()
            .find(|kind| kind.as_str() == s)
            .ok_or_else(|| format!("unknown perturbation kind {s:?}"))
    }
}

// ---------------------------------------------------------------------------
// Conditions
// ---------------------------------------------------------------------------

/// One experimental condition: the (possibly transformed) question/answer
/// pair, which transform produced it, and the RNG seed used (0 for
/// deterministic transforms).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbedCondition {
    pub source_question_id: String,
    pub kind: PerturbationKind,
    pub qa: QAPair,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub priming_suffix: Option<String>,
}

impl PerturbedCondition {
    fn deterministic(source: &QAPair, kind: PerturbationKind, qa: QAPair) -> Self {
        Self {
            source_question_id: source.question.id.clone(),
            kind,
            qa,
            seed: 0,
            priming_suffix: None,
        }
    }
}

/// A condition that could not be generated, with the reason; recorded in
/// manifests and perturbation summaries.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedCondition {
    pub question_id: String,
    pub kind: PerturbationKind,
    pub reason: String,
    /// True when a text provider failed or returned unusable output, as
    /// opposed to a data-driven skip (no refusal to remove, no swappable
    /// word). Provider-caused skips mean the condition set is incomplete for
    /// a fixable reason and warrant a nonzero exit in batch tooling.
    #[serde(default)]
    pub provider_caused: bool,
}

/// Intensity knobs for the three typo transforms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TypoSettings {
    /// Per-character replacement probability for random-letter typos.
    pub key_typo_rate: f64,
    /// Per-character replacement probability for keyboard-adjacent typos.
    pub keyboard_typo_rate: f64,
    /// Per-eligible-word swap probability for letter swaps.
    pub letter_swap_rate: f64,
    /// Allow swapped pairs to include a word's first or last letter.
    pub allow_boundary_swaps: bool,
}

impl Default for TypoSettings {
    fn default() -> Self {
        Self {
            key_typo_rate: 0.15,
            keyboard_typo_rate: 0.15,
            letter_swap_rate: 0.5,
            allow_boundary_swaps: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum PerturbError {
    #[error("question {question_id} has no refusal option to remove")]
    NoRefusal { question_id: String },
    #[error("question {question_id} already has an odd number of substantive options")]
    AlreadyOdd { question_id: String },
    #[error("question {question_id} already has an even number of substantive options")]
    AlreadyEven { question_id: String },
    #[error("question {question_id} has no identifiable middle option")]
    NoMiddleOption { question_id: String },
    #[error("middle label generated for question {question_id} is empty")]
    EmptyMiddleLabel { question_id: String },
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("question {question_id}: {source}")]
    Typo {
        question_id: String,
        #[source]
        source: TypoError,
    },
    #[error("question {question_id} produced an invalid perturbed scale: {source}")]
    Scale {
        question_id: String,
        #[source]
        source: ScaleError,
    },
}

// ---------------------------------------------------------------------------
// Scale transforms
// ---------------------------------------------------------------------------

/// Reverses the presentation order of all options (refusal included); labels
/// and texts are untouched. Involution: applying it twice restores the input.
pub fn reverse_options(qa: &QAPair) -> QAPair {
    let mut options: Vec<AnswerOption> = qa.scale.options().to_vec();
    options.reverse();
    QAPair {
        question: qa.question.clone(),
        scale: AnswerScale::new(options).expect("reversal preserves scale validity"),
    }
}

/// Removes the refusal option, leaving all other options untouched in order.
pub fn remove_refusal(qa: &QAPair) -> Result<QAPair, PerturbError> {
    if qa.scale.refusal_option().is_none() {
        return Err(PerturbError::NoRefusal {
            question_id: qa.question.id.clone(),
        });
    }
    let options: Vec<AnswerOption> = qa
        .scale
        .options()
        .iter()
        .filter(|option| !option.refusal)
        .cloned()
        .collect();
    Ok(QAPair {
        question: qa.question.clone(),
        scale: AnswerScale::new(options).map_err(|source| PerturbError::Scale {
            question_id: qa.question.id.clone(),
            source,
        })?,
    })
}

/// Inserts a provider-generated middle category into an even scale, making it
/// odd. The new option becomes substantive number `scale_points/2 + 1`;
/// substantive labels are renumbered `1..=scale_points+1` in presentation
/// order; a refusal option keeps its label and position.
pub fn to_odd_scale(qa: &QAPair, provider: &dyn TextProvider) -> Result<QAPair, PerturbError> {
    let points = qa.scale.scale_points();
    if !points.is_multiple_of(2) {
        return Err(PerturbError::AlreadyOdd {
            question_id: qa.question.id.clone(),
        });
    }
    let texts: Vec<&str> = qa
        .scale
        .substantive()
        .map(|option| option.text.as_str())
        .collect();
    let middle_text = provider.middle_label(&texts)?.trim().to_string();
    if middle_text.is_empty() {
        return Err(PerturbError::EmptyMiddleLabel {
            question_id: qa.question.id.clone(),
        });
    }

    // Insert immediately after substantive option number points/2, so the new
    // option ends up as substantive number points/2 + 1.
    let mut options: Vec<AnswerOption> = Vec::with_capacity(qa.scale.options().len() + 1);
    let mut substantives_seen = 0usize;
    let mut inserted = false;
    for option in qa.scale.options() {
        options.push(option.clone());
        if !option.refusal {
            substantives_seen += 1;
            if substantives_seen == points / 2 && !inserted {
                // Placeholder label; renumbering assigns the real one.
                options.push(AnswerOption::substantive(0, middle_text.clone()));
                inserted = true;
            }
        }
    }
    debug_assert!(inserted);
    renumber_substantive(&mut options);
    Ok(QAPair {
        question: qa.question.clone(),
        scale: AnswerScale::new(options).map_err(|source| PerturbError::Scale {
            question_id: qa.question.id.clone(),
            source,
        })?,
    })
}

/// Deletes the middle option of an odd scale, making it even; remaining
/// substantive labels are renumbered `1..=scale_points-1` preserving order;
/// a refusal option is untouched.
pub fn to_even_scale(qa: &QAPair) -> Result<QAPair, PerturbError> {
    let points = qa.scale.scale_points();
    if points.is_multiple_of(2) {
        return Err(PerturbError::AlreadyEven {
            question_id: qa.question.id.clone(),
        });
    }
    let middle_label = qa
        .scale
        .middle_option()
        .ok_or_else(|| PerturbError::NoMiddleOption {
            question_id: qa.question.id.clone(),
        })?
        .label;
    let mut options: Vec<AnswerOption> = qa
        .scale
        .options()
        .iter()
        .filter(|option| option.refusal || option.label != middle_label)
        .cloned()
        .collect();
    renumber_substantive(&mut options);
    Ok(QAPair {
        question: qa.question.clone(),
        scale: AnswerScale::new(options).map_err(|source| PerturbError::Scale {
            question_id: qa.question.id.clone(),
            source,
        })?,
    })
}

/// Rewrites substantive labels to the contiguous run `1..=n` in presentation
/// order; refusal labels are left alone.
fn renumber_substantive(options: &mut [AnswerOption]) {
    let mut next = 1i32;
    for option in options.iter_mut() {
        if !option.refusal {
            option.label = next;
            next += 1;
        }
    }
}

/// Builds the emotional-priming condition: the pair is untouched and the
/// fixed priming sentence is carried for the prompt renderer to append
/// directly after the options list.
pub fn add_emotional_priming(qa: &QAPair) -> PerturbedCondition {
    PerturbedCondition {
        source_question_id: qa.question.id.clone(),
        kind: PerturbationKind::EmotionalPriming,
        qa: qa.clone(),
        seed: 0,
        priming_suffix: Some(EMOTIONAL_PRIMING_SUFFIX.to_string()),
    }
}

fn with_question_text(qa: &QAPair, text: String) -> QAPair {
    let mut question = qa.question.clone();
    question.text = text;
    QAPair {
        question,
        scale: qa.scale.clone(),
    }
}

// ---------------------------------------------------------------------------
// Condition generation
// ---------------------------------------------------------------------------

/// Result of generating the condition set for one question: the conditions
/// that were produced plus the ones that had to be skipped, with reasons.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GeneratedConditions {
    pub conditions: Vec<PerturbedCondition>,
    pub skipped: Vec<SkippedCondition>,
}

/// Generates the full condition set for a question, in [`PerturbationKind::ALL`]
/// order. Deterministic for fixed `(qa, provider, seed, settings)`.
///
/// Applicability rules:
/// * `MissingRefusal` is skipped when the scale has no refusal option.
/// * Exactly one of `OddScale`/`EvenScale` transforms the scale (chosen by
///   parity); the other is emitted as an untransformed copy of the source
///   pair, so the matrix of conditions stays complete for every question.
/// * Provider failures and texts with no swappable word skip that condition.
///
/// Every skip is logged and returned.
pub fn generate_conditions(
    qa: &QAPair,
    provider: &dyn TextProvider,
    seed: u64,
    settings: &TypoSettings,
) -> GeneratedConditions {
    let mut out = GeneratedConditions::default();
    let question_id = qa.question.id.clone();
    let adjacency = KeyboardAdjacency::qwerty();

    let push = |condition: PerturbedCondition, out: &mut GeneratedConditions| {
        out.conditions.push(condition);
    };
    let skip = |kind: PerturbationKind,
                reason: String,
                provider_caused: bool,
                out: &mut GeneratedConditions| {
        log::warn!("question {question_id}: skipping {kind}: {reason}");
        out.skipped.push(SkippedCondition {
            question_id: question_id.clone(),
            kind,
            reason,
            provider_caused,
        });
    };

    for kind in PerturbationKind::ALL {
        match kind {
            PerturbationKind::Original => {
                push(
                    PerturbedCondition::deterministic(qa, kind, qa.clone()),
                    &mut out,
                );
            }
            PerturbationKind::ResponseOrder => {
                push(
                    PerturbedCondition::deterministic(qa, kind, reverse_options(qa)),
                    &mut out,
                );
            }
            PerturbationKind::MissingRefusal => match remove_refusal(qa) {
                Ok(pair) => push(PerturbedCondition::deterministic(qa, kind, pair), &mut out),
                Err(error) => skip(kind, error.to_string(), false, &mut out),
            },
            PerturbationKind::OddScale => {
                if qa.scale.scale_points().is_multiple_of(2) {
                    match to_odd_scale(qa, provider) {
                        Ok(pair) => {
                            push(PerturbedCondition::deterministic(qa, kind, pair), &mut out)
                        }
                        Err(error) => {
                            let provider_caused = matches!(
                                error,
                                PerturbError::Provider(_) | PerturbError::EmptyMiddleLabel { .. }
                            );
                            skip(kind, error.to_string(), provider_caused, &mut out)
                        }
                    }
                } else {
                    // Already odd: the condition exists but the pair is the
                    // untransformed source.
                    push(
                        PerturbedCondition::deterministic(qa, kind, qa.clone()),
                        &mut out,
                    );
                }
            }
            PerturbationKind::EvenScale => {
                if qa.scale.scale_points() % 2 == 1 {
                    match to_even_scale(qa) {
                        Ok(pair) => {
                            push(PerturbedCondition::deterministic(qa, kind, pair), &mut out)
                        }
                        Err(error) => skip(kind, error.to_string(), false, &mut out),
                    }
                } else {
                    push(
                        PerturbedCondition::deterministic(qa, kind, qa.clone()),
                        &mut out,
                    );
                }
            }
            PerturbationKind::EmotionalPriming => {
                push(add_emotional_priming(qa), &mut out);
            }
            PerturbationKind::KeyTypo => {
                let (condition_seed, mut rng) = condition_rng(seed, &question_id, kind);
                let text = key_typo(&qa.question.text, &mut rng, settings.key_typo_rate);
                let mut condition =
                    PerturbedCondition::deterministic(qa, kind, with_question_text(qa, text));
                condition.seed = condition_seed;
                push(condition, &mut out);
            }
            PerturbationKind::LetterSwap => {
                let (condition_seed, mut rng) = condition_rng(seed, &question_id, kind);
                match letter_swap(
                    &qa.question.text,
                    &mut rng,
                    settings.letter_swap_rate,
                    settings.allow_boundary_swaps,
                ) {
                    Ok(text) => {
                        let mut condition = PerturbedCondition::deterministic(
                            qa,
                            kind,
                            with_question_text(qa, text),
                        );
                        condition.seed = condition_seed;
                        push(condition, &mut out);
                    }
                    Err(error) => skip(kind, error.to_string(), false, &mut out),
                }
            }
            PerturbationKind::KeyboardTypo => {
                let (condition_seed, mut rng) = condition_rng(seed, &question_id, kind);
                let text = keyboard_typo(
                    &qa.question.text,
                    &mut rng,
                    settings.keyboard_typo_rate,
                    &adjacency,
                );
                let mut condition =
                    PerturbedCondition::deterministic(qa, kind, with_question_text(qa, text));
                condition.seed = condition_seed;
                push(condition, &mut out);
            }
            PerturbationKind::Synonym => {
                match provider.synonym_rewrite(&qa.question.text, DEFAULT_SYNONYM_COUNT) {
                    Ok(text) => match non_empty(text) {
                        Some(text) => push(
                            PerturbedCondition::deterministic(
                                qa,
                                kind,
                                with_question_text(qa, text),
                            ),
                            &mut out,
                        ),
                        None => skip(
                            kind,
                            "provider returned empty text".to_string(),
                            true,
                            &mut out,
                        ),
                    },
                    Err(error) => skip(kind, error.to_string(), true, &mut out),
                }
            }
            PerturbationKind::Paraphrase => match provider.paraphrase(&qa.question.text) {
                Ok(text) => match non_empty(text) {
                    Some(text) => push(
                        PerturbedCondition::deterministic(qa, kind, with_question_text(qa, text)),
                        &mut out,
                    ),
                    None => skip(
                        kind,
                        "provider returned empty text".to_string(),
                        true,
                        &mut out,
                    ),
                },
                Err(error) => skip(kind, error.to_string(), true, &mut out),
            },
            PerturbationKind::ParaphraseXReversal => match provider.paraphrase(&qa.question.text) {
                Ok(text) => match non_empty(text) {
                    Some(text) => {
                        let reversed = reverse_options(qa);
                        push(
                            PerturbedCondition::deterministic(
                                qa,
                                kind,
                                with_question_text(&reversed, text),
                            ),
                            &mut out,
                        );
                    }
                    None => skip(
                        kind,
                        "provider returned empty text".to_string(),
                        true,
                        &mut out,
                    ),
                },
                Err(error) => skip(kind, error.to_string(), true, &mut out),
            },
        }
    }
    out
}

/// Derives the per-condition seed and RNG stream for a randomized kind.
fn condition_rng(seed: u64, question_id: &str, kind: PerturbationKind) -> (u64, ChaCha8Rng) {
    let condition_seed = derive_seed(seed, &[question_id, kind.as_str()]);
    (condition_seed, ChaCha8Rng::seed_from_u64(condition_seed))
}

fn non_empty(text: String) -> Option<String> {
    let trimmed = text.trim();
    if trimmed.is_empty() {
        None
    } else {
        Some(trimmed.to_string())
    }
}
