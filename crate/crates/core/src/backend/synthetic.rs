//! Deterministic bias-parameterized respondent. Given a bias profile and a
//! seed, it answers every interview by sampling from a closed-form choice
//! distribution, so downstream statistics can be checked against exact
//! expectations.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chat::GenerationParams;
use crate::survey::{AnswerOption, AnswerScale};
use crate::util::derive_seed_bytes;

use super::{BackendError, InterviewRequest, RespondentBackend};

/// Reply formats used when the respondent does not follow the "label only"
/// instruction. `{label}` and `{text}` are substituted with the chosen option.
pub const CHATTER_TEMPLATES: [&str; 6] = [
    "I would choose {label}={text}.",
    "My answer: {label}",
    "{label} ({text})",
    "I think the best answer is {label}.",
    "As a respondent, I select option {label}: {text}.",
    "After some thought, {label}={text} fits best.",
];

/// Behavioural parameters of a synthetic respondent.
///
/// For each presented scale the respondent assigns every substantive option
/// the utility
///
/// ```text
/// u = semantic_preference[text]
///   + recency_weight  * [option is presented last]
///   + primacy_weight  * [option is presented first]
///   - center_pull     * |label - center|
/// ```
///
/// (position indicators refer to the full presented order, refusal included)
/// and samples from `softmax(u / softmax_temperature)`. A temperature of zero
/// is the argmax limit: all mass on the highest-utility option, ties broken
/// toward the lowest label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BiasProfile {
    /// Utility bonus for the option presented last.
    pub recency_weight: f64,
    /// Utility bonus for the option presented first.
    pub primacy_weight: f64,
    /// Utility penalty per unit of label distance from the scale center.
    /// Must be non-negative.
    pub center_pull: f64,
    /// Probability of picking the refusal option outright when one is
    /// presented. Must be in `[0, 1]`.
    pub refusal_propensity: f64,
    /// Utility bonus per option text (exact match).
    pub semantic_preference: BTreeMap<String, f64>,
    /// Softmax temperature; non-negative, zero meaning argmax.
    pub softmax_temperature: f64,
    /// Probability of answering with the bare label as instructed; otherwise
    /// one of [`CHATTER_TEMPLATES`] is used, chosen uniformly. Must be in
    /// `[0, 1]`.
    pub instruction_following: f64,
}

impl Default for BiasProfile {
    fn default() -> Self {
        Self {
            recency_weight: 0.0,
            primacy_weight: 0.0,
            center_pull: 0.0,
            refusal_propensity: 0.0,
            semantic_preference: BTreeMap::new(),
            softmax_temperature: 1.0,
            instruction_following: 1.0,
        }
    }
}

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("{field} must be finite, got {value}")]
    NonFinite { field: &'static str, value: f64 },
    #[error("{field} must be non-negative, got {value}")]
    Negative { field: &'static str, value: f64 },
    #[error("{field} must be within [0, 1], got {value}")]
    NotAProbability { field: &'static str, value: f64 },
}

impl BiasProfile {
    pub fn validate(&self) -> Result<(), ProfileError> {
        let finite = |field: &'static str, value: f64| {
            if value.is_finite() {
                Ok(())
            } else {
                Err(ProfileError::NonFinite { field, value })
            }
        };
        finite("recency_weight", self.recency_weight)?;
        finite("primacy_weight", self.primacy_weight)?;
        finite("center_pull", self.center_pull)?;
        finite("softmax_temperature", self.softmax_temperature)?;
        for (text, value) in &self.semantic_preference {
            if !value.is_finite() {
                return Err(ProfileError::NonFinite {
                    field: "semantic_preference",
                    value: *value,
                });
            }
            let _ = text;
        }
        if self.center_pull < 0.0 {
            return Err(ProfileError::Negative {
                field: "center_pull",
                value: self.center_pull,
            });
        }
        if self.softmax_temperature < 0.0 {
            return Err(ProfileError::Negative {
                field: "softmax_temperature",
                value: self.softmax_temperature,
            });
        }
        let probability = |field: &'static str, value: f64| {
            if (0.0..=1.0).contains(&value) {
                Ok(())
            } else {
                Err(ProfileError::NotAProbability { field, value })
            }
        };
        probability("refusal_propensity", self.refusal_propensity)?;
        probability("instruction_following", self.instruction_following)?;
        Ok(())
    }
}

/// A bias-profiled respondent with its own seed. Responses are a pure
/// function of `(seed, prompt, kind, repetition)`: repeated runs reproduce
/// byte-identical replies, and each cell is independent of execution order.
#[derive(Clone, Debug)]
pub struct SyntheticRespondent {
    name: String,
    profile: BiasProfile,
    seed: u64,
}

impl SyntheticRespondent {
    pub fn new(
        name: impl Into<String>,
        profile: BiasProfile,
        seed: u64,
    ) -> Result<Self, ProfileError> {
        profile.validate()?;
        Ok(Self {
            name: name.into(),
            profile,
            seed,
        })
    }

    pub fn profile(&self) -> &BiasProfile {
        &self.profile
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Utility assigned to one option given the full presented order.
    fn utility(&self, option: &AnswerOption, scale: &AnswerScale) -> f64 {
        let options = scale.options();
        let semantic = self
            .profile
            .semantic_preference
            .get(&option.text)
            .copied()
            .unwrap_or(0.0);
        let is_last = options.last().map(|o| o == option).unwrap_or(false);
        let is_first = options.first().map(|o| o == option).unwrap_or(false);
        semantic
            + if is_last {
                self.profile.recency_weight
            } else {
                0.0
            }
            + if is_first {
                self.profile.primacy_weight
            } else {
                0.0
            }
            - self.profile.center_pull * (f64::from(option.label) - scale.center()).abs()
    }

    /// Conditional distribution over substantive options (softmax of the
    /// utilities), before the refusal gate.
    fn substantive_probabilities(&self, scale: &AnswerScale) -> Vec<(i32, f64)> {
        let utilities: Vec<(i32, f64)> = scale
            .substantive()
            .map(|option| (option.label, self.utility(option, scale)))
            .collect();
        assert!(!utilities.is_empty(), "scale has no substantive options");

        if self.profile.softmax_temperature == 0.0 {
            // Argmax limit: all mass on the best option, ties toward the
            // lowest label.
            let mut best: Option<(i32, f64)> = None;
            for &(label, utility) in &utilities {
                best = Some(match best {
                    None => (label, utility),
                    Some((best_label, best_utility)) => {
                        if utility > best_utility || (utility == best_utility && label < best_label)
                        {
                            (label, utility)
                        } else {
                            (best_label, best_utility)
                        }
                    }
                });
            }
            let (best_label, _) = best.expect("non-empty utilities");
            return utilities
                .into_iter()
                .map(|(label, _)| (label, if label == best_label { 1.0 } else { 0.0 }))
                .collect();
        }

        let scaled: Vec<f64> = utilities
            .iter()
            .map(|(_, u)| u / self.profile.softmax_temperature)
            .collect();
        let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        utilities
            .iter()
            .zip(weights)
            .map(|(&(label, _), w)| (label, w / total))
            .collect()
    }

    /// Full choice distribution over every presented option, in presentation
    /// order: the refusal option (when present) carries `refusal_propensity`,
    /// and the substantive options share the rest according to the softmax.
    pub fn choice_probabilities(&self, scale: &AnswerScale) -> Vec<(i32, f64)> {
        let refusal_mass = if scale.refusal_option().is_some() {
            self.profile.refusal_propensity
        } else {
            0.0
        };
        let substantive: BTreeMap<i32, f64> = self
            .substantive_probabilities(scale)
            .into_iter()
            .map(|(label, p)| (label, p * (1.0 - refusal_mass)))
            .collect();
        let distribution: Vec<(i32, f64)> = scale
            .options()
            .iter()
            .map(|option| {
                let p = if option.refusal {
                    refusal_mass
                } else {
                    substantive[&option.label]
                };
                (option.label, p)
            })
            .collect();
        let total: f64 = distribution.iter().map(|(_, p)| p).sum();
        assert!(
            (total - 1.0).abs() < 1e-12,
            "choice probabilities must sum to 1, got {total}"
        );
        distribution
    }

    /// Renders the chosen option as reply text, possibly with chatter.
    fn render_reply(&self, option: &AnswerOption, rng: &mut ChaCha8Rng) -> String {
        if rng.gen::<f64>() < self.profile.instruction_following {
            return option.label.to_string();
        }
        let template = CHATTER_TEMPLATES[rng.gen_range(0..CHATTER_TEMPLATES.len())];
        template
            .replace("{label}", &option.label.to_string())
            .replace("{text}", &option.text)
    }
}

impl RespondentBackend for SyntheticRespondent {
    fn name(&self) -> &str {
        &self.name
    }

    fn respond(
        &self,
        request: &InterviewRequest<'_>,
        _params: &GenerationParams,
    ) -> Result<String, BackendError> {
        let scale = &request.condition.qa.scale;
        let seed = derive_seed_bytes(
            self.seed,
            &[
                request.rendered_prompt.as_bytes(),
                request.kind.as_str().as_bytes(),
                &request.repetition.to_le_bytes(),
            ],
        );
        let mut rng = ChaCha8Rng::from_seed(seed);

        // Draw order is part of the reproducibility contract:
        // refusal gate -> substantive softmax -> format -> template index.
        let chosen: AnswerOption = match scale.refusal_option() {
            Some(refusal) if rng.gen::<f64>() < self.profile.refusal_propensity => refusal.clone(),
            _ => {
                let probabilities = self.substantive_probabilities(scale);
                let draw: f64 = rng.gen();
                let mut cumulative = 0.0;
                let mut picked = probabilities
                    .last()
                    .map(|(label, _)| *label)
                    .expect("non-empty distribution");
                for (label, p) in &probabilities {
                    cumulative += p;
                    if draw < cumulative {
                        picked = *label;
                        break;
                    }
                }
                scale
                    .option_by_label(picked)
                    .expect("sampled label exists on the scale")
                    .clone()
            }
        };
        Ok(self.render_reply(&chosen, &mut rng))
    }

    fn deterministic(&self) -> bool {
        true
    }
}
