//! Library for measuring the robustness and response biases of closed-ended
//! survey answers produced by conversational language-model respondents.
//!
//! The pipeline has five stages, each with a module:
//!
//! 1. [`survey`] — questionnaires, answer scales, and labeled options.
//! 2. [`perturb`] — deterministic prompt and answer-scale perturbations
//!    (reversal, refusal removal, scale-parity changes, priming, typos,
//!    synonym and paraphrase rewrites).
//! 3. [`backend`] + [`runner`] — repeated interviews of pluggable
//!    respondents (HTTP chat endpoints, scripted replays, bias-parameterized
//!    synthetic respondents) into an append-only, resumable log.
//! 4. [`extract`] — rule-based mapping of free-text replies onto scale
//!    labels, refusals, or invalid outcomes.
//! 5. [`analytics`] — distributions, entropy, KL-divergence against the
//!    unperturbed baseline, robustness shares, recency and center-shift
//!    effects, middle-option binomial tests, non-response rates, and report
//!    files.
//!
//! [`chat`] holds the shared HTTP chat-completions client and [`util`] the
//! hashing/seed-derivation helpers everything else builds on.

pub mod analytics;
pub mod backend;
pub mod chat;
pub mod extract;
pub mod perturb;
pub mod runner;
pub mod survey;
pub mod util;

pub use analytics::{AnalysisReport, BiasReport, ResponseDistribution};
pub use backend::{BiasProfile, RespondentBackend, ScriptedBackend, SyntheticRespondent};
pub use perturb::{PerturbationKind, PerturbedCondition};
pub use runner::{ExperimentPlan, RunOptions, RunPaths};
pub use survey::{AnswerOption, AnswerScale, QAPair, Question, Questionnaire};
