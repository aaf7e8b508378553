//! Property tests for the statistical core and the data-model round trips.
//! Each property pins an invariant the rest of the pipeline relies on.

mod common;

use std::collections::BTreeMap;

use likertlab_core::analytics::{
    align, build_distribution, entropy, kl_divergence, robustness, Robustness,
};
use likertlab_core::extract::{classify_record, Outcome};
use likertlab_core::perturb::{to_odd_scale, StubProvider};
use likertlab_core::runner::journal::{InterviewRecord, InterviewStatus};
use likertlab_core::survey::{parse_questionnaire, questionnaire_to_json};
use likertlab_core::{
    AnswerOption, AnswerScale, PerturbationKind, QAPair, Question, Questionnaire,
    ResponseDistribution,
};
use proptest::prelude::*;

use common::{dist_from_pairs, word_scale};

// ---------------------------------------------------------------------------
// Strategies
// ---------------------------------------------------------------------------

/// Count maps over labels 1..=k (k in 2..=10), nonzero total, total ≤ 50.
fn counts_strategy() -> impl Strategy<Value = BTreeMap<i32, u64>> {
    (2usize..=10)
        .prop_flat_map(|k| proptest::collection::vec(0u64..=8, k))
        .prop_filter_map("at least one observation", |counts| {
            if counts.iter().sum::<u64>() == 0 {
                return None;
            }
            Some(
                counts
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| (i as i32 + 1, c))
                    .collect(),
            )
        })
}

/// Two count maps over the same label range, both with observations.
fn count_pair_strategy() -> impl Strategy<Value = (BTreeMap<i32, u64>, BTreeMap<i32, u64>)> {
    (2usize..=10).prop_flat_map(|k| {
        let side = proptest::collection::vec(0u64..=8, k)
            .prop_filter("at least one observation", |c| c.iter().sum::<u64>() > 0)
            .prop_map(|counts| {
                counts
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| (i as i32 + 1, c))
                    .collect::<BTreeMap<i32, u64>>()
            });
        (side.clone(), side)
    })
}

fn dist(counts: &BTreeMap<i32, u64>) -> ResponseDistribution {
    ResponseDistribution::from_counts(counts.clone())
}

/// Word pool for generated scales; all distinct, trimmed, non-numeric.
const WORDS: [&str; 10] = [
    "Alpha", "Bravo", "Carol", "Delta", "Early", "Foxtrot", "Golf", "Hotel", "India", "Julia",
];

/// A well-formed questionnaire: 1–4 questions, scales of 2–8 word options,
/// optionally with a refusal.
fn questionnaire_strategy() -> impl Strategy<Value = Questionnaire> {
    let question = (2usize..=8, proptest::bool::ANY).prop_map(|(points, with_refusal)| {
        let mut options: Vec<AnswerOption> = (0..points)
            .map(|i| AnswerOption::substantive(i as i32 + 1, WORDS[i]))
            .collect();
        if with_refusal {
            options.push(AnswerOption::refusal(-1, "No answer"));
        }
        AnswerScale::new(options).expect("generated scale is well-formed")
    });
    proptest::collection::vec(question, 1..=4).prop_map(|scales| Questionnaire {
        name: "generated".to_string(),
        qa_pairs: scales
            .into_iter()
            .enumerate()
            .map(|(i, scale)| QAPair {
                question: Question {
                    id: format!("G{}", i + 1),
                    category: "Generated".to_string(),
                    text: format!("How would you rate item number {}?", i + 1),
                },
                scale,
            })
            .collect(),
    })
}

// ---------------------------------------------------------------------------
// Statistical invariants
// ---------------------------------------------------------------------------

proptest! {
    /// KL divergence is non-negative for every pair and every alpha.
    #[test]
    fn kl_is_nonnegative((p, q) in count_pair_strategy(), alpha in 0.0f64..=2.0) {
        let value = kl_divergence(&dist(&p), &dist(&q), alpha).unwrap();
        prop_assert!(value >= 0.0, "kl = {value}");
    }

    /// KL of a distribution against itself is exactly zero (the clamp
    /// guarantees the sign; self-comparison has no residual).
    #[test]
    fn kl_self_is_zero(p in counts_strategy(), alpha in 0.0f64..=2.0) {
        let d = dist(&p);
        let value = kl_divergence(&d, &d, alpha).unwrap();
        prop_assert!(value.abs() < 1e-12, "kl(p, p) = {value}");
    }

    /// Entropy lies in [0, ln k] where k is the number of observed categories.
    #[test]
    fn entropy_is_bounded(p in counts_strategy()) {
        let d = dist(&p);
        let h = entropy(&d).unwrap();
        let k = d.support().len() as f64;
        prop_assert!(h >= 0.0, "entropy = {h}");
        prop_assert!(h <= k.ln() + 1e-12, "entropy = {h} exceeds ln({k})");
    }

    /// A fully robust comparison has zero unsmoothed KL: exact count
    /// equality implies identical empirical distributions.
    #[test]
    fn fully_robust_implies_zero_unsmoothed_kl(p in counts_strategy()) {
        let d = dist(&p);
        prop_assert_eq!(robustness(&d, &d), Robustness::FullyRobust);
        let value = kl_divergence(&d, &d, 0.0).unwrap();
        prop_assert!(value.abs() < 1e-12, "kl = {value}");
    }

    /// Tallying classified records conserves counts:
    /// n_total = valid + refusal + invalid.
    #[test]
    fn tally_conserves_counts(outcomes in proptest::collection::vec(0u8..=2, 1..60)) {
        let scale = word_scale(&["Alpha", "Bravo", "Carol"]);
        let records: Vec<_> = outcomes
            .iter()
            .enumerate()
            .map(|(repetition, &class)| {
                let raw_response = match class {
                    0 => "Alpha".to_string(),
                    1 => "no idea, sorry".to_string(),
                    _ => "Alpha or maybe Bravo".to_string(),
                };
                let record = InterviewRecord {
                    backend_name: "b".to_string(),
                    question_id: "Q".to_string(),
                    kind: PerturbationKind::Original,
                    repetition: repetition as u32,
                    rendered_prompt: String::new(),
                    raw_response,
                    status: InterviewStatus::Completed,
                    error: None,
                    timestamp_ms: 0,
                    latency_ms: 0,
                };
                classify_record(&record, &scale)
            })
            .collect();
        let d = build_distribution(&records).unwrap();
        prop_assert_eq!(
            d.n_total,
            d.valid_total() + d.refusal_count + d.invalid_count
        );
        prop_assert_eq!(d.n_total, outcomes.len() as u64);
    }

    /// Scale-parity alignment conserves mass: every perturbed valid response
    /// is either re-keyed to a baseline label or counted as unaligned.
    #[test]
    fn odd_scale_alignment_conserves_mass(
        counts in proptest::collection::vec(0u64..=8, 5),
    ) {
        prop_assume!(counts.iter().sum::<u64>() > 0);
        let baseline = QAPair {
            question: Question {
                id: "Q".to_string(),
                category: "Generated".to_string(),
                text: "How would you rate this?".to_string(),
            },
            scale: word_scale(&["Alpha", "Bravo", "Carol", "Delta"]),
        };
        let perturbed = to_odd_scale(&baseline, &StubProvider).unwrap();
        // Perturbed scale has labels 1..=5 (middle inserted at 3).
        let perturbed_counts = dist_from_pairs(
            &counts
                .iter()
                .enumerate()
                .map(|(i, &c)| (i as i32 + 1, c))
                .collect::<Vec<_>>(),
        );
        let aligned = align(
            &perturbed_counts,
            PerturbationKind::OddScale,
            &baseline.scale,
            &perturbed.scale,
        )
        .unwrap();
        prop_assert_eq!(
            aligned.distribution.valid_total() + aligned.unaligned_count,
            perturbed_counts.valid_total()
        );
        // The inserted middle is exactly the unaligned mass.
        prop_assert_eq!(aligned.unaligned_count, perturbed_counts.count(3));
    }

    /// Classification of a bare in-scale label is always Valid with that
    /// label, whatever the repetition.
    #[test]
    fn bare_label_is_always_valid(label in 1i32..=4) {
        let scale = word_scale(&["Alpha", "Bravo", "Carol", "Delta"]);
        let record = InterviewRecord {
            backend_name: "b".to_string(),
            question_id: "Q".to_string(),
            kind: PerturbationKind::Original,
            repetition: 0,
            rendered_prompt: String::new(),
            raw_response: label.to_string(),
            status: InterviewStatus::Completed,
            error: None,
            timestamp_ms: 0,
            latency_ms: 0,
        };
        let classified = classify_record(&record, &scale);
        prop_assert_eq!(classified.extraction.outcome, Outcome::Valid { label });
    }

    /// Questionnaires survive a serialize → parse round trip unchanged.
    #[test]
    fn questionnaire_round_trips(questionnaire in questionnaire_strategy()) {
        let json = questionnaire_to_json(&questionnaire);
        let back = parse_questionnaire(&json).unwrap();
        prop_assert_eq!(back, questionnaire);
    }
}
