//! Questionnaire data model: labelled answer options, Likert-style scales,
//! questions, and the file format they are loaded from.
//!
//! Conventions enforced here and relied on everywhere else:
//!
//! * substantive (non-refusal) options carry positive labels; a refusal
//!   option (such as "Don't know") carries a negative label, `-1` by custom;
//! * an unperturbed scale presents its substantive options as a contiguous
//!   `1..=scale_points` run in presentation order;
//! * a scale has at most one refusal option;
//! * the scale center is the midpoint of the substantive label range, and a
//!   middle option exists exactly when the number of substantive options is
//!   odd.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A single answer option as presented to a respondent.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerOption {
    pub label: i32,
    pub text: String,
    pub refusal: bool,
}

impl AnswerOption {
    pub fn substantive(label: i32, text: impl Into<String>) -> Self {
        Self {
            label,
            text: text.into(),
            refusal: false,
        }
    }

    pub fn refusal(label: i32, text: impl Into<String>) -> Self {
        Self {
            label,
            text: text.into(),
            refusal: true,
        }
    }
}

/// Why a set of options does not form a valid answer scale.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScaleError {
    #[error("scale has no options")]
    Empty,
    #[error("scale has no substantive (non-refusal) option")]
    NoSubstantiveOptions,
    #[error("fewer than 2 substantive options")]
    TooFewSubstantiveOptions,
    #[error("option text is empty for label {label}")]
    EmptyOptionText { label: i32 },
    #[error("duplicate label {label}")]
    DuplicateLabel { label: i32 },
    #[error("more than one refusal option")]
    MultipleRefusals,
    #[error(
        "refusal flag does not match label sign for label {label} (negative labels are refusals)"
    )]
    RefusalFlagMismatch { label: i32 },
    #[error("substantive labels are not the contiguous run 1..={expected} in presentation order")]
    NonContiguousLabels { expected: usize },
}

/// An ordered list of answer options. Order is presentation order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawScale", into = "RawScale")]
pub struct AnswerScale {
    options: Vec<AnswerOption>,
}

#[derive(Serialize, Deserialize)]
struct RawScale {
    options: Vec<AnswerOption>,
}

impl TryFrom<RawScale> for AnswerScale {
    type Error = ScaleError;

    fn try_from(raw: RawScale) -> Result<Self, ScaleError> {
        AnswerScale::new(raw.options)
    }
}

impl From<AnswerScale> for RawScale {
    fn from(scale: AnswerScale) -> Self {
        RawScale {
            options: scale.options,
        }
    }
}

impl AnswerScale {
    /// Builds a scale, enforcing the structural invariants that hold for both
    /// unperturbed and perturbed scales: non-empty texts, pairwise-distinct
    /// labels, at most one refusal, refusal flag matching the label sign, and
    /// at least one substantive option.
    pub fn new(options: Vec<AnswerOption>) -> Result<Self, ScaleError> {
        if options.is_empty() {
            return Err(ScaleError::Empty);
        }
        let mut seen = BTreeSet::new();
        let mut refusals = 0usize;
        for option in &options {
            if option.text.trim().is_empty() {
                return Err(ScaleError::EmptyOptionText {
                    label: option.label,
                });
            }
            if !seen.insert(option.label) {
                return Err(ScaleError::DuplicateLabel {
                    label: option.label,
                });
            }
            if option.refusal != (option.label < 0) {
                return Err(ScaleError::RefusalFlagMismatch {
                    label: option.label,
                });
            }
            if option.refusal {
                refusals += 1;
            }
        }
        if refusals > 1 {
            return Err(ScaleError::MultipleRefusals);
        }
        if refusals == options.len() {
            return Err(ScaleError::NoSubstantiveOptions);
        }
        Ok(Self { options })
    }

    /// All options in presentation order.
    pub fn options(&self) -> &[AnswerOption] {
        &self.options
    }

    /// Substantive options in presentation order.
    pub fn substantive(&self) -> impl Iterator<Item = &AnswerOption> {
        self.options.iter().filter(|option| !option.refusal)
    }

    /// The refusal option, if the scale has one.
    pub fn refusal_option(&self) -> Option<&AnswerOption> {
        self.options.iter().find(|option| option.refusal)
    }

    /// Number of substantive options.
    pub fn scale_points(&self) -> usize {
        self.substantive().count()
    }

    /// Looks up an option by its label.
    pub fn option_by_label(&self, label: i32) -> Option<&AnswerOption> {
        self.options.iter().find(|option| option.label == label)
    }

    /// Midpoint of the substantive label range: 2.5 for labels 1..=4,
    /// 3.0 for 1..=5, 5.5 for 1..=10.
    pub fn center(&self) -> f64 {
        let min = self
            .substantive()
            .map(|o| o.label)
            .min()
            .expect("scale has substantive options");
        let max = self
            .substantive()
            .map(|o| o.label)
            .max()
            .expect("scale has substantive options");
        f64::from(min + max) / 2.0
    }

    /// The option sitting exactly on the scale center. Present if and only if
    /// the number of substantive options is odd (for contiguous labels).
    pub fn middle_option(&self) -> Option<&AnswerOption> {
        if self.scale_points().is_multiple_of(2) {
            return None;
        }
        let min = self.substantive().map(|o| o.label).min()?;
        let max = self.substantive().map(|o| o.label).max()?;
        self.substantive()
            .find(|option| option.label * 2 == min + max)
    }

    /// Checks the additional invariant of freshly loaded, unperturbed scales:
    /// substantive labels form the contiguous run `1..=scale_points` in
    /// presentation order.
    pub fn validate_unperturbed(&self) -> Result<(), ScaleError> {
        let expected = self.scale_points();
        for (index, option) in self.substantive().enumerate() {
            if i64::from(option.label) != index as i64 + 1 {
                return Err(ScaleError::NonContiguousLabels { expected });
            }
        }
        Ok(())
    }

    /// Renders the option list the way it appears in interview prompts:
    /// bracketed, comma-separated `label=text` entries, single-quoted unless
    /// the entry itself contains an apostrophe (then double-quoted).
    pub fn render_options(&self) -> String {
        let parts: Vec<String> = self
            .options
            .iter()
            .map(|option| {
                let entry = format!("{}={}", option.label, option.text);
                if entry.contains('\'') {
                    format!("\"{entry}\"")
                } else {
                    format!("'{entry}'")
                }
            })
            .collect();
        format!("[{}]", parts.join(", "))
    }
}

/// A survey question: stable id, topical category, and the question text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub category: String,
    pub text: String,
}

/// A question together with the scale it is asked on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QAPair {
    pub question: Question,
    pub scale: AnswerScale,
}

/// A named, ordered collection of question/scale pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Questionnaire {
    pub name: String,
    pub qa_pairs: Vec<QAPair>,
}

impl Questionnaire {
    pub fn question_ids(&self) -> impl Iterator<Item = &str> {
        self.qa_pairs.iter().map(|qa| qa.question.id.as_str())
    }

    pub fn by_id(&self, id: &str) -> Option<&QAPair> {
        self.qa_pairs.iter().find(|qa| qa.question.id == id)
    }
}

// ---------------------------------------------------------------------------
// File format
// ---------------------------------------------------------------------------

/// Errors raised when loading or validating a questionnaire file.
#[derive(Debug, Error)]
pub enum SurveyError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed questionnaire file {path}: {message}")]
    Parse { path: String, message: String },
    #[error("questionnaire name is empty")]
    EmptyName,
    #[error("questionnaire contains no questions")]
    NoQuestions,
    #[error("duplicate question id {id}")]
    DuplicateQuestionId { id: String },
    #[error("question {id}: {field} is empty")]
    EmptyField { id: String, field: &'static str },
    #[error("question {id}: {source}")]
    InvalidScale {
        id: String,
        #[source]
        source: ScaleError,
    },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QuestionnaireFile {
    name: String,
    questions: Vec<QuestionFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QuestionFile {
    id: String,
    category: String,
    text: String,
    options: Vec<OptionFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptionFile {
    label: i32,
    text: String,
    refusal: bool,
}

fn questionnaire_from_file(file: QuestionnaireFile) -> Result<Questionnaire, SurveyError> {
    if file.name.trim().is_empty() {
        return Err(SurveyError::EmptyName);
    }
    if file.questions.is_empty() {
        return Err(SurveyError::NoQuestions);
    }
    let mut ids = BTreeSet::new();
    let mut qa_pairs = Vec::with_capacity(file.questions.len());
    for question in file.questions {
        let id = question.id.trim().to_string();
        if id.is_empty() {
            return Err(SurveyError::EmptyField {
                id: "<unnamed>".into(),
                field: "id",
            });
        }
        if !ids.insert(id.clone()) {
            return Err(SurveyError::DuplicateQuestionId { id });
        }
        let category = question.category.trim().to_string();
        if category.is_empty() {
            return Err(SurveyError::EmptyField {
                id,
                field: "category",
            });
        }
        let text = question.text.trim().to_string();
        if text.is_empty() {
            return Err(SurveyError::EmptyField { id, field: "text" });
        }
        // Option texts are trimmed on load: questionnaire sources routinely
        // carry stray trailing spaces that would otherwise leak into prompts.
        let options: Vec<AnswerOption> = question
            .options
            .into_iter()
            .map(|option| AnswerOption {
                label: option.label,
                text: option.text.trim().to_string(),
                refusal: option.refusal,
            })
            .collect();
        let scale = AnswerScale::new(options).map_err(|source| SurveyError::InvalidScale {
            id: id.clone(),
            source,
        })?;
        scale
            .validate_unperturbed()
            .map_err(|source| SurveyError::InvalidScale {
                id: id.clone(),
                source,
            })?;
        if scale.scale_points() < 2 {
            return Err(SurveyError::InvalidScale {
                id,
                source: ScaleError::TooFewSubstantiveOptions,
            });
        }
        qa_pairs.push(QAPair {
            question: Question { id, category, text },
            scale,
        });
    }
    Ok(Questionnaire {
        name: file.name.trim().to_string(),
        qa_pairs,
    })
}

fn questionnaire_to_file(questionnaire: &Questionnaire) -> QuestionnaireFile {
    QuestionnaireFile {
        name: questionnaire.name.clone(),
        questions: questionnaire
            .qa_pairs
            .iter()
            .map(|qa| QuestionFile {
                id: qa.question.id.clone(),
                category: qa.question.category.clone(),
                text: qa.question.text.clone(),
                options: qa
                    .scale
                    .options()
                    .iter()
                    .map(|option| OptionFile {
                        label: option.label,
                        text: option.text.clone(),
                        refusal: option.refusal,
                    })
                    .collect(),
            })
            .collect(),
    }
}

/// Loads and validates a questionnaire from a JSON file.
///
/// The format is an object with `name` and a `questions` array; each question
/// carries `id`, `category`, `text`, and an `options` array of
/// `{label, text, refusal}`. Unknown fields are rejected. Option order in the
/// file is presentation order.
pub fn load_questionnaire(path: impl AsRef<Path>) -> Result<Questionnaire, SurveyError> {
    let path = path.as_ref();
    let contents = std::fs::read_to_string(path).map_err(|source| SurveyError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_questionnaire(&contents).map_err(|error| match error {
        SurveyError::Parse { message, .. } => SurveyError::Parse {
            path: path.display().to_string(),
            message,
        },
        other => other,
    })
}

/// Parses a questionnaire from its JSON text form.
pub fn parse_questionnaire(contents: &str) -> Result<Questionnaire, SurveyError> {
    let file: QuestionnaireFile =
        serde_json::from_str(contents).map_err(|error| SurveyError::Parse {
            path: "<string>".into(),
            message: error.to_string(),
        })?;
    questionnaire_from_file(file)
}

/// Serializes a questionnaire back into the file format.
pub fn questionnaire_to_json(questionnaire: &Questionnaire) -> String {
    let mut json = serde_json::to_string_pretty(&questionnaire_to_file(questionnaire))
        .expect("questionnaire serialization cannot fail");
    json.push('\n');
    json
}

/// Writes a questionnaire to disk in the file format.
pub fn save_questionnaire(
    questionnaire: &Questionnaire,
    path: impl AsRef<Path>,
) -> Result<(), SurveyError> {
    let path = path.as_ref();
    std::fs::write(path, questionnaire_to_json(questionnaire)).map_err(|source| SurveyError::Io {
        path: path.display().to_string(),
        source,
    })
}

impl fmt::Display for Questionnaire {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({} questions)", self.name, self.qa_pairs.len())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn four_point_with_refusal() -> AnswerScale {
        AnswerScale::new(vec![
            AnswerOption::substantive(1, "Very important"),
            AnswerOption::substantive(2, "Rather important"),
            AnswerOption::substantive(3, "Not very important"),
            AnswerOption::substantive(4, "Not important at all"),
            AnswerOption::refusal(-1, "Don't know"),
        ])
        .unwrap()
    }

    fn scale_1_to(n: i32) -> AnswerScale {
        AnswerScale::new(
            (1..=n)
                .map(|label| AnswerOption::substantive(label, format!("Point {label}")))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn scale_center_examples() {
        assert_eq!(four_point_with_refusal().center(), 2.5);
        assert_eq!(scale_1_to(5).center(), 3.0);
        assert_eq!(scale_1_to(10).center(), 5.5);
    }

    #[test]
    fn middle_option_exists_exactly_for_odd_scales() {
        assert!(four_point_with_refusal().middle_option().is_none());
        assert_eq!(scale_1_to(5).middle_option().unwrap().label, 3);
        assert_eq!(scale_1_to(7).middle_option().unwrap().label, 4);
        assert!(scale_1_to(10).middle_option().is_none());
    }

    #[test]
    fn refusal_does_not_count_toward_scale_points_or_center() {
        let scale = four_point_with_refusal();
        assert_eq!(scale.scale_points(), 4);
        assert_eq!(scale.center(), 2.5);
        assert_eq!(scale.refusal_option().unwrap().label, -1);
    }

    #[test]
    fn duplicate_labels_are_rejected() {
        let result = AnswerScale::new(vec![
            AnswerOption::substantive(1, "A"),
            AnswerOption::substantive(1, "B"),
        ]);
        assert_eq!(result.unwrap_err(), ScaleError::DuplicateLabel { label: 1 });
    }

    #[test]
    fn refusal_flag_must_match_label_sign() {
        let result = AnswerScale::new(vec![
            AnswerOption::substantive(1, "A"),
            AnswerOption {
                label: 2,
                text: "B".into(),
                refusal: true,
            },
        ]);
        assert_eq!(
            result.unwrap_err(),
            ScaleError::RefusalFlagMismatch { label: 2 }
        );
    }

    #[test]
    fn render_options_uses_python_style_quoting() {
        let rendered = four_point_with_refusal().render_options();
        assert_eq!(
            rendered,
            "['1=Very important', '2=Rather important', '3=Not very important', \
             '4=Not important at all', \"-1=Don't know\"]"
        );
    }

    #[test]
    fn load_rejects_unknown_fields() {
        let contents = r#"{
            "name": "t",
            "questions": [{
                "id": "Q1", "category": "c", "text": "q?",
                "options": [
                    {"label": 1, "text": "A", "refusal": false},
                    {"label": 2, "text": "B", "refusal": false}
                ],
                "surprise": true
            }]
        }"#;
        let error = parse_questionnaire(contents).unwrap_err();
        assert!(matches!(error, SurveyError::Parse { .. }), "{error}");
        assert!(error.to_string().contains("surprise"));
    }

    #[test]
    fn load_trims_option_text_trailing_whitespace() {
        let contents = r#"{
            "name": "t",
            "questions": [{
                "id": "Q1", "category": "c", "text": "q?",
                "options": [
                    {"label": 1, "text": "Very important ", "refusal": false},
                    {"label": 2, "text": "Rather important ", "refusal": false}
                ]
            }]
        }"#;
        let questionnaire = parse_questionnaire(contents).unwrap();
        let texts: Vec<&str> = questionnaire.qa_pairs[0]
            .scale
            .substantive()
            .map(|option| option.text.as_str())
            .collect();
        assert_eq!(texts, vec!["Very important", "Rather important"]);
    }

    #[test]
    fn load_requires_contiguous_labels_and_names_the_question() {
        let contents = r#"{
            "name": "t",
            "questions": [{
                "id": "Q9", "category": "c", "text": "q?",
                "options": [
                    {"label": 1, "text": "A", "refusal": false},
                    {"label": 3, "text": "B", "refusal": false}
                ]
            }]
        }"#;
        let error = parse_questionnaire(contents).unwrap_err();
        let message = error.to_string();
        assert!(message.contains("Q9"), "{message}");
        assert!(message.contains("contiguous"), "{message}");
    }

    #[test]
    fn load_rejects_duplicate_question_ids() {
        let contents = r#"{
            "name": "t",
            "questions": [
                {"id": "Q1", "category": "c", "text": "q?",
                 "options": [{"label": 1, "text": "A", "refusal": false},
                              {"label": 2, "text": "B", "refusal": false}]},
                {"id": "Q1", "category": "c", "text": "q?",
                 "options": [{"label": 1, "text": "A", "refusal": false},
                              {"label": 2, "text": "B", "refusal": false}]}
            ]
        }"#;
        let error = parse_questionnaire(contents).unwrap_err();
        assert!(
            matches!(error, SurveyError::DuplicateQuestionId { .. }),
            "{error}"
        );
    }

    #[test]
    fn load_rejects_empty_question_list() {
        let error = parse_questionnaire(r#"{"name": "t", "questions": []}"#).unwrap_err();
        assert!(matches!(error, SurveyError::NoQuestions));
    }

    #[test]
    fn round_trip_preserves_structure() {
        let questionnaire = Questionnaire {
            name: "round-trip".into(),
            qa_pairs: vec![QAPair {
                question: Question {
                    id: "Q1".into(),
                    category: "c".into(),
                    text: "How often?".into(),
                },
                scale: four_point_with_refusal(),
            }],
        };
        let json = questionnaire_to_json(&questionnaire);
        let reloaded = parse_questionnaire(&json).unwrap();
        assert_eq!(questionnaire, reloaded);
    }

    #[test]
    fn option_order_is_preserved() {
        let scale = four_point_with_refusal();
        let labels: Vec<i32> = scale.options().iter().map(|option| option.label).collect();
        assert_eq!(labels, vec![1, 2, 3, 4, -1]);
    }
}
