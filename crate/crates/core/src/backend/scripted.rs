//! Replay backend: answers are looked up from a script file keyed by the
//! SHA-256 of the rendered prompt. Useful for regression fixtures and for
//! replaying captured live sessions offline.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chat::GenerationParams;
use crate::util::sha256_hex;

use super::{BackendError, InterviewRequest, RespondentBackend};

/// On-disk script format: `{"name": ..., "responses": {"<sha256 of prompt>": "reply"}}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptFile {
    #[serde(default)]
    pub name: Option<String>,
    pub responses: BTreeMap<String, String>,
}

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("failed to read script {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse script {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("script {path} key {key:?} is not a 64-character hex digest")]
    BadKey { path: String, key: String },
}

/// Backend that replays scripted responses by prompt digest.
#[derive(Clone, Debug)]
pub struct ScriptedBackend {
    name: String,
    responses: BTreeMap<String, String>,
}

impl ScriptedBackend {
    pub fn new(name: impl Into<String>, responses: BTreeMap<String, String>) -> Self {
        Self {
            name: name.into(),
            responses,
        }
    }

    pub fn from_file(name: impl Into<String>, path: &Path) -> Result<Self, ScriptError> {
        let display = path.display().to_string();
        let raw = std::fs::read_to_string(path).map_err(|source| ScriptError::Io {
            path: display.clone(),
            source,
        })?;
        let file: ScriptFile = serde_json::from_str(&raw).map_err(|source| ScriptError::Parse {
            path: display.clone(),
            source,
        })?;
        for key in file.responses.keys() {
            let valid = key.len() == 64 && key.chars().all(|c| c.is_ascii_hexdigit());
            if !valid {
                return Err(ScriptError::BadKey {
                    path: display,
                    key: key.clone(),
                });
            }
        }
        let name = file.name.unwrap_or_else(|| name.into());
        Ok(Self::new(name, file.responses))
    }

    /// The digest used to key a prompt's scripted response.
    pub fn prompt_key(prompt: &str) -> String {
        sha256_hex(prompt.as_bytes())
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

impl RespondentBackend for ScriptedBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn respond(
        &self,
        request: &InterviewRequest<'_>,
        _params: &GenerationParams,
    ) -> Result<String, BackendError> {
        let key = Self::prompt_key(request.rendered_prompt);
        self.responses.get(&key).cloned().ok_or_else(|| {
            BackendError::Generation(format!(
                "no scripted response for question {} kind {} (prompt digest {key})",
                request.question_id, request.kind
            ))
        })
    }

    fn deterministic(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perturb::{PerturbationKind, PerturbedCondition};
    use crate::survey::{AnswerOption, AnswerScale, QAPair, Question};
    use std::io::Write;

    fn any_condition() -> PerturbedCondition {
        PerturbedCondition {
            source_question_id: "Q1".to_string(),
            kind: PerturbationKind::Original,
            qa: QAPair {
                question: Question {
                    id: "Q1".to_string(),
                    category: "test".to_string(),
                    text: "text".to_string(),
                },
                scale: AnswerScale::new(vec![
                    AnswerOption::substantive(1, "Yes"),
                    AnswerOption::substantive(2, "No"),
                ])
                .unwrap(),
            },
            seed: 0,
            priming_suffix: None,
        }
    }

    #[test]
    fn replays_by_prompt_digest_and_errors_on_missing_entries() {
        let prompt = "What is your answer?";
        let mut responses = BTreeMap::new();
        responses.insert(ScriptedBackend::prompt_key(prompt), "2".to_string());
        let backend = ScriptedBackend::new("replay", responses);
        let condition = any_condition();
        let params = GenerationParams::default();

        let hit = backend
            .respond(
                &InterviewRequest {
                    question_id: "Q1",
                    kind: PerturbationKind::Original,
                    repetition: 0,
                    rendered_prompt: prompt,
                    condition: &condition,
                },
                &params,
            )
            .unwrap();
        assert_eq!(hit, "2");

        let miss = backend
            .respond(
                &InterviewRequest {
                    question_id: "Q1",
                    kind: PerturbationKind::Original,
                    repetition: 0,
                    rendered_prompt: "a different prompt",
                    condition: &condition,
                },
                &params,
            )
            .unwrap_err();
        assert!(matches!(miss, BackendError::Generation(_)));
        assert!(!miss.is_transport());
    }

    #[test]
    fn loads_scripts_from_file_and_validates_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("script.json");
        let digest = ScriptedBackend::prompt_key("p");
        let mut file = std::fs::File::create(&path).unwrap();
        write!(
            file,
            r#"{{"name": "fixture-a", "responses": {{"{digest}": "1"}}}}"#
        )
        .unwrap();
        let backend = ScriptedBackend::from_file("fallback", &path).unwrap();
        assert_eq!(backend.name(), "fixture-a");
        assert_eq!(backend.len(), 1);

        let bad = dir.path().join("bad.json");
        std::fs::write(&bad, r#"{"responses": {"nothex": "1"}}"#).unwrap();
        assert!(matches!(
            ScriptedBackend::from_file("x", &bad),
            Err(ScriptError::BadKey { .. })
        ));
    }
}
