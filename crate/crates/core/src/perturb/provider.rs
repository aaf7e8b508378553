//! Text-generation capabilities backing the semantic perturbations: whole
//! question paraphrases, synonym rewrites, and middle-category labels for
//! scale transforms.
//!
//! All implementations must be deterministic for a fixed configuration and
//! input, and must never return empty text. Three implementations ship: an
//! identity stub, a table-driven fixture provider for hermetic tests, and a
//! chat-endpoint-backed provider.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chat::{ChatClient, ChatError, EndpointConfig, GenerationParams};

/// Number of words the synonym rewrite is asked to replace by default.
pub const DEFAULT_SYNONYM_COUNT: usize = 5;

/// Separator joining substantive option texts into a fixture lookup key for
/// middle labels.
pub const MIDDLE_KEY_SEPARATOR: &str = " | ";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capability {
    Paraphrase,
    Synonyms,
    MiddleLabel,
}

impl Capability {
    pub fn as_str(&self) -> &'static str {
        match self {
            Capability::Paraphrase => "paraphrase",
            Capability::Synonyms => "synonyms",
            Capability::MiddleLabel => "middle_label",
        }
    }
}

impl fmt::Display for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("provider {provider} has no {capability} entry for {key:?}")]
    MissingEntry {
        provider: String,
        capability: Capability,
        key: String,
    },
    #[error("provider {provider} returned empty text for {capability}")]
    EmptyOutput {
        provider: String,
        capability: Capability,
    },
    #[error("provider {provider} request for {capability} failed: {source}")]
    Http {
        provider: String,
        capability: Capability,
        #[source]
        source: ChatError,
    },
    #[error("failed to load provider table {path}: {message}")]
    Table { path: String, message: String },
}

/// Generates the texts needed by the semantic perturbations.
pub trait TextProvider: Send + Sync {
    fn name(&self) -> &str;

    /// Rephrases the entire question while preserving its meaning.
    fn paraphrase(&self, question_text: &str) -> Result<String, ProviderError>;

    /// Returns the question rewritten with `count` words replaced by
    /// synonyms.
    fn synonym_rewrite(&self, question_text: &str, count: usize) -> Result<String, ProviderError>;

    /// Returns the label text for a new middle category, given the
    /// substantive option texts in presentation order.
    fn middle_label(&self, scale_texts: &[&str]) -> Result<String, ProviderError>;
}

// ---------------------------------------------------------------------------
// Stub provider
// ---------------------------------------------------------------------------

/// Identity provider for hermetic pipelines: paraphrase and synonym rewrites
/// return the input unchanged, and the middle label is always "Neutral".
#[derive(Clone, Copy, Debug, Default)]
pub struct StubProvider;

impl TextProvider for StubProvider {
    fn name(&self) -> &str {
        "stub"
    }

    fn paraphrase(&self, question_text: &str) -> Result<String, ProviderError> {
        Ok(question_text.to_string())
    }

    fn synonym_rewrite(&self, question_text: &str, _count: usize) -> Result<String, ProviderError> {
        Ok(question_text.to_string())
    }

    fn middle_label(&self, _scale_texts: &[&str]) -> Result<String, ProviderError> {
        Ok("Neutral".to_string())
    }
}

// ---------------------------------------------------------------------------
// Fixture provider
// ---------------------------------------------------------------------------

/// Table-driven provider keyed by exact input text. Paraphrases and synonym
/// rewrites are looked up by the full question text; middle labels by the
/// substantive option texts joined with [`MIDDLE_KEY_SEPARATOR`]. Missing
/// entries are errors, which the condition generator turns into logged skips.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FixtureProvider {
    name: String,
    paraphrases: BTreeMap<String, String>,
    synonyms: BTreeMap<String, String>,
    middle_labels: BTreeMap<String, String>,
}

/// On-disk shape of a fixture provider table.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProviderTableFile {
    #[serde(default)]
    name: Option<String>,
    #[serde(default)]
    paraphrases: BTreeMap<String, String>,
    #[serde(default)]
    synonyms: BTreeMap<String, String>,
    #[serde(default)]
    middle_labels: BTreeMap<String, String>,
}

impl FixtureProvider {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            ..Self::default()
        }
    }

    /// Builds the lookup key used for middle labels.
    pub fn middle_key(scale_texts: &[&str]) -> String {
        scale_texts.join(MIDDLE_KEY_SEPARATOR)
    }

    pub fn insert_paraphrase(&mut self, question: impl Into<String>, text: impl Into<String>) {
        self.paraphrases.insert(question.into(), text.into());
    }

    pub fn insert_synonyms(&mut self, question: impl Into<String>, text: impl Into<String>) {
        self.synonyms.insert(question.into(), text.into());
    }

    pub fn insert_middle_label(&mut self, key: impl Into<String>, text: impl Into<String>) {
        self.middle_labels.insert(key.into(), text.into());
    }

    /// Provider preloaded with the reference entries for the bundled
    /// "importance of family" question: its published paraphrase, synonym
    /// rewrite, and the "Neutral" middle label for its 4-point scale.
    pub fn table_one() -> Self {
        let question = "For each of the following aspects, indicate how important it is in \
                        your life. Would you say it is very important, rather important, not \
                        very important or not important at all? Family";
        let mut provider = Self::new("table-one");
        provider.insert_paraphrase(
            question,
            "How important is family to you? Please rate its significance in your life on a \
             scale of \"very important\" to \"not important at all\".",
        );
        provider.insert_synonyms(
            question,
            "Crucial in life: Family For each of the following aspects, indicate how \
             significant it is in your life. Would you say it is very important, rather \
             important, not very important or not at all important? Family",
        );
        provider.insert_middle_label(
            Self::middle_key(&[
                "Very important",
                "Rather important",
                "Not very important",
                "Not important at all",
            ]),
            "Neutral",
        );
        provider
    }

    /// Loads a table from a JSON file; every entry value must be non-empty.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, ProviderError> {
        let path = path.as_ref();
        let table_error = |message: String| ProviderError::Table {
            path: path.display().to_string(),
            message,
        };
        let contents = std::fs::read_to_string(path).map_err(|e| table_error(e.to_string()))?;
        let file: ProviderTableFile =
            serde_json::from_str(&contents).map_err(|e| table_error(e.to_string()))?;
        let tables = [
            ("paraphrases", &file.paraphrases),
            ("synonyms", &file.synonyms),
            ("middle_labels", &file.middle_labels),
        ];
        for (table, entries) in tables {
            for (key, value) in entries {
                if value.trim().is_empty() {
                    return Err(table_error(format!("{table} entry {key:?} is empty")));
                }
            }
        }
        let name = file
            .name
            .unwrap_or_else(|| format!("fixture:{}", path.display()));
        Ok(Self {
            name,
            paraphrases: file.paraphrases,
            synonyms: file.synonyms,
            middle_labels: file.middle_labels,
        })
    }

    fn lookup(
        &self,
        table: &BTreeMap<String, String>,
        capability: Capability,
        key: &str,
    ) -> Result<String, ProviderError> {
        table
            .get(key)
            .cloned()
            .ok_or_else(|| ProviderError::MissingEntry {
                provider: self.name.clone(),
                capability,
                key: key.to_string(),
            })
    }
}

impl TextProvider for FixtureProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn paraphrase(&self, question_text: &str) -> Result<String, ProviderError> {
        self.lookup(&self.paraphrases, Capability::Paraphrase, question_text)
    }

    fn synonym_rewrite(&self, question_text: &str, _count: usize) -> Result<String, ProviderError> {
        self.lookup(&self.synonyms, Capability::Synonyms, question_text)
    }

    fn middle_label(&self, scale_texts: &[&str]) -> Result<String, ProviderError> {
        let key = Self::middle_key(scale_texts);
        self.lookup(&self.middle_labels, Capability::MiddleLabel, &key)
    }
}

// ---------------------------------------------------------------------------
// HTTP provider
// ---------------------------------------------------------------------------

/// Provider that delegates to a chat-completion endpoint. Generation runs at
/// temperature 0 by default so a fixed endpoint and input stay deterministic.
pub struct HttpTextProvider {
    name: String,
    client: ChatClient,
    params: GenerationParams,
}

impl HttpTextProvider {
    pub fn new(name: impl Into<String>, config: EndpointConfig) -> Result<Self, ProviderError> {
        let name = name.into();
        let params = GenerationParams {
            temperature: 0.0,
            max_tokens: 256,
            ..GenerationParams::default()
        };
        let client = ChatClient::new(config).map_err(|source| ProviderError::Http {
            provider: name.clone(),
            capability: Capability::Paraphrase,
            source,
        })?;
        Ok(Self {
            name,
            client,
            params,
        })
    }

    pub fn with_params(mut self, params: GenerationParams) -> Self {
        self.params = params;
        self
    }

    fn generate(&self, capability: Capability, prompt: &str) -> Result<String, ProviderError> {
        let raw = self
            .client
            .complete(prompt, &self.params)
            .map_err(|source| ProviderError::Http {
                provider: self.name.clone(),
                capability,
                source,
            })?;
        let text = raw.trim().to_string();
        if text.is_empty() {
            return Err(ProviderError::EmptyOutput {
                provider: self.name.clone(),
                capability,
            });
        }
        Ok(text)
    }
}

impl TextProvider for HttpTextProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn paraphrase(&self, question_text: &str) -> Result<String, ProviderError> {
        let prompt = format!(
            "Rephrase the following survey question so the meaning is unchanged. Reply with \
             only the rephrased question.\n\n{question_text}"
        );
        self.generate(Capability::Paraphrase, &prompt)
    }

    fn synonym_rewrite(&self, question_text: &str, count: usize) -> Result<String, ProviderError> {
        let prompt = format!(
            "Rewrite the following survey question, replacing {count} words with synonyms \
             while preserving the meaning. Reply with only the rewritten question.\n\n\
             {question_text}"
        );
        self.generate(Capability::Synonyms, &prompt)
    }

    fn middle_label(&self, scale_texts: &[&str]) -> Result<String, ProviderError> {
        let prompt = format!(
            "A survey answer scale has these options in order: {}. Provide a short, \
             semantically appropriate label for a new middle category between the two central \
             options. Reply with only the label text.",
            scale_texts.join(", ")
        );
        self.generate(Capability::MiddleLabel, &prompt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stub_is_identity_with_neutral_middle() {
        let stub = StubProvider;
        assert_eq!(stub.paraphrase("How are you?").unwrap(), "How are you?");
        assert_eq!(
            stub.synonym_rewrite("How are you?", 5).unwrap(),
            "How are you?"
        );
        assert_eq!(stub.middle_label(&["a", "b"]).unwrap(), "Neutral");
    }

    #[test]
    fn table_one_serves_the_reference_entries() {
        let provider = FixtureProvider::table_one();
        let question = "For each of the following aspects, indicate how important it is in \
                        your life. Would you say it is very important, rather important, not \
                        very important or not important at all? Family";
        assert!(provider
            .paraphrase(question)
            .unwrap()
            .starts_with("How important is family to you?"));
        assert!(provider
            .synonym_rewrite(question, 5)
            .unwrap()
            .contains("how significant it is in your life"));
        let middle = provider
            .middle_label(&[
                "Very important",
                "Rather important",
                "Not very important",
                "Not important at all",
            ])
            .unwrap();
        assert_eq!(middle, "Neutral");
    }

    #[test]
    fn missing_entries_name_the_capability_and_key() {
        let provider = FixtureProvider::new("empty");
        let error = provider.paraphrase("unknown question").unwrap_err();
        match error {
            ProviderError::MissingEntry {
                provider,
                capability,
                key,
            } => {
                assert_eq!(provider, "empty");
                assert_eq!(capability, Capability::Paraphrase);
                assert_eq!(key, "unknown question");
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn fixture_round_trips_through_a_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("provider.json");
        std::fs::write(
            &path,
            r#"{
                "name": "test-table",
                "paraphrases": {"q?": "q, rephrased?"},
                "synonyms": {"q?": "q, with synonyms?"},
                "middle_labels": {"low | high": "medium"}
            }"#,
        )
        .unwrap();
        let provider = FixtureProvider::from_file(&path).unwrap();
        assert_eq!(provider.name(), "test-table");
        assert_eq!(provider.paraphrase("q?").unwrap(), "q, rephrased?");
        assert_eq!(
            provider.synonym_rewrite("q?", 3).unwrap(),
            "q, with synonyms?"
        );
        assert_eq!(provider.middle_label(&["low", "high"]).unwrap(), "medium");
    }

    #[test]
    fn empty_table_values_and_unknown_fields_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let empty_value = dir.path().join("empty.json");
        std::fs::write(&empty_value, r#"{"paraphrases": {"q": "  "}}"#).unwrap();
        assert!(matches!(
            FixtureProvider::from_file(&empty_value),
            Err(ProviderError::Table { .. })
        ));

        let unknown = dir.path().join("unknown.json");
        std::fs::write(&unknown, r#"{"paraphrase": {}}"#).unwrap();
        assert!(matches!(
            FixtureProvider::from_file(&unknown),
            Err(ProviderError::Table { .. })
        ));
    }

    #[test]
    fn middle_key_join_is_order_sensitive() {
        assert_eq!(FixtureProvider::middle_key(&["a", "b"]), "a | b");
        assert_ne!(
            FixtureProvider::middle_key(&["a", "b"]),
            FixtureProvider::middle_key(&["b", "a"])
        );
    }
}
