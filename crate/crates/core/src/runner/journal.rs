//! Line-oriented persistence for runs: one JSON document per line, appended
//! as work completes. Readers tolerate a torn final line (a crash mid-write)
//! but treat interior corruption as an error.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::perturb::{PerturbationKind, PerturbedCondition};

/// Terminal status of one interview cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterviewStatus {
    /// The backend produced a reply (whatever its content).
    Completed,
    /// The backend failed at the transport level after retries; the cell is
    /// eligible for re-execution on resume.
    TransportFailed,
}

/// One executed interview cell. Appended to the run log exactly once per
/// attempt; the latest record per cell is authoritative.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterviewRecord {
    pub backend_name: String,
    pub question_id: String,
    pub kind: PerturbationKind,
    pub repetition: u32,
    pub rendered_prompt: String,
    /// Raw reply text; empty when the cell failed.
    pub raw_response: String,
    pub status: InterviewStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Unix epoch milliseconds at cell start; 0 for deterministic backends so
    /// reruns are byte-identical.
    pub timestamp_ms: u64,
    /// Wall-clock duration of the backend call in milliseconds; 0 for
    /// deterministic backends.
    pub latency_ms: u64,
}

/// Identity of a cell within a run: one (backend, question, condition,
/// repetition) combination.
pub type CellKey = (String, String, PerturbationKind, u32);

impl InterviewRecord {
    pub fn cell_key(&self) -> CellKey {
        (
            self.backend_name.clone(),
            self.question_id.clone(),
            self.kind,
            self.repetition,
        )
    }
}

/// A generated condition together with the exact prompt it renders to;
/// persisted so resumed runs replay identical prompts instead of regenerating
/// them (text providers are not required to be reproducible).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionRecord {
    #[serde(flatten)]
    pub condition: PerturbedCondition,
    pub rendered_prompt: String,
}

#[derive(Debug, Error)]
pub enum JournalError {
    #[error("failed to access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: corrupt record: {source}")]
    CorruptLine {
        path: String,
        /// 1-based line number.
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("failed to serialize record: {0}")]
    Serialize(#[source] serde_json::Error),
}

/// Reads every record from a JSONL file. Blank lines are skipped. A parse
/// failure on the final non-blank line is tolerated with a warning (torn tail
/// from an interrupted write); a failure anywhere else is an error carrying
/// the 1-based line number.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, JournalError> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|source| JournalError::Io {
        path: display.clone(),
        source,
    })?;
    let reader = BufReader::new(file);
    let lines: Vec<String> =
        reader
            .lines()
            .collect::<Result<_, _>>()
            .map_err(|source| JournalError::Io {
                path: display.clone(),
                source,
            })?;
    let last_non_blank = lines.iter().rposition(|line| !line.trim().is_empty());

    let mut records = Vec::new();
    for (index, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<T>(line) {
            Ok(record) => records.push(record),
            Err(source) => {
                if Some(index) == last_non_blank {
                    log::warn!(
                        "{display} line {}: torn final record ignored ({source})",
                        index + 1
                    );
                    break;
                }
                return Err(JournalError::CorruptLine {
                    path: display,
                    line: index + 1,
                    source,
                });
            }
        }
    }
    Ok(records)
}

/// Serializes one record as a line and flushes it, so a crash can tear at
/// most the final line.
pub fn write_line<T: Serialize, W: Write>(writer: &mut W, record: &T) -> Result<(), JournalError> {
    let mut line = serde_json::to_string(record).map_err(JournalError::Serialize)?;
    line.push('\n');
    writer
        .write_all(line.as_bytes())
        .and_then(|()| writer.flush())
        .map_err(|source| JournalError::Io {
            path: "<writer>".to_string(),
            source,
        })
}

/// Writes a whole JSONL file at once (used for condition lists).
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), JournalError> {
    let display = path.display().to_string();
    let mut file = File::create(path).map_err(|source| JournalError::Io {
        path: display.clone(),
        source,
    })?;
    for record in records {
        let mut line = serde_json::to_string(record).map_err(JournalError::Serialize)?;
        line.push('\n');
        file.write_all(line.as_bytes())
            .map_err(|source| JournalError::Io {
                path: display.clone(),
                source,
            })?;
    }
    file.flush().map_err(|source| JournalError::Io {
        path: display,
        source,
    })
}

/// Collapses an append-only log to its logical view: the latest record per
/// cell, in first-appearance order of the cells.
pub fn latest_by_cell(records: Vec<InterviewRecord>) -> Vec<InterviewRecord> {
    let mut order: Vec<CellKey> = Vec::new();
    let mut latest: BTreeMap<CellKey, InterviewRecord> = BTreeMap::new();
    for record in records {
        let key = record.cell_key();
        if !latest.contains_key(&key) {
            order.push(key.clone());
        }
        latest.insert(key, record);
    }
    order
        .into_iter()
        .map(|key| latest.remove(&key).expect("key was inserted"))
        .collect()
}
