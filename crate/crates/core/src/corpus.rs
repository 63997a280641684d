//! Transcript corpus: ingestion from JSONL or CSV, word counts, and
//! per-program length statistics.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jsonl::{self, StoreError};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("duplicate item_id {item_id:?} on line {line}")]
    DuplicateId { item_id: String, line: usize },
    #[error("corpus has no valid rows ({} malformed)", .malformed.len())]
    EmptyCorpus { malformed: Vec<MalformedRow> },
    #[error("unknown corpus format {0:?} (expected jsonl or csv)")]
    UnknownFormat(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// A row that could not be turned into a [`TranscriptItem`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MalformedRow {
    pub line: usize,
    pub reason: String,
}

impl fmt::Display for MalformedRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.reason)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    Jsonl,
    Csv,
}

impl FromStr for CorpusFormat {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "json" => Ok(CorpusFormat::Jsonl),
            "csv" => Ok(CorpusFormat::Csv),
            _ => Err(CorpusError::UnknownFormat(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptItem {
    pub item_id: String,
    pub program: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub air_date: Option<NaiveDate>,
    pub language: String,
    pub text: String,
    pub word_count: usize,
}

impl TranscriptItem {
    pub fn new(
        item_id: impl Into<String>,
        program: impl Into<String>,
        language: impl Into<String>,
        text: impl Into<String>,
    ) -> Self {
        let text = text.into();
        Self {
            item_id: item_id.into(),
            program: program.into(),
            air_date: None,
            language: language.into(),
            word_count: word_count(&text),
            text,
        }
    }
}

/// Number of maximal runs of non-whitespace characters.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Input row as found in a JSONL or CSV source. Everything optional so a
/// missing field becomes a [`MalformedRow`] instead of a parse failure.
#[derive(Debug, Deserialize)]
struct RawRow {
    #[serde(default, alias = "id")]
    item_id: Option<String>,
    #[serde(default)]
    program: Option<String>,
    #[serde(default)]
    air_date: Option<String>,
    #[serde(default)]
    language: Option<String>,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    word_count: Option<usize>,
}

impl RawRow {
    fn into_item(self) -> Result<TranscriptItem, String> {
        let item_id = self
            .item_id
            .filter(|s| !s.trim().is_empty())
            .ok_or("missing or empty item_id")?;
        let program = self.program.ok_or("missing program")?;
        let language = self
            .language
            .filter(|s| !s.trim().is_empty())
            .ok_or("missing language")?;
        let text = self.text.ok_or("missing text")?;
        let air_date = match self.air_date.as_deref().map(str::trim) {
            None | Some("") => None,
            Some(raw) => Some(
                NaiveDate::parse_from_str(raw, "%Y-%m-%d")
                    .map_err(|e| format!("bad air_date {raw:?}: {e}"))?,
            ),
        };
        let counted = word_count(&text);
        if let Some(stored) = self.word_count {
            if stored != counted {
                return Err(format!(
                    "stored word_count {stored} does not match text ({counted})"
                ));
            }
        }
        Ok(TranscriptItem {
            item_id,
            program,
            air_date,
            language,
            text,
            word_count: counted,
        })
    }
}

/// Result of a successful ingest; malformed rows are reported, not fatal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ingested {
    pub items: Vec<TranscriptItem>,
    pub malformed: Vec<MalformedRow>,
}

pub fn ingest_corpus(path: &Path, format: CorpusFormat) -> Result<Ingested, CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    let rows = match format {
        CorpusFormat::Jsonl => read_jsonl_rows(BufReader::new(file)).map_err(io_err)?,
        CorpusFormat::Csv => read_csv_rows(file),
    };
    build_corpus(rows)
}

type RowResult = (usize, Result<RawRow, String>);

fn read_jsonl_rows(reader: impl BufRead) -> std::io::Result<Vec<RowResult>> {
    let mut rows = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<RawRow>(&line).map_err(|e| e.to_string());
        rows.push((idx + 1, parsed));
    }
    Ok(rows)
}

fn read_csv_rows(file: File) -> Vec<RowResult> {
    let mut reader = csv::ReaderBuilder::new().flexible(false).from_reader(file);
    reader
        .deserialize::<RawRow>()
        .enumerate()
        .map(|(idx, rec)| {
            // Header is line 1; prefer the reader's own position when it has one.
            let line = match &rec {
                Err(e) => e.position().map(|p| p.line() as usize),
                Ok(_) => None,
            }
            .unwrap_or(idx + 2);
            (line, rec.map_err(|e| e.to_string()))
        })
        .collect()
}

fn build_corpus(rows: Vec<RowResult>) -> Result<Ingested, CorpusError> {
    let mut items = Vec::new();
    let mut malformed = Vec::new();
    let mut seen = HashSet::new();
    for (line, row) in rows {
        match row.and_then(RawRow::into_item) {
            Ok(item) => {
                if !seen.insert(item.item_id.clone()) {
                    return Err(CorpusError::DuplicateId {
                        item_id: item.item_id,
                        line,
                    });
                }
                items.push(item);
            }
            Err(reason) => malformed.push(MalformedRow { line, reason }),
        }
    }
    if items.is_empty() {
        return Err(CorpusError::EmptyCorpus { malformed });
    }
    Ok(Ingested { items, malformed })
}

/// Writes the canonical `corpus.jsonl` store.
pub fn write_corpus(path: &Path, items: &[TranscriptItem]) -> Result<(), CorpusError> {
    Ok(jsonl::write_all(path, items)?)
}

/// Reads a canonical store; any malformed row is an error here.
pub fn read_corpus(path: &Path) -> Result<Vec<TranscriptItem>, CorpusError> {
    let ingested = ingest_corpus(path, CorpusFormat::Jsonl)?;
    if let Some(bad) = ingested.malformed.first() {
        return Err(CorpusError::Io {
            path: path.display().to_string(),
            source: std::io::Error::new(std::io::ErrorKind::InvalidData, bad.to_string()),
        });
    }
    Ok(ingested.items)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProgramStats {
    pub program: String,
    pub count: usize,
    pub mean_word_count: f64,
    pub min_word_count: usize,
    pub max_word_count: usize,
}

/// Per-program summary, keyed and sorted by program name.
pub fn corpus_stats(items: &[TranscriptItem]) -> Vec<ProgramStats> {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for item in items {
        groups
            .entry(&item.program)
            .or_default()
            .push(item.word_count);
    }
    groups
        .into_iter()
        .map(|(program, counts)| ProgramStats {
            program: program.to_string(),
            count: counts.len(),
            mean_word_count: counts.iter().sum::<usize>() as f64 / counts.len() as f64,
            min_word_count: counts.iter().copied().min().unwrap_or(0),
            max_word_count: counts.iter().copied().max().unwrap_or(0),
        })
        .collect()
}
