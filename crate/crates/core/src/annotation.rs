//! Annotation batches (forms) and the human annotation store.
//!
//! Annotations are append-only: a resubmission for the same (item,
//! annotator) is appended and supersedes the earlier one, which stays in the
//! file as audit trail.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clock::Clock;
use crate::corpus::{word_count, TranscriptItem};
use crate::framing::{Frame, FramingError};
use crate::jsonl::{self, JsonlAppender, StoreError};
use crate::translation::TranslationRecord;

pub const DEFAULT_PER_BATCH: usize = 50;
pub const DEFAULT_N_BATCHES: usize = 20;
pub const DEFAULT_ANNOTATOR: &str = "annotator";

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("program {program:?} needs {needed} items but has {available}")]
    InsufficientItems {
        program: String,
        needed: usize,
        available: usize,
    },
    #[error("batch size and batch count must be positive")]
    InvalidBatchShape,
    #[error("unknown item {0:?}")]
    UnknownItem(String),
    #[error("alternative frame must differ from the main frame")]
    AlternativeEqualsMain,
    #[error("unknown frame label {0:?}")]
    UnknownFrameLabel(String),
    #[error("annotator_id must not be empty")]
    EmptyAnnotator,
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationBatch {
    pub batch_id: String,
    pub program: String,
    pub item_ids: Vec<String>,
    pub created_at: DateTime<Utc>,
}

fn program_seed(seed: u64, program: &str) -> u64 {
    let digest = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update(program.as_bytes())
        .finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// For every program: shuffle its items with a PRNG seeded from `seed` and
/// the program name, then cut the first `per_batch * n_batches` into
/// consecutive batches. Programs are visited in name order.
pub fn generate_batches(
    items: &[TranscriptItem],
    per_batch: usize,
    n_batches: usize,
    seed: u64,
    clock: &dyn Clock,
) -> Result<Vec<AnnotationBatch>, AnnotationError> {
    if per_batch == 0 || n_batches == 0 {
        return Err(AnnotationError::InvalidBatchShape);
    }
    let needed = per_batch * n_batches;
    let mut by_program: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for item in items {
        by_program
            .entry(&item.program)
            .or_default()
            .push(&item.item_id);
    }

    let created_at = clock.now();
    let mut out = Vec::new();
    for (program, mut ids) in by_program {
        if ids.len() < needed {
            return Err(AnnotationError::InsufficientItems {
                program: program.to_string(),
                needed,
                available: ids.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(program_seed(seed, program));
        ids.shuffle(&mut rng);
        for (n, chunk) in ids[..needed].chunks(per_batch).enumerate() {
            out.push(AnnotationBatch {
                batch_id: format!("{program}-{:02}", n + 1),
                program: program.to_string(),
                item_ids: chunk.iter().map(|s| s.to_string()).collect(),
                created_at,
            });
        }
    }
    Ok(out)
}

pub fn write_batches(path: &Path, batches: &[AnnotationBatch]) -> Result<(), StoreError> {
    jsonl::write_all(path, batches)
}

pub fn read_batches(path: &Path) -> Result<Vec<AnnotationBatch>, StoreError> {
    jsonl::read_all(path)
}

/// Which text the annotator was shown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TextVariant {
    #[default]
    Original,
    Translation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShownText {
    pub item_id: String,
    pub program: String,
    pub variant: TextVariant,
    pub language: String,
    pub text: String,
    pub word_count: usize,
}

/// The text served for each item: its translation when one exists, the
/// original otherwise.
#[derive(Debug, Clone, Default)]
pub struct ShownTexts {
    by_item: HashMap<String, ShownText>,
}

impl ShownTexts {
    pub fn build(
        items: &[TranscriptItem],
        translations: &HashMap<String, TranslationRecord>,
    ) -> Self {
        let by_item = items
            .iter()
            .map(|item| {
                let shown = match translations.get(&item.item_id) {
                    Some(t) => ShownText {
                        item_id: item.item_id.clone(),
                        program: item.program.clone(),
                        variant: TextVariant::Translation,
                        language: t.target_language.clone(),
                        text: t.translated_text.clone(),
                        word_count: t.translated_word_count,
                    },
                    None => ShownText {
                        item_id: item.item_id.clone(),
                        program: item.program.clone(),
                        variant: TextVariant::Original,
                        language: item.language.clone(),
                        text: item.text.clone(),
                        word_count: item.word_count,
                    },
                };
                (item.item_id.clone(), shown)
            })
            .collect();
        Self { by_item }
    }

    pub fn get(&self, item_id: &str) -> Option<&ShownText> {
        self.by_item.get(item_id)
    }

    pub fn len(&self) -> usize {
        self.by_item.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_item.is_empty()
    }
}

/// What a client submits; the server fills in the rest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationSubmission {
    pub item_id: String,
    #[serde(default)]
    pub annotator_id: Option<String>,
    pub main_frame: String,
    #[serde(default)]
    pub alternative_frame: Option<String>,
    #[serde(default)]
    pub evidence_sentences: Vec<String>,
    #[serde(default)]
    pub comments: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub item_id: String,
    pub annotator_id: String,
    pub main_frame: Frame,
    #[serde(default)]
    pub alternative_frame: Option<Frame>,
    #[serde(default)]
    pub evidence_sentences: Vec<String>,
    #[serde(default)]
    pub comments: Option<String>,
    #[serde(default)]
    pub evidence_verified: bool,
    #[serde(default)]
    pub shown_variant: TextVariant,
    /// Word count of the text the annotator saw.
    #[serde(default)]
    pub shown_word_count: Option<usize>,
    pub submitted_at: DateTime<Utc>,
}

fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// True iff every sentence, whitespace-collapsed, occurs in the
/// whitespace-collapsed `text`.
pub fn verify_evidence(sentences: &[String], text: &str) -> bool {
    let text = collapse_whitespace(text);
    sentences
        .iter()
        .all(|s| text.contains(&collapse_whitespace(s)))
}

fn parse_frame(label: &str) -> Result<Frame, AnnotationError> {
    label.parse().map_err(|e| match e {
        FramingError::UnknownFrameLabel(l) => AnnotationError::UnknownFrameLabel(l),
        other => AnnotationError::UnknownFrameLabel(other.to_string()),
    })
}

/// Validates a submission against the item it refers to.
pub fn validate_submission(
    sub: &AnnotationSubmission,
    texts: &ShownTexts,
    clock: &dyn Clock,
) -> Result<Annotation, AnnotationError> {
    let shown = texts
        .get(&sub.item_id)
        .ok_or_else(|| AnnotationError::UnknownItem(sub.item_id.clone()))?;
    let main_frame = parse_frame(&sub.main_frame)?;
    let alternative_frame = match sub.alternative_frame.as_deref().map(str::trim) {
        None | Some("") => None,
        Some(l) if l.eq_ignore_ascii_case("none") => None,
        Some(l) => Some(parse_frame(l)?),
    };
    if alternative_frame == Some(main_frame) {
        return Err(AnnotationError::AlternativeEqualsMain);
    }
    let annotator_id = sub
        .annotator_id
        .clone()
        .unwrap_or_else(|| DEFAULT_ANNOTATOR.to_string());
    if annotator_id.trim().is_empty() {
        return Err(AnnotationError::EmptyAnnotator);
    }
    Ok(Annotation {
        item_id: sub.item_id.clone(),
        annotator_id,
        main_frame,
        alternative_frame,
        evidence_verified: verify_evidence(&sub.evidence_sentences, &shown.text),
        evidence_sentences: sub.evidence_sentences.clone(),
        comments: sub.comments.clone().filter(|c| !c.trim().is_empty()),
        shown_variant: shown.variant,
        shown_word_count: Some(word_count(&shown.text)),
        submitted_at: clock.now(),
    })
}

/// `annotations.jsonl` with latest-wins lookup per (item, annotator).
pub struct AnnotationStore {
    path: PathBuf,
    latest: HashMap<(String, String), Annotation>,
    entries: usize,
    writer: Option<JsonlAppender>,
}

impl AnnotationStore {
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        let all: Vec<Annotation> = jsonl::read_all_if_exists(path)?;
        let entries = all.len();
        let mut latest = HashMap::new();
        for a in all {
            latest.insert((a.item_id.clone(), a.annotator_id.clone()), a);
        }
        Ok(Self {
            path: path.to_path_buf(),
            latest,
            entries,
            writer: None,
        })
    }

    pub fn insert(&mut self, annotation: Annotation) -> Result<(), StoreError> {
        if self.writer.is_none() {
            self.writer = Some(JsonlAppender::open(&self.path)?);
        }
        self.writer
            .as_mut()
            .expect("just opened")
            .append(&annotation)?;
        self.entries += 1;
        self.latest.insert(
            (annotation.item_id.clone(), annotation.annotator_id.clone()),
            annotation,
        );
        Ok(())
    }

    /// Current annotations sorted by (item, annotator).
    pub fn latest(&self) -> Vec<&Annotation> {
        let mut v: Vec<&Annotation> = self.latest.values().collect();
        v.sort_by(|a, b| (&a.item_id, &a.annotator_id).cmp(&(&b.item_id, &b.annotator_id)));
        v
    }

    pub fn query(&self, item_id: Option<&str>, annotator_id: Option<&str>) -> Vec<&Annotation> {
        self.latest()
            .into_iter()
            .filter(|a| item_id.is_none_or(|i| a.item_id == i))
            .filter(|a| annotator_id.is_none_or(|x| a.annotator_id == x))
            .collect()
    }

    /// Items with at least one annotation, optionally by one annotator.
    pub fn done_items(&self, annotator_id: Option<&str>) -> HashSet<&str> {
        self.latest
            .values()
            .filter(|a| annotator_id.is_none_or(|x| a.annotator_id == x))
            .map(|a| a.item_id.as_str())
            .collect()
    }

    /// Lines in the file, superseded ones included.
    pub fn entries(&self) -> usize {
        self.entries
    }
}

/// Validates, verifies evidence, and persists one submission.
pub fn record_annotation(
    sub: &AnnotationSubmission,
    texts: &ShownTexts,
    store: &mut AnnotationStore,
    clock: &dyn Clock,
) -> Result<Annotation, AnnotationError> {
    let annotation = validate_submission(sub, texts, clock)?;
    store.insert(annotation.clone())?;
    Ok(annotation)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BatchProgress {
    pub batch_id: String,
    pub program: String,
    pub done: usize,
    pub total: usize,
}

pub fn batch_progress(
    batches: &[AnnotationBatch],
    store: &AnnotationStore,
    annotator_id: Option<&str>,
) -> Vec<BatchProgress> {
    let done = store.done_items(annotator_id);
    batches
        .iter()
        .map(|b| BatchProgress {
            batch_id: b.batch_id.clone(),
            program: b.program.clone(),
            done: b
                .item_ids
                .iter()
                .filter(|i| done.contains(i.as_str()))
                .count(),
            total: b.item_ids.len(),
        })
        .collect()
}
