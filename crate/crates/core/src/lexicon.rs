//! Offline keyword-count classifier exposing the completion-provider
//! interface. Deterministic; used as an end-to-end oracle and as a
//! no-network backend.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{CompletionProvider, CompletionRequest, TokenProb};
use crate::framing::Frame;
use crate::jsonl::{self, StoreError};
use crate::net::ProviderError;

const DEFAULT_LEXICON: &str = include_str!("../data/lexicon.jsonl");

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("frame {0} has no keywords")]
    EmptyFrame(Frame),
    #[error("keyword {keyword:?} listed for both {first} and {second}")]
    SharedKeyword {
        keyword: String,
        first: Frame,
        second: Frame,
    },
    #[error("keyword {0:?} must be a single lowercase word")]
    BadKeyword(String),
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LexiconRow {
    frame: Frame,
    keywords: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameLexicon {
    keywords: BTreeMap<Frame, BTreeSet<String>>,
}

impl FrameLexicon {
    pub fn new(keywords: BTreeMap<Frame, BTreeSet<String>>) -> Result<Self, LexiconError> {
        let mut owner: BTreeMap<&str, Frame> = BTreeMap::new();
        for frame in Frame::ALL {
            let words = keywords.get(&frame).filter(|w| !w.is_empty());
            let words = words.ok_or(LexiconError::EmptyFrame(frame))?;
            for w in words {
                if w.is_empty() || w.chars().any(|c| !c.is_alphanumeric() || c.is_uppercase()) {
                    return Err(LexiconError::BadKeyword(w.clone()));
                }
                if let Some(first) = owner.insert(w, frame) {
                    return Err(LexiconError::SharedKeyword {
                        keyword: w.clone(),
                        first,
                        second: frame,
                    });
                }
            }
        }
        Ok(Self { keywords })
    }

    /// Parses a lexicon file body: JSONL of `{frame, keywords}`. Rows for
    /// the same frame are merged.
    pub fn from_jsonl_str(src: &str) -> Result<Self, LexiconError> {
        let mut keywords: BTreeMap<Frame, BTreeSet<String>> = BTreeMap::new();
        for (idx, line) in src.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: LexiconRow =
                serde_json::from_str(line).map_err(|source| LexiconError::Parse {
                    line: idx + 1,
                    source,
                })?;
            keywords.entry(row.frame).or_default().extend(row.keywords);
        }
        Self::new(keywords)
    }

    pub fn load(path: &Path) -> Result<Self, LexiconError> {
        let rows: Vec<LexiconRow> = jsonl::read_all(path)?;
        let mut keywords: BTreeMap<Frame, BTreeSet<String>> = BTreeMap::new();
        for row in rows {
            keywords.entry(row.frame).or_default().extend(row.keywords);
        }
        Self::new(keywords)
    }

    pub fn keywords(&self, frame: Frame) -> &BTreeSet<String> {
        &self.keywords[&frame]
    }

    pub fn frame_of(&self, word: &str) -> Option<Frame> {
        Frame::ALL
            .into_iter()
            .find(|f| self.keywords[f].contains(word))
    }

    /// Keyword hits per frame, indexed by [`Frame::index`].
    pub fn hit_counts(&self, text: &str) -> [usize; 5] {
        let mut hits = [0; 5];
        for word in text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
        {
            if let Some(frame) = self.frame_of(&word.to_lowercase()) {
                hits[frame.index()] += 1;
            }
        }
        hits
    }
}

impl Default for FrameLexicon {
    fn default() -> Self {
        Self::from_jsonl_str(DEFAULT_LEXICON).expect("bundled lexicon is valid")
    }
}

/// Emits one alternative per frame with hits: the first word of the frame's
/// label with logprob `ln(hits / total)`. No hits yields a lone `"None"`.
pub fn lexicon_complete(text: &str, lexicon: &FrameLexicon) -> Vec<TokenProb> {
    let hits = lexicon.hit_counts(text);
    let total: usize = hits.iter().sum();
    if total == 0 {
        return vec![TokenProb::new("None", 0.0)];
    }
    Frame::ALL
        .into_iter()
        .filter(|f| hits[f.index()] > 0)
        .map(|f| {
            let token = f.label().split_whitespace().next().unwrap_or(f.label());
            TokenProb::new(token, (hits[f.index()] as f64 / total as f64).ln())
        })
        .collect()
}

pub struct LexiconProvider {
    lexicon: FrameLexicon,
    calls: AtomicUsize,
}

impl LexiconProvider {
    pub fn new(lexicon: FrameLexicon) -> Self {
        Self {
            lexicon,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

#[async_trait]
impl CompletionProvider for LexiconProvider {
    fn provider_id(&self) -> &str {
        "lexicon"
    }

    async fn complete(
        &self,
        request: &CompletionRequest<'_>,
    ) -> Result<Vec<TokenProb>, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(lexicon_complete(request.text, &self.lexicon))
    }
}
