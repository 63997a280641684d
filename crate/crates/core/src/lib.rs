//! Core pipeline for comparing machine and human news-frame labels.
//!
//! Corpus ingest, machine translation, prompt construction, first-token
//! frame classification, human annotation storage and agreement analytics.

use std::fmt::Display;

use serde::{Deserialize, Serialize};

pub mod analysis;
pub mod annotation;
pub mod classifier;
pub mod clock;
pub mod corpus;
pub mod framing;
pub mod jsonl;
pub mod lexicon;
pub mod net;
pub mod translation;

pub use framing::{Frame, FrameOrder};

/// One item that a batch step could not process.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemFailure {
    pub item_id: String,
    pub error: String,
}

impl ItemFailure {
    pub fn new(item_id: &str, err: &impl Display) -> Self {
        Self {
            item_id: item_id.to_string(),
            error: err.to_string(),
        }
    }
}
