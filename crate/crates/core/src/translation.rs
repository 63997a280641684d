//! Transcript translation through a pluggable provider, backed by an
//! append-only cache so each (item, provider, target) is translated once.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use async_trait::async_trait;
use chrono::{DateTime, Utc};
use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::corpus::{word_count, TranscriptItem};
use crate::jsonl::{self, JsonlAppender, StoreError};
use crate::net::{send_with_retry, ProviderError, RetryPolicy};
use crate::ItemFailure;

pub const API_KEY_ENV: &str = "FRAMES_TRANSLATE_API_KEY";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranslationRecord {
    pub item_id: String,
    pub provider_id: String,
    pub source_language: String,
    pub target_language: String,
    pub translated_text: String,
    pub translated_word_count: usize,
    pub created_at: DateTime<Utc>,
}

impl TranslationRecord {
    fn key(&self) -> CacheKey {
        (
            self.item_id.clone(),
            self.provider_id.clone(),
            self.target_language.clone(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TranslationProviderKind {
    HttpMt,
    Passthrough,
    Scripted,
}

impl FromStr for TranslationProviderKind {
    type Err = ProviderError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "http_mt" => Ok(Self::HttpMt),
            "passthrough" => Ok(Self::Passthrough),
            "scripted" => Ok(Self::Scripted),
            other => Err(ProviderError::Config(format!(
                "unknown translation provider {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TranslationProviderConfig {
    pub provider: TranslationProviderKind,
    pub endpoint: Option<String>,
    pub api_key: Option<String>,
    pub target_language: String,
    pub timeout: Duration,
    pub retry: RetryPolicy,
    /// JSONL `{item_id, text}` fixture for the scripted provider.
    pub fixture: Option<PathBuf>,
}

impl TranslationProviderConfig {
    pub fn new(provider: TranslationProviderKind, target_language: impl Into<String>) -> Self {
        Self {
            provider,
            endpoint: None,
            api_key: None,
            target_language: target_language.into(),
            timeout: Duration::from_secs(60),
            retry: RetryPolicy::default(),
            fixture: None,
        }
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        let is_http = self.provider == TranslationProviderKind::HttpMt;
        if is_http != self.endpoint.is_some() || is_http != self.api_key.is_some() {
            return Err(ProviderError::Config(
                "endpoint and API key are required for http_mt and only for http_mt".into(),
            ));
        }
        if self.provider == TranslationProviderKind::Scripted && self.fixture.is_none() {
            return Err(ProviderError::Config(
                "scripted translation provider needs a fixture file".into(),
            ));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Box<dyn Translator>, ProviderError> {
        self.validate()?;
        Ok(match self.provider {
            TranslationProviderKind::Passthrough => Box::new(PassthroughTranslator),
            TranslationProviderKind::Scripted => {
                let path = self.fixture.as_deref().expect("validated");
                Box::new(ScriptedTranslator::load(path)?)
            }
            TranslationProviderKind::HttpMt => Box::new(HttpTranslator::new(
                self.endpoint.clone().expect("validated"),
                self.api_key.clone().expect("validated"),
                self.timeout,
                self.retry,
            )?),
        })
    }
}

#[async_trait]
pub trait Translator: Send + Sync {
    fn provider_id(&self) -> &str;

    /// Target language recorded for `item` when `requested` is asked for.
    fn effective_target(&self, _item: &TranscriptItem, requested: &str) -> String {
        requested.to_string()
    }

    async fn translate(
        &self,
        item: &TranscriptItem,
        target_language: &str,
    ) -> Result<String, ProviderError>;
}

/// Identity provider: the text stays in its own language.
#[derive(Debug, Default)]
pub struct PassthroughTranslator;

#[async_trait]
impl Translator for PassthroughTranslator {
    fn provider_id(&self) -> &str {
        "passthrough"
    }

    fn effective_target(&self, item: &TranscriptItem, _requested: &str) -> String {
        item.language.clone()
    }

    async fn translate(&self, item: &TranscriptItem, _: &str) -> Result<String, ProviderError> {
        Ok(item.text.clone())
    }
}

#[derive(Debug, Deserialize)]
struct ScriptedTranslation {
    item_id: String,
    text: String,
}

/// Fixture-backed provider keyed by item id. Counts every call it serves.
#[derive(Debug, Default)]
pub struct ScriptedTranslator {
    responses: HashMap<String, String>,
    calls: AtomicUsize,
}

impl ScriptedTranslator {
    pub fn new(responses: HashMap<String, String>) -> Self {
        Self {
            responses,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn load(path: &Path) -> Result<Self, ProviderError> {
        let rows: Vec<ScriptedTranslation> =
            jsonl::read_all(path).map_err(|e| ProviderError::Config(e.to_string()))?;
        Ok(Self::new(
            rows.into_iter().map(|r| (r.item_id, r.text)).collect(),
        ))
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

#[async_trait]
impl Translator for ScriptedTranslator {
    fn provider_id(&self) -> &str {
        "scripted"
    }

    async fn translate(&self, item: &TranscriptItem, _: &str) -> Result<String, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.responses
            .get(&item.item_id)
            .cloned()
            .ok_or_else(|| ProviderError::MissingFixture(item.item_id.clone()))
    }
}

/// Generic HTTP machine-translation client speaking the DeepL-style JSON
/// protocol: `{"text": [..], "target_lang": ..}` in, `{"translations":
/// [{"text": ..}]}` out.
pub struct HttpTranslator {
    client: reqwest::Client,
    endpoint: String,
    api_key: String,
    retry: RetryPolicy,
}

impl HttpTranslator {
    pub fn new(
        endpoint: String,
        api_key: String,
        timeout: Duration,
        retry: RetryPolicy,
    ) -> Result<Self, ProviderError> {
        let client = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ProviderError::Config(e.to_string()))?;
        Ok(Self {
            client,
            endpoint,
            api_key,
            retry,
        })
    }
}

#[derive(Serialize)]
struct MtRequest<'a> {
    text: [&'a str; 1],
    target_lang: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    source_lang: Option<String>,
}

#[derive(Deserialize)]
struct MtResponse {
    translations: Vec<MtTranslation>,
}

#[derive(Deserialize)]
struct MtTranslation {
    text: String,
}

#[async_trait]
impl Translator for HttpTranslator {
    fn provider_id(&self) -> &str {
        "http_mt"
    }

    async fn translate(
        &self,
        item: &TranscriptItem,
        target_language: &str,
    ) -> Result<String, ProviderError> {
        let body = MtRequest {
            text: [&item.text],
            target_lang: target_language.to_uppercase(),
            source_lang: Some(item.language.to_uppercase()),
        };
        let resp = send_with_retry(&self.retry, || {
            self.client
                .post(&self.endpoint)
                .header(
                    reqwest::header::AUTHORIZATION,
                    format!("DeepL-Auth-Key {}", self.api_key),
                )
                .json(&body)
                .send()
        })
        .await?;
        let bytes = resp
            .bytes()
            .await
            .map_err(|e| ProviderError::NonTextResponse(e.to_string()))?;
        let parsed: MtResponse = serde_json::from_slice(&bytes)
            .map_err(|e| ProviderError::NonTextResponse(e.to_string()))?;
        parsed
            .translations
            .into_iter()
            .next()
            .map(|t| t.text)
            .ok_or_else(|| ProviderError::NonTextResponse("empty translations array".into()))
    }
}

type CacheKey = (String, String, String);

/// `translations.jsonl`: one record per (item_id, provider_id, target).
pub struct TranslationCache {
    path: PathBuf,
    records: HashMap<CacheKey, TranslationRecord>,
    writer: Option<JsonlAppender>,
}

impl TranslationCache {
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        let mut records = HashMap::new();
        for r in jsonl::read_all_if_exists::<TranslationRecord>(path)? {
            records.insert(r.key(), r);
        }
        Ok(Self {
            path: path.to_path_buf(),
            records,
            writer: None,
        })
    }

    pub fn get(
        &self,
        item_id: &str,
        provider_id: &str,
        target: &str,
    ) -> Option<&TranslationRecord> {
        self.records.get(&(
            item_id.to_string(),
            provider_id.to_string(),
            target.to_string(),
        ))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Latest translation of each item for `target`, any provider.
    pub fn by_item(&self, target: Option<&str>) -> HashMap<String, TranslationRecord> {
        let mut out: HashMap<String, TranslationRecord> = HashMap::new();
        let mut all: Vec<&TranslationRecord> = self
            .records
            .values()
            .filter(|r| target.is_none_or(|t| r.target_language == t))
            .collect();
        all.sort_by(|a, b| (a.created_at, &a.provider_id).cmp(&(b.created_at, &b.provider_id)));
        for r in all {
            out.insert(r.item_id.clone(), r.clone());
        }
        out
    }

    fn insert(&mut self, record: TranslationRecord) -> Result<(), StoreError> {
        if self.writer.is_none() {
            self.writer = Some(JsonlAppender::open(&self.path)?);
        }
        self.writer.as_mut().expect("just opened").append(&record)?;
        self.records.insert(record.key(), record);
        Ok(())
    }

    /// Drops the cached records for `item_ids` under this provider and
    /// target, rewriting the store without them.
    pub fn invalidate(
        &mut self,
        item_ids: &HashSet<String>,
        provider_id: &str,
        target: &str,
    ) -> Result<usize, StoreError> {
        let before = self.records.len();
        self.records.retain(|(item, provider, tgt), _| {
            !(provider == provider_id && tgt == target && item_ids.contains(item))
        });
        let removed = before - self.records.len();
        if removed > 0 {
            self.writer = None;
            let kept: Vec<TranslationRecord> =
                jsonl::read_all_if_exists::<TranslationRecord>(&self.path)?
                    .into_iter()
                    .filter(|r| self.records.contains_key(&r.key()))
                    .collect();
            jsonl::write_all(&self.path, &kept)?;
        }
        Ok(removed)
    }
}

fn make_record(
    item: &TranscriptItem,
    provider_id: &str,
    target: String,
    text: String,
    clock: &dyn Clock,
) -> TranslationRecord {
    TranslationRecord {
        item_id: item.item_id.clone(),
        provider_id: provider_id.to_string(),
        source_language: item.language.clone(),
        target_language: target,
        translated_word_count: word_count(&text),
        translated_text: text,
        created_at: clock.now(),
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TranslateError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Returns the cached record or translates, persists, and returns a new one.
pub async fn translate_item(
    item: &TranscriptItem,
    translator: &dyn Translator,
    target_language: &str,
    cache: &mut TranslationCache,
    clock: &dyn Clock,
) -> Result<TranslationRecord, TranslateError> {
    let target = translator.effective_target(item, target_language);
    if let Some(hit) = cache.get(&item.item_id, translator.provider_id(), &target) {
        return Ok(hit.clone());
    }
    let text = translator.translate(item, target_language).await?;
    let record = make_record(item, translator.provider_id(), target, text, clock);
    cache.insert(record.clone())?;
    Ok(record)
}

#[derive(Debug, Clone, Default)]
pub struct TranslationOutcome {
    pub records: Vec<TranslationRecord>,
    pub failures: Vec<ItemFailure>,
    pub provider_calls: usize,
}

/// Translates every item with up to `concurrency` calls in flight. Results
/// are persisted in input order as they complete, so an interrupted run
/// resumes from the cache.
pub async fn translate_corpus(
    items: &[TranscriptItem],
    translator: &dyn Translator,
    target_language: &str,
    cache: &mut TranslationCache,
    clock: &dyn Clock,
    concurrency: usize,
) -> Result<TranslationOutcome, StoreError> {
    let mut slots: Vec<Option<Result<TranslationRecord, ItemFailure>>> =
        Vec::with_capacity(items.len());
    let mut misses = Vec::new();
    for (idx, item) in items.iter().enumerate() {
        let target = translator.effective_target(item, target_language);
        match cache.get(&item.item_id, translator.provider_id(), &target) {
            Some(hit) => slots.push(Some(Ok(hit.clone()))),
            None => {
                slots.push(None);
                misses.push((idx, item, target));
            }
        }
    }

    let provider_calls = misses.len();
    let mut results = stream::iter(misses)
        .map(|(idx, item, target)| async move {
            let out = translator.translate(item, target_language).await;
            (idx, item, target, out)
        })
        .buffered(concurrency.max(1));

    while let Some((idx, item, target, out)) = results.next().await {
        slots[idx] = Some(match out {
            Ok(text) => {
                let record = make_record(item, translator.provider_id(), target, text, clock);
                cache.insert(record.clone())?;
                Ok(record)
            }
            Err(e) => Err(ItemFailure::new(&item.item_id, &e)),
        });
    }

    let mut outcome = TranslationOutcome {
        provider_calls,
        ..Default::default()
    };
    for slot in slots.into_iter().flatten() {
        match slot {
            Ok(r) => outcome.records.push(r),
            Err(f) => outcome.failures.push(f),
        }
    }
    Ok(outcome)
}
