//! Frame classification from a completion model's first-token alternatives.
//!
//! The provider is asked for a single token with its top alternatives. Each
//! alternative is normalized and prefix-matched against the frame alias
//! table; probabilities of tokens that land on the same frame are summed and
//! everything else is kept as unmatched residual. Masses are reported raw,
//! never renormalized.

mod providers;

pub use providers::{
    CompletionProvider, CompletionRequest, HttpCompletionProvider, ScriptedCompletion,
    ScriptedCompletionProvider, API_KEY_ENV,
};

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use chrono::{DateTime, Utc};
use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clock::Clock;
use crate::framing::{
    build_prompt, Frame, FrameDefinition, FrameOrder, FramingError, PromptTemplate,
};
use crate::jsonl::{self, JsonlAppender, StoreError};
use crate::lexicon::{FrameLexicon, LexiconProvider};
use crate::net::{ProviderError, RateLimiter, RetryPolicy};
use crate::ItemFailure;

/// Upper bound on total probability mass, allowing for float rounding.
pub const MASS_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenProb {
    pub token: String,
    pub logprob: f64,
}

impl TokenProb {
    pub fn new(token: impl Into<String>, logprob: f64) -> Self {
        Self {
            token: token.into(),
            logprob,
        }
    }

    pub fn prob(&self) -> f64 {
        self.logprob.exp()
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ExtractError {
    #[error("no alternative maps to a frame (model answered off-format)")]
    NoUsableTokens,
    #[error("token {token:?} has invalid logprob {logprob}")]
    InvalidLogprob { token: String, logprob: f64 },
    #[error("alternatives carry total probability {total}, above 1")]
    ExcessMass { total: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDistribution {
    /// Raw probability per frame; always holds all five frames.
    pub mass: BTreeMap<Frame, f64>,
    pub unmatched_residual: f64,
    pub predominant: Frame,
    /// Another frame shares the maximal mass; `predominant` was chosen by
    /// frame order.
    #[serde(default)]
    pub tie: bool,
}

impl FrameDistribution {
    pub fn mass_of(&self, frame: Frame) -> f64 {
        self.mass.get(&frame).copied().unwrap_or(0.0)
    }

    pub fn frame_total(&self) -> f64 {
        Frame::ALL.iter().map(|f| self.mass_of(*f)).sum()
    }

    pub fn max_mass(&self) -> f64 {
        self.mass_of(self.predominant)
    }

    /// Masses rescaled to sum to one over the five frames.
    pub fn renormalized(&self) -> FrameDistribution {
        let total = self.frame_total();
        let mut out = self.clone();
        if total > 0.0 {
            for m in out.mass.values_mut() {
                *m /= total;
            }
            out.unmatched_residual = 0.0;
        }
        out
    }
}

/// Lowercases and strips surrounding whitespace and punctuation.
pub fn normalize_token(token: &str) -> String {
    token
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase()
}

/// The unique frame whose aliases `normalized` is a prefix of, if any.
pub fn match_frame(normalized: &str) -> Option<Frame> {
    if normalized.is_empty() {
        return None;
    }
    let mut hits = Frame::ALL
        .into_iter()
        .filter(|f| f.aliases().iter().any(|a| a.starts_with(normalized)));
    match (hits.next(), hits.next()) {
        (Some(f), None) => Some(f),
        _ => None,
    }
}

/// Converts first-token alternatives into a frame distribution. The result
/// does not depend on the order of `alternatives`.
pub fn extract_distribution(
    alternatives: &[TokenProb],
    order: &FrameOrder,
) -> Result<FrameDistribution, ExtractError> {
    for alt in alternatives {
        if alt.logprob.is_nan() || alt.logprob > 0.0 {
            return Err(ExtractError::InvalidLogprob {
                token: alt.token.clone(),
                logprob: alt.logprob,
            });
        }
    }

    // Fixed summation order so permuted inputs give bit-identical sums.
    let mut sorted: Vec<&TokenProb> = alternatives.iter().collect();
    sorted.sort_by(|a, b| a.token.cmp(&b.token).then(a.logprob.total_cmp(&b.logprob)));

    let mut mass: BTreeMap<Frame, f64> = Frame::ALL.iter().map(|f| (*f, 0.0)).collect();
    let mut residual = 0.0;
    for alt in sorted {
        let p = alt.prob();
        match match_frame(&normalize_token(&alt.token)) {
            Some(frame) => *mass.get_mut(&frame).expect("all frames present") += p,
            None => residual += p,
        }
    }

    let mut predominant = None;
    let mut best = 0.0;
    let mut tie = false;
    for frame in order.iter() {
        let m = mass[&frame];
        if m > best {
            best = m;
            predominant = Some(frame);
            tie = false;
        } else if m == best && predominant.is_some() {
            tie = true;
        }
    }
    let predominant = predominant.ok_or(ExtractError::NoUsableTokens)?;
    Ok(FrameDistribution {
        mass,
        unmatched_residual: residual,
        predominant,
        tie,
    })
}

/// Rejects provider output whose alternatives claim more than unit mass.
pub fn check_alternatives(alternatives: &[TokenProb]) -> Result<(), ExtractError> {
    let total: f64 = alternatives.iter().map(TokenProb::prob).sum();
    if total > 1.0 + MASS_TOLERANCE {
        return Err(ExtractError::ExcessMass { total });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierProviderKind {
    HttpLlm,
    Scripted,
    Lexicon,
}

impl FromStr for ClassifierProviderKind {
    type Err = ProviderError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "http_llm" => Ok(Self::HttpLlm),
            "scripted" => Ok(Self::Scripted),
            "lexicon" => Ok(Self::Lexicon),
            other => Err(ProviderError::Config(format!(
                "unknown classifier provider {other:?}"
            ))),
        }
    }
}

/// Sampling parameters recorded with every classification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub model_id: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_alternatives: usize,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            model_id: "text-davinci-003".into(),
            temperature: 0.0,
            top_p: 1.0,
            max_alternatives: 5,
        }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<(), ProviderError> {
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(ProviderError::Config("temperature must be >= 0".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(ProviderError::Config("top_p must be in (0, 1]".into()));
        }
        if self.max_alternatives == 0 {
            return Err(ProviderError::Config(
                "max_alternatives must be >= 1".into(),
            ));
        }
        if self.model_id.trim().is_empty() {
            return Err(ProviderError::Config("model_id must not be empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ClassifierConfig {
    pub provider: ClassifierProviderKind,
    pub params: ModelParams,
    pub endpoint: Option<String>,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub retry: RetryPolicy,
    /// Requests per second shared across workers; `None` disables limiting.
    pub rate_limit: Option<f64>,
    /// Scripted provider fixture.
    pub fixture: Option<PathBuf>,
    /// Lexicon override file; built-in defaults otherwise.
    pub lexicon: Option<PathBuf>,
}

impl ClassifierConfig {
    pub fn new(provider: ClassifierProviderKind) -> Self {
        Self {
            provider,
            params: ModelParams::default(),
            endpoint: None,
            api_key: None,
            timeout: Duration::from_secs(60),
            retry: RetryPolicy::default(),
            rate_limit: None,
            fixture: None,
            lexicon: None,
        }
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        self.params.validate()?;
        let is_http = self.provider == ClassifierProviderKind::HttpLlm;
        if is_http && (self.endpoint.is_none() || self.api_key.is_none()) {
            return Err(ProviderError::Config(
                "http_llm needs an endpoint and an API key".into(),
            ));
        }
        if self.provider == ClassifierProviderKind::Scripted && self.fixture.is_none() {
            return Err(ProviderError::Config(
                "scripted classifier needs a fixture file".into(),
            ));
        }
        if let Some(rate) = self.rate_limit {
            if rate.is_nan() || rate <= 0.0 {
                return Err(ProviderError::Config("rate limit must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Box<dyn CompletionProvider>, ProviderError> {
        self.validate()?;
        Ok(match self.provider {
            ClassifierProviderKind::Lexicon => {
                let lexicon = match &self.lexicon {
                    Some(path) => FrameLexicon::load(path)
                        .map_err(|e| ProviderError::Config(e.to_string()))?,
                    None => FrameLexicon::default(),
                };
                Box::new(LexiconProvider::new(lexicon))
            }
            ClassifierProviderKind::Scripted => Box::new(ScriptedCompletionProvider::load(
                self.fixture.as_deref().expect("validated"),
            )?),
            ClassifierProviderKind::HttpLlm => Box::new(HttpCompletionProvider::new(
                self.endpoint.clone().expect("validated"),
                self.api_key.clone().expect("validated"),
                self.timeout,
                self.retry,
            )?),
        })
    }

    pub fn rate_limiter(&self) -> Option<RateLimiter> {
        self.rate_limit.map(|r| RateLimiter::new(r, 1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationRecord {
    pub item_id: String,
    pub model_id: String,
    pub temperature: f64,
    pub top_p: f64,
    pub prompt_hash: String,
    #[serde(default)]
    pub frame_order: FrameOrder,
    pub raw_alternatives: Vec<TokenProb>,
    pub distribution: FrameDistribution,
    pub created_at: DateTime<Utc>,
}

impl ClassificationRecord {
    /// Whether the stored distribution is exactly what the stored
    /// alternatives produce.
    pub fn rederives(&self) -> bool {
        extract_distribution(&self.raw_alternatives, &self.frame_order)
            .is_ok_and(|d| d == self.distribution)
    }
}

pub fn prompt_hash(prompt: &str) -> String {
    format!("sha256:{}", hex::encode(Sha256::digest(prompt.as_bytes())))
}

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error(transparent)]
    Prompt(#[from] FramingError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Extract(#[from] ExtractError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// One unit of classification input: the text to classify for an item.
#[derive(Debug, Clone)]
pub struct ClassifyInput {
    pub item_id: String,
    pub text: String,
}

/// Everything needed to classify an item apart from the provider.
pub struct ClassifyContext<'a> {
    pub template: &'a PromptTemplate,
    pub definitions: &'a [FrameDefinition],
    pub params: &'a ModelParams,
    pub limiter: Option<&'a RateLimiter>,
    pub clock: &'a dyn Clock,
}

async fn run_provider(
    ctx: &ClassifyContext<'_>,
    provider: &dyn CompletionProvider,
    input: &ClassifyInput,
    prompt: &str,
    hash: String,
) -> Result<ClassificationRecord, ClassifyError> {
    if let Some(limiter) = ctx.limiter {
        limiter.acquire().await;
    }
    let request = CompletionRequest {
        item_id: &input.item_id,
        text: &input.text,
        prompt,
        params: ctx.params,
    };
    let mut alternatives = provider.complete(&request).await?;
    alternatives.truncate(ctx.params.max_alternatives);
    check_alternatives(&alternatives)?;
    let distribution = extract_distribution(&alternatives, &ctx.template.frame_order)?;
    Ok(ClassificationRecord {
        item_id: input.item_id.clone(),
        model_id: ctx.params.model_id.clone(),
        temperature: ctx.params.temperature,
        top_p: ctx.params.top_p,
        prompt_hash: hash,
        frame_order: ctx.template.frame_order,
        raw_alternatives: alternatives,
        distribution,
        created_at: ctx.clock.now(),
    })
}

/// Classifies one item and persists the record.
pub async fn classify_item(
    input: &ClassifyInput,
    ctx: &ClassifyContext<'_>,
    provider: &dyn CompletionProvider,
    store: &mut ClassificationStore,
) -> Result<ClassificationRecord, ClassifyError> {
    let prompt = build_prompt(ctx.template, ctx.definitions, &input.text)?;
    let hash = prompt_hash(&prompt);
    if let Some(hit) = store.get(&input.item_id, &ctx.params.model_id, &hash) {
        return Ok(hit.clone());
    }
    let record = run_provider(ctx, provider, input, &prompt, hash).await?;
    store.insert(record.clone())?;
    Ok(record)
}

#[derive(Debug, Clone, Default)]
pub struct ClassifyOutcome {
    pub records: Vec<ClassificationRecord>,
    pub failures: Vec<ItemFailure>,
    pub provider_calls: usize,
    /// Failures caused by off-format answers.
    pub no_usable_tokens: usize,
}

/// Classifies all inputs, skipping any already in the store, with up to
/// `concurrency` provider calls in flight. Records are appended in input
/// order.
pub async fn classify_corpus(
    inputs: &[ClassifyInput],
    ctx: &ClassifyContext<'_>,
    provider: &dyn CompletionProvider,
    store: &mut ClassificationStore,
    concurrency: usize,
) -> Result<ClassifyOutcome, StoreError> {
    let mut slots: Vec<Option<Result<ClassificationRecord, (ItemFailure, bool)>>> =
        Vec::with_capacity(inputs.len());
    let mut pending = Vec::new();
    for (idx, input) in inputs.iter().enumerate() {
        match build_prompt(ctx.template, ctx.definitions, &input.text) {
            Err(e) => slots.push(Some(Err((ItemFailure::new(&input.item_id, &e), false)))),
            Ok(prompt) => {
                let hash = prompt_hash(&prompt);
                match store.get(&input.item_id, &ctx.params.model_id, &hash) {
                    Some(hit) => slots.push(Some(Ok(hit.clone()))),
                    None => {
                        slots.push(None);
                        pending.push((idx, input, prompt, hash));
                    }
                }
            }
        }
    }

    let provider_calls = pending.len();
    let mut results = stream::iter(pending)
        .map(|(idx, input, prompt, hash)| async move {
            (
                idx,
                input,
                run_provider(ctx, provider, input, &prompt, hash).await,
            )
        })
        .buffered(concurrency.max(1));

    while let Some((idx, input, out)) = results.next().await {
        slots[idx] = Some(match out {
            Ok(record) => {
                store.insert(record.clone())?;
                Ok(record)
            }
            Err(e) => {
                let off_format = matches!(e, ClassifyError::Extract(ExtractError::NoUsableTokens));
                Err((ItemFailure::new(&input.item_id, &e), off_format))
            }
        });
    }

    let mut outcome = ClassifyOutcome {
        provider_calls,
        ..Default::default()
    };
    for slot in slots.into_iter().flatten() {
        match slot {
            Ok(r) => outcome.records.push(r),
            Err((f, off_format)) => {
                outcome.no_usable_tokens += usize::from(off_format);
                outcome.failures.push(f);
            }
        }
    }
    Ok(outcome)
}

type RecordKey = (String, String, String);

/// `classifications.jsonl`, keyed by (item_id, model_id, prompt_hash).
pub struct ClassificationStore {
    path: PathBuf,
    records: HashMap<RecordKey, ClassificationRecord>,
    writer: Option<JsonlAppender>,
}

impl ClassificationStore {
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        let records = jsonl::read_all_if_exists::<ClassificationRecord>(path)?
            .into_iter()
            .map(|r| {
                (
                    (r.item_id.clone(), r.model_id.clone(), r.prompt_hash.clone()),
                    r,
                )
            })
            .collect();
        Ok(Self {
            path: path.to_path_buf(),
            records,
            writer: None,
        })
    }

    pub fn get(&self, item_id: &str, model_id: &str, hash: &str) -> Option<&ClassificationRecord> {
        self.records
            .get(&(item_id.to_string(), model_id.to_string(), hash.to_string()))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn insert(&mut self, record: ClassificationRecord) -> Result<(), StoreError> {
        if self.writer.is_none() {
            self.writer = Some(JsonlAppender::open(&self.path)?);
        }
        self.writer.as_mut().expect("just opened").append(&record)?;
        self.records.insert(
            (
                record.item_id.clone(),
                record.model_id.clone(),
                record.prompt_hash.clone(),
            ),
            record,
        );
        Ok(())
    }
}
