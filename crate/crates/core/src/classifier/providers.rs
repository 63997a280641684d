use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelParams, TokenProb};
use crate::jsonl;
use crate::net::{send_with_retry, ProviderError, RetryPolicy};

pub const API_KEY_ENV: &str = "FRAMES_LLM_API_KEY";

/// What a completion provider sees for one item.
#[derive(Debug, Clone, Copy)]
pub struct CompletionRequest<'a> {
    pub item_id: &'a str,
    /// The transcript alone, for providers that score text directly.
    pub text: &'a str,
    pub prompt: &'a str,
    pub params: &'a ModelParams,
}

/// A model that returns the alternatives for its first generated token.
#[async_trait]
pub trait CompletionProvider: Send + Sync {
    fn provider_id(&self) -> &str;

    async fn complete(
        &self,
        request: &CompletionRequest<'_>,
    ) -> Result<Vec<TokenProb>, ProviderError>;
}

/// Fixture row: `key` is an item id or `sha256:<hex>` of the item text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedCompletion {
    pub key: String,
    pub alternatives: Vec<TokenProb>,
}

#[derive(Debug, Default)]
pub struct ScriptedCompletionProvider {
    responses: HashMap<String, Vec<TokenProb>>,
    calls: AtomicUsize,
    call_instants: Mutex<Vec<tokio::time::Instant>>,
}

impl ScriptedCompletionProvider {
    pub fn new(rows: Vec<ScriptedCompletion>) -> Self {
        Self {
            responses: rows.into_iter().map(|r| (r.key, r.alternatives)).collect(),
            ..Default::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self, ProviderError> {
        let rows = jsonl::read_all(path).map_err(|e| ProviderError::Config(e.to_string()))?;
        Ok(Self::new(rows))
    }

    pub fn text_key(text: &str) -> String {
        format!("sha256:{}", hex::encode(Sha256::digest(text.as_bytes())))
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Tokio-clock instants at which calls arrived.
    pub fn call_instants(&self) -> Vec<tokio::time::Instant> {
        self.call_instants.lock().expect("poisoned").clone()
    }
}

#[async_trait]
impl CompletionProvider for ScriptedCompletionProvider {
    fn provider_id(&self) -> &str {
        "scripted"
    }

    async fn complete(
        &self,
        request: &CompletionRequest<'_>,
    ) -> Result<Vec<TokenProb>, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.call_instants
            .lock()
            .expect("poisoned")
            .push(tokio::time::Instant::now());
        self.responses
            .get(request.item_id)
            .or_else(|| self.responses.get(&Self::text_key(request.text)))
            .cloned()
            .ok_or_else(|| ProviderError::MissingFixture(request.item_id.to_string()))
    }
}

/// Client for a legacy-style completions endpoint: one token is generated
/// and its `top_logprobs` alternatives are returned.
pub struct HttpCompletionProvider {
    client: reqwest::Client,
    endpoint: String,
    api_key: String,
    retry: RetryPolicy,
}

impl HttpCompletionProvider {
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
struct CompletionBody<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: u32,
    temperature: f64,
    top_p: f64,
    logprobs: usize,
    n: u32,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    logprobs: Option<ChoiceLogprobs>,
}

#[derive(Deserialize)]
struct ChoiceLogprobs {
    #[serde(default)]
    tokens: Vec<String>,
    #[serde(default)]
    token_logprobs: Vec<Option<f64>>,
    #[serde(default)]
    top_logprobs: Vec<Option<HashMap<String, f64>>>,
}

/// Pulls first-token alternatives out of a completions response body,
/// sorted by descending logprob then token.
pub(crate) fn parse_completion(body: &[u8]) -> Result<Vec<TokenProb>, ProviderError> {
    let parsed: CompletionResponse =
        serde_json::from_slice(body).map_err(|e| ProviderError::NonTextResponse(e.to_string()))?;
    let logprobs = parsed
        .choices
        .into_iter()
        .next()
        .and_then(|c| c.logprobs)
        .ok_or_else(|| ProviderError::NonTextResponse("response has no logprobs".into()))?;

    let mut alternatives: Vec<TokenProb> = match logprobs.top_logprobs.into_iter().next().flatten()
    {
        Some(top) => top
            .into_iter()
            .map(|(t, lp)| TokenProb::new(t, lp))
            .collect(),
        None => match (logprobs.tokens.first(), logprobs.token_logprobs.first()) {
            (Some(t), Some(Some(lp))) => vec![TokenProb::new(t.clone(), *lp)],
            _ => Vec::new(),
        },
    };
    if alternatives.is_empty() {
        return Err(ProviderError::NonTextResponse(
            "no first-token alternatives in response".into(),
        ));
    }
    alternatives.sort_by(|a, b| b.logprob.total_cmp(&a.logprob).then(a.token.cmp(&b.token)));
    Ok(alternatives)
}

#[async_trait]
impl CompletionProvider for HttpCompletionProvider {
    fn provider_id(&self) -> &str {
        "http_llm"
    }

    async fn complete(
        &self,
        request: &CompletionRequest<'_>,
    ) -> Result<Vec<TokenProb>, ProviderError> {
        let params = request.params;
        let body = CompletionBody {
            model: &params.model_id,
            prompt: request.prompt,
            max_tokens: 1,
            temperature: params.temperature,
            top_p: params.top_p,
            logprobs: params.max_alternatives,
            n: 1,
        };
        let resp = send_with_retry(&self.retry, || {
            self.client
                .post(&self.endpoint)
                .bearer_auth(&self.api_key)
                .json(&body)
                .send()
        })
        .await?;
        let bytes = resp
            .bytes()
            .await
            .map_err(|e| ProviderError::NonTextResponse(e.to_string()))?;
        parse_completion(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_top_logprobs() {
        let body = br#"{"choices":[{"text":" Human","logprobs":{
            "tokens":[" Human"],"token_logprobs":[-0.5],
            "top_logprobs":[{" Human":-0.5," Conflict":-1.2," The":-3.0}]}}]}"#;
        let alts = parse_completion(body).unwrap();
        assert_eq!(alts.len(), 3);
        assert_eq!(alts[0].token, " Human");
        assert_eq!(alts[2].token, " The");
    }

    #[test]
    fn falls_back_to_sampled_token() {
        let body = br#"{"choices":[{"logprobs":{"tokens":["Conflict"],"token_logprobs":[-0.1]}}]}"#;
        assert_eq!(
            parse_completion(body).unwrap(),
            vec![TokenProb::new("Conflict", -0.1)]
        );
    }

    #[test]
    fn non_json_is_non_text_response() {
        assert!(matches!(
            parse_completion(b"<html>"),
            Err(ProviderError::NonTextResponse(_))
        ));
        assert!(matches!(
            parse_completion(br#"{"choices":[{"text":"x"}]}"#),
            Err(ProviderError::NonTextResponse(_))
        ));
    }
}
