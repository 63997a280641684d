//! Shared plumbing for remote providers: error taxonomy, exponential-backoff
//! retries, and a rate limiter shared across concurrent workers.

use std::future::Future;
use std::time::Duration;

use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Mutex;
use tokio::time::Instant;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ProviderError {
    #[error("provider unavailable after {attempts} attempts: {last}")]
    Unavailable { attempts: u32, last: String },
    #[error("provider rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("authentication failed: {0}")]
    AuthFailure(String),
    #[error("provider rejected request with HTTP {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("provider returned an unusable response: {0}")]
    NonTextResponse(String),
    #[error("no scripted response for {0:?}")]
    MissingFixture(String),
    #[error("invalid provider configuration: {0}")]
    Config(String),
}

/// Exponential backoff: wait `initial_delay * factor^(n-1)` after the n-th
/// failed attempt, for at most `max_attempts` attempts in total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    #[serde(with = "duration_secs")]
    pub initial_delay: Duration,
    pub factor: f64,
    pub max_attempts: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            initial_delay: Duration::from_secs(1),
            factor: 2.0,
            max_attempts: 5,
        }
    }
}

impl RetryPolicy {
    pub fn delay_after(&self, attempt: u32) -> Duration {
        let exp = attempt.saturating_sub(1).min(30) as i32;
        self.initial_delay.mul_f64(self.factor.powi(exp))
    }
}

mod duration_secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Duration::try_from_secs_f64(secs).map_err(serde::de::Error::custom)
    }
}

fn is_retryable(status: StatusCode) -> bool {
    status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error()
}

/// Runs `send` until it yields a success status, a non-retryable failure,
/// or the policy is exhausted. Transport errors, 429 and 5xx are retried.
pub async fn send_with_retry<F, Fut>(
    policy: &RetryPolicy,
    mut send: F,
) -> Result<reqwest::Response, ProviderError>
where
    F: FnMut() -> Fut,
    Fut: Future<Output = Result<reqwest::Response, reqwest::Error>>,
{
    let max = policy.max_attempts.max(1);
    let mut last_was_429 = false;
    let mut last = String::new();
    for attempt in 1..=max {
        match send().await {
            Ok(resp) if resp.status().is_success() => return Ok(resp),
            Ok(resp) => {
                let status = resp.status();
                let body = resp.text().await.unwrap_or_default();
                if status == StatusCode::UNAUTHORIZED || status == StatusCode::FORBIDDEN {
                    return Err(ProviderError::AuthFailure(format!("HTTP {status}: {body}")));
                }
                if !is_retryable(status) {
                    return Err(ProviderError::Rejected {
                        status: status.as_u16(),
                        body,
                    });
                }
                last_was_429 = status == StatusCode::TOO_MANY_REQUESTS;
                last = format!("HTTP {status}");
            }
            Err(e) => {
                last_was_429 = false;
                last = e.to_string();
            }
        }
        tracing::debug!(attempt, %last, "provider call failed");
        if attempt < max {
            tokio::time::sleep(policy.delay_after(attempt)).await;
        }
    }
    if last_was_429 {
        Err(ProviderError::RateLimited { attempts: max })
    } else {
        Err(ProviderError::Unavailable {
            attempts: max,
            last,
        })
    }
}

/// Token bucket (in its GCRA form) shared by all workers of a stage.
/// Uses tokio's clock, so paused-time tests observe exact spacing.
#[derive(Debug)]
pub struct RateLimiter {
    interval: Duration,
    burst_allowance: Duration,
    next_free: Mutex<Option<Instant>>,
}

impl RateLimiter {
    /// `per_second` requests per second with a bucket of `burst` tokens.
    pub fn new(per_second: f64, burst: u32) -> Self {
        assert!(per_second > 0.0, "rate must be positive");
        let interval = Duration::from_secs_f64(1.0 / per_second);
        Self {
            interval,
            burst_allowance: interval * burst.max(1).saturating_sub(1),
            next_free: Mutex::new(None),
        }
    }

    pub async fn acquire(&self) {
        let mut tat = self.next_free.lock().await;
        let now = Instant::now();
        let arrival = tat.map_or(now, |t| t.max(now));
        let earliest = arrival.checked_sub(self.burst_allowance).unwrap_or(now);
        if earliest > now {
            tokio::time::sleep_until(earliest).await;
        }
        *tat = Some(arrival + self.interval);
    }
}
