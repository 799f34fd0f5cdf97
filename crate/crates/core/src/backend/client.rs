use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use log::{debug, warn};
use reqwest::blocking::Client;
use reqwest::header::{AUTHORIZATION, CONTENT_TYPE};

use super::{wire, BackendConfig, BackendError, ChatBackend, ChatRequest, RateLimiter};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub attempts: u32,
}

/// Blocking client for an OpenAI-compatible `/chat/completions` endpoint.
///
/// Shareable across threads; the rate limiter is shared by all callers.
pub struct OpenAiClient {
    config: BackendConfig,
    url: String,
    api_key: Option<String>,
    http: Client,
    limiter: Arc<RateLimiter>,
    requests_sent: AtomicU64,
}

enum Outcome {
    Done(Result<String, BackendError>),
    Retry(BackendError),
}

impl OpenAiClient {
    /// Reads the API key from the configured environment variable. A missing
    /// key sends no auth header, which local servers accept.
    pub fn from_env(config: BackendConfig) -> Result<Self, BackendError> {
        let api_key = std::env::var(&config.api_key_env).ok();
        if api_key.is_none() {
            warn!("{} is not set; sending requests without a bearer token", config.api_key_env);
        }
        Self::new(config, api_key)
    }

    pub fn new(config: BackendConfig, api_key: Option<String>) -> Result<Self, BackendError> {
        config.validate()?;
        let limiter = Arc::new(RateLimiter::per_minute(config.requests_per_minute));
        Self::with_limiter(config, api_key, limiter)
    }

    pub fn with_limiter(
        config: BackendConfig,
        api_key: Option<String>,
        limiter: Arc<RateLimiter>,
    ) -> Result<Self, BackendError> {
        config.validate()?;
        let http = Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        let url = format!("{}/chat/completions", config.endpoint.trim_end_matches('/'));
        Ok(OpenAiClient {
            config,
            url,
            api_key,
            http,
            limiter,
            requests_sent: AtomicU64::new(0),
        })
    }

    pub fn limiter(&self) -> &RateLimiter {
        &self.limiter
    }

    /// HTTP requests sent so far, retries included.
    pub fn requests_sent(&self) -> u64 {
        self.requests_sent.load(Ordering::Relaxed)
    }

    pub fn complete_detailed(&self, request: &ChatRequest) -> Result<Completion, BackendError> {
        let body = wire::request_body(request, &self.config.model_name);
        let max = self.config.retry.max_attempts;
        let mut attempt = 0;
        loop {
            attempt += 1;
            self.limiter.acquire();
            self.requests_sent.fetch_add(1, Ordering::Relaxed);
            match self.send_once(&body, attempt) {
                Outcome::Done(result) => {
                    return result.map(|text| Completion {
                        text,
                        attempts: attempt,
                    })
                }
                Outcome::Retry(err) if attempt >= max => return Err(err),
                Outcome::Retry(err) => {
                    let wait = self.config.retry.backoff(attempt);
                    debug!("attempt {attempt} failed ({err}); retrying in {wait:?}");
                    std::thread::sleep(wait);
                }
            }
        }
    }

    fn send_once(&self, body: &[u8], attempts: u32) -> Outcome {
        let mut req = self
            .http
            .post(&self.url)
            .header(CONTENT_TYPE, "application/json")
            .body(body.to_vec());
        if let Some(key) = &self.api_key {
            req = req.header(AUTHORIZATION, format!("Bearer {key}"));
        }
        let resp = match req.send() {
            Ok(r) => r,
            Err(e) if e.is_timeout() => return Outcome::Retry(BackendError::Timeout { attempts }),
            Err(e) => {
                return Outcome::Retry(BackendError::Transport {
                    attempts,
                    message: e.to_string(),
                })
            }
        };
        let status = resp.status().as_u16();
        let raw = match resp.text() {
            Ok(t) => t,
            Err(e) if e.is_timeout() => return Outcome::Retry(BackendError::Timeout { attempts }),
            Err(e) => {
                return Outcome::Retry(BackendError::Transport {
                    attempts,
                    message: e.to_string(),
                })
            }
        };
        match status {
            200..=299 => Outcome::Done(wire::parse_reply(&raw)),
            401 | 403 => Outcome::Done(Err(BackendError::Auth { status, raw })),
            429 => Outcome::Retry(BackendError::RateLimited { attempts, raw }),
            500..=599 => Outcome::Retry(BackendError::Status {
                status,
                attempts,
                raw,
            }),
            _ => Outcome::Done(Err(BackendError::Status {
                status,
                attempts,
                raw,
            })),
        }
    }
}

impl ChatBackend for OpenAiClient {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        self.complete_detailed(request).map(|c| c.text)
    }

    fn model_name(&self) -> &str {
        &self.config.model_name
    }
}
