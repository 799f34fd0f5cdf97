//! Chat-completion backends.
//!
//! Everything that talks to a model goes through [`ChatBackend`]. Two
//! implementations ship: [`OpenAiClient`] for any OpenAI-compatible HTTP
//! endpoint and [`MockBackend`], a deterministic persona-conditioned stand-in
//! used for offline runs and tests.

mod client;
mod limiter;
mod mock;
pub mod wire;

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::assess::Keyed;
use crate::persona::{BigFiveDim, LatentPersonality};
use crate::social::RelationContext;

pub use client::{Completion, OpenAiClient};
pub use limiter::RateLimiter;
pub use mock::{MockBackend, MockSpec};

pub const TEMPERATURE_SIMULATION: f64 = 1.0;
pub const TEMPERATURE_QUESTIONNAIRE: f64 = 0.0;
pub const MAX_OUTPUT_DIALOGUE: u32 = 512;
pub const MAX_OUTPUT_ITEM: u32 = 16;
pub const MAX_OUTPUT_BATCH: u32 = 2048;
pub const MAX_OUTPUT_GENERATION: u32 = 2048;
pub const DEFAULT_API_KEY_ENV: &str = "OBSERVA_API_KEY";

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("authentication rejected (HTTP {status}): {raw}")]
    Auth { status: u16, raw: String },
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("malformed response ({reason}): {raw}")]
    Malformed { reason: String, raw: String },
    #[error("rate limited after {attempts} attempt(s): {raw}")]
    RateLimited { attempts: u32, raw: String },
    #[error("HTTP {status} after {attempts} attempt(s): {raw}")]
    Status {
        status: u16,
        attempts: u32,
        raw: String,
    },
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("invalid backend configuration: {0}")]
    Config(String),
    #[error("request kind is not specified")]
    UnknownRequestKind,
}

/// Which side of the conversation produced a message, relative to the agent
/// being asked to reply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MessageRole {
    /// The replying agent's own earlier output (wire role `assistant`).
    Agent,
    /// The other party (wire role `user`).
    Counterpart,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: MessageRole,
    pub text: String,
}

impl Message {
    pub fn agent(text: impl Into<String>) -> Self {
        Message {
            role: MessageRole::Agent,
            text: text.into(),
        }
    }

    pub fn counterpart(text: impl Into<String>) -> Self {
        Message {
            role: MessageRole::Counterpart,
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RequestKind {
    #[default]
    Unspecified,
    Relationship,
    Scenarios,
    DialogueTurn,
    QuestionnaireItem,
    QuestionnaireBatch,
}

/// Questionnaire item as seen by a backend: its position among the items of
/// its dimension lets a rater spread a fractional target across answers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ItemRef {
    pub item_id: u32,
    pub dimension: BigFiveDim,
    pub keyed: Keyed,
    pub ordinal: usize,
    pub dim_count: usize,
}

/// Out-of-band request description. Never sent on the wire; the mock uses
/// it in place of language understanding.
#[derive(Debug, Clone, Default)]
pub struct RequestMeta {
    pub kind: RequestKind,
    /// Stable id of the entity the request is about, for seeding.
    pub entity: String,
    /// Present only when the request is made on the subject's behalf.
    pub persona: Option<LatentPersonality>,
    pub context: Option<RelationContext>,
    pub items: Vec<ItemRef>,
    pub speaker: Option<String>,
    pub partner: Option<String>,
    pub count: usize,
}

#[derive(Debug, Clone)]
pub struct ChatRequest {
    pub system_instruction: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_output: u32,
    /// Overrides the backend's configured model when set.
    pub model_name: Option<String>,
    pub meta: RequestMeta,
}

impl ChatRequest {
    pub fn new(system_instruction: impl Into<String>, messages: Vec<Message>) -> Self {
        ChatRequest {
            system_instruction: system_instruction.into(),
            messages,
            temperature: TEMPERATURE_SIMULATION,
            max_output: MAX_OUTPUT_GENERATION,
            model_name: None,
            meta: RequestMeta::default(),
        }
    }

    pub fn temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn max_output(mut self, n: u32) -> Self {
        self.max_output = n;
        self
    }

    pub fn meta(mut self, meta: RequestMeta) -> Self {
        self.meta = meta;
        self
    }

    /// All prompt text: the system instruction followed by every message.
    pub fn full_text(&self) -> String {
        let mut out = self.system_instruction.clone();
        for m in &self.messages {
            out.push('\n');
            out.push_str(&m.text);
        }
        out
    }
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError>;

    fn model_name(&self) -> &str;
}

impl<B: ChatBackend + ?Sized> ChatBackend for &B {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        (**self).complete(request)
    }

    fn model_name(&self) -> &str {
        (**self).model_name()
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for Box<B> {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        (**self).complete(request)
    }

    fn model_name(&self) -> &str {
        (**self).model_name()
    }
}

/// Wraps a backend and counts calls.
pub struct Counting<B> {
    inner: B,
    calls: AtomicU64,
}

impl<B> Counting<B> {
    pub fn new(inner: B) -> Self {
        Counting {
            inner,
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl<B: ChatBackend> ChatBackend for Counting<B> {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.complete(request)
    }

    fn model_name(&self) -> &str {
        self.inner.model_name()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    pub max_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 5,
            initial_backoff: Duration::from_millis(500),
            max_backoff: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    /// Delay before attempt `attempt + 1`, doubling from the initial backoff.
    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u32 << attempt.saturating_sub(1).min(20);
        self.initial_backoff
            .saturating_mul(factor)
            .min(self.max_backoff)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    /// Base URL; requests go to `<endpoint>/chat/completions`.
    pub endpoint: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub model_name: String,
    pub requests_per_minute: u32,
    pub retry: RetryPolicy,
    pub timeout: Duration,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            endpoint: "https://api.openai.com/v1".into(),
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            model_name: "gpt-4o".into(),
            requests_per_minute: 500,
            retry: RetryPolicy::default(),
            timeout: Duration::from_secs(120),
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.requests_per_minute == 0 {
            return Err(BackendError::Config("rate limit must be > 0".into()));
        }
        if self.retry.max_attempts == 0 {
            return Err(BackendError::Config("retry attempts must be >= 1".into()));
        }
        if self.endpoint.trim().is_empty() {
            return Err(BackendError::Config("endpoint is empty".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_doubles_and_caps() {
        let p = RetryPolicy {
            max_attempts: 10,
            initial_backoff: Duration::from_millis(100),
            max_backoff: Duration::from_millis(1000),
        };
        assert_eq!(p.backoff(1), Duration::from_millis(100));
        assert_eq!(p.backoff(2), Duration::from_millis(200));
        assert_eq!(p.backoff(4), Duration::from_millis(800));
        assert_eq!(p.backoff(5), Duration::from_millis(1000));
        assert_eq!(p.backoff(60), Duration::from_millis(1000));
    }

    #[test]
    fn config_validation() {
        assert!(BackendConfig::default().validate().is_ok());
        let c = BackendConfig {
            requests_per_minute: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let mut c = BackendConfig::default();
        c.retry.max_attempts = 0;
        assert!(c.validate().is_err());
    }
}
