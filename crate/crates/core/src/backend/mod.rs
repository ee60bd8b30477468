//! Uniform model-query interface.
//!
//! Three backends sit behind [`Backend`]: an OpenAI-compatible
//! chat-completion client, a scripted mock that replays fixture text keyed by
//! prompt digest, and a parametric mock that synthesizes responses from
//! per-category logit offsets. Only [`remote`] touches the network.

mod cache;
mod mock;
mod remote;

use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::sha256_hex;
use crate::population::AgentProfile;
use crate::prompting::Scenario;

pub use cache::ResponseCache;
pub use mock::{parametric_mock_response, ParametricMock, ParametricWeights, ScriptedFixtures, ScriptedMock};
pub use remote::RemoteClient;

/// Environment variable holding the remote API key.
pub const API_KEY_ENV: &str = "ICSM_API_KEY";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("authentication failed: {0}")]
    AuthError(String),
    #[error("request timed out: {0}")]
    Timeout(String),
    #[error("no scripted response for prompt digest {0}")]
    MissingFixture(String),
    #[error("missing weight for {0}")]
    MissingWeight(String),
    #[error("invalid backend config: {0}")]
    Config(String),
    #[error("cache storage error: {0}")]
    StorageError(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Remote,
    ScriptedMock,
    ParametricMock,
}

fn default_max_in_flight() -> usize {
    4
}
fn default_retry_limit() -> u32 {
    3
}
fn default_timeout() -> f64 {
    60.0
}
fn default_backoff_ms() -> u64 {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint_url: Option<String>,
    pub model_id: String,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_retry_limit")]
    pub retry_limit: u32,
    /// Per-request timeout in seconds.
    #[serde(default = "default_timeout")]
    pub timeout: f64,
    /// Sampling temperature; omitted from requests when unset so the
    /// provider default applies.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    /// First retry delay; doubles on every further attempt.
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    /// Scripted mock fixture file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixtures: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parametric: Option<ParametricWeights>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
}

impl BackendConfig {
    pub fn new(kind: BackendKind, model_id: impl Into<String>) -> Self {
        Self {
            kind,
            endpoint_url: None,
            model_id: model_id.into(),
            max_in_flight: default_max_in_flight(),
            retry_limit: default_retry_limit(),
            timeout: default_timeout(),
            temperature: None,
            backoff_ms: default_backoff_ms(),
            fixtures: None,
            parametric: None,
            cache_dir: None,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let bad = |msg: &str| Err(BackendError::Config(msg.to_string()));
        if self.max_in_flight == 0 {
            return bad("max_in_flight must be at least 1");
        }
        if !(self.timeout > 0.0) {
            return bad("timeout must be positive");
        }
        if self.model_id.is_empty() {
            return bad("model_id must be set");
        }
        match self.kind {
            BackendKind::Remote if self.endpoint_url.is_none() => bad("remote backend needs endpoint_url"),
            BackendKind::ScriptedMock if self.fixtures.is_none() => bad("scripted_mock needs fixtures"),
            BackendKind::ParametricMock if self.parametric.is_none() => {
                bad("parametric_mock needs a [backend.parametric] table")
            }
            _ => Ok(()),
        }
    }

    pub fn timeout_duration(&self) -> Duration {
        Duration::from_secs_f64(self.timeout)
    }
}

/// One query: the rendered prompt plus the identity the mocks condition on.
#[derive(Debug, Clone)]
pub struct QueryRequest<'a> {
    pub prompt: &'a str,
    pub profile: &'a AgentProfile,
    pub round_index: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub prompt_digest: String,
    pub raw_text: String,
    pub model_id: String,
    /// Seconds.
    pub latency: f64,
    pub attempt: u32,
}

pub fn prompt_digest(prompt: &str) -> String {
    sha256_hex(prompt.as_bytes())
}

#[derive(Debug)]
pub enum Backend {
    Remote(RemoteClient),
    Scripted(ScriptedMock),
    Parametric(ParametricMock),
}

impl Backend {
    /// Builds the configured backend. The remote kind reads its API key
    /// from `ICSM_API_KEY`.
    pub fn from_config(config: &BackendConfig, scenario: &Scenario) -> Result<Self, BackendError> {
        config.validate()?;
        Ok(match config.kind {
            BackendKind::Remote => {
                let key = std::env::var(API_KEY_ENV)
                    .ok()
                    .filter(|k| !k.is_empty())
                    .ok_or_else(|| BackendError::AuthError(format!("{API_KEY_ENV} is not set")))?;
                Backend::Remote(RemoteClient::new(config.clone(), key)?)
            }
            BackendKind::ScriptedMock => {
                let path = config.fixtures.as_ref().expect("validated");
                let fixtures = ScriptedFixtures::load(path)?;
                Backend::Scripted(ScriptedMock::new(fixtures, &config.model_id))
            }
            BackendKind::ParametricMock => Backend::Parametric(ParametricMock::new(
                config.parametric.clone().expect("validated"),
                scenario.clone(),
                &config.model_id,
            )),
        })
    }

    pub fn query(&self, request: &QueryRequest<'_>) -> Result<QueryRecord, BackendError> {
        match self {
            Backend::Remote(client) => client.query(request.prompt),
            Backend::Scripted(mock) => mock.query(request.prompt),
            Backend::Parametric(mock) => mock.query(request),
        }
    }

    pub fn model_id(&self) -> &str {
        match self {
            Backend::Remote(client) => client.model_id(),
            Backend::Scripted(mock) => mock.model_id(),
            Backend::Parametric(mock) => mock.model_id(),
        }
    }

    pub fn is_offline(&self) -> bool {
        !matches!(self, Backend::Remote(_))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        let mut config = BackendConfig::new(BackendKind::Remote, "gpt");
        assert!(config.validate().is_err());
        config.endpoint_url = Some("http://localhost:1/v1/chat/completions".into());
        config.validate().unwrap();
        config.max_in_flight = 0;
        assert!(config.validate().is_err());
        assert!(BackendConfig::new(BackendKind::ScriptedMock, "m").validate().is_err());
        assert!(BackendConfig::new(BackendKind::ParametricMock, "m").validate().is_err());
    }

    #[test]
    fn config_reads_from_toml_shape() {
        let config: BackendConfig = serde_json::from_value(serde_json::json!({
            "kind": "parametric_mock",
            "model_id": "mock",
            "parametric": {"base": 0.0, "offsets": {}}
        }))
        .unwrap();
        assert_eq!(config.max_in_flight, 4);
        assert_eq!(config.temperature, None);
        config.validate().unwrap();
    }

    #[test]
    fn digest_is_pure() {
        assert_eq!(prompt_digest("abc"), prompt_digest("abc"));
        assert_ne!(prompt_digest("abc"), prompt_digest("abd"));
    }
}
