use std::thread;
use std::time::{Duration, Instant};

use log::{debug, warn};
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::{json, Value};

use super::{prompt_digest, BackendConfig, BackendError, QueryRecord};

const MAX_BACKOFF: Duration = Duration::from_secs(60);

/// Blocking OpenAI-compatible chat-completion client.
#[derive(Debug)]
pub struct RemoteClient {
    config: BackendConfig,
    api_key: String,
    http: Client,
}

enum Failure {
    Transient(String),
    TimedOut(String),
    Fatal(BackendError),
}

impl RemoteClient {
    pub fn new(config: BackendConfig, api_key: String) -> Result<Self, BackendError> {
        let http = Client::builder()
            .timeout(config.timeout_duration())
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(Self { config, api_key, http })
    }

    pub fn model_id(&self) -> &str {
        &self.config.model_id
    }

    fn request_body(&self, prompt: &str) -> Value {
        let mut body = json!({
            "model": self.config.model_id,
            "messages": [{"role": "user", "content": prompt}],
        });
        if let Some(temperature) = self.config.temperature {
            body["temperature"] = json!(temperature);
        }
        body
    }

    fn attempt_once(&self, prompt: &str) -> Result<String, Failure> {
        let url = self.config.endpoint_url.as_deref().expect("validated");
        let response =
            self.http.post(url).bearer_auth(&self.api_key).json(&self.request_body(prompt)).send().map_err(|e| {
                if e.is_timeout() {
                    Failure::TimedOut(e.to_string())
                } else {
                    Failure::Transient(e.to_string())
                }
            })?;
        let status = response.status();
        let body = response.text().map_err(|e| {
            if e.is_timeout() {
                Failure::TimedOut(e.to_string())
            } else {
                Failure::Transient(e.to_string())
            }
        })?;
        if status == StatusCode::UNAUTHORIZED || status == StatusCode::FORBIDDEN {
            return Err(Failure::Fatal(BackendError::AuthError(format!("HTTP {status}"))));
        }
        if status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error() {
            return Err(Failure::Transient(format!("HTTP {status}")));
        }
        if status == StatusCode::REQUEST_TIMEOUT {
            return Err(Failure::TimedOut(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(Failure::Fatal(BackendError::BackendUnavailable(format!(
                "HTTP {status}: {}",
                body.chars().take(200).collect::<String>()
            ))));
        }
        // A delivered body is never retried; an unexpected envelope is
        // handed on verbatim for the parser to reject.
        Ok(extract_content(&body).unwrap_or(body))
    }

    /// Sends `prompt` as a single user message, retrying rate limits, server
    /// errors, connection failures and timeouts with exponential backoff.
    pub fn query(&self, prompt: &str) -> Result<QueryRecord, BackendError> {
        let started = Instant::now();
        let mut delay = Duration::from_millis(self.config.backoff_ms);
        let mut attempt = 0u32;
        loop {
            match self.attempt_once(prompt) {
                Ok(raw_text) => {
                    return Ok(QueryRecord {
                        prompt_digest: prompt_digest(prompt),
                        raw_text,
                        model_id: self.config.model_id.clone(),
                        latency: started.elapsed().as_secs_f64(),
                        attempt,
                    })
                }
                Err(Failure::Fatal(error)) => return Err(error),
                Err(failure) => {
                    let (timed_out, message) = match failure {
                        Failure::TimedOut(m) => (true, m),
                        Failure::Transient(m) => (false, m),
                        Failure::Fatal(_) => unreachable!(),
                    };
                    if attempt >= self.config.retry_limit {
                        let summary = format!("{message} after {} attempts", attempt + 1);
                        return Err(if timed_out {
                            BackendError::Timeout(summary)
                        } else {
                            BackendError::BackendUnavailable(summary)
                        });
                    }
                    warn!("attempt {} failed: {message}; retrying in {delay:?}", attempt + 1);
                    thread::sleep(delay);
                    delay = (delay * 2).min(MAX_BACKOFF);
                    attempt += 1;
                    debug!("retry {attempt} for prompt {}", prompt_digest(prompt));
                }
            }
        }
    }
}

fn extract_content(body: &str) -> Option<String> {
    let value: Value = serde_json::from_str(body).ok()?;
    value["choices"][0]["message"]["content"].as_str().map(str::to_string)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn content_extraction() {
        let body = r#"{"choices":[{"message":{"role":"assistant","content":"hi"}}]}"#;
        assert_eq!(extract_content(body).as_deref(), Some("hi"));
        assert_eq!(extract_content("{}"), None);
        assert_eq!(extract_content("not json"), None);
    }

    #[test]
    fn temperature_only_sent_when_set() {
        let mut config = BackendConfig::new(super::super::BackendKind::Remote, "m");
        config.endpoint_url = Some("http://127.0.0.1:9/".into());
        let client = RemoteClient::new(config.clone(), "k".into()).unwrap();
        assert!(client.request_body("p").get("temperature").is_none());
        config.temperature = Some(1.0);
        let client = RemoteClient::new(config, "k".into()).unwrap();
        assert_eq!(client.request_body("p")["temperature"], json!(1.0));
        assert_eq!(client.request_body("p")["messages"][0]["content"], json!("p"));
    }
}
