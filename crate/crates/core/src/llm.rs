//! Black-box language model gateway: likelihood scoring of a target string
//! and free generation, over a remote HTTP backend or a deterministic mock.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sem::Semaphore;

/// Environment variable holding the bearer token for remote backends.
pub const API_TOKEN_ENV: &str = "LLM_API_TOKEN";

/// Probability returned by the mock when no rule matches.
pub const MOCK_FALLBACK_PROBABILITY: f64 = 0.1;

const REMOTE_RETRIES: usize = 3;
const RETRY_BASE_DELAY_MS: u64 = 50;

/// One mock rule: the first rule whose pattern is a substring of the prompt
/// decides the score; its canned completion (possibly empty) decides the
/// generation. An empty pattern matches every prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    pub pattern: String,
    pub probability: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LmBackendKind {
    Mock,
    Remote,
}

/// The backend handle; a pure function of its configuration for the mock
/// kind, internally synchronized for the remote kind.
#[derive(Debug, Serialize, Deserialize)]
pub struct LmScoringBackend {
    pub kind: LmBackendKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default = "default_context_limit")]
    pub context_limit: usize,
    #[serde(default = "default_max_concurrent")]
    pub max_concurrent_requests: usize,
    #[serde(default)]
    pub mock_rules: Option<Vec<MockRule>>,
    #[serde(skip)]
    client: OnceLock<reqwest::blocking::Client>,
    #[serde(skip)]
    sem: OnceLock<Semaphore>,
}

fn default_context_limit() -> usize {
    4096
}

fn default_max_concurrent() -> usize {
    4
}

impl Clone for LmScoringBackend {
    fn clone(&self) -> Self {
        LmScoringBackend {
            kind: self.kind,
            endpoint: self.endpoint.clone(),
            context_limit: self.context_limit,
            max_concurrent_requests: self.max_concurrent_requests,
            mock_rules: self.mock_rules.clone(),
            client: OnceLock::new(),
            sem: OnceLock::new(),
        }
    }
}

/// Estimated token count at 1 token per 0.75 words, rounded up.
pub fn estimate_tokens(text: &str) -> usize {
    let words = text.split_whitespace().count();
    (words * 4).div_ceil(3)
}

impl LmScoringBackend {
    pub fn mock(rules: Vec<MockRule>, context_limit: usize) -> Self {
        LmScoringBackend {
            kind: LmBackendKind::Mock,
            endpoint: None,
            context_limit,
            max_concurrent_requests: default_max_concurrent(),
            mock_rules: Some(rules),
            client: OnceLock::new(),
            sem: OnceLock::new(),
        }
    }

    pub fn remote(endpoint: impl Into<String>, context_limit: usize) -> Self {
        LmScoringBackend {
            kind: LmBackendKind::Remote,
            endpoint: Some(endpoint.into()),
            context_limit,
            max_concurrent_requests: default_max_concurrent(),
            mock_rules: None,
            client: OnceLock::new(),
            sem: OnceLock::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.context_limit == 0 {
            return Err(Error::InvalidConfig("context_limit must be positive".into()));
        }
        if self.max_concurrent_requests == 0 {
            return Err(Error::InvalidConfig("max_concurrent_requests must be positive".into()));
        }
        match self.kind {
            LmBackendKind::Remote => {
                if self.endpoint.is_none() {
                    return Err(Error::InvalidConfig("remote backend requires an endpoint".into()));
                }
            }
            LmBackendKind::Mock => {
                let rules = self
                    .mock_rules
                    .as_ref()
                    .ok_or_else(|| Error::InvalidConfig("mock backend requires mock_rules".into()))?;
                for r in rules {
                    if !(r.probability > 0.0 && r.probability <= 1.0) {
                        return Err(Error::InvalidConfig(format!(
                            "mock rule {:?} has probability {} outside (0, 1]",
                            r.pattern, r.probability
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn check_context(&self, prompt: &str, target: Option<&str>) -> Result<()> {
        let estimated = estimate_tokens(prompt) + target.map_or(0, estimate_tokens);
        if estimated > self.context_limit {
            return Err(Error::ContextOverflow { estimated, limit: self.context_limit });
        }
        Ok(())
    }

    /// P(target | prompt) as exp(mean token log-probability), in (0, 1].
    pub fn score_continuation(&self, prompt: &str, target: &str) -> Result<f64> {
        if prompt.trim().is_empty() {
            return Err(Error::InvalidPrompt("empty prompt".into()));
        }
        if target.trim().is_empty() {
            return Err(Error::InvalidPrompt("empty scoring target".into()));
        }
        self.check_context(prompt, Some(target))?;
        match self.kind {
            LmBackendKind::Mock => Ok(self.mock_score(prompt, target)),
            LmBackendKind::Remote => self.remote_score(prompt, target),
        }
    }

    /// Free generation from the prompt.
    pub fn generate(&self, prompt: &str) -> Result<String> {
        if prompt.trim().is_empty() {
            return Err(Error::InvalidPrompt("empty prompt".into()));
        }
        self.check_context(prompt, None)?;
        match self.kind {
            LmBackendKind::Mock => Ok(self.mock_match(prompt).1),
            LmBackendKind::Remote => self.remote_generate(prompt),
        }
    }

    /// First-match rule lookup: (probability, completion). No rule matching
    /// yields the fallback probability and an empty completion.
    fn mock_match(&self, prompt: &str) -> (f64, String) {
        let rules = self.mock_rules.as_deref().unwrap_or(&[]);
        for r in rules {
            if prompt.contains(&r.pattern) {
                return (r.probability, r.completion.clone().unwrap_or_default());
            }
        }
        (MOCK_FALLBACK_PROBABILITY, String::new())
    }

    /// P(target | prompt) for the mock backend: the first rule whose pattern
    /// occurs in the prompt and whose completion (when present) equals the
    /// trimmed target. Rules without a completion score any target. A pure
    /// function of (prompt, target, rules).
    fn mock_score(&self, prompt: &str, target: &str) -> f64 {
        let rules = self.mock_rules.as_deref().unwrap_or(&[]);
        for r in rules {
            let target_matches =
                r.completion.as_deref().is_none_or(|c| c.trim() == target.trim());
            if prompt.contains(&r.pattern) && target_matches {
                return r.probability;
            }
        }
        MOCK_FALLBACK_PROBABILITY
    }

    fn http(&self) -> &reqwest::blocking::Client {
        self.client.get_or_init(|| {
            reqwest::blocking::Client::builder()
                .timeout(std::time::Duration::from_secs(60))
                .build()
                .expect("client construction cannot fail with static options")
        })
    }

    fn semaphore(&self) -> &Semaphore {
        self.sem.get_or_init(|| Semaphore::new(self.max_concurrent_requests))
    }

    fn remote_call(&self, body: serde_json::Value) -> Result<serde_json::Value> {
        let endpoint = self
            .endpoint
            .as_deref()
            .ok_or_else(|| Error::InvalidConfig("remote backend requires an endpoint".into()))?;
        let token = std::env::var(API_TOKEN_ENV).ok();
        let mut last_err = String::new();
        for attempt in 0..REMOTE_RETRIES {
            if attempt > 0 {
                std::thread::sleep(std::time::Duration::from_millis(
                    RETRY_BASE_DELAY_MS << (attempt - 1),
                ));
            }
            let _permit = self.semaphore().acquire();
            let mut req = self.http().post(endpoint).json(&body);
            if let Some(t) = &token {
                req = req.bearer_auth(t);
            }
            match req.send() {
                Ok(resp) if resp.status().is_success() => {
                    return resp.json().map_err(|e| {
                        Error::BackendUnavailable(format!("malformed response: {e}"))
                    });
                }
                Ok(resp) => last_err = format!("status {}", resp.status()),
                Err(e) => last_err = e.to_string(),
            }
        }
        Err(Error::BackendUnavailable(format!(
            "LM endpoint {endpoint} failed after {REMOTE_RETRIES} attempts: {last_err}"
        )))
    }

    fn remote_score(&self, prompt: &str, target: &str) -> Result<f64> {
        let body = serde_json::json!({ "prompt": prompt, "target": target });
        let resp = self.remote_call(body)?;
        let logprobs: Vec<f64> = resp
            .get("logprobs")
            .and_then(|v| serde_json::from_value(v.clone()).ok())
            .ok_or_else(|| Error::BackendUnavailable("response lacks logprobs".into()))?;
        if logprobs.is_empty() {
            return Err(Error::BackendUnavailable("empty logprobs".into()));
        }
        let mean = logprobs.iter().sum::<f64>() / logprobs.len() as f64;
        // Geometric-mean token probability; a misbehaving provider reporting
        // positive log-probs is clamped into (0, 1].
        Ok(mean.exp().min(1.0))
    }

    fn remote_generate(&self, prompt: &str) -> Result<String> {
        let body = serde_json::json!({ "prompt": prompt });
        let resp = self.remote_call(body)?;
        resp.get("text")
            .and_then(|v| v.as_str())
            .map(str::to_owned)
            .ok_or_else(|| Error::BackendUnavailable("response lacks text".into()))
    }
}
