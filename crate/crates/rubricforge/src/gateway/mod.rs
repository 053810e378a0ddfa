//! Provider-agnostic chat-completion gateway: prompt rendering, deterministic
//! mock provider, disk response caching, retries, and CoT probability scoring.

pub mod cache;
pub mod templates;

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{Record, TaskSpec};
use cache::{cache_key, ResponseCache};
use templates::{bindings, render_prompt, PromptTemplate, TemplateKind};

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("missing binding \"{0}\"")]
    MissingBinding(String),
    #[error("unknown binding \"{0}\"")]
    UnknownBinding(String),
    #[error("auth error: {0}")]
    AuthError(String),
    #[error("request timed out after {0:?}")]
    Timeout(Duration),
    #[error("provider returned status {0}")]
    ProviderError(u16),
    #[error("retries exhausted after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: usize, last: String },
    #[error("empty response from provider")]
    EmptyResponse,
    #[error("cache io: {0}")]
    CacheIo(String),
    #[error("precondition violated: {0}")]
    PreconditionViolation(String),
    #[error("transport error: {0}")]
    Transport(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    HttpChat,
    Mock,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub provider: ProviderKind,
    #[serde(default)]
    pub base_url: String,
    pub model_id: String,
    #[serde(default = "default_credential_env_var")]
    pub credential_env_var: String,
    #[serde(default = "default_timeout_s")]
    pub request_timeout_s: f64,
    #[serde(default = "default_max_retries")]
    pub max_retries: usize,
    #[serde(default = "default_concurrency")]
    pub concurrency_limit: usize,
}

fn default_credential_env_var() -> String {
    "RUBRIC_LLM_API_KEY".to_string()
}
fn default_timeout_s() -> f64 {
    120.0
}
fn default_max_retries() -> usize {
    3
}
fn default_concurrency() -> usize {
    8
}

impl ProviderConfig {
    pub fn mock(model_id: &str) -> Self {
        Self {
            provider: ProviderKind::Mock,
            base_url: String::new(),
            model_id: model_id.to_string(),
            credential_env_var: default_credential_env_var(),
            request_timeout_s: default_timeout_s(),
            max_retries: default_max_retries(),
            concurrency_limit: default_concurrency(),
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.provider == ProviderKind::HttpChat
            && (self.base_url.is_empty() || self.credential_env_var.is_empty())
        {
            return Err(GatewayError::PreconditionViolation(
                "HttpChat requires base_url and credential_env_var".into(),
            ));
        }
        if self.concurrency_limit == 0 || self.request_timeout_s <= 0.0 {
            return Err(GatewayError::PreconditionViolation(
                "concurrency_limit and request_timeout_s must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CompletionRequest {
    pub kind: TemplateKind,
    pub prompt: String,
    pub temperature: f64,
    pub max_output: usize,
    pub seed: Option<u64>,
}

impl CompletionRequest {
    pub fn new(kind: TemplateKind, prompt: String) -> Self {
        Self {
            kind,
            prompt,
            temperature: 0.0,
            max_output: 4096,
            seed: None,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.prompt.is_empty() {
            return Err(GatewayError::PreconditionViolation(
                "rendered prompt is empty".into(),
            ));
        }
        if self.temperature < 0.0 || self.max_output == 0 {
            return Err(GatewayError::PreconditionViolation(
                "temperature must be >= 0 and max_output positive".into(),
            ));
        }
        Ok(())
    }
}

/// Deterministic rule applied by the mock provider; never does free
/// generation, so tests stay hermetic.
pub type Rulebook = Arc<dyn Fn(&CompletionRequest) -> String + Send + Sync>;

/// Default mock rule: a stable fingerprint of the request. The synthetic
/// benchmark installs a much richer rulebook.
pub fn echo_rulebook() -> Rulebook {
    Arc::new(|req: &CompletionRequest| {
        format!(
            "mock:{}:{}",
            req.kind.as_str(),
            cache::sha256_hex(req.prompt.as_bytes())
        )
    })
}

struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(permits: usize) -> Self {
        Self {
            permits: Mutex::new(permits),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) {
        let mut n = self.permits.lock().unwrap();
        while *n == 0 {
            n = self.cv.wait(n).unwrap();
        }
        *n -= 1;
    }

    fn release(&self) {
        *self.permits.lock().unwrap() += 1;
        self.cv.notify_one();
    }
}

enum Provider {
    Mock(Rulebook),
    Http(reqwest::blocking::Client),
}

/// Chat-completion entry point shared by every pipeline stage.
///
/// Thread-safe: a semaphore enforces the configured concurrency limit, the
/// cache serializes writes, and the provider call counter is atomic.
pub struct Gateway {
    config: ProviderConfig,
    provider: Provider,
    cache: Option<ResponseCache>,
    calls: AtomicUsize,
    semaphore: Semaphore,
}

impl Gateway {
    pub fn new(config: ProviderConfig, cache_root: Option<&Path>) -> Result<Self, GatewayError> {
        Self::with_rulebook(config, cache_root, echo_rulebook())
    }

    pub fn with_rulebook(
        config: ProviderConfig,
        cache_root: Option<&Path>,
        rulebook: Rulebook,
    ) -> Result<Self, GatewayError> {
        config.validate()?;
        let provider = match config.provider {
            ProviderKind::Mock => Provider::Mock(rulebook),
            ProviderKind::HttpChat => Provider::Http(
                reqwest::blocking::Client::builder()
                    .timeout(Duration::from_secs_f64(config.request_timeout_s))
                    .build()
                    .map_err(|e| GatewayError::Transport(e.to_string()))?,
            ),
        };
        let cache = match cache_root {
            Some(root) => Some(ResponseCache::open(root)?),
            None => None,
        };
        let semaphore = Semaphore::new(config.concurrency_limit);
        Ok(Self {
            config,
            provider,
            cache,
            calls: AtomicUsize::new(0),
            semaphore,
        })
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.config
    }

    /// Number of actual provider invocations (cache hits excluded).
    pub fn provider_calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Completes a request, consulting the cache first. Transient provider
    /// failures are retried with exponential backoff up to `max_retries`.
    pub fn complete(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        request.validate()?;
        let key = cache_key(request, &self.config.model_id);
        if let Some(cache) = &self.cache {
            if let Some(hit) = cache.get(&key) {
                return Ok(hit);
            }
        }
        let response = self.invoke_with_retries(request)?;
        if response.is_empty() {
            return Err(GatewayError::EmptyResponse);
        }
        if let Some(cache) = &self.cache {
            cache.put(&key, request, &self.config.model_id, &response)?;
        }
        Ok(response)
    }

    fn invoke_with_retries(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        self.semaphore.acquire();
        let result = self.invoke_retry_inner(request);
        self.semaphore.release();
        result
    }

    fn invoke_retry_inner(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        let mut last_err: Option<GatewayError> = None;
        let attempts = self.config.max_retries + 1;
        for attempt in 0..attempts {
            if attempt > 0 {
                let backoff = Duration::from_millis(50u64.saturating_mul(1 << attempt.min(8)));
                std::thread::sleep(backoff);
            }
            match self.invoke_once(request) {
                Ok(text) => return Ok(text),
                Err(e) if is_transient(&e) => last_err = Some(e),
                Err(e) => return Err(e),
            }
        }
        Err(GatewayError::RetriesExhausted {
            attempts,
            last: last_err.map(|e| e.to_string()).unwrap_or_default(),
        })
    }

    fn invoke_once(&self, request: &CompletionRequest) -> Result<String, GatewayError> {
        match &self.provider {
            Provider::Mock(rulebook) => {
                self.calls.fetch_add(1, Ordering::SeqCst);
                Ok(rulebook(request))
            }
            Provider::Http(client) => {
                let token = std::env::var(&self.config.credential_env_var).map_err(|_| {
                    GatewayError::AuthError(format!(
                        "env var {} not set",
                        self.config.credential_env_var
                    ))
                })?;
                self.calls.fetch_add(1, Ordering::SeqCst);
                let url = format!("{}/chat/completions", self.config.base_url);
                let body = serde_json::json!({
                    "model": self.config.model_id,
                    "messages": [{"role": "user", "content": request.prompt}],
                    "temperature": request.temperature,
                    "max_tokens": request.max_output,
                });
                let resp = client
                    .post(&url)
                    .bearer_auth(token)
                    .json(&body)
                    .send()
                    .map_err(|e| {
                        if e.is_timeout() {
                            GatewayError::Timeout(Duration::from_secs_f64(
                                self.config.request_timeout_s,
                            ))
                        } else {
                            GatewayError::Transport(e.to_string())
                        }
                    })?;
                let status = resp.status();
                if !status.is_success() {
                    return Err(GatewayError::ProviderError(status.as_u16()));
                }
                let value: serde_json::Value = resp
                    .json()
                    .map_err(|e| GatewayError::Transport(e.to_string()))?;
                value["choices"][0]["message"]["content"]
                    .as_str()
                    .map(|s| s.to_string())
                    .ok_or(GatewayError::EmptyResponse)
            }
        }
    }

    /// Zero-shot chain-of-thought probability: the fraction of `n_samples`
    /// responses whose final standalone yes/no token is "yes". Unparseable
    /// responses count as No.
    pub fn cot_probability(
        &self,
        record: &Record,
        task: &TaskSpec,
        n_samples: usize,
    ) -> Result<f64, GatewayError> {
        if n_samples == 0 {
            return Err(GatewayError::PreconditionViolation(
                "n_samples must be >= 1".into(),
            ));
        }
        let template = PromptTemplate::builtin(TemplateKind::CoT);
        let prompt = render_prompt(
            &template,
            &bindings(&[
                ("task_query", task.query.as_str()),
                ("serialization", record.serialization.as_str()),
            ]),
        )?;
        let mut yes = 0usize;
        for i in 0..n_samples {
            let mut req = CompletionRequest::new(TemplateKind::CoT, prompt.clone());
            req.temperature = 1.0;
            req.seed = Some(i as u64);
            let response = self.complete(&req)?;
            match parse_final_yes_no(&response) {
                Some(true) => yes += 1,
                Some(false) | None => {}
            }
        }
        Ok(yes as f64 / n_samples as f64)
    }
}

fn is_transient(e: &GatewayError) -> bool {
    matches!(
        e,
        GatewayError::Timeout(_)
            | GatewayError::Transport(_)
            | GatewayError::ProviderError(429)
            | GatewayError::ProviderError(500..=599)
    )
}

/// Last case-insensitive standalone "yes"/"no" token in the text.
pub fn parse_final_yes_no(text: &str) -> Option<bool> {
    let mut last = None;
    for token in text.split(|c: char| !c.is_ascii_alphanumeric()) {
        if token.eq_ignore_ascii_case("yes") {
            last = Some(true);
        } else if token.eq_ignore_ascii_case("no") {
            last = Some(false);
        }
    }
    last
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{Split, TaskCategory};

    fn mock_gateway(rulebook: Rulebook) -> Gateway {
        Gateway::with_rulebook(ProviderConfig::mock("mock-model"), None, rulebook).unwrap()
    }

    fn record() -> Record {
        Record {
            patient_id: 1,
            prediction_time: "2021-01-01T00:00:00".into(),
            task: "t".into(),
            split: Split::Test,
            label: true,
            serialization: "SIGNAL_0: 0.5".into(),
        }
    }

    fn task() -> TaskSpec {
        TaskSpec::new("t", "query?", TaskCategory::LabResult)
    }

    #[test]
    fn mock_determinism() {
        let gw = mock_gateway(echo_rulebook());
        let req = CompletionRequest::new(TemplateKind::CoT, "p".into());
        assert_eq!(gw.complete(&req).unwrap(), gw.complete(&req).unwrap());
    }

    #[test]
    fn http_missing_credential_is_auth_error() {
        let mut cfg = ProviderConfig::mock("m");
        cfg.provider = ProviderKind::HttpChat;
        cfg.base_url = "http://127.0.0.1:9".into();
        cfg.credential_env_var = "RUBRICFORGE_TEST_NO_SUCH_VAR".into();
        let gw = Gateway::new(cfg, None).unwrap();
        let req = CompletionRequest::new(TemplateKind::CoT, "p".into());
        assert!(matches!(gw.complete(&req), Err(GatewayError::AuthError(_))));
        assert_eq!(gw.provider_calls(), 0, "no network call should happen");
    }

    #[test]
    fn cache_skips_second_provider_call() {
        let dir = tempfile::tempdir().unwrap();
        let gw = Gateway::with_rulebook(
            ProviderConfig::mock("m"),
            Some(dir.path()),
            echo_rulebook(),
        )
        .unwrap();
        let req = CompletionRequest::new(TemplateKind::CoT, "p".into());
        let a = gw.complete(&req).unwrap();
        assert_eq!(gw.provider_calls(), 1);
        let b = gw.complete(&req).unwrap();
        assert_eq!(gw.provider_calls(), 1);
        assert_eq!(a, b);
    }

    #[test]
    fn cot_all_yes() {
        let gw = mock_gateway(Arc::new(|_req: &CompletionRequest| "Yes".to_string()));
        assert_eq!(gw.cot_probability(&record(), &task(), 10).unwrap(), 1.0);
    }

    #[test]
    fn cot_scripted_ratio() {
        // 7 Yes / 3 No keyed off the per-sample seed.
        let gw = mock_gateway(Arc::new(|req: &CompletionRequest| {
            if req.seed.unwrap_or(0) < 7 {
                "I think so. Final answer: Yes".to_string()
            } else {
                "Unlikely. Final answer: No".to_string()
            }
        }));
        assert!((gw.cot_probability(&record(), &task(), 10).unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn cot_garbage_counts_as_no() {
        let gw = mock_gateway(Arc::new(|req: &CompletionRequest| {
            if req.seed.unwrap_or(0) < 2 {
                "??? inconclusive ???".to_string()
            } else {
                "Yes".to_string()
            }
        }));
        assert!((gw.cot_probability(&record(), &task(), 10).unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn cot_probability_on_grid() {
        let gw = mock_gateway(Arc::new(|req: &CompletionRequest| {
            if req.seed.unwrap_or(0) % 3 == 0 {
                "Yes".to_string()
            } else {
                "No".to_string()
            }
        }));
        let n = 7;
        let p = gw.cot_probability(&record(), &task(), n).unwrap();
        let on_grid = (0..=n).any(|k| (p - k as f64 / n as f64).abs() < 1e-15);
        assert!(on_grid, "p={p} not on the 1/n grid");
    }

    #[test]
    fn final_token_rule() {
        assert_eq!(parse_final_yes_no("Yes, but ultimately no."), Some(false));
        assert_eq!(parse_final_yes_no("no... actually YES"), Some(true));
        assert_eq!(parse_final_yes_no("nothing decisive"), None);
        // Substrings ("yesterday", "normal") must not count.
        assert_eq!(parse_final_yes_no("yesterday was normal"), None);
    }
}
