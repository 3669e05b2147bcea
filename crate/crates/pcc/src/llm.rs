//! Chat-completion access with caching, retry, and a scripted offline mock.
//!
//! The clustering loop only ever sees [`LlmGateway::complete`]; whether the
//! text came from an HTTP backend, the on-disk cache, or a [`MockScript`] is
//! invisible to it. That is what makes the loop replayable in tests.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PccError, Result};

// ===========================================================================
// Backend description
// ===========================================================================

pub const MOCK_ENDPOINT: &str = "mock";

/// Where completions come from and how patiently we ask.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LlmBackend {
    /// Human-readable backend name, used in logs and error messages.
    pub identity: String,
    /// Service URL, or `"mock"` for a scripted backend that never touches
    /// the network.
    pub endpoint: String,
    pub model_id: String,
    pub request_timeout_secs: u64,
    pub max_retries: u32,
}

impl LlmBackend {
    pub fn new(
        identity: impl Into<String>,
        endpoint: impl Into<String>,
        model_id: impl Into<String>,
    ) -> Result<Self> {
        let backend = LlmBackend {
            identity: identity.into(),
            endpoint: endpoint.into(),
            model_id: model_id.into(),
            request_timeout_secs: 60,
            max_retries: 2,
        };
        backend.validate()?;
        Ok(backend)
    }

    pub fn mock(model_id: impl Into<String>) -> Self {
        LlmBackend {
            identity: "scripted-mock".into(),
            endpoint: MOCK_ENDPOINT.into(),
            model_id: model_id.into(),
            request_timeout_secs: 60,
            max_retries: 0,
        }
    }

    pub fn is_mock(&self) -> bool {
        self.endpoint == MOCK_ENDPOINT
    }

    pub fn validate(&self) -> Result<()> {
        if self.request_timeout_secs == 0 {
            return Err(PccError::config("request_timeout must be positive"));
        }
        if self.endpoint.is_empty() {
            return Err(PccError::config("backend endpoint must not be empty"));
        }
        Ok(())
    }
}

/// One prompt/response pair as stored in the cache.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PromptExchange {
    pub cache_key: String,
    pub model_id: String,
    pub prompt_text: String,
    pub response_text: String,
    /// Wall-clock seconds since the Unix epoch at record time.
    pub timestamp: u64,
}

/// Content hash identifying a (model, prompt) pair.
pub fn cache_key(model_id: &str, prompt: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(model_id.as_bytes());
    hasher.update([0u8]);
    hasher.update(prompt.as_bytes());
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

// ===========================================================================
// Scripted mock
// ===========================================================================

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExhaustionPolicy {
    /// Keep returning the most recently served response.
    RepeatLast,
    /// Fail with `ScriptExhausted`.
    Error,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScriptEntry {
    /// Substring the prompt must contain; empty matches any prompt.
    #[serde(rename = "match")]
    pub matcher: String,
    pub response: String,
}

/// Deterministic canned backend. Entries are consumed in order: each request
/// is served by the first not-yet-used entry whose matcher occurs in the
/// prompt. When no entry is left to serve, `exhaustion_policy` decides.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MockScript {
    pub exhaustion_policy: ExhaustionPolicy,
    pub entries: Vec<ScriptEntry>,
}

impl MockScript {
    pub fn new(entries: Vec<(&str, &str)>, exhaustion_policy: ExhaustionPolicy) -> Self {
        MockScript {
            exhaustion_policy,
            entries: entries
                .into_iter()
                .map(|(matcher, response)| ScriptEntry {
                    matcher: matcher.into(),
                    response: response.into(),
                })
                .collect(),
        }
    }

    /// Script that answers every request with `response`, forever.
    pub fn constant(response: &str) -> Self {
        MockScript::new(vec![("", response)], ExhaustionPolicy::RepeatLast)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let script: MockScript = serde_json::from_str(&text)?;
        Ok(script)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

struct MockState {
    script: MockScript,
    next_unused: usize,
    last_served: Option<String>,
    served: usize,
}

impl MockState {
    fn respond(&mut self, prompt: &str) -> Result<String> {
        let remaining = &self.script.entries[self.next_unused.min(self.script.entries.len())..];
        let hit = remaining
            .iter()
            .position(|e| prompt.contains(&e.matcher))
            .map(|offset| self.next_unused + offset);
        if let Some(idx) = hit {
            self.next_unused = idx + 1;
            self.served += 1;
            let response = self.script.entries[idx].response.clone();
            self.last_served = Some(response.clone());
            return Ok(response);
        }
        match (self.script.exhaustion_policy, &self.last_served) {
            (ExhaustionPolicy::RepeatLast, Some(last)) => Ok(last.clone()),
            _ => Err(PccError::ScriptExhausted { served: self.served }),
        }
    }
}

// ===========================================================================
// Transports
// ===========================================================================

/// One round trip to whatever produces completions. Implementations do a
/// single attempt; the gateway owns retry.
pub trait Transport: Send {
    fn send(&mut self, model_id: &str, prompt: &str) -> Result<String>;
}

/// HTTP chat-completion transport. Sends `{model, messages, temperature: 0}`
/// and reads the first choice's message content.
pub struct HttpTransport {
    endpoint: String,
    api_key: Option<String>,
    timeout: Duration,
}

impl HttpTransport {
    pub fn new(endpoint: String, api_key: Option<String>, timeout: Duration) -> Self {
        HttpTransport { endpoint, api_key, timeout }
    }

    /// Endpoint from `LLM_ENDPOINT` (overriding the backend's own) and key
    /// from `LLM_API_KEY`, if set.
    pub fn from_env(backend: &LlmBackend) -> Self {
        let endpoint = std::env::var("LLM_ENDPOINT").unwrap_or_else(|_| backend.endpoint.clone());
        let api_key = std::env::var("LLM_API_KEY").ok();
        HttpTransport::new(
            endpoint,
            api_key,
            Duration::from_secs(backend.request_timeout_secs),
        )
    }
}

impl Transport for HttpTransport {
    fn send(&mut self, model_id: &str, prompt: &str) -> Result<String> {
        let body = serde_json::json!({
            "model": model_id,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
        });
        let mut request = ureq::post(&self.endpoint)
            .timeout(self.timeout)
            .set("content-type", "application/json");
        if let Some(key) = &self.api_key {
            request = request.set("authorization", &format!("Bearer {key}"));
        }
        let response = request.send_json(body).map_err(|e| PccError::Network {
            attempts: 1,
            message: e.to_string(),
        })?;
        let parsed: serde_json::Value =
            response.into_json().map_err(|e| PccError::Network {
                attempts: 1,
                message: format!("unreadable response body: {e}"),
            })?;
        parsed["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| PccError::Network {
                attempts: 1,
                message: "response missing choices[0].message.content".into(),
            })
    }
}

struct MockTransport {
    state: MockState,
}

impl Transport for MockTransport {
    fn send(&mut self, _model_id: &str, prompt: &str) -> Result<String> {
        self.state.respond(prompt)
    }
}

// ===========================================================================
// Cache store
// ===========================================================================

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CacheScope<'a> {
    All,
    ByModel(&'a str),
}

/// In-memory exchange cache with optional line-record (JSONL) persistence.
/// New entries are appended; eviction rewrites the file.
pub struct CacheStore {
    entries: BTreeMap<String, PromptExchange>,
    path: Option<PathBuf>,
}

impl CacheStore {
    pub fn in_memory() -> Self {
        CacheStore { entries: BTreeMap::new(), path: None }
    }

    /// Open (and load, if present) a cache file.
    pub fn at_path(path: PathBuf) -> Result<Self> {
        let mut store = CacheStore { entries: BTreeMap::new(), path: Some(path.clone()) };
        if path.exists() {
            let text = std::fs::read_to_string(&path)?;
            for (lineno, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let exchange: PromptExchange = serde_json::from_str(line).map_err(|e| {
                    PccError::format(format!(
                        "{}:{}: bad cache record: {e}",
                        path.display(),
                        lineno + 1
                    ))
                })?;
                store.entries.insert(exchange.cache_key.clone(), exchange);
            }
        }
        Ok(store)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<&PromptExchange> {
        self.entries.get(key)
    }

    pub fn put(&mut self, exchange: PromptExchange) -> Result<()> {
        if let Some(path) = &self.path {
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir)?;
            }
            let mut file = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)?;
            writeln!(file, "{}", serde_json::to_string(&exchange)?)?;
        }
        self.entries.insert(exchange.cache_key.clone(), exchange);
        Ok(())
    }

    /// Evict entries; returns how many were removed.
    pub fn clear(&mut self, scope: CacheScope) -> Result<usize> {
        let before = self.entries.len();
        match scope {
            CacheScope::All => self.entries.clear(),
            CacheScope::ByModel(model_id) => {
                self.entries.retain(|_, e| e.model_id != model_id);
            }
        }
        let evicted = before - self.entries.len();
        if evicted > 0 {
            self.rewrite()?;
        }
        Ok(evicted)
    }

    fn rewrite(&self) -> Result<()> {
        let Some(path) = &self.path else { return Ok(()) };
        let mut out = String::new();
        for exchange in self.entries.values() {
            out.push_str(&serde_json::to_string(exchange)?);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

// ===========================================================================
// Gateway
// ===========================================================================

struct GatewayInner {
    transport: Box<dyn Transport>,
    cache: CacheStore,
    requests: u64,
}

/// Front door for completions: caching, retry, and request accounting.
pub struct LlmGateway {
    backend: LlmBackend,
    inner: Mutex<GatewayInner>,
}

impl LlmGateway {
    /// Gateway over an explicit transport. Scripted tests inject fakes here.
    pub fn with_transport(
        backend: LlmBackend,
        transport: Box<dyn Transport>,
        cache: CacheStore,
    ) -> Result<Self> {
        backend.validate()?;
        Ok(LlmGateway {
            backend,
            inner: Mutex::new(GatewayInner { transport, cache, requests: 0 }),
        })
    }

    /// Live HTTP gateway. Honors `LLM_ENDPOINT` / `LLM_API_KEY`.
    pub fn http(backend: LlmBackend, cache: CacheStore) -> Result<Self> {
        let transport = Box::new(HttpTransport::from_env(&backend));
        LlmGateway::with_transport(backend, transport, cache)
    }

    /// Offline gateway driven by a [`MockScript`]. Never caches and never
    /// performs network I/O, so replaying a script is a pure function.
    pub fn mock(model_id: &str, script: MockScript) -> Self {
        let backend = LlmBackend::mock(model_id);
        let transport = Box::new(MockTransport {
            state: MockState {
                script,
                next_unused: 0,
                last_served: None,
                served: 0,
            },
        });
        LlmGateway {
            backend,
            inner: Mutex::new(GatewayInner {
                transport,
                cache: CacheStore::in_memory(),
                requests: 0,
            }),
        }
    }

    pub fn backend(&self) -> &LlmBackend {
        &self.backend
    }

    /// Transport round trips so far (cache hits do not count).
    pub fn requests_made(&self) -> u64 {
        self.inner.lock().unwrap().requests
    }

    pub fn cache_len(&self) -> usize {
        self.inner.lock().unwrap().cache.len()
    }

    pub fn clear_cache(&self, scope: CacheScope) -> Result<usize> {
        self.inner.lock().unwrap().cache.clear(scope)
    }

    /// Resolve a prompt to response text. Live backends consult the cache
    /// first and record each fresh exchange; mock backends always replay
    /// their script so scripted sequences stay position-faithful.
    pub fn complete(&self, prompt: &str) -> Result<String> {
        if prompt.is_empty() {
            return Err(PccError::config("prompt must not be empty"));
        }
        let key = cache_key(&self.backend.model_id, prompt);
        let mut inner = self.inner.lock().unwrap();

        if !self.backend.is_mock() {
            if let Some(hit) = inner.cache.get(&key) {
                return Ok(hit.response_text.clone());
            }
        }

        let attempts_allowed = if self.backend.is_mock() {
            1
        } else {
            u64::from(self.backend.max_retries) + 1
        };
        let mut last_message = String::new();
        let mut response = None;
        let mut attempts = 0;
        for _ in 0..attempts_allowed {
            attempts += 1;
            inner.requests += 1;
            match inner.transport.send(&self.backend.model_id, prompt) {
                Ok(text) => {
                    response = Some(text);
                    break;
                }
                Err(PccError::Network { message, .. }) => last_message = message,
                Err(other) => return Err(other),
            }
        }
        let Some(text) = response else {
            return Err(PccError::Network { attempts, message: last_message });
        };
        if text.trim().is_empty() {
            return Err(PccError::EmptyResponse);
        }

        if !self.backend.is_mock() {
            let exchange = PromptExchange {
                cache_key: key,
                model_id: self.backend.model_id.clone(),
                prompt_text: prompt.to_string(),
                response_text: text.clone(),
                timestamp: SystemTime::now()
                    .duration_since(UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0),
            };
            inner.cache.put(exchange)?;
        }
        Ok(text)
    }
}

pub fn default_cache_path() -> PathBuf {
    PathBuf::from(".pcc_cache/llm_cache.jsonl")
}
