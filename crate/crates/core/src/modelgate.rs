//! Completion gateway over live chat endpoints and offline mocks.
//!
//! Every call goes through a content-addressed cache keyed on
//! `(model identity, prompt text, temperature, sample_index, seed)`. Live
//! calls are retried with exponential backoff and bounded per endpoint.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::SentimentLabel;
use crate::prompts::{RenderedPrompt, TemplateId};

pub const DEFAULT_PROFILE_MAX_TOKENS: u32 = 1024;
pub const DEFAULT_PREDICT_MAX_TOKENS: u32 = 8;
pub const ORACLE_PLACEHOLDER_PROFILE: &str = "PROFILE: placeholder profile";
pub const DEFAULT_API_KEY_ENV: &str = "OPENAI_API_KEY";

#[derive(Debug, thiserror::Error)]
pub enum GateError {
    #[error("model `{model_id}`: gave up after {attempts} attempts: {last}")]
    Exhausted {
        model_id: String,
        attempts: u32,
        last: String,
    },
    #[error("model `{model_id}`: endpoint rejected request with status {status}: {message}")]
    NonRetryable {
        model_id: String,
        status: u16,
        message: String,
    },
    #[error("mock `{model_id}`: {message}")]
    Mock { model_id: String, message: String },
    #[error("invalid model spec `{model_id}`: {message}")]
    Spec { model_id: String, message: String },
    #[error("cache: {0}")]
    Cache(#[from] std::io::Error),
}

impl GateError {
    /// Transport-level failure (as opposed to a configuration or mock problem).
    pub fn is_transport(&self) -> bool {
        matches!(self, Self::Exhausted { .. } | Self::NonRetryable { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Live,
    MockOracle,
    MockConstant,
    MockScripted,
    MockHash,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptReply {
    Text(String),
    /// The ground-truth label of the prompt's user.
    Truth,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRule {
    pub pattern: String,
    pub reply: ScriptReply,
}

/// Offline behavior of a mock model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MockBehavior {
    /// Answers prediction prompts with the user's true label.
    Oracle {
        #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
        truth: BTreeMap<String, SentimentLabel>,
    },
    Constant { reply: String },
    /// First rule whose pattern occurs in the prompt wins.
    Scripted {
        rules: Vec<ScriptRule>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        default: Option<String>,
        #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
        truth: BTreeMap<String, SentimentLabel>,
    },
    /// Text derived from the request digest.
    Hash,
}

pub fn mock_oracle_behavior(truth: BTreeMap<String, SentimentLabel>) -> MockBehavior {
    MockBehavior::Oracle { truth }
}

pub fn mock_scripted_behavior(rules: Vec<ScriptRule>, default: Option<String>) -> Result<MockBehavior, GateError> {
    if rules.is_empty() && default.is_none() {
        return Err(GateError::Mock {
            model_id: String::new(),
            message: "scripted mock needs at least one rule or a default reply".into(),
        });
    }
    Ok(MockBehavior::Scripted {
        rules,
        default,
        truth: BTreeMap::new(),
    })
}

impl MockBehavior {
    pub fn kind(&self) -> ModelKind {
        match self {
            Self::Oracle { .. } => ModelKind::MockOracle,
            Self::Constant { .. } => ModelKind::MockConstant,
            Self::Scripted { .. } => ModelKind::MockScripted,
            Self::Hash => ModelKind::MockHash,
        }
    }

    /// Installs the truth table used by oracle and `Truth` replies.
    pub fn set_truth(&mut self, table: BTreeMap<String, SentimentLabel>) {
        match self {
            Self::Oracle { truth } | Self::Scripted { truth, .. } => *truth = table,
            _ => {}
        }
    }

    pub fn uses_truth(&self) -> bool {
        match self {
            Self::Oracle { .. } => true,
            Self::Scripted { rules, .. } => rules.iter().any(|r| r.reply == ScriptReply::Truth),
            _ => false,
        }
    }

    fn truth_for(
        truth: &BTreeMap<String, SentimentLabel>,
        prompt: &RenderedPrompt,
        model_id: &str,
    ) -> Result<SentimentLabel, GateError> {
        let user = prompt.meta.user_id.as_deref().ok_or_else(|| GateError::Mock {
            model_id: model_id.into(),
            message: "prompt carries no user id".into(),
        })?;
        truth.get(user).copied().ok_or_else(|| GateError::Mock {
            model_id: model_id.into(),
            message: format!("user `{user}` absent from truth table"),
        })
    }

    pub fn evaluate(&self, model_id: &str, req: &CompletionRequest, key: &CacheKey) -> Result<String, GateError> {
        let prompt = &req.prompt;
        match self {
            Self::Oracle { truth } => {
                if prompt.meta.template.is_profile() {
                    Ok(ORACLE_PLACEHOLDER_PROFILE.to_string())
                } else {
                    Ok(Self::truth_for(truth, prompt, model_id)?.to_string())
                }
            }
            Self::Constant { reply } => Ok(reply.clone()),
            Self::Scripted { rules, default, truth } => {
                match rules.iter().find(|r| prompt.text.contains(&r.pattern)) {
                    Some(rule) => match &rule.reply {
                        ScriptReply::Text(t) => Ok(t.clone()),
                        ScriptReply::Truth => Ok(Self::truth_for(truth, prompt, model_id)?.to_string()),
                    },
                    None => default.clone().ok_or_else(|| GateError::Mock {
                        model_id: model_id.into(),
                        message: "no rule matched and no default reply".into(),
                    }),
                }
            }
            Self::Hash => Ok(format!(
                "PROFILE: {} [{}#{}]",
                key.hex(),
                model_id,
                req.sample_index
            )),
        }
    }
}

/// One completion model: a live endpoint, a mock, or a live endpoint with a
/// mock fallback used in offline mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub model_id: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    /// Name of the environment variable holding the bearer token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock: Option<MockBehavior>,
}

impl ModelSpec {
    pub fn mock(model_id: impl Into<String>, temperature: f64, max_output_tokens: u32, behavior: MockBehavior) -> Self {
        Self {
            model_id: model_id.into(),
            temperature,
            max_output_tokens,
            endpoint: None,
            api_key_env: None,
            mock: Some(behavior),
        }
    }

    pub fn live(model_id: impl Into<String>, temperature: f64, max_output_tokens: u32, url: impl Into<String>) -> Self {
        Self {
            model_id: model_id.into(),
            temperature,
            max_output_tokens,
            endpoint: Some(url.into()),
            api_key_env: None,
            mock: None,
        }
    }

    pub fn kind(&self) -> ModelKind {
        match (&self.endpoint, &self.mock) {
            (Some(_), _) => ModelKind::Live,
            (None, Some(m)) => m.kind(),
            (None, None) => ModelKind::Live,
        }
    }

    pub fn validate(&self) -> Result<(), GateError> {
        let err = |m: &str| {
            Err(GateError::Spec {
                model_id: self.model_id.clone(),
                message: m.to_string(),
            })
        };
        if self.model_id.is_empty() {
            return err("empty model_id");
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return err("temperature must lie in [0, 2]");
        }
        if self.max_output_tokens == 0 {
            return err("max_output_tokens must be positive");
        }
        match (&self.endpoint, &self.mock) {
            (None, None) => err("needs an endpoint URL or a mock behavior"),
            (Some(url), _) if !(url.starts_with("http://") || url.starts_with("https://")) => {
                err("endpoint must be an http(s) URL")
            }
            _ => Ok(()),
        }
    }

    /// Switches to the declared mock fallback.
    pub fn force_mock(&mut self) -> Result<(), GateError> {
        if self.mock.is_none() {
            return Err(GateError::Spec {
                model_id: self.model_id.clone(),
                message: "offline mode requested but no mock fallback declared".into(),
            });
        }
        self.endpoint = None;
        Ok(())
    }

    /// Identity used in the cache key. Mocks include their behavior so two
    /// mocks sharing a model id never share cache entries; truth-driven mocks
    /// also include the prompt's user, whose label they answer with.
    fn cache_identity(&self, req: &CompletionRequest) -> String {
        match (&self.endpoint, &self.mock) {
            (None, Some(m)) => {
                let user = if m.uses_truth() {
                    req.prompt.meta.user_id.as_deref().unwrap_or_default()
                } else {
                    ""
                };
                format!(
                    "{}\u{0}mock\u{0}{}\u{0}{}",
                    self.model_id,
                    serde_json::to_string(m).expect("mock behavior serializes"),
                    user
                )
            }
            _ => self.model_id.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRequest {
    pub prompt: RenderedPrompt,
    pub temperature: f64,
    pub sample_index: u32,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionResult {
    pub text: String,
    pub model_id: String,
    pub cached: bool,
    pub latency_ms: u64,
    pub attempt: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey(pub [u8; 32]);

impl CacheKey {
    pub fn hex(&self) -> String {
        hex::encode(self.0)
    }
}

fn put_field(h: &mut Sha256, bytes: &[u8]) {
    h.update((bytes.len() as u64).to_le_bytes());
    h.update(bytes);
}

pub fn cache_key(spec: &ModelSpec, req: &CompletionRequest) -> CacheKey {
    let mut h = Sha256::new();
    put_field(&mut h, spec.cache_identity(req).as_bytes());
    put_field(&mut h, req.prompt.text.as_bytes());
    put_field(&mut h, &req.temperature.to_bits().to_le_bytes());
    put_field(&mut h, &u64::from(req.sample_index).to_le_bytes());
    put_field(&mut h, &req.seed.to_le_bytes());
    CacheKey(h.finalize().into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheHeader {
    pub model_id: String,
    pub temperature: f64,
    pub seed: u64,
    pub sample_index: u32,
    pub created_at: u64,
}

/// Completion cache: always in memory, optionally mirrored to a directory
/// with one file per key under `<ab>/<cd>/<digest>`.
#[derive(Debug, Default)]
pub struct CompletionCache {
    dir: Option<PathBuf>,
    mem: RwLock<HashMap<CacheKey, String>>,
}

impl CompletionCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: Some(dir.into()),
            mem: RwLock::default(),
        }
    }

    pub fn path_for(&self, key: &CacheKey) -> Option<PathBuf> {
        let hex = key.hex();
        self.dir
            .as_ref()
            .map(|d| d.join(&hex[0..2]).join(&hex[2..4]).join(hex))
    }

    pub fn get(&self, key: &CacheKey) -> Result<Option<String>, GateError> {
        if let Some(v) = self.mem.read().unwrap().get(key) {
            return Ok(Some(v.clone()));
        }
        let Some(path) = self.path_for(key) else {
            return Ok(None);
        };
        match fs::read_to_string(&path) {
            Ok(raw) => {
                let text = raw.split_once('\n').map(|(_, t)| t).unwrap_or_default().to_string();
                self.mem.write().unwrap().insert(*key, text.clone());
                Ok(Some(text))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    pub fn put(&self, key: &CacheKey, header: &CacheHeader, text: &str) -> Result<(), GateError> {
        if let Some(path) = self.path_for(key) {
            let parent = path.parent().expect("nested path");
            fs::create_dir_all(parent)?;
            let mut tmp = tempfile::NamedTempFile::new_in(parent)?;
            serde_json::to_writer(&mut tmp, header).map_err(std::io::Error::from)?;
            tmp.write_all(b"\n")?;
            tmp.write_all(text.as_bytes())?;
            // identical keys carry identical values; last writer wins
            tmp.persist(&path).map_err(|e| e.error)?;
        }
        self.mem.write().unwrap().insert(*key, text.to_string());
        Ok(())
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            base_delay_ms: 500,
            max_delay_ms: 30_000,
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (1-based): exponential in the
    /// attempt, capped, scaled by a jitter factor in `[0.5, 1)` derived from
    /// the request seed.
    pub fn delay(&self, seed: u64, attempt: u32) -> Duration {
        let exp = self
            .base_delay_ms
            .saturating_mul(1u64 << attempt.saturating_sub(1).min(32))
            .min(self.max_delay_ms);
        let u = (splitmix64(seed ^ u64::from(attempt).rotate_left(32)) >> 11) as f64 / (1u64 << 53) as f64;
        Duration::from_micros((exp as f64 * 1000.0 * (0.5 + 0.5 * u)) as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

/// Request body in the common chat-completion shape.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TransportError {
    /// Connection problems, timeouts, 429 and 5xx responses.
    Retryable(String),
    Status { status: u16, message: String },
}

pub trait Transport: Send + Sync {
    fn chat(&self, endpoint: &str, api_key: Option<&str>, body: &ChatRequest) -> Result<String, TransportError>;
}

/// Blocking HTTP transport.
pub struct HttpTransport {
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build();
        Self {
            agent: ureq::Agent::new_with_config(config),
        }
    }
}

impl Default for HttpTransport {
    fn default() -> Self {
        Self::new(Duration::from_secs(120))
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatResponseMessage,
}

#[derive(Deserialize)]
struct ChatResponseMessage {
    content: Option<String>,
}

/// Extracts `choices[0].message.content` from a response body.
pub fn parse_chat_response(body: &str) -> Result<String, TransportError> {
    let parsed: ChatResponse =
        serde_json::from_str(body).map_err(|e| TransportError::Retryable(format!("malformed response: {e}")))?;
    parsed
        .choices
        .into_iter()
        .next()
        .and_then(|c| c.message.content)
        .ok_or_else(|| TransportError::Retryable("response has no message content".into()))
}

impl Transport for HttpTransport {
    fn chat(&self, endpoint: &str, api_key: Option<&str>, body: &ChatRequest) -> Result<String, TransportError> {
        let payload = serde_json::to_string(body).expect("request serializes");
        let mut req = self.agent.post(endpoint).header("Content-Type", "application/json");
        if let Some(key) = api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req
            .send(payload.as_str())
            .map_err(|e| TransportError::Retryable(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| TransportError::Retryable(e.to_string()))?;
        match status {
            200..=299 => parse_chat_response(&text),
            429 | 500..=599 => Err(TransportError::Retryable(format!("status {status}"))),
            _ => Err(TransportError::Status { status, message: text }),
        }
    }
}

#[derive(Debug)]
struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            permits: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut p = self.permits.lock().unwrap();
        while *p == 0 {
            p = self.cv.wait(p).unwrap();
        }
        *p -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

/// Receives every request passing through the gateway, before the cache.
pub trait GateObserver: Send + Sync {
    fn on_request(&self, spec: &ModelSpec, req: &CompletionRequest);
}

/// Records `(model_id, template, temperature, sample_index, user, window, recent)`.
#[derive(Debug, Default)]
pub struct RequestLog {
    pub entries: Mutex<Vec<LoggedRequest>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoggedRequest {
    pub model_id: String,
    pub template: TemplateId,
    pub temperature: f64,
    pub sample_index: u32,
    pub user_id: Option<String>,
    pub window: Option<usize>,
    pub recent: Option<usize>,
    pub with_profile: bool,
    pub prompt_text: String,
}

impl GateObserver for RequestLog {
    fn on_request(&self, spec: &ModelSpec, req: &CompletionRequest) {
        let m = &req.prompt.meta;
        self.entries.lock().unwrap().push(LoggedRequest {
            model_id: spec.model_id.clone(),
            template: m.template,
            temperature: req.temperature,
            sample_index: req.sample_index,
            user_id: m.user_id.clone(),
            window: m.window,
            recent: m.recent,
            with_profile: m.with_profile,
            prompt_text: req.prompt.text.clone(),
        });
    }
}

pub struct Gateway {
    cache: CompletionCache,
    transport: Arc<dyn Transport>,
    retry: RetryPolicy,
    concurrency: usize,
    limiters: Mutex<HashMap<String, Arc<Semaphore>>>,
    observer: Option<Arc<dyn GateObserver>>,
}

impl Gateway {
    pub fn new(cache: CompletionCache, transport: Arc<dyn Transport>) -> Self {
        Self {
            cache,
            transport,
            retry: RetryPolicy::default(),
            concurrency: 4,
            limiters: Mutex::default(),
            observer: None,
        }
    }

    /// In-memory cache and the HTTP transport.
    pub fn offline() -> Self {
        Self::new(CompletionCache::in_memory(), Arc::new(HttpTransport::default()))
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Maximum in-flight live requests per endpoint.
    pub fn with_concurrency(mut self, n: usize) -> Self {
        self.concurrency = n.max(1);
        self
    }

    pub fn with_observer(mut self, observer: Arc<dyn GateObserver>) -> Self {
        self.observer = Some(observer);
        self
    }

    pub fn cache(&self) -> &CompletionCache {
        &self.cache
    }

    fn limiter(&self, endpoint: &str) -> Arc<Semaphore> {
        self.limiters
            .lock()
            .unwrap()
            .entry(endpoint.to_string())
            .or_insert_with(|| Arc::new(Semaphore::new(self.concurrency)))
            .clone()
    }

    pub fn complete(&self, spec: &ModelSpec, req: &CompletionRequest) -> Result<CompletionResult, GateError> {
        if let Some(obs) = &self.observer {
            obs.on_request(spec, req);
        }
        let key = cache_key(spec, req);
        if let Some(text) = self.cache.get(&key)? {
            return Ok(CompletionResult {
                text,
                model_id: spec.model_id.clone(),
                cached: true,
                latency_ms: 0,
                attempt: 0,
            });
        }
        let start = Instant::now();
        let (text, attempt) = match (&spec.endpoint, &spec.mock) {
            (None, Some(mock)) => (mock.evaluate(&spec.model_id, req, &key)?, 1),
            (Some(url), _) => self.call_live(spec, url, req)?,
            (None, None) => {
                return Err(GateError::Spec {
                    model_id: spec.model_id.clone(),
                    message: "no endpoint and no mock".into(),
                })
            }
        };
        let header = CacheHeader {
            model_id: spec.model_id.clone(),
            temperature: req.temperature,
            seed: req.seed,
            sample_index: req.sample_index,
            created_at: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or_default(),
        };
        self.cache.put(&key, &header, &text)?;
        Ok(CompletionResult {
            text,
            model_id: spec.model_id.clone(),
            cached: false,
            latency_ms: start.elapsed().as_millis() as u64,
            attempt,
        })
    }

    fn call_live(&self, spec: &ModelSpec, url: &str, req: &CompletionRequest) -> Result<(String, u32), GateError> {
        let env_name = spec.api_key_env.as_deref().unwrap_or(DEFAULT_API_KEY_ENV);
        let api_key = std::env::var(env_name).ok();
        let body = ChatRequest {
            model: spec.model_id.clone(),
            messages: req
                .prompt
                .role_layout
                .iter()
                .map(|(role, content)| ChatMessage {
                    role: serde_json::to_value(role)
                        .ok()
                        .and_then(|v| v.as_str().map(str::to_string))
                        .unwrap_or_else(|| "user".into()),
                    content: content.clone(),
                })
                .collect(),
            temperature: req.temperature,
            max_tokens: spec.max_output_tokens,
        };
        let limiter = self.limiter(url);
        let max_attempts = self.retry.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=max_attempts {
            let outcome = {
                let _permit = limiter.acquire();
                self.transport.chat(url, api_key.as_deref(), &body)
            };
            match outcome {
                Ok(text) => return Ok((text, attempt)),
                Err(TransportError::Status { status, message }) => {
                    return Err(GateError::NonRetryable {
                        model_id: spec.model_id.clone(),
                        status,
                        message,
                    })
                }
                Err(TransportError::Retryable(msg)) => {
                    log::warn!("{} attempt {attempt}/{max_attempts} failed: {msg}", spec.model_id);
                    last = msg;
                    if attempt < max_attempts {
                        std::thread::sleep(self.retry.delay(req.seed, attempt));
                    }
                }
            }
        }
        Err(GateError::Exhausted {
            model_id: spec.model_id.clone(),
            attempts: max_attempts,
            last,
        })
    }
}
