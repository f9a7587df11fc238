//! Single entry point for model access.
//!
//! A [`Gateway`] maps profile names to backends. Every call is retried on
//! transient failures with exponential backoff, rate limited per profile and
//! written to an audit log. [`Gateway::complete_structured`] parses and
//! validates replies against a schema or JSON shape, feeding validation errors
//! back to the model for a bounded number of repair rounds.
//!
//! The mock backend answers from a script keyed by the SHA-256 fingerprint of
//! the request, so whole pipeline runs replay bit-for-bit offline.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::schema::{coerce_json, Schema};

pub const DEFAULT_MAX_RETRIES: u32 = 3;
pub const DEFAULT_MAX_REPAIRS: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttachmentKind {
    ImageUri,
    FigureJson,
    TableText,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attachment {
    pub kind: AttachmentKind,
    pub payload: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRequest {
    pub model_profile: String,
    pub system: String,
    pub user: String,
    #[serde(default)]
    pub attachments: Vec<Attachment>,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_output_tokens")]
    pub max_output_tokens: u32,
}

fn default_max_output_tokens() -> u32 {
    4096
}

impl PromptRequest {
    pub fn new(profile: &str, system: &str, user: &str) -> Self {
        Self {
            model_profile: profile.to_string(),
            system: system.to_string(),
            user: user.to_string(),
            attachments: Vec::new(),
            temperature: 0.0,
            max_output_tokens: default_max_output_tokens(),
        }
    }

    pub fn attach(mut self, kind: AttachmentKind, payload: &str) -> Self {
        self.attachments.push(Attachment {
            kind,
            payload: payload.to_string(),
        });
        self
    }

    /// Hex SHA-256 over (system, user, attachment digests). The profile is not
    /// part of the key, so one script serves every mock profile.
    pub fn fingerprint(&self) -> String {
        fingerprint(&self.system, &self.user, &self.attachments)
    }
}

pub fn fingerprint(system: &str, user: &str, attachments: &[Attachment]) -> String {
    let mut h = Sha256::new();
    h.update(b"system\0");
    h.update(system.as_bytes());
    h.update(b"\0user\0");
    h.update(user.as_bytes());
    for a in attachments {
        h.update(b"\0attachment\0");
        h.update(serde_json::to_string(&a.kind).unwrap_or_default().as_bytes());
        h.update(b":");
        h.update(sha256_hex(&a.payload).as_bytes());
    }
    hex::encode(h.finalize())
}

pub fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub text: String,
    pub model_profile: String,
    pub usage: Usage,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendReply {
    pub text: String,
    pub usage: Usage,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendFailure {
    Timeout,
    RateLimited,
    Unavailable(String),
    Auth(String),
    NoScriptMatch(String),
    Protocol(String),
}

impl BackendFailure {
    pub fn is_transient(&self) -> bool {
        matches!(
            self,
            BackendFailure::Timeout | BackendFailure::RateLimited | BackendFailure::Unavailable(_)
        )
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("unknown model profile `{0}`")]
    ProfileUnknown(String),
    #[error("request timed out after {attempts} attempts")]
    Timeout { attempts: u32 },
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("service unavailable after {attempts} attempts: {reason}")]
    Unavailable { attempts: u32, reason: String },
    #[error("authentication failed: {0}")]
    AuthFailure(String),
    #[error("mock script has no response for fingerprint {0}")]
    NoScriptMatch(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("structured output still invalid after repair: {last_error}")]
    StructureInvalidAfterRepair {
        last_error: String,
        raw_outputs: Vec<String>,
    },
}

pub trait Backend: Send + Sync {
    fn call(&self, req: &PromptRequest, profile: &ProfileConfig)
        -> Result<BackendReply, BackendFailure>;
}

fn word_count(s: &str) -> u64 {
    s.split_whitespace().count() as u64
}

fn mock_usage(req: &PromptRequest, text: &str) -> Usage {
    Usage {
        input_tokens: word_count(&req.system) + word_count(&req.user),
        output_tokens: word_count(text),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockEntry {
    pub fingerprint: String,
    pub response_text: String,
}

/// Mock script file: a JSON list of `{fingerprint, response_text}`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MockScript {
    pub entries: Vec<MockEntry>,
}

impl MockScript {
    pub fn push(&mut self, req: &PromptRequest, response: &str) {
        self.entries.push(MockEntry {
            fingerprint: req.fingerprint(),
            response_text: response.to_string(),
        });
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        text.push('\n');
        std::fs::write(path, text)
    }
}

/// Scripted backend keyed by request fingerprint. Unknown fingerprints fail.
/// Failures queued with [`MockBackend::fail_next`] are returned first.
#[derive(Debug, Default)]
pub struct MockBackend {
    responses: HashMap<String, String>,
    failures: Mutex<VecDeque<BackendFailure>>,
}

impl MockBackend {
    pub fn new(script: &MockScript) -> Self {
        // Later entries win, so a script can be patched by appending.
        let responses = script
            .entries
            .iter()
            .map(|e| (e.fingerprint.clone(), e.response_text.clone()))
            .collect();
        Self {
            responses,
            failures: Mutex::new(VecDeque::new()),
        }
    }

    pub fn fail_next(&self, failures: impl IntoIterator<Item = BackendFailure>) {
        self.failures.lock().unwrap().extend(failures);
    }
}

impl Backend for MockBackend {
    fn call(&self, req: &PromptRequest, _: &ProfileConfig) -> Result<BackendReply, BackendFailure> {
        if let Some(f) = self.failures.lock().unwrap().pop_front() {
            return Err(f);
        }
        let fp = req.fingerprint();
        match self.responses.get(&fp) {
            Some(text) => Ok(BackendReply {
                usage: mock_usage(req, text),
                text: text.clone(),
            }),
            None => Err(BackendFailure::NoScriptMatch(fp)),
        }
    }
}

/// One scripting rule: answers when every needle occurs in the user prompt
/// (and, if set, in the system prompt).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    pub user_contains: Vec<String>,
    #[serde(default)]
    pub user_excludes: Vec<String>,
    #[serde(default)]
    pub system_contains: Vec<String>,
    pub response_text: String,
}

impl Rule {
    pub fn new(needles: &[&str], response: &str) -> Self {
        Self {
            user_contains: needles.iter().map(|s| s.to_string()).collect(),
            user_excludes: Vec::new(),
            system_contains: Vec::new(),
            response_text: response.to_string(),
        }
    }

    pub fn excluding(mut self, needles: &[&str]) -> Self {
        self.user_excludes = needles.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn system(mut self, needles: &[&str]) -> Self {
        self.system_contains = needles.iter().map(|s| s.to_string()).collect();
        self
    }

    fn matches(&self, req: &PromptRequest) -> bool {
        self.user_contains.iter().all(|n| req.user.contains(n))
            && !self.user_excludes.iter().any(|n| req.user.contains(n))
            && self.system_contains.iter().all(|n| req.system.contains(n))
    }
}

/// Content-matching backend for authoring scenarios; first matching rule wins.
/// Pair it with [`RecordingBackend`] to produce a fingerprint script.
#[derive(Debug, Default)]
pub struct RuleBackend {
    rules: Vec<Rule>,
}

impl RuleBackend {
    pub fn new(rules: Vec<Rule>) -> Self {
        Self { rules }
    }
}

impl Backend for RuleBackend {
    fn call(&self, req: &PromptRequest, _: &ProfileConfig) -> Result<BackendReply, BackendFailure> {
        self.rules
            .iter()
            .find(|r| r.matches(req))
            .map(|r| BackendReply {
                usage: mock_usage(req, &r.response_text),
                text: r.response_text.clone(),
            })
            .ok_or_else(|| BackendFailure::NoScriptMatch(req.fingerprint()))
    }
}

/// Wraps a backend and records every successful exchange as a script entry.
pub struct RecordingBackend<B> {
    inner: B,
    recorded: Mutex<Vec<MockEntry>>,
}

impl<B: Backend> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            recorded: Mutex::new(Vec::new()),
        }
    }

    /// Recorded entries, deduplicated by fingerprint and sorted.
    pub fn script(&self) -> MockScript {
        let mut map = BTreeMap::new();
        for e in self.recorded.lock().unwrap().iter() {
            map.insert(e.fingerprint.clone(), e.response_text.clone());
        }
        MockScript {
            entries: map
                .into_iter()
                .map(|(fingerprint, response_text)| MockEntry {
                    fingerprint,
                    response_text,
                })
                .collect(),
        }
    }
}

impl<B: Backend> Backend for RecordingBackend<B> {
    fn call(&self, req: &PromptRequest, p: &ProfileConfig) -> Result<BackendReply, BackendFailure> {
        let reply = self.inner.call(req, p)?;
        self.recorded.lock().unwrap().push(MockEntry {
            fingerprint: req.fingerprint(),
            response_text: reply.text.clone(),
        });
        Ok(reply)
    }
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn call(&self, req: &PromptRequest, p: &ProfileConfig) -> Result<BackendReply, BackendFailure> {
        (**self).call(req, p)
    }
}

/// Generic JSON-over-HTTP completion endpoint.
///
/// Request: `{"model", "system", "user", "attachments", "temperature",
/// "max_output_tokens"}`; reply: `{"text", "usage": {"input_tokens",
/// "output_tokens"}}`. 401/403 map to auth failures, 429 to rate limiting and
/// 5xx to unavailability.
#[derive(Debug, Default)]
pub struct HttpBackend;

impl Backend for HttpBackend {
    fn call(&self, req: &PromptRequest, p: &ProfileConfig) -> Result<BackendReply, BackendFailure> {
        #[derive(Deserialize)]
        struct Reply {
            text: String,
            #[serde(default)]
            usage: Usage,
        }
        let endpoint = p
            .endpoint
            .as_deref()
            .ok_or_else(|| BackendFailure::Protocol("profile has no endpoint".into()))?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(p.timeout_ms)))
            .build()
            .into();
        let body = json!({
            "model": p.model,
            "system": req.system,
            "user": req.user,
            "attachments": req.attachments,
            "temperature": req.temperature,
            "max_output_tokens": req.max_output_tokens,
        });
        let mut call = agent.post(endpoint);
        if let Some(var) = &p.api_key_env {
            let key = std::env::var(var)
                .map_err(|_| BackendFailure::Auth(format!("environment variable {var} is not set")))?;
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        match call.send_json(&body) {
            Ok(mut resp) => {
                let r: Reply = resp
                    .body_mut()
                    .read_json()
                    .map_err(|e| BackendFailure::Protocol(e.to_string()))?;
                Ok(BackendReply {
                    text: r.text,
                    usage: r.usage,
                })
            }
            Err(ureq::Error::StatusCode(code)) => Err(match code {
                401 | 403 => BackendFailure::Auth(format!("HTTP {code}")),
                429 => BackendFailure::RateLimited,
                408 | 504 => BackendFailure::Timeout,
                c if c >= 500 => BackendFailure::Unavailable(format!("HTTP {c}")),
                c => BackendFailure::Protocol(format!("HTTP {c}")),
            }),
            Err(ureq::Error::Timeout(_)) => Err(BackendFailure::Timeout),
            Err(e) => Err(BackendFailure::Unavailable(e.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileConfig {
    pub backend: BackendKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model: String,
    /// Name of the environment variable holding the API key.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_base")]
    pub backoff_base_ms: u64,
    #[serde(default = "default_backoff_max")]
    pub backoff_max_ms: u64,
    #[serde(default = "default_timeout")]
    pub timeout_ms: u64,
    /// Minimum spacing between calls on this profile.
    #[serde(default)]
    pub min_interval_ms: u64,
}

fn default_retries() -> u32 {
    DEFAULT_MAX_RETRIES
}
fn default_backoff_base() -> u64 {
    500
}
fn default_backoff_max() -> u64 {
    8_000
}
fn default_timeout() -> u64 {
    60_000
}

impl ProfileConfig {
    pub fn mock() -> Self {
        Self {
            backend: BackendKind::Mock,
            endpoint: None,
            model: "mock".into(),
            api_key_env: None,
            max_retries: DEFAULT_MAX_RETRIES,
            backoff_base_ms: 0,
            backoff_max_ms: 0,
            timeout_ms: default_timeout(),
            min_interval_ms: 0,
        }
    }

    pub fn http(endpoint: &str, model: &str) -> Self {
        Self {
            backend: BackendKind::Http,
            endpoint: Some(endpoint.to_string()),
            model: model.to_string(),
            api_key_env: None,
            max_retries: DEFAULT_MAX_RETRIES,
            backoff_base_ms: default_backoff_base(),
            backoff_max_ms: default_backoff_max(),
            timeout_ms: default_timeout(),
            min_interval_ms: 0,
        }
    }

    /// Delay before retry number `attempt` (1-based): base * 2^(attempt-1),
    /// capped at the maximum.
    pub fn backoff(&self, attempt: u32) -> u64 {
        let factor = 1u64 << (attempt.saturating_sub(1)).min(30);
        self.backoff_base_ms
            .saturating_mul(factor)
            .min(self.backoff_max_ms.max(self.backoff_base_ms))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewayConfig {
    #[serde(default)]
    pub profiles: BTreeMap<String, ProfileConfig>,
    #[serde(default)]
    pub default_profile: Option<String>,
}

impl GatewayConfig {
    pub fn mock_only() -> Self {
        let mut profiles = BTreeMap::new();
        profiles.insert("mock".to_string(), ProfileConfig::mock());
        Self {
            profiles,
            default_profile: Some("mock".into()),
        }
    }

    pub fn default_profile(&self) -> Option<&str> {
        self.default_profile
            .as_deref()
            .or_else(|| self.profiles.keys().next().map(String::as_str))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub session: String,
    pub seq: u64,
    pub profile: String,
    pub request_fingerprint: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub response_digest: Option<String>,
    pub retry_count: u32,
    pub backoff_ms: Vec<u64>,
    /// 0 for the first attempt of a structured call, n for the n-th repair.
    pub repair_round: u32,
    pub outcome: String,
    pub latency_ms: u64,
    pub usage: Usage,
}

type Sleeper = dyn Fn(Duration) + Send + Sync;

struct Profile {
    config: ProfileConfig,
    backend: Arc<dyn Backend>,
    last_call: Mutex<Option<Instant>>,
}

struct Shared {
    profiles: BTreeMap<String, Profile>,
    sleeper: Arc<Sleeper>,
}

#[derive(Default)]
struct AuditLog {
    next_seq: u64,
    entries: Vec<AuditEntry>,
}

/// Cheap to clone; clones share backends and the audit log. Use
/// [`Gateway::fork`] for a separate audit log per unit of work.
#[derive(Clone)]
pub struct Gateway {
    shared: Arc<Shared>,
    session: String,
    audit: Arc<Mutex<AuditLog>>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("profiles", &self.shared.profiles.keys().collect::<Vec<_>>())
            .field("session", &self.session)
            .finish()
    }
}

pub struct GatewayBuilder {
    profiles: BTreeMap<String, Profile>,
    sleeper: Arc<Sleeper>,
}

impl GatewayBuilder {
    pub fn profile(mut self, name: &str, config: ProfileConfig, backend: Arc<dyn Backend>) -> Self {
        self.profiles.insert(
            name.to_string(),
            Profile {
                config,
                backend,
                last_call: Mutex::new(None),
            },
        );
        self
    }

    /// Replace the sleep used for backoff and rate limiting.
    pub fn sleeper(mut self, f: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.sleeper = Arc::new(f);
        self
    }

    pub fn build(self) -> Gateway {
        Gateway {
            shared: Arc::new(Shared {
                profiles: self.profiles,
                sleeper: self.sleeper,
            }),
            session: String::new(),
            audit: Arc::new(Mutex::new(AuditLog::default())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StructuredOutput {
    pub value: Value,
    pub repairs: u32,
    pub raw_outputs: Vec<String>,
}

type ShapeFn = dyn Fn(&Value) -> Result<Value, String> + Send + Sync;

/// A named validator for free-form JSON replies. It may normalize the value.
#[derive(Clone)]
pub struct JsonShape {
    pub name: String,
    validate: Arc<ShapeFn>,
}

impl std::fmt::Debug for JsonShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "JsonShape({})", self.name)
    }
}

impl JsonShape {
    pub fn new(
        name: &str,
        validate: impl Fn(&Value) -> Result<Value, String> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.to_string(),
            validate: Arc::new(validate),
        }
    }

    pub fn validate(&self, v: &Value) -> Result<Value, String> {
        (self.validate)(v)
    }
}

/// What a structured reply must conform to.
#[derive(Debug, Clone, Copy)]
pub enum StructuredTarget<'a> {
    /// One object of `field -> raw value`; every value is coerced to its dtype.
    Record(&'a Schema),
    /// A list of rows under the schema, each cell optionally wrapped as
    /// `{"value", "confidence", "evidence"}`. Cells that fail coercion are kept
    /// as null with a `coercion_error`.
    Rows(&'a Schema),
    Shape(&'a JsonShape),
}

impl Gateway {
    pub fn builder() -> GatewayBuilder {
        GatewayBuilder {
            profiles: BTreeMap::new(),
            sleeper: Arc::new(std::thread::sleep),
        }
    }

    /// Build from configuration. Mock profiles share one backend over `script`.
    pub fn from_config(config: &GatewayConfig, script: Option<&MockScript>) -> Gateway {
        let mock: Arc<dyn Backend> = Arc::new(MockBackend::new(&script.cloned().unwrap_or_default()));
        let http: Arc<dyn Backend> = Arc::new(HttpBackend);
        let mut b = Gateway::builder();
        for (name, p) in &config.profiles {
            let backend = match p.backend {
                BackendKind::Mock => mock.clone(),
                BackendKind::Http => http.clone(),
            };
            b = b.profile(name, p.clone(), backend);
        }
        b.build()
    }

    /// Single-profile mock gateway over `backend`, with no sleeping.
    pub fn mock(profile: &str, backend: Arc<dyn Backend>) -> Gateway {
        Gateway::builder()
            .profile(profile, ProfileConfig::mock(), backend)
            .sleeper(|_| {})
            .build()
    }

    /// Same backends and limiters, fresh audit log tagged with `session`.
    pub fn fork(&self, session: &str) -> Gateway {
        Gateway {
            shared: self.shared.clone(),
            session: session.to_string(),
            audit: Arc::new(Mutex::new(AuditLog::default())),
        }
    }

    pub fn session(&self) -> &str {
        &self.session
    }

    pub fn has_profile(&self, name: &str) -> bool {
        self.shared.profiles.contains_key(name)
    }

    pub fn audit(&self) -> Vec<AuditEntry> {
        self.audit.lock().unwrap().entries.clone()
    }

    pub fn audit_len(&self) -> usize {
        self.audit.lock().unwrap().entries.len()
    }

    fn record(&self, mut entry: AuditEntry) {
        let mut log = self.audit.lock().unwrap();
        entry.seq = log.next_seq;
        entry.session = self.session.clone();
        log.next_seq += 1;
        log.entries.push(entry);
    }

    fn throttle(&self, p: &Profile) {
        if p.config.min_interval_ms == 0 {
            return;
        }
        let mut last = p.last_call.lock().unwrap();
        if let Some(t) = *last {
            let min = Duration::from_millis(p.config.min_interval_ms);
            let since = t.elapsed();
            if since < min {
                (self.shared.sleeper)(min - since);
            }
        }
        *last = Some(Instant::now());
    }

    pub fn complete(&self, req: &PromptRequest) -> Result<CompletionResponse, GatewayError> {
        self.complete_tagged(req, 0)
    }

    fn complete_tagged(
        &self,
        req: &PromptRequest,
        repair_round: u32,
    ) -> Result<CompletionResponse, GatewayError> {
        let profile = self
            .shared
            .profiles
            .get(&req.model_profile)
            .ok_or_else(|| GatewayError::ProfileUnknown(req.model_profile.clone()))?;
        if req.user.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("empty user prompt".into()));
        }
        if req.temperature.is_nan() || req.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest("negative temperature".into()));
        }
        let fp = req.fingerprint();
        let mut backoff = Vec::new();
        let mut attempt = 0u32;
        loop {
            self.throttle(profile);
            let started = Instant::now();
            let result = profile.backend.call(req, &profile.config);
            let latency_ms = match profile.config.backend {
                BackendKind::Mock => 0,
                BackendKind::Http => started.elapsed().as_millis() as u64,
            };
            match result {
                Ok(reply) => {
                    self.record(AuditEntry {
                        session: String::new(),
                        seq: 0,
                        profile: req.model_profile.clone(),
                        request_fingerprint: fp,
                        response_digest: Some(sha256_hex(&reply.text)),
                        retry_count: attempt,
                        backoff_ms: backoff,
                        repair_round,
                        outcome: "ok".into(),
                        latency_ms,
                        usage: reply.usage,
                    });
                    return Ok(CompletionResponse {
                        text: reply.text,
                        model_profile: req.model_profile.clone(),
                        usage: reply.usage,
                        latency_ms,
                    });
                }
                Err(f) if f.is_transient() && attempt < profile.config.max_retries => {
                    attempt += 1;
                    let delay = profile.config.backoff(attempt);
                    backoff.push(delay);
                    if delay > 0 {
                        (self.shared.sleeper)(Duration::from_millis(delay));
                    }
                }
                Err(f) => {
                    let attempts = attempt + 1;
                    let err = match f {
                        BackendFailure::Timeout => GatewayError::Timeout { attempts },
                        BackendFailure::RateLimited => GatewayError::RateLimited { attempts },
                        BackendFailure::Unavailable(reason) => {
                            GatewayError::Unavailable { attempts, reason }
                        }
                        BackendFailure::Auth(m) => GatewayError::AuthFailure(m),
                        BackendFailure::NoScriptMatch(fp) => GatewayError::NoScriptMatch(fp),
                        BackendFailure::Protocol(m) => GatewayError::Protocol(m),
                    };
                    self.record(AuditEntry {
                        session: String::new(),
                        seq: 0,
                        profile: req.model_profile.clone(),
                        request_fingerprint: fp,
                        response_digest: None,
                        retry_count: attempt,
                        backoff_ms: backoff,
                        repair_round,
                        outcome: format!("error: {err}"),
                        latency_ms,
                        usage: Usage::default(),
                    });
                    return Err(err);
                }
            }
        }
    }

    pub fn complete_structured(
        &self,
        req: &PromptRequest,
        target: &StructuredTarget<'_>,
    ) -> Result<StructuredOutput, GatewayError> {
        self.complete_structured_with(req, target, DEFAULT_MAX_REPAIRS)
    }

    /// Ask, parse, validate; on failure re-ask with the validator error
    /// appended, at most `max_repairs` times.
    pub fn complete_structured_with(
        &self,
        req: &PromptRequest,
        target: &StructuredTarget<'_>,
        max_repairs: u32,
    ) -> Result<StructuredOutput, GatewayError> {
        let mut raw_outputs = Vec::new();
        let mut current = req.clone();
        let mut round = 0;
        loop {
            let resp = self.complete_tagged(&current, round)?;
            raw_outputs.push(resp.text.clone());
            let err = match parse_json_reply(&resp.text) {
                Ok(v) => match validate_target(&v, target) {
                    Ok(value) => {
                        return Ok(StructuredOutput {
                            value,
                            repairs: round,
                            raw_outputs,
                        })
                    }
                    Err(e) => e,
                },
                Err(e) => e,
            };
            if round >= max_repairs {
                return Err(GatewayError::StructureInvalidAfterRepair {
                    last_error: err,
                    raw_outputs,
                });
            }
            round += 1;
            current = req.clone();
            current.user = repair_prompt(&req.user, &resp.text, &err);
        }
    }
}

pub fn repair_prompt(original_user: &str, reply: &str, error: &str) -> String {
    format!(
        "{original_user}\n\nYour previous reply could not be used.\nError: {error}\nPrevious reply:\n{reply}\n\nReply again with valid JSON only."
    )
}

/// Parse a reply as JSON. A single surrounding Markdown code fence is allowed;
/// anything else around the JSON is an error.
pub fn parse_json_reply(text: &str) -> Result<Value, String> {
    let t = text.trim();
    let body = t
        .strip_prefix("```json")
        .or_else(|| t.strip_prefix("```"))
        .and_then(|rest| rest.strip_suffix("```"))
        .unwrap_or(t);
    serde_json::from_str(body.trim()).map_err(|e| format!("reply is not valid JSON: {e}"))
}

fn validate_target(v: &Value, target: &StructuredTarget<'_>) -> Result<Value, String> {
    match target {
        StructuredTarget::Shape(shape) => shape.validate(v),
        StructuredTarget::Record(schema) => validate_record_object(v, schema),
        StructuredTarget::Rows(schema) => validate_rows(v, schema),
    }
}

fn validate_record_object(v: &Value, schema: &Schema) -> Result<Value, String> {
    let obj = v.as_object().ok_or("expected a JSON object")?;
    let mut out = Map::new();
    for (k, raw) in obj {
        let spec = schema
            .field(k)
            .ok_or_else(|| format!("unknown field `{k}`"))?;
        let coerced = coerce_json(spec, raw).map_err(|e| format!("field `{k}`: {e}"))?;
        out.insert(
            k.clone(),
            coerced.map_or(Value::Null, |c| c.value.to_json()),
        );
    }
    Ok(Value::Object(out))
}

fn validate_rows(v: &Value, schema: &Schema) -> Result<Value, String> {
    let rows = match v {
        Value::Array(rows) => rows,
        Value::Object(o) => o
            .get("rows")
            .and_then(Value::as_array)
            .ok_or("expected {\"rows\": [...]} or a JSON array")?,
        _ => return Err("expected {\"rows\": [...]} or a JSON array".into()),
    };
    let mut out = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let obj = row
            .as_object()
            .ok_or_else(|| format!("row {i} is not an object"))?;
        let mut cells = Map::new();
        for (k, cell) in obj {
            let spec = schema
                .field(k)
                .ok_or_else(|| format!("row {i}: unknown field `{k}`"))?;
            let (raw, confidence, evidence, stated_unit) = match cell {
                Value::Object(c) => {
                    let confidence = match c.get("confidence") {
                        None | Some(Value::Null) => None,
                        Some(x) => Some(x.as_f64().filter(|x| x.is_finite()).ok_or_else(|| {
                            format!("row {i}, field `{k}`: confidence must be a number")
                        })?),
                    };
                    let evidence = match c.get("evidence") {
                        None | Some(Value::Null) => Vec::new(),
                        Some(Value::Array(ids)) => ids
                            .iter()
                            .map(|id| {
                                id.as_str().map(str::to_string).ok_or_else(|| {
                                    format!("row {i}, field `{k}`: evidence ids must be strings")
                                })
                            })
                            .collect::<Result<Vec<_>, _>>()?,
                        Some(Value::String(id)) => vec![id.clone()],
                        Some(_) => {
                            return Err(format!(
                                "row {i}, field `{k}`: evidence must be a list of entry ids"
                            ))
                        }
                    };
                    let unit = c.get("unit").and_then(Value::as_str).map(str::trim).filter(|u| !u.is_empty());
                    (
                        c.get("value").cloned().unwrap_or(Value::Null),
                        confidence,
                        evidence,
                        unit.map(str::to_string),
                    )
                }
                other => (other.clone(), None, Vec::new(), None),
            };
            let mut cell_out = Map::new();
            match coerce_json(spec, &raw) {
                Ok(Some(c)) => {
                    cell_out.insert("value".into(), c.value.to_json());
                    // A unit written into the value wins over a separate `unit` key.
                    if let Some(u) = c.unit.or(stated_unit) {
                        cell_out.insert("unit".into(), Value::String(u));
                    }
                }
                Ok(None) => {
                    cell_out.insert("value".into(), Value::Null);
                }
                Err(e) => {
                    cell_out.insert("value".into(), Value::Null);
                    cell_out.insert("coercion_error".into(), Value::String(e.to_string()));
                }
            }
            if let Some(c) = confidence {
                cell_out.insert("confidence".into(), json!(c.clamp(0.0, 1.0)));
            }
            cell_out.insert("evidence".into(), json!(evidence));
            cells.insert(k.clone(), Value::Object(cell_out));
        }
        out.push(Value::Object(cells));
    }
    Ok(json!({ "rows": out }))
}
