//! Contracts for the two model roles plus their live and offline backends.
//!
//! A [`ReasonerBackend`] answers chat requests with text; a
//! [`GeneratorBackend`] applies an instruction to an image. Three families
//! implement them:
//!
//! - [`http`]: chat-completions-style JSON over HTTP with base64 image parts.
//! - [`scripted`]: rule tables for tests and fixtures.
//! - [`world`]: the simulated world, a seeded pair with hidden image flaws.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::image_store::ImageStore;
use crate::types::{sha256_hex, ImageRef, Instruction};

pub mod annotator;
pub mod http;
pub mod scripted;
pub mod world;

pub use annotator::OfflineAnnotator;
pub use http::{HttpGenerator, HttpReasoner};
pub use scripted::{GeneratorRule, ScriptFile, ScriptRule, ScriptedGenerator, ScriptedReasoner};
pub use world::{simulated_world, SimulatedWorld, WorldConfig, WorldGenerator, WorldReasoner};

/// Fixed retry backoff schedule; attempt `n` (0-based) waits entry `min(n, len-1)`.
pub const DEFAULT_BACKOFF_MS: [u64; 4] = [250, 500, 1000, 2000];

pub const DEFAULT_STEPS: u32 = 28;
pub const DEFAULT_GUIDANCE: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    #[error("request {request_id}: timed out after {attempts} attempt(s)")]
    Timeout { request_id: String, attempts: u32 },
    #[error("request {request_id}: HTTP status {status}: {body}")]
    Status {
        request_id: String,
        status: u16,
        body: String,
    },
    #[error("request {request_id}: malformed response body: {message}")]
    MalformedBody { request_id: String, message: String },
    #[error("request {request_id}: transport failure after {attempts} attempt(s): {message}")]
    Transport {
        request_id: String,
        attempts: u32,
        message: String,
    },
    #[error("request {request_id}: refused by content policy: {reason}")]
    Refused { request_id: String, reason: String },
    #[error("precondition failed: {0}")]
    Precondition(String),
}

impl BackendError {
    /// Transient failures worth another attempt.
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Timeout { .. } | BackendError::Transport { .. } => true,
            BackendError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }

    pub fn is_refusal(&self) -> bool {
        matches!(self, BackendError::Refused { .. })
    }

    fn with_attempts(self, n: u32) -> Self {
        match self {
            BackendError::Timeout { request_id, .. } => BackendError::Timeout {
                request_id,
                attempts: n,
            },
            BackendError::Transport {
                request_id,
                message,
                ..
            } => BackendError::Transport {
                request_id,
                attempts: n,
                message,
            },
            other => other,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Text(String),
    Image(ImageRef),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub parts: Vec<Part>,
}

impl ChatMessage {
    pub fn text(role: Role, text: impl Into<String>) -> Self {
        Self {
            role,
            parts: vec![Part::Text(text.into())],
        }
    }
}

/// A chat request. `label` names the prompt template and `context` keeps the
/// slot values it was rendered from; neither is sent over the wire, but
/// offline backends key their behavior on them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub label: String,
    pub context: BTreeMap<String, String>,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: Option<u64>,
}

impl ChatRequest {
    pub fn new(label: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            context: BTreeMap::new(),
            messages: Vec::new(),
            temperature: 0.0,
            max_tokens: 1024,
            seed: None,
        }
    }

    pub fn user(mut self, parts: Vec<Part>) -> Self {
        self.messages.push(ChatMessage {
            role: Role::User,
            parts,
        });
        self
    }

    pub fn images(&self) -> impl Iterator<Item = &ImageRef> {
        self.messages.iter().flat_map(|m| {
            m.parts.iter().filter_map(|p| match p {
                Part::Image(i) => Some(i),
                Part::Text(_) => None,
            })
        })
    }

    pub fn image_count(&self) -> usize {
        self.images().count()
    }

    /// All text parts joined with newlines.
    pub fn text(&self) -> String {
        let texts: Vec<&str> = self
            .messages
            .iter()
            .flat_map(|m| m.parts.iter())
            .filter_map(|p| match p {
                Part::Text(t) => Some(t.as_str()),
                Part::Image(_) => None,
            })
            .collect();
        texts.join("\n")
    }

    /// Reprompt attempt number recorded in `context["attempt"]`.
    pub fn attempt(&self) -> usize {
        self.context
            .get("attempt")
            .and_then(|a| a.parse().ok())
            .unwrap_or(0)
    }

    /// Stable content hash of the whole request.
    pub fn fingerprint(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("chat request serializes"))
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if !self.messages.iter().any(|m| m.role == Role::User) {
            return Err(BackendError::Precondition("no user message".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(BackendError::Precondition("temperature must be >= 0".into()));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::Precondition("max_tokens must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub usage: Usage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRequest {
    pub reference: ImageRef,
    pub instruction: Instruction,
    pub seed: u64,
    pub guidance: f64,
    pub steps: u32,
}

impl EditRequest {
    pub fn new(reference: ImageRef, instruction: Instruction, seed: u64) -> Self {
        Self {
            reference,
            instruction,
            seed,
            guidance: DEFAULT_GUIDANCE,
            steps: DEFAULT_STEPS,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.steps < 1 {
            return Err(BackendError::Precondition("steps must be >= 1".into()));
        }
        if !(self.guidance > 0.0 && self.guidance.is_finite()) {
            return Err(BackendError::Precondition("guidance must be > 0".into()));
        }
        self.instruction
            .validate()
            .map_err(|e| BackendError::Precondition(e.to_string()))
    }

    pub fn fingerprint(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("edit request serializes"))
    }
}

pub trait ReasonerBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

pub trait GeneratorBackend: Send + Sync {
    fn edit(&self, request: &EditRequest) -> Result<ImageRef, BackendError>;
}

impl<T: ReasonerBackend + ?Sized> ReasonerBackend for Arc<T> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        (**self).complete(request)
    }
}

impl<T: GeneratorBackend + ?Sized> GeneratorBackend for Arc<T> {
    fn edit(&self, request: &EditRequest) -> Result<ImageRef, BackendError> {
        (**self).edit(request)
    }
}

/// Validate, call, and require non-empty text.
pub fn chat_complete(
    backend: &dyn ReasonerBackend,
    request: &ChatRequest,
) -> Result<ChatResponse, BackendError> {
    request.validate()?;
    let response = backend.complete(request)?;
    if response.text.trim().is_empty() {
        return Err(BackendError::MalformedBody {
            request_id: request_id(&request.fingerprint()),
            message: "empty completion text".into(),
        });
    }
    Ok(response)
}

pub fn edit_image(
    backend: &dyn GeneratorBackend,
    request: &EditRequest,
) -> Result<ImageRef, BackendError> {
    request.validate()?;
    backend.edit(request)
}

pub(crate) fn request_id(fingerprint: &str) -> String {
    format!("req-{}", &fingerprint[..16])
}

/// Total attempts = 1 + `retry_budget`, waiting on the fixed schedule between.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub retry_budget: u32,
    pub backoff_ms: Vec<u64>,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            retry_budget: 2,
            backoff_ms: DEFAULT_BACKOFF_MS.to_vec(),
        }
    }
}

impl RetryPolicy {
    pub fn with_budget(retry_budget: u32) -> Self {
        Self {
            retry_budget,
            ..Self::default()
        }
    }

    pub fn delay(&self, attempt: u32) -> Duration {
        let ms = self
            .backoff_ms
            .get(attempt as usize)
            .or_else(|| self.backoff_ms.last())
            .copied()
            .unwrap_or(0);
        Duration::from_millis(ms)
    }

    pub fn run<T>(
        &self,
        mut call: impl FnMut(u32) -> Result<T, BackendError>,
    ) -> Result<T, BackendError> {
        let mut attempt = 0;
        loop {
            match call(attempt) {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt < self.retry_budget => {
                    tracing::warn!(attempt, error = %e, "backend call failed, retrying");
                    std::thread::sleep(self.delay(attempt));
                    attempt += 1;
                }
                Err(e) => return Err(e.with_attempts(attempt + 1)),
            }
        }
    }
}

/// Wraps a reasoner and keeps every request it forwards.
pub struct RecordingReasoner<B> {
    inner: B,
    log: Mutex<Vec<ChatRequest>>,
}

impl<B: ReasonerBackend> RecordingReasoner<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            log: Mutex::default(),
        }
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.log.lock().expect("log poisoned").clone()
    }

    pub fn clear(&self) {
        self.log.lock().expect("log poisoned").clear();
    }
}

impl<B: ReasonerBackend> ReasonerBackend for RecordingReasoner<B> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        self.log.lock().expect("log poisoned").push(request.clone());
        self.inner.complete(request)
    }
}

/// Wraps a generator and keeps every request it forwards.
pub struct RecordingGenerator<B> {
    inner: B,
    log: Mutex<Vec<EditRequest>>,
}

impl<B: GeneratorBackend> RecordingGenerator<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            log: Mutex::default(),
        }
    }

    pub fn requests(&self) -> Vec<EditRequest> {
        self.log.lock().expect("log poisoned").clone()
    }
}

impl<B: GeneratorBackend> GeneratorBackend for RecordingGenerator<B> {
    fn edit(&self, request: &EditRequest) -> Result<ImageRef, BackendError> {
        self.log.lock().expect("log poisoned").push(request.clone());
        self.inner.edit(request)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendMode {
    Live,
    Scripted,
    Simulated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_retry_budget")]
    pub retry_budget: u32,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

fn default_retry_budget() -> u32 {
    2
}

fn default_timeout_ms() -> u64 {
    60_000
}

/// Backend configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub mode: BackendMode,
    #[serde(default)]
    pub reasoner: Option<EndpointConfig>,
    #[serde(default)]
    pub generator: Option<EndpointConfig>,
    /// Simulated mode: the world shared by reasoner and generator.
    #[serde(default)]
    pub world: Option<WorldConfig>,
    /// Simulated mode: extra editors for triple building; defaults to `world`.
    #[serde(default)]
    pub editors: Vec<WorldConfig>,
    /// Scripted mode: path to a [`ScriptFile`], relative to the config file.
    #[serde(default)]
    pub script: Option<PathBuf>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            mode: BackendMode::Simulated,
            reasoner: None,
            generator: None,
            world: Some(WorldConfig::default()),
            editors: Vec::new(),
            script: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read backend config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid backend config {path}: {message}")]
    Invalid { path: PathBuf, message: String },
    #[error("environment variable {0} is not set")]
    MissingKey(String),
}

/// Handles built from a [`BackendConfig`].
#[derive(Clone)]
pub struct Backends {
    pub reasoner: Arc<dyn ReasonerBackend>,
    pub generator: Arc<dyn GeneratorBackend>,
    /// Editors for triple building, round-robin assigned.
    pub editors: Vec<Arc<dyn GeneratorBackend>>,
}

impl BackendConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config: BackendConfig =
            serde_json::from_str(&text).map_err(|e| ConfigError::Invalid {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
        if let (Some(script), Some(dir)) = (&config.script, path.parent()) {
            if script.is_relative() {
                config.script = Some(dir.join(script));
            }
        }
        Ok(config)
    }

    pub fn build(&self, store: Arc<ImageStore>, seed: u64) -> Result<Backends, ConfigError> {
        let invalid = |message: &str| ConfigError::Invalid {
            path: PathBuf::from("<config>"),
            message: message.to_string(),
        };
        match self.mode {
            BackendMode::Simulated => {
                let config = self.world.clone().unwrap_or_default();
                config.validate().map_err(|e| invalid(&e.to_string()))?;
                let world = SimulatedWorld::new(config.clone(), seed, store);
                let editors: Vec<Arc<dyn GeneratorBackend>> = if self.editors.is_empty() {
                    vec![Arc::new(world.generator())]
                } else {
                    let mut out: Vec<Arc<dyn GeneratorBackend>> = Vec::new();
                    for (i, e) in self.editors.iter().enumerate() {
                        e.validate().map_err(|e| invalid(&e.to_string()))?;
                        out.push(Arc::new(world.editor(format!("editor-{i}"), e)));
                    }
                    out
                };
                Ok(Backends {
                    reasoner: Arc::new(world.reasoner()),
                    generator: Arc::new(world.generator()),
                    editors,
                })
            }
            BackendMode::Scripted => {
                let script = match &self.script {
                    Some(path) => ScriptFile::load(path).map_err(|e| ConfigError::Invalid {
                        path: path.clone(),
                        message: e,
                    })?,
                    None => ScriptFile::default(),
                };
                let generator: Arc<dyn GeneratorBackend> = Arc::new(ScriptedGenerator::new(
                    script.generator.clone(),
                    store,
                ));
                Ok(Backends {
                    reasoner: Arc::new(ScriptedReasoner::new(script.reasoner)),
                    generator: generator.clone(),
                    editors: vec![generator],
                })
            }
            BackendMode::Live => {
                let reasoner = self
                    .reasoner
                    .as_ref()
                    .ok_or_else(|| invalid("live mode requires `reasoner`"))?;
                let generator = self
                    .generator
                    .as_ref()
                    .ok_or_else(|| invalid("live mode requires `generator`"))?;
                let generator: Arc<dyn GeneratorBackend> =
                    Arc::new(HttpGenerator::new(generator, store.clone())?);
                Ok(Backends {
                    reasoner: Arc::new(HttpReasoner::new(reasoner, store)?),
                    generator: generator.clone(),
                    editors: vec![generator],
                })
            }
        }
    }
}
