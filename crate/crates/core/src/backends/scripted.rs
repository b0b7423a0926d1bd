//! Rule-table mocks for tests and fixture runs.
//!
//! Responses are a pure function of the request: the first matching rule
//! wins, and a rule with several responses answers reprompt attempt `n` with
//! response `min(n, len - 1)`.

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{
    request_id, BackendError, ChatRequest, ChatResponse, EditRequest, GeneratorBackend,
    ReasonerBackend, Usage,
};
use crate::image_store::{synth_png, ImageStore};
use crate::types::ImageRef;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptRule {
    /// Template label the request must carry.
    #[serde(default)]
    pub label: Option<String>,
    /// Substring that must occur in the request text.
    #[serde(default)]
    pub contains: Option<String>,
    /// Exact request fingerprint.
    #[serde(default)]
    pub fingerprint: Option<String>,
    pub responses: Vec<String>,
}

impl ScriptRule {
    pub fn label(label: &str, response: impl Into<String>) -> Self {
        Self {
            label: Some(label.to_string()),
            responses: vec![response.into()],
            ..Self::default()
        }
    }

    pub fn any(response: impl Into<String>) -> Self {
        Self {
            responses: vec![response.into()],
            ..Self::default()
        }
    }

    pub fn containing(mut self, needle: &str) -> Self {
        self.contains = Some(needle.to_string());
        self
    }

    pub fn then(mut self, response: impl Into<String>) -> Self {
        self.responses.push(response.into());
        self
    }

    fn matches(&self, request: &ChatRequest, text: &str) -> bool {
        self.label.as_ref().is_none_or(|l| *l == request.label)
            && self.contains.as_ref().is_none_or(|c| text.contains(c.as_str()))
            && self
                .fingerprint
                .as_ref()
                .is_none_or(|f| *f == request.fingerprint())
    }
}

pub struct ScriptedReasoner {
    rules: Vec<ScriptRule>,
    log: Mutex<Vec<ChatRequest>>,
}

impl ScriptedReasoner {
    pub fn new(rules: Vec<ScriptRule>) -> Self {
        Self {
            rules,
            log: Mutex::default(),
        }
    }

    /// Every request received so far, in arrival order.
    pub fn requests(&self) -> Vec<ChatRequest> {
        self.log.lock().expect("log poisoned").clone()
    }
}

impl ReasonerBackend for ScriptedReasoner {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        self.log.lock().expect("log poisoned").push(request.clone());
        let text = request.text();
        let rule = self
            .rules
            .iter()
            .find(|r| r.matches(request, &text))
            .filter(|r| !r.responses.is_empty())
            .ok_or_else(|| BackendError::MalformedBody {
                request_id: request_id(&request.fingerprint()),
                message: format!("no script rule matches label {:?}", request.label),
            })?;
        let response = &rule.responses[request.attempt().min(rule.responses.len() - 1)];
        Ok(ChatResponse {
            text: response.clone(),
            usage: Usage {
                prompt_tokens: text.split_whitespace().count() as u64,
                completion_tokens: response.split_whitespace().count() as u64,
            },
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GeneratorRule {
    #[serde(default)]
    pub contains: Option<String>,
    #[serde(default)]
    pub fingerprint: Option<String>,
    /// Fixture image returned on match.
    #[serde(default)]
    pub fixture: Option<PathBuf>,
    /// Respond with a content-policy refusal instead.
    #[serde(default)]
    pub refuse: bool,
}

/// Generator mock. Unmatched requests get a synthetic PNG derived from the
/// request fingerprint.
pub struct ScriptedGenerator {
    rules: Vec<GeneratorRule>,
    store: Arc<ImageStore>,
}

impl ScriptedGenerator {
    pub fn new(rules: Vec<GeneratorRule>, store: Arc<ImageStore>) -> Self {
        Self { rules, store }
    }
}

impl GeneratorBackend for ScriptedGenerator {
    fn edit(&self, request: &EditRequest) -> Result<ImageRef, BackendError> {
        let fingerprint = request.fingerprint();
        let rule = self.rules.iter().find(|r| {
            r.contains
                .as_ref()
                .is_none_or(|c| request.instruction.text.contains(c.as_str()))
                && r.fingerprint.as_ref().is_none_or(|f| *f == fingerprint)
        });
        let store_err = |e: crate::image_store::StoreError| BackendError::MalformedBody {
            request_id: request_id(&fingerprint),
            message: e.to_string(),
        };
        match rule {
            Some(r) if r.refuse => Err(BackendError::Refused {
                request_id: request_id(&fingerprint),
                reason: "scripted refusal".into(),
            }),
            Some(GeneratorRule {
                fixture: Some(path),
                ..
            }) => self.store.import(path).map_err(store_err),
            _ => self
                .store
                .put(synth_png(fingerprint.as_bytes()))
                .map_err(store_err),
        }
    }
}

/// On-disk script for scripted mode.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptFile {
    #[serde(default)]
    pub reasoner: Vec<ScriptRule>,
    #[serde(default)]
    pub generator: Vec<GeneratorRule>,
}

impl ScriptFile {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
        let mut script: ScriptFile = serde_json::from_str(&text).map_err(|e| e.to_string())?;
        if let Some(dir) = path.parent() {
            for rule in &mut script.generator {
                if let Some(f) = &rule.fixture {
                    if f.is_relative() {
                        rule.fixture = Some(dir.join(f));
                    }
                }
            }
        }
        Ok(script)
    }
}
