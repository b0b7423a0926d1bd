//! Live backends speaking chat-completions-style JSON over HTTP.
//!
//! Images travel as base64 `data:` URLs inside `image_url` content parts. The
//! generator endpoint receives the same message shape plus `seed`, `steps` and
//! `guidance`, and may answer with `data[0].b64_json`, a data URL in
//! `choices[0].message.content`, or `choices[0].message.images[0].image_url.url`.

use std::sync::Arc;
use std::time::Duration;

use base64::Engine as _;
use serde_json::{json, Value};

use super::{
    request_id, BackendError, ChatRequest, ChatResponse, ConfigError, EditRequest,
    EndpointConfig, GeneratorBackend, Part, ReasonerBackend, RetryPolicy, Role, Usage,
};
use crate::image_store::ImageStore;
use crate::types::ImageRef;

struct Endpoint {
    client: reqwest::blocking::Client,
    url: String,
    model: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    store: Arc<ImageStore>,
}

impl Endpoint {
    fn new(config: &EndpointConfig, store: Arc<ImageStore>) -> Result<Self, ConfigError> {
        let api_key = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| ConfigError::MissingKey(var.clone()))?),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| ConfigError::Invalid {
                path: config.endpoint.clone().into(),
                message: e.to_string(),
            })?;
        Ok(Self {
            client,
            url: config.endpoint.clone(),
            model: config.model.clone(),
            api_key,
            retry: RetryPolicy::with_budget(config.retry_budget),
            store,
        })
    }

    fn data_url(&self, image: &ImageRef) -> Result<String, BackendError> {
        let bytes = self
            .store
            .load(image)
            .map_err(|e| BackendError::Precondition(format!("unresolvable image {}: {e}", image.uri)))?;
        Ok(format!(
            "data:{};base64,{}",
            image.media_type.mime(),
            base64::engine::general_purpose::STANDARD.encode(bytes.as_slice())
        ))
    }

    fn content(&self, parts: &[Part]) -> Result<Value, BackendError> {
        parts
            .iter()
            .map(|p| match p {
                Part::Text(t) => Ok(json!({"type": "text", "text": t})),
                Part::Image(i) => Ok(json!({"type": "image_url", "image_url": {"url": self.data_url(i)?}})),
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Value::Array)
    }

    /// POST with retries; returns the decoded JSON body.
    fn post(&self, body: &Value, id: &str) -> Result<Value, BackendError> {
        self.retry.run(|attempt| {
            tracing::debug!(request_id = id, attempt, url = %self.url, "POST");
            let mut req = self.client.post(&self.url).header("x-request-id", id).json(body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            let response = req.send().map_err(|e| classify_transport(e, id))?;
            let status = response.status().as_u16();
            let text = response.text().map_err(|e| classify_transport(e, id))?;
            if status >= 400 {
                if is_policy_refusal(&text) {
                    return Err(BackendError::Refused {
                        request_id: id.to_string(),
                        reason: text,
                    });
                }
                return Err(BackendError::Status {
                    request_id: id.to_string(),
                    status,
                    body: text,
                });
            }
            serde_json::from_str(&text).map_err(|e| BackendError::MalformedBody {
                request_id: id.to_string(),
                message: e.to_string(),
            })
        })
    }
}

fn classify_transport(e: reqwest::Error, id: &str) -> BackendError {
    if e.is_timeout() {
        BackendError::Timeout {
            request_id: id.to_string(),
            attempts: 1,
        }
    } else {
        BackendError::Transport {
            request_id: id.to_string(),
            attempts: 1,
            message: e.to_string(),
        }
    }
}

fn is_policy_refusal(body: &str) -> bool {
    serde_json::from_str::<Value>(body)
        .ok()
        .and_then(|v| v.pointer("/error/code").and_then(Value::as_str).map(str::to_owned))
        .is_some_and(|code| code == "content_policy_violation" || code == "content_filter")
}

fn role_name(role: Role) -> &'static str {
    match role {
        Role::System => "system",
        Role::User => "user",
        Role::Assistant => "assistant",
    }
}

fn message_text(content: &Value) -> Option<String> {
    match content {
        Value::String(s) => Some(s.clone()),
        Value::Array(parts) => Some(
            parts
                .iter()
                .filter_map(|p| p.get("text").and_then(Value::as_str))
                .collect::<Vec<_>>()
                .join(""),
        ),
        _ => None,
    }
}

pub struct HttpReasoner {
    endpoint: Endpoint,
}

impl HttpReasoner {
    pub fn new(config: &EndpointConfig, store: Arc<ImageStore>) -> Result<Self, ConfigError> {
        Ok(Self {
            endpoint: Endpoint::new(config, store)?,
        })
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.endpoint.retry = retry;
        self
    }

    pub fn wire_body(&self, request: &ChatRequest) -> Result<Value, BackendError> {
        let messages = request
            .messages
            .iter()
            .map(|m| {
                Ok(json!({"role": role_name(m.role), "content": self.endpoint.content(&m.parts)?}))
            })
            .collect::<Result<Vec<_>, BackendError>>()?;
        let mut body = json!({
            "model": self.endpoint.model,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        if let Some(seed) = request.seed {
            body["seed"] = json!(seed);
        }
        Ok(body)
    }
}

impl ReasonerBackend for HttpReasoner {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let id = request_id(&request.fingerprint());
        let body = self.wire_body(request)?;
        let reply = self.endpoint.post(&body, &id)?;
        let malformed = |message: &str| BackendError::MalformedBody {
            request_id: id.clone(),
            message: message.to_string(),
        };
        let text = reply
            .pointer("/choices/0/message/content")
            .and_then(message_text)
            .ok_or_else(|| malformed("missing choices[0].message.content"))?;
        if text.trim().is_empty() {
            return Err(malformed("empty completion text"));
        }
        let count = |key: &str| reply.pointer(key).and_then(Value::as_u64).unwrap_or(0);
        Ok(ChatResponse {
            text,
            usage: Usage {
                prompt_tokens: count("/usage/prompt_tokens"),
                completion_tokens: count("/usage/completion_tokens"),
            },
        })
    }
}

pub struct HttpGenerator {
    endpoint: Endpoint,
}

impl HttpGenerator {
    pub fn new(config: &EndpointConfig, store: Arc<ImageStore>) -> Result<Self, ConfigError> {
        Ok(Self {
            endpoint: Endpoint::new(config, store)?,
        })
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.endpoint.retry = retry;
        self
    }
}

fn decode_data_url(url: &str) -> Option<Vec<u8>> {
    let (_, payload) = url.strip_prefix("data:")?.split_once(";base64,")?;
    base64::engine::general_purpose::STANDARD.decode(payload).ok()
}

impl GeneratorBackend for HttpGenerator {
    fn edit(&self, request: &EditRequest) -> Result<ImageRef, BackendError> {
        let id = request_id(&request.fingerprint());
        let content = self.endpoint.content(&[
            Part::Image(request.reference.clone()),
            Part::Text(request.instruction.text.clone()),
        ])?;
        let body = json!({
            "model": self.endpoint.model,
            "messages": [{"role": "user", "content": content}],
            "seed": request.seed,
            "steps": request.steps,
            "guidance": request.guidance,
        });
        let reply = self.endpoint.post(&body, &id)?;
        if reply.pointer("/choices/0/finish_reason").and_then(Value::as_str) == Some("content_filter") {
            return Err(BackendError::Refused {
                request_id: id,
                reason: "finish_reason content_filter".into(),
            });
        }
        let bytes = reply
            .pointer("/data/0/b64_json")
            .and_then(Value::as_str)
            .and_then(|b| base64::engine::general_purpose::STANDARD.decode(b).ok())
            .or_else(|| {
                reply
                    .pointer("/choices/0/message/images/0/image_url/url")
                    .and_then(Value::as_str)
                    .and_then(decode_data_url)
            })
            .or_else(|| {
                reply
                    .pointer("/choices/0/message/content")
                    .and_then(Value::as_str)
                    .and_then(decode_data_url)
            })
            .ok_or_else(|| BackendError::MalformedBody {
                request_id: id.clone(),
                message: "no image payload in response".into(),
            })?;
        self.endpoint
            .store
            .put(bytes)
            .map_err(|e| BackendError::MalformedBody {
                request_id: id,
                message: e.to_string(),
            })
    }
}
