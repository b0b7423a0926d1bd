//! Thinking and reflection as prompt/parse protocols over a reasoner backend.
//!
//! Reflection comes in three variants:
//!
//! - `multi_round`: describe the target from the reference, assess the result
//!   against that description, then conclude with both images (3 calls).
//! - `single_image`: describe, then one combined assess-and-conclude call that
//!   sees only the result (2 calls).
//! - `dual_image`: one call with both images returning only a conclusion.
//!
//! Describe and assess requests carry exactly one image each.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::Deserialize;

use crate::backends::{chat_complete, BackendError, ChatMessage, ChatRequest, Part, ReasonerBackend, Role};
use crate::types::{
    quantize_score, Assessment, ImageRef, Instruction, InstructionKind, ReflectionConclusion,
    ReflectionVariant, VieScore,
};

pub mod parse;
pub mod templates;

pub use parse::{extract_json, find_markers, normalize_thought, parse_conclusion};
pub use templates::{labels, PromptTemplate, TemplateError, TemplateSet};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ReasonerError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("{operation}: protocol error: {message}")]
    Protocol { operation: String, message: String },
    #[error(transparent)]
    Template(#[from] TemplateError),
}

impl ReasonerError {
    fn protocol(operation: &str, message: impl Into<String>) -> Self {
        ReasonerError::Protocol {
            operation: operation.to_string(),
            message: message.into(),
        }
    }
}

/// Result of one reflection pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Reflection {
    pub target_description: Option<String>,
    pub assessment: Option<Assessment>,
    pub conclusion: ReflectionConclusion,
}

#[derive(Clone)]
pub struct Reasoner {
    backend: Arc<dyn ReasonerBackend>,
    templates: Arc<TemplateSet>,
    temperature: f64,
    max_tokens: u32,
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct AssessmentWire {
    consistency_score: f64,
    #[serde(default)]
    conflicts: Vec<String>,
    #[serde(default)]
    omissions: Vec<String>,
    #[serde(default)]
    hallucinations: Vec<String>,
    #[serde(default)]
    rationale: String,
}

#[derive(Deserialize)]
struct ScoreWire {
    semantic_consistency: f64,
    perceptual_quality: f64,
}

fn in_unit_range(name: &str, x: f64) -> Result<(), String> {
    if x.is_finite() && (0.0..=10.0).contains(&x) {
        Ok(())
    } else {
        Err(format!("{name} = {x} is outside [0, 10]"))
    }
}

impl Reasoner {
    pub fn new(backend: Arc<dyn ReasonerBackend>, templates: Arc<TemplateSet>) -> Self {
        Self {
            backend,
            templates,
            temperature: 0.0,
            max_tokens: 1024,
            seed: None,
        }
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_sampling(mut self, temperature: f64, max_tokens: u32) -> Self {
        self.temperature = temperature;
        self.max_tokens = max_tokens;
        self
    }

    pub fn backend(&self) -> &Arc<dyn ReasonerBackend> {
        &self.backend
    }

    pub fn templates(&self) -> &TemplateSet {
        &self.templates
    }

    /// Render `label` and wrap it with the given images into a request.
    pub fn request(
        &self,
        label: &str,
        images: &[&ImageRef],
        slots: &[(&str, &str)],
    ) -> Result<ChatRequest, ReasonerError> {
        let context: BTreeMap<String, String> = slots
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        let prompt = self.templates.get(label)?.render(&context)?;
        let mut parts: Vec<Part> = images.iter().map(|i| Part::Image((*i).clone())).collect();
        parts.push(Part::Text(prompt));
        let mut request = ChatRequest::new(label).user(parts);
        request.context = context;
        request.temperature = self.temperature;
        request.max_tokens = self.max_tokens;
        request.seed = self.seed;
        Ok(request)
    }

    /// One completion, returning its text.
    pub fn call(&self, request: &ChatRequest) -> Result<String, ReasonerError> {
        Ok(chat_complete(self.backend.as_ref(), request)?.text)
    }

    /// Call, parse, and on parse failure reprompt once with the error.
    pub fn call_structured<T>(
        &self,
        operation: &str,
        request: ChatRequest,
        parse: impl Fn(&str) -> Result<T, String>,
    ) -> Result<T, ReasonerError> {
        let first = self.call(&request)?;
        let err = match parse(&first) {
            Ok(v) => return Ok(v),
            Err(e) => e,
        };
        tracing::debug!(operation, error = %err, "unparseable reply, reprompting");
        let mut retry = request;
        retry.context.insert("attempt".into(), "1".into());
        retry.messages.push(ChatMessage::text(Role::Assistant, first));
        retry.messages.push(ChatMessage::text(
            Role::User,
            format!("Your previous reply was invalid ({err}). Reply again in exactly the requested format."),
        ));
        let second = self.call(&retry)?;
        parse(&second).map_err(|e| ReasonerError::protocol(operation, e))
    }

    /// Rewrite an instruction into a concrete one; clear instructions come
    /// back unchanged as `passthrough`.
    pub fn think(&self, reference: &ImageRef, instruction: &Instruction) -> Result<Instruction, ReasonerError> {
        instruction
            .validate()
            .map_err(|e| ReasonerError::protocol(labels::THINK, e.to_string()))?;
        let request = self.request(labels::THINK, &[reference], &[("instruction", &instruction.text)])?;
        let text = normalize_thought(&self.call(&request)?);
        if text.is_empty() {
            return Err(ReasonerError::protocol(labels::THINK, "empty rewrite"));
        }
        let kind = if text == instruction.text.trim() {
            InstructionKind::Passthrough
        } else {
            InstructionKind::Concrete
        };
        Ok(Instruction { text, kind })
    }

    /// Blueprint of the intended result; sees only the reference image.
    pub fn describe_target(&self, reference: &ImageRef, instruction: &Instruction) -> Result<String, ReasonerError> {
        let request = self.request(labels::DESCRIBE, &[reference], &[("instruction", &instruction.text)])?;
        let text = self.call(&request)?.trim().to_string();
        if text.is_empty() {
            return Err(ReasonerError::protocol(labels::DESCRIBE, "empty description"));
        }
        Ok(text)
    }

    /// Score the result against the blueprint; sees only the result image.
    pub fn assess_result(&self, result: &ImageRef, target_description: &str) -> Result<Assessment, ReasonerError> {
        if target_description.trim().is_empty() {
            return Err(ReasonerError::protocol(labels::ASSESS, "empty target description"));
        }
        let request = self.request(labels::ASSESS, &[result], &[("target_description", target_description)])?;
        self.call_structured(labels::ASSESS, request, |raw| {
            let wire: AssessmentWire =
                serde_json::from_value(extract_json(raw)?).map_err(|e| e.to_string())?;
            in_unit_range("consistency_score", wire.consistency_score)?;
            Ok(Assessment {
                consistency_score: quantize_score(wire.consistency_score),
                conflicts: wire.conflicts,
                omissions: wire.omissions,
                hallucinations: wire.hallucinations,
                rationale: wire.rationale,
            })
        })
    }

    /// Final multi-round decision with both images and the prior stages.
    pub fn conclude(
        &self,
        reference: &ImageRef,
        result: &ImageRef,
        instruction: &Instruction,
        target_description: &str,
        assessment: &Assessment,
    ) -> Result<ReflectionConclusion, ReasonerError> {
        let assessment_json = serde_json::to_string(assessment).expect("assessment serializes");
        let request = self.request(
            labels::CONCLUDE_MULTI,
            &[reference, result],
            &[
                ("instruction", &instruction.text),
                ("target_description", target_description),
                ("assessment", &assessment_json),
            ],
        )?;
        self.parse_conclusion_reply(labels::CONCLUDE_MULTI, &request)
    }

    fn parse_conclusion_reply(&self, label: &str, request: &ChatRequest) -> Result<ReflectionConclusion, ReasonerError> {
        let raw = self.call(request)?;
        parse_conclusion(&raw).map_err(|e| ReasonerError::protocol(label, e))
    }

    /// VIEScore of the result; the overall is always recomputed locally.
    pub fn score_vie(
        &self,
        reference: &ImageRef,
        result: &ImageRef,
        instruction: &Instruction,
    ) -> Result<VieScore, ReasonerError> {
        let request = self.request(labels::SCORE, &[reference, result], &[("instruction", &instruction.text)])?;
        self.call_structured(labels::SCORE, request, |raw| {
            let wire: ScoreWire =
                serde_json::from_value(extract_json(raw)?).map_err(|e| e.to_string())?;
            in_unit_range("semantic_consistency", wire.semantic_consistency)?;
            in_unit_range("perceptual_quality", wire.perceptual_quality)?;
            VieScore::new(wire.semantic_consistency, wire.perceptual_quality).map_err(|e| e.to_string())
        })
    }

    /// Run one reflection pass of the given variant.
    pub fn reflect(
        &self,
        variant: ReflectionVariant,
        reference: &ImageRef,
        result: &ImageRef,
        instruction: &Instruction,
    ) -> Result<Reflection, ReasonerError> {
        match variant {
            ReflectionVariant::MultiRound => {
                let description = self.describe_target(reference, instruction)?;
                let assessment = self.assess_result(result, &description)?;
                let conclusion = self.conclude(reference, result, instruction, &description, &assessment)?;
                Ok(Reflection {
                    target_description: Some(description),
                    assessment: Some(assessment),
                    conclusion,
                })
            }
            ReflectionVariant::SingleImage => {
                let description = self.describe_target(reference, instruction)?;
                let request = self.request(
                    labels::CONCLUDE_SINGLE,
                    &[result],
                    &[
                        ("instruction", &instruction.text),
                        ("target_description", &description),
                    ],
                )?;
                let conclusion = self.parse_conclusion_reply(labels::CONCLUDE_SINGLE, &request)?;
                Ok(Reflection {
                    target_description: Some(description),
                    assessment: None,
                    conclusion,
                })
            }
            ReflectionVariant::DualImage => {
                let request = self.request(
                    labels::CONCLUDE_DUAL,
                    &[reference, result],
                    &[("instruction", &instruction.text)],
                )?;
                let conclusion = self.parse_conclusion_reply(labels::CONCLUDE_DUAL, &request)?;
                Ok(Reflection {
                    target_description: None,
                    assessment: None,
                    conclusion,
                })
            }
        }
    }
}
