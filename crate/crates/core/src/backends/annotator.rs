//! Offline heuristic annotator for the thinking-pair pipeline.
//!
//! Stands in for annotation VLMs when forging datasets on mocks. Instructions
//! that end in a period read as clear commands; everything else is treated as
//! abstract or compound.

use super::{request_id, BackendError, ChatRequest, ChatResponse, ReasonerBackend, Usage};
use crate::reasoner::labels;

/// Known decompositions, used verbatim.
const DECOMPOSITIONS: &[(&str, &str)] = &[
    (
        "symptoms of potassium deficiency in leaves",
        "Render the leaves yellow and desiccate the leaf tips.",
    ),
    (
        "Make the image more dramatic with a vintage feel",
        "Increase the image contrast. Apply a sepia tone filter. Add a subtle vignette effect",
    ),
];

#[derive(Debug, Clone, Copy, Default)]
pub struct OfflineAnnotator;

impl OfflineAnnotator {
    pub fn classify(instruction: &str) -> &'static str {
        if instruction.trim_end().ends_with('.') {
            "simple"
        } else {
            "complex"
        }
    }

    pub fn decompose(instruction: &str) -> String {
        let trimmed = instruction.trim();
        DECOMPOSITIONS
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(trimmed))
            .map(|(_, v)| v.to_string())
            .unwrap_or_else(|| format!("Edit the image so that it shows {trimmed}."))
    }

    pub fn abstract_of(instruction: &str) -> String {
        let body = instruction.trim().trim_end_matches('.');
        let mut chars = body.chars();
        let lowered = match chars.next() {
            Some(c) => c.to_lowercase().chain(chars).collect::<String>(),
            None => String::new(),
        };
        format!("could you {lowered}, you know what I mean")
    }

    pub fn review(abstract_text: &str, concrete: &str) -> &'static str {
        let concrete = concrete.trim();
        if concrete.len() >= 8 && abstract_text.trim() != concrete {
            "accept"
        } else {
            "reject"
        }
    }
}

impl ReasonerBackend for OfflineAnnotator {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let get = |k: &str| request.context.get(k).map(String::as_str).unwrap_or("");
        let text = match request.label.as_str() {
            labels::CLASSIFY => Self::classify(get("instruction")).to_string(),
            labels::DECOMPOSE => Self::decompose(get("instruction")),
            labels::ABSTRACT => Self::abstract_of(get("instruction")),
            labels::REVIEW => Self::review(get("abstract"), get("concrete")).to_string(),
            other => {
                return Err(BackendError::MalformedBody {
                    request_id: request_id(&request.fingerprint()),
                    message: format!("offline annotator cannot answer {other:?}"),
                })
            }
        };
        Ok(ChatResponse {
            text,
            usage: Usage::default(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heuristics() {
        assert_eq!(OfflineAnnotator::classify("Remove the red car."), "simple");
        assert_eq!(
            OfflineAnnotator::classify("Make the image more dramatic with a vintage feel"),
            "complex"
        );
        assert_eq!(
            OfflineAnnotator::decompose("symptoms of potassium deficiency in leaves"),
            "Render the leaves yellow and desiccate the leaf tips."
        );
        assert_eq!(
            OfflineAnnotator::abstract_of("Increase the image contrast."),
            "could you increase the image contrast, you know what I mean"
        );
        assert_eq!(OfflineAnnotator::review("a", "Remove the car."), "accept");
        assert_eq!(OfflineAnnotator::review("x", ""), "reject");
    }
}
