//! Parsers for raw reasoner output.

use serde_json::Value;

use crate::types::{ConclusionTag, Instruction, InstructionKind, ReflectionConclusion};

/// Positions of every conclusion marker in `raw`, in text order.
pub fn find_markers(raw: &str) -> Vec<(usize, ConclusionTag)> {
    let mut found: Vec<(usize, ConclusionTag)> = ConclusionTag::ALL
        .iter()
        .flat_map(|&tag| raw.match_indices(tag.marker()).map(move |(i, _)| (i, tag)))
        .collect();
    found.sort_by_key(|(i, _)| *i);
    found
}

/// Parse a conclusion from text containing exactly one marker.
///
/// Reasoning is the text before the marker. For `<#Reflection>` the text after
/// it is the refinement instruction; for the other tags trailing text is used
/// as reasoning only when nothing precedes the marker.
pub fn parse_conclusion(raw: &str) -> Result<ReflectionConclusion, String> {
    let markers = find_markers(raw);
    let (at, tag) = match markers.as_slice() {
        [one] => *one,
        [] => return Err("no conclusion marker found".into()),
        many => {
            return Err(format!(
                "{} conclusion markers found, expected exactly one",
                many.len()
            ))
        }
    };
    let before = raw[..at].trim();
    let after = raw[at + tag.marker().len()..].trim();
    match tag {
        ConclusionTag::Reflect => {
            if before.is_empty() {
                return Err("reflection conclusion has no reasoning".into());
            }
            if after.is_empty() {
                return Err("reflection conclusion has no refinement instruction".into());
            }
            let refinement = Instruction::new(after, InstructionKind::Concrete)
                .map_err(|e| e.to_string())?;
            ReflectionConclusion::new(tag, before, Some(refinement)).map_err(|e| e.to_string())
        }
        _ => {
            let reasoning = if before.is_empty() { after } else { before };
            if reasoning.is_empty() {
                return Err("conclusion has no reasoning".into());
            }
            ReflectionConclusion::new(tag, reasoning, None).map_err(|e| e.to_string())
        }
    }
}

/// Extract the JSON object from a fenced block (```json ... ``` or ``` ... ```),
/// falling back to the outermost braces.
pub fn extract_json(raw: &str) -> Result<Value, String> {
    let fenced = raw.find("```").and_then(|start| {
        let body = &raw[start + 3..];
        let body = body.strip_prefix("json").unwrap_or(body);
        body.find("```").map(|end| &body[..end])
    });
    let candidate = match fenced {
        Some(block) => block.trim(),
        None => match (raw.find('{'), raw.rfind('}')) {
            (Some(a), Some(b)) if a < b => &raw[a..=b],
            _ => return Err("no JSON block found".into()),
        },
    };
    let value: Value = serde_json::from_str(candidate).map_err(|e| format!("invalid JSON: {e}"))?;
    if !value.is_object() {
        return Err("JSON block is not an object".into());
    }
    Ok(value)
}

/// Normalize a rewritten instruction: a list of steps collapses into one
/// composite instruction with sub-steps joined by ". ".
pub fn normalize_thought(raw: &str) -> String {
    let lines: Vec<String> = raw
        .lines()
        .map(|l| strip_bullet(l.trim()).trim().to_string())
        .filter(|l| !l.is_empty())
        .collect();
    match lines.len() {
        0 => String::new(),
        1 => lines.into_iter().next().unwrap_or_default(),
        _ => lines
            .iter()
            .map(|l| l.trim_end_matches('.'))
            .collect::<Vec<_>>()
            .join(". "),
    }
}

fn strip_bullet(line: &str) -> &str {
    if let Some(rest) = line.strip_prefix(['-', '*', '•']) {
        return rest;
    }
    let digits = line.bytes().take_while(u8::is_ascii_digit).count();
    if digits > 0 {
        if let Some(rest) = line[digits..].strip_prefix(['.', ')']) {
            return rest;
        }
    }
    line
}
