//! Prompt templates with `{slot}` placeholders.

use std::collections::BTreeMap;
use std::path::Path;

/// Template names, which double as chat request labels.
pub mod labels {
    pub const THINK: &str = "think";
    pub const DESCRIBE: &str = "describe";
    pub const ASSESS: &str = "assess";
    pub const CONCLUDE_MULTI: &str = "conclude_multi";
    pub const CONCLUDE_SINGLE: &str = "conclude_single";
    pub const CONCLUDE_DUAL: &str = "conclude_dual";
    pub const SCORE: &str = "score";
    pub const CLASSIFY: &str = "classify";
    pub const DECOMPOSE: &str = "decompose";
    pub const ABSTRACT: &str = "abstract";
    pub const REVIEW: &str = "review";
}

/// Every template with the slots it may use and its built-in body.
const BUILTIN: &[(&str, &[&str], &str)] = &[
    (labels::THINK, &["instruction"], include_str!("../../templates/think.txt")),
    (labels::DESCRIBE, &["instruction"], include_str!("../../templates/describe.txt")),
    (labels::ASSESS, &["target_description"], include_str!("../../templates/assess.txt")),
    (
        labels::CONCLUDE_MULTI,
        &["instruction", "target_description", "assessment"],
        include_str!("../../templates/conclude_multi.txt"),
    ),
    (
        labels::CONCLUDE_SINGLE,
        &["instruction", "target_description"],
        include_str!("../../templates/conclude_single.txt"),
    ),
    (labels::CONCLUDE_DUAL, &["instruction"], include_str!("../../templates/conclude_dual.txt")),
    (labels::SCORE, &["instruction"], include_str!("../../templates/score.txt")),
    (labels::CLASSIFY, &["instruction"], include_str!("../../templates/classify.txt")),
    (labels::DECOMPOSE, &["instruction"], include_str!("../../templates/decompose.txt")),
    (labels::ABSTRACT, &["instruction"], include_str!("../../templates/abstract.txt")),
    (labels::REVIEW, &["abstract", "concrete"], include_str!("../../templates/review.txt")),
];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TemplateError {
    #[error("template {name}: unknown slot {{{slot}}}")]
    UnknownSlot { name: String, slot: String },
    #[error("template {name}: stray brace at byte {offset}")]
    StrayBrace { name: String, offset: usize },
    #[error("template {name}: slot {slot} not bound")]
    Unbound { name: String, slot: String },
    #[error("template {0} is not defined")]
    Missing(String),
    #[error("template {name}: {message}")]
    Io { name: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Literal(String),
    Slot(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: String,
    /// Slots referenced by the body, in first-use order.
    pub slots: Vec<String>,
    pub body: String,
    pieces: Vec<Piece>,
}

impl PromptTemplate {
    /// Parse `body`, accepting only placeholders listed in `allowed`.
    pub fn parse(name: &str, body: &str, allowed: &[&str]) -> Result<Self, TemplateError> {
        let mut pieces = Vec::new();
        let mut slots: Vec<String> = Vec::new();
        let mut literal = String::new();
        let mut rest = body;
        let mut offset = 0;
        while let Some(i) = rest.find(['{', '}']) {
            let stray = TemplateError::StrayBrace {
                name: name.to_string(),
                offset: offset + i,
            };
            if rest.as_bytes()[i] == b'}' {
                return Err(stray);
            }
            literal.push_str(&rest[..i]);
            let after = &rest[i + 1..];
            let close = after.find('}').ok_or(stray.clone())?;
            let slot = &after[..close];
            if slot.is_empty() || !slot.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(stray);
            }
            if !allowed.contains(&slot) {
                return Err(TemplateError::UnknownSlot {
                    name: name.to_string(),
                    slot: slot.to_string(),
                });
            }
            if !literal.is_empty() {
                pieces.push(Piece::Literal(std::mem::take(&mut literal)));
            }
            pieces.push(Piece::Slot(slot.to_string()));
            if !slots.iter().any(|s| s == slot) {
                slots.push(slot.to_string());
            }
            let consumed = i + 1 + close + 1;
            offset += consumed;
            rest = &rest[consumed..];
        }
        literal.push_str(rest);
        if !literal.is_empty() {
            pieces.push(Piece::Literal(literal));
        }
        Ok(Self {
            name: name.to_string(),
            slots,
            body: body.to_string(),
            pieces,
        })
    }

    pub fn render(&self, values: &BTreeMap<String, String>) -> Result<String, TemplateError> {
        let mut out = String::with_capacity(self.body.len());
        for piece in &self.pieces {
            match piece {
                Piece::Literal(s) => out.push_str(s),
                Piece::Slot(slot) => out.push_str(values.get(slot).ok_or_else(|| {
                    TemplateError::Unbound {
                        name: self.name.clone(),
                        slot: slot.clone(),
                    }
                })?),
            }
        }
        Ok(out)
    }
}

/// The full set of prompt templates, slot-checked on construction.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    templates: BTreeMap<String, PromptTemplate>,
}

impl TemplateSet {
    pub fn builtin() -> Self {
        let templates = BUILTIN
            .iter()
            .map(|(name, allowed, body)| {
                let t = PromptTemplate::parse(name, body, allowed).expect("built-in template is valid");
                (name.to_string(), t)
            })
            .collect();
        Self { templates }
    }

    /// Load `<dir>/<name>.txt` for every template, falling back to the
    /// built-in body for files that are absent.
    pub fn load_dir(dir: &Path) -> Result<Self, TemplateError> {
        let mut set = Self::builtin();
        for (name, allowed, _) in BUILTIN {
            let path = dir.join(format!("{name}.txt"));
            if !path.exists() {
                continue;
            }
            let body = std::fs::read_to_string(&path).map_err(|e| TemplateError::Io {
                name: name.to_string(),
                message: e.to_string(),
            })?;
            set.templates
                .insert(name.to_string(), PromptTemplate::parse(name, &body, allowed)?);
        }
        Ok(set)
    }

    pub fn get(&self, name: &str) -> Result<&PromptTemplate, TemplateError> {
        self.templates
            .get(name)
            .ok_or_else(|| TemplateError::Missing(name.to_string()))
    }
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}
