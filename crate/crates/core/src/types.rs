//! Shared domain types for edit sessions, reflection outcomes and scores.
//!
//! Every type here is a plain value object. Fields are public so that traces
//! and datasets can be assembled freely; `validate` reports the first broken
//! invariant together with the field path that broke it.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use uuid::Uuid;

/// A broken type invariant, located by a dotted field path such as
/// `rounds[1].conclusion.refinement_instruction`.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invariant violated at `{path}`: {message}")]
pub struct InvariantError {
    pub path: String,
    pub message: String,
}

impl InvariantError {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Prefix the path with an enclosing field name.
    pub fn within(mut self, parent: &str) -> Self {
        self.path = if self.path.is_empty() {
            parent.to_string()
        } else if self.path.starts_with('[') {
            format!("{parent}{}", self.path)
        } else {
            format!("{parent}.{}", self.path)
        };
        self
    }
}

/// Number of fractional digits kept for every score.
pub const SCORE_DECIMALS: i32 = 4;

/// Round a score to the fixed trace precision.
pub fn quantize_score(x: f64) -> f64 {
    let scale = 10f64.powi(SCORE_DECIMALS);
    (x * scale).round() / scale
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MediaType {
    Png,
    Jpeg,
}

impl MediaType {
    /// Identify the payload type from its magic bytes.
    pub fn sniff(bytes: &[u8]) -> Option<Self> {
        const PNG: &[u8] = b"\x89PNG\r\n\x1a\n";
        if bytes.starts_with(PNG) {
            Some(MediaType::Png)
        } else if bytes.starts_with(&[0xFF, 0xD8, 0xFF]) {
            Some(MediaType::Jpeg)
        } else {
            None
        }
    }

    pub fn mime(self) -> &'static str {
        match self {
            MediaType::Png => "image/png",
            MediaType::Jpeg => "image/jpeg",
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            MediaType::Png => "png",
            MediaType::Jpeg => "jpg",
        }
    }
}

/// An image passed by reference: location plus content digest.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRef {
    pub uri: String,
    pub media_type: MediaType,
    pub sha256: String,
}

impl ImageRef {
    /// Record an image, sniffing its media type and hashing its bytes.
    pub fn from_bytes(uri: impl Into<String>, bytes: &[u8]) -> Result<Self, InvariantError> {
        let media_type = MediaType::sniff(bytes)
            .ok_or_else(|| InvariantError::new("media_type", "payload is neither PNG nor JPEG"))?;
        Ok(Self {
            uri: uri.into(),
            media_type,
            sha256: sha256_hex(bytes),
        })
    }

    /// Check the recorded digest and media type against a payload.
    pub fn verify(&self, bytes: &[u8]) -> Result<(), InvariantError> {
        if sha256_hex(bytes) != self.sha256 {
            return Err(InvariantError::new("sha256", "digest does not match bytes"));
        }
        if MediaType::sniff(bytes) != Some(self.media_type) {
            return Err(InvariantError::new(
                "media_type",
                "media type does not match magic bytes",
            ));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), InvariantError> {
        if self.uri.is_empty() {
            return Err(InvariantError::new("uri", "empty"));
        }
        let well_formed = self.sha256.len() == 64
            && self
                .sha256
                .bytes()
                .all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b));
        if !well_formed {
            return Err(InvariantError::new("sha256", "not a lowercase hex sha256 digest"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstructionKind {
    Abstract,
    Concrete,
    Passthrough,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Instruction {
    pub text: String,
    pub kind: InstructionKind,
}

impl Instruction {
    pub fn new(text: impl Into<String>, kind: InstructionKind) -> Result<Self, InvariantError> {
        let instruction = Self {
            text: text.into(),
            kind,
        };
        instruction.validate()?;
        Ok(instruction)
    }

    pub fn concrete(text: impl Into<String>) -> Result<Self, InvariantError> {
        Self::new(text, InstructionKind::Concrete)
    }

    pub fn validate(&self) -> Result<(), InvariantError> {
        if self.text.trim().is_empty() {
            return Err(InvariantError::new("text", "empty after trimming"));
        }
        Ok(())
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConclusionTag {
    Success,
    Reflect,
    Failed,
}

impl ConclusionTag {
    pub const ALL: [ConclusionTag; 3] = [
        ConclusionTag::Success,
        ConclusionTag::Reflect,
        ConclusionTag::Failed,
    ];

    /// Literal marker emitted by the reasoner.
    pub fn marker(self) -> &'static str {
        match self {
            ConclusionTag::Success => "<#Success>",
            ConclusionTag::Reflect => "<#Reflection>",
            ConclusionTag::Failed => "<#Failed>",
        }
    }

    /// Spelling used inside trace conclusion events.
    pub fn trace_name(self) -> &'static str {
        match self {
            ConclusionTag::Success => "#Success",
            ConclusionTag::Reflect => "#Reflection",
            ConclusionTag::Failed => "#Failed",
        }
    }

    pub fn from_trace_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.trace_name() == name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReflectionConclusion {
    pub tag: ConclusionTag,
    pub reasoning: String,
    pub refinement_instruction: Option<Instruction>,
}

impl ReflectionConclusion {
    pub fn new(
        tag: ConclusionTag,
        reasoning: impl Into<String>,
        refinement_instruction: Option<Instruction>,
    ) -> Result<Self, InvariantError> {
        let conclusion = Self {
            tag,
            reasoning: reasoning.into(),
            refinement_instruction,
        };
        conclusion.validate()?;
        Ok(conclusion)
    }

    pub fn validate(&self) -> Result<(), InvariantError> {
        if self.reasoning.trim().is_empty() {
            return Err(InvariantError::new("reasoning", "empty"));
        }
        match (&self.tag, &self.refinement_instruction) {
            (ConclusionTag::Reflect, None) => Err(InvariantError::new(
                "refinement_instruction",
                "required when tag is Reflect",
            )),
            (ConclusionTag::Reflect, Some(i)) => {
                i.validate().map_err(|e| e.within("refinement_instruction"))
            }
            (_, Some(_)) => Err(InvariantError::new(
                "refinement_instruction",
                "only allowed when tag is Reflect",
            )),
            (_, None) => Ok(()),
        }
    }
}

fn check_unit_score(path: &str, x: f64) -> Result<(), InvariantError> {
    if !x.is_finite() {
        return Err(InvariantError::new(path, "not finite"));
    }
    if !(0.0..=10.0).contains(&x) {
        return Err(InvariantError::new(path, format!("{x} outside [0, 10]")));
    }
    Ok(())
}

/// Two-axis judge score with the geometric-mean overall.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VieScore {
    pub semantic_consistency: f64,
    pub perceptual_quality: f64,
    pub overall: f64,
}

impl VieScore {
    /// Build from the two axes. Axes are rounded to the trace precision and
    /// the overall is always recomputed from them.
    pub fn new(semantic_consistency: f64, perceptual_quality: f64) -> Result<Self, InvariantError> {
        check_unit_score("semantic_consistency", semantic_consistency)?;
        check_unit_score("perceptual_quality", perceptual_quality)?;
        let sc = quantize_score(semantic_consistency);
        let pq = quantize_score(perceptual_quality);
        Ok(Self {
            semantic_consistency: sc,
            perceptual_quality: pq,
            overall: (sc * pq).sqrt(),
        })
    }

    pub fn validate(&self) -> Result<(), InvariantError> {
        check_unit_score("semantic_consistency", self.semantic_consistency)?;
        check_unit_score("perceptual_quality", self.perceptual_quality)?;
        check_unit_score("overall", self.overall)?;
        let expected = (self.semantic_consistency * self.perceptual_quality).sqrt();
        if (self.overall - expected).abs() > 1e-9 {
            return Err(InvariantError::new(
                "overall",
                format!("{} != sqrt(sc * pq) = {expected}", self.overall),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assessment {
    pub consistency_score: f64,
    pub conflicts: Vec<String>,
    pub omissions: Vec<String>,
    pub hallucinations: Vec<String>,
    pub rationale: String,
}

impl Assessment {
    pub fn validate(&self) -> Result<(), InvariantError> {
        check_unit_score("consistency_score", self.consistency_score)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub index: u32,
    pub instruction_used: Instruction,
    pub generated: ImageRef,
    pub target_description: Option<String>,
    pub assessment: Option<Assessment>,
    pub conclusion: Option<ReflectionConclusion>,
    pub vie: Option<VieScore>,
    pub latency_ms: u64,
}

impl RoundRecord {
    pub fn new(index: u32, instruction_used: Instruction, generated: ImageRef) -> Self {
        Self {
            index,
            instruction_used,
            generated,
            target_description: None,
            assessment: None,
            conclusion: None,
            vie: None,
            latency_ms: 0,
        }
    }

    pub fn validate(&self) -> Result<(), InvariantError> {
        self.instruction_used
            .validate()
            .map_err(|e| e.within("instruction_used"))?;
        self.generated.validate().map_err(|e| e.within("generated"))?;
        if let Some(a) = &self.assessment {
            a.validate().map_err(|e| e.within("assessment"))?;
        }
        if let Some(c) = &self.conclusion {
            c.validate().map_err(|e| e.within("conclusion"))?;
        }
        if let Some(v) = &self.vie {
            v.validate().map_err(|e| e.within("vie"))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopMode {
    Base,
    Thinking,
    ThinkingReflection,
    Reroll,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReflectionVariant {
    DualImage,
    SingleImage,
    MultiRound,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopPolicy {
    pub mode: LoopMode,
    pub max_reflection_rounds: u32,
    pub reroll_attempts: u32,
    pub reflection_variant: ReflectionVariant,
    pub stop_on_success_tag: bool,
}

impl Default for LoopPolicy {
    fn default() -> Self {
        Self {
            mode: LoopMode::ThinkingReflection,
            max_reflection_rounds: 2,
            reroll_attempts: 0,
            reflection_variant: ReflectionVariant::MultiRound,
            stop_on_success_tag: true,
        }
    }
}

impl LoopPolicy {
    pub fn reroll(attempts: u32) -> Self {
        Self {
            mode: LoopMode::Reroll,
            max_reflection_rounds: 0,
            reroll_attempts: attempts,
            ..Self::default()
        }
    }

    pub fn with_mode(mode: LoopMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    /// Upper bound on generator calls (and therefore rounds) in a session.
    pub fn max_rounds(&self) -> usize {
        match self.mode {
            LoopMode::Base | LoopMode::Thinking => 1,
            LoopMode::ThinkingReflection => self.max_reflection_rounds as usize + 1,
            LoopMode::Reroll => self.reroll_attempts as usize + 1,
        }
    }

    pub fn validate(&self) -> Result<(), InvariantError> {
        if self.mode == LoopMode::Reroll && self.max_reflection_rounds != 0 {
            return Err(InvariantError::new(
                "max_reflection_rounds",
                "must be 0 when mode is reroll",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SessionStatus {
    Running,
    Succeeded,
    Stopped,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditSession {
    pub session_id: Uuid,
    pub reference: ImageRef,
    pub original_instruction: Instruction,
    pub thought: Option<Instruction>,
    pub rounds: Vec<RoundRecord>,
    pub status: SessionStatus,
    /// Round whose image the session returns, once selected.
    pub chosen_round: Option<u32>,
    pub policy: LoopPolicy,
    pub seed: u64,
}

impl EditSession {
    pub fn new(
        session_id: Uuid,
        reference: ImageRef,
        original_instruction: Instruction,
        policy: LoopPolicy,
        seed: u64,
    ) -> Self {
        Self {
            session_id,
            reference,
            original_instruction,
            thought: None,
            rounds: Vec::new(),
            status: SessionStatus::Running,
            chosen_round: None,
            policy,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), InvariantError> {
        self.reference.validate().map_err(|e| e.within("reference"))?;
        self.original_instruction
            .validate()
            .map_err(|e| e.within("original_instruction"))?;
        if let Some(t) = &self.thought {
            t.validate().map_err(|e| e.within("thought"))?;
        }
        self.policy.validate().map_err(|e| e.within("policy"))?;
        for (i, round) in self.rounds.iter().enumerate() {
            let path = format!("rounds[{i}]");
            if round.index as usize != i {
                return Err(InvariantError::new(
                    format!("{path}.index"),
                    format!("expected contiguous index {i}, found {}", round.index),
                ));
            }
            round.validate().map_err(|e| e.within(&path))?;
        }
        if self.rounds.len() > self.policy.max_rounds() {
            return Err(InvariantError::new(
                "rounds",
                format!(
                    "{} rounds exceed the policy bound of {}",
                    self.rounds.len(),
                    self.policy.max_rounds()
                ),
            ));
        }
        if let Some(chosen) = self.chosen_round {
            if chosen as usize >= self.rounds.len() {
                return Err(InvariantError::new(
                    "chosen_round",
                    format!("{chosen} is not an executed round"),
                ));
            }
        }
        if self.status == SessionStatus::Succeeded
            && (self.rounds.is_empty() || self.chosen_round.is_none())
        {
            return Err(InvariantError::new(
                "status",
                "Succeeded requires at least one round and a chosen round",
            ));
        }
        Ok(())
    }
}
