//! JSONL session traces (`reasonloop/1`).
//!
//! A trace is one header line followed by one line per event in execution
//! order: `think`, then per round `edit`, `describe`, `assess`, `conclude`,
//! `score`, and finally `stop` once the session has left `Running`. Field order
//! is fixed by the struct layouts below and scores are written with exactly
//! four fractional digits, so equal sessions always produce identical bytes.

use std::io::Write;

use serde::de::Error as _;
use serde::ser::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::value::RawValue;
use uuid::Uuid;

use crate::backends::DEFAULT_BACKOFF_MS;
use crate::types::{
    Assessment, ConclusionTag, EditSession, ImageRef, Instruction, InvariantError, LoopPolicy,
    ReflectionConclusion, RoundRecord, SessionStatus, VieScore, SCORE_DECIMALS,
};

pub const TRACE_VERSION: &str = "reasonloop/1";

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("line {line}: malformed JSON: {message}")]
    Json { line: usize, message: String },
    #[error("unsupported trace version {found:?}, expected {TRACE_VERSION:?}")]
    UnsupportedVersion { found: String },
    #[error("line {line}: {message}")]
    Structure { line: usize, message: String },
    #[error("empty trace")]
    Empty,
    #[error(transparent)]
    Invariant(#[from] InvariantError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

fn score4<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
    let text = format!("{:.*}", SCORE_DECIMALS as usize, x);
    RawValue::from_string(text)
        .map_err(S::Error::custom)?
        .serialize(s)
}

fn finite_f64<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    let x = f64::deserialize(d)?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(D::Error::custom("non-finite score"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub version: String,
    pub session_id: Uuid,
    pub policy: LoopPolicy,
    pub seed: u64,
    pub reference: ImageRef,
    pub original_instruction: Instruction,
    /// Retry backoff schedule in force for backend calls.
    #[serde(default)]
    pub backoff_ms: Vec<u64>,
}

/// One trace line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TraceEvent {
    Header(TraceHeader),
    Think {
        thought: Option<Instruction>,
    },
    Edit {
        round: u32,
        instruction: Instruction,
        generated: ImageRef,
        latency_ms: u64,
    },
    Describe {
        round: u32,
        text: String,
    },
    Assess {
        round: u32,
        #[serde(serialize_with = "score4", deserialize_with = "finite_f64")]
        consistency_score: f64,
        conflicts: Vec<String>,
        omissions: Vec<String>,
        hallucinations: Vec<String>,
        rationale: String,
    },
    Conclude {
        round: u32,
        tag: String,
        reasoning: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        refinement_instruction: Option<Instruction>,
    },
    Score {
        round: u32,
        #[serde(serialize_with = "score4", deserialize_with = "finite_f64")]
        semantic_consistency: f64,
        #[serde(serialize_with = "score4", deserialize_with = "finite_f64")]
        perceptual_quality: f64,
        #[serde(serialize_with = "score4", deserialize_with = "finite_f64")]
        overall: f64,
    },
    Stop {
        status: SessionStatus,
        chosen_round: Option<u32>,
    },
}

impl TraceEvent {
    pub fn name(&self) -> &'static str {
        match self {
            TraceEvent::Header(_) => "header",
            TraceEvent::Think { .. } => "think",
            TraceEvent::Edit { .. } => "edit",
            TraceEvent::Describe { .. } => "describe",
            TraceEvent::Assess { .. } => "assess",
            TraceEvent::Conclude { .. } => "conclude",
            TraceEvent::Score { .. } => "score",
            TraceEvent::Stop { .. } => "stop",
        }
    }
}

/// Flatten a session into its ordered event list.
pub fn session_events(session: &EditSession) -> Vec<TraceEvent> {
    let mut events = vec![
        TraceEvent::Header(TraceHeader {
            version: TRACE_VERSION.to_string(),
            session_id: session.session_id,
            policy: session.policy,
            seed: session.seed,
            reference: session.reference.clone(),
            original_instruction: session.original_instruction.clone(),
            backoff_ms: DEFAULT_BACKOFF_MS.to_vec(),
        }),
        TraceEvent::Think {
            thought: session.thought.clone(),
        },
    ];
    for r in &session.rounds {
        let round = r.index;
        events.push(TraceEvent::Edit {
            round,
            instruction: r.instruction_used.clone(),
            generated: r.generated.clone(),
            latency_ms: r.latency_ms,
        });
        if let Some(text) = &r.target_description {
            events.push(TraceEvent::Describe {
                round,
                text: text.clone(),
            });
        }
        if let Some(a) = &r.assessment {
            events.push(TraceEvent::Assess {
                round,
                consistency_score: a.consistency_score,
                conflicts: a.conflicts.clone(),
                omissions: a.omissions.clone(),
                hallucinations: a.hallucinations.clone(),
                rationale: a.rationale.clone(),
            });
        }
        if let Some(c) = &r.conclusion {
            events.push(TraceEvent::Conclude {
                round,
                tag: c.tag.trace_name().to_string(),
                reasoning: c.reasoning.clone(),
                refinement_instruction: c.refinement_instruction.clone(),
            });
        }
        if let Some(v) = &r.vie {
            events.push(TraceEvent::Score {
                round,
                semantic_consistency: v.semantic_consistency,
                perceptual_quality: v.perceptual_quality,
                overall: v.overall,
            });
        }
    }
    if session.status != SessionStatus::Running {
        events.push(TraceEvent::Stop {
            status: session.status,
            chosen_round: session.chosen_round,
        });
    }
    events
}

pub fn write_trace<W: Write>(session: &EditSession, mut out: W) -> Result<(), TraceError> {
    session.validate()?;
    for event in session_events(session) {
        let line = serde_json::to_string(&event).map_err(|e| TraceError::Json {
            line: 0,
            message: e.to_string(),
        })?;
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Serialize a session to JSONL bytes. Fails only on invariant violations.
pub fn serialize_trace(session: &EditSession) -> Result<Vec<u8>, TraceError> {
    let mut buf = Vec::new();
    write_trace(session, &mut buf)?;
    Ok(buf)
}

/// Decode the raw event lines of a trace, with 1-based line numbers.
pub fn parse_events(bytes: &[u8]) -> Result<Vec<(usize, TraceEvent)>, TraceError> {
    let text = std::str::from_utf8(bytes).map_err(|e| TraceError::Json {
        line: 1 + bytes[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count(),
        message: "invalid UTF-8".into(),
    })?;
    let mut events = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(raw).map_err(|e| TraceError::Json {
            line,
            message: e.to_string(),
        })?;
        if events.is_empty() {
            check_header_version(&value, line)?;
        }
        let event: TraceEvent = serde_json::from_value(value).map_err(|e| TraceError::Json {
            line,
            message: e.to_string(),
        })?;
        events.push((line, event));
    }
    if events.is_empty() {
        return Err(TraceError::Empty);
    }
    Ok(events)
}

fn check_header_version(value: &serde_json::Value, line: usize) -> Result<(), TraceError> {
    if value.get("type").and_then(|t| t.as_str()) != Some("header") {
        return Err(TraceError::Structure {
            line,
            message: "first line must be a header".into(),
        });
    }
    match value.get("version").and_then(|v| v.as_str()) {
        Some(TRACE_VERSION) => Ok(()),
        Some(other) => Err(TraceError::UnsupportedVersion {
            found: other.to_string(),
        }),
        None => Err(TraceError::UnsupportedVersion {
            found: value.get("version").map(|v| v.to_string()).unwrap_or_default(),
        }),
    }
}

/// Rebuild a session from trace bytes.
pub fn parse_trace(bytes: &[u8]) -> Result<EditSession, TraceError> {
    let events = parse_events(bytes)?;
    let mut iter = events.into_iter();
    let (_, header) = iter.next().ok_or(TraceError::Empty)?;
    let TraceEvent::Header(header) = header else {
        return Err(TraceError::Structure {
            line: 1,
            message: "first line must be a header".into(),
        });
    };
    let mut session = EditSession::new(
        header.session_id,
        header.reference,
        header.original_instruction,
        header.policy,
        header.seed,
    );
    let mut saw_think = false;
    let mut stopped = false;

    for (line, event) in iter {
        let structure = |message: String| TraceError::Structure { line, message };
        if stopped {
            return Err(structure("event after stop".into()));
        }
        let current = |session: &mut EditSession, round: u32| -> Result<usize, TraceError> {
            match session.rounds.last() {
                Some(r) if r.index == round => Ok(session.rounds.len() - 1),
                _ => Err(TraceError::Structure {
                    line,
                    message: format!("event for round {round} does not follow its edit"),
                }),
            }
        };
        match event {
            TraceEvent::Header(_) => return Err(structure("duplicate header".into())),
            TraceEvent::Think { thought } => {
                if saw_think {
                    return Err(structure("duplicate think event".into()));
                }
                saw_think = true;
                session.thought = thought;
            }
            _ if !saw_think => return Err(structure("think event must follow the header".into())),
            TraceEvent::Edit {
                round,
                instruction,
                generated,
                latency_ms,
            } => {
                if round as usize != session.rounds.len() {
                    return Err(structure(format!(
                        "edit for round {round}, expected round {}",
                        session.rounds.len()
                    )));
                }
                let mut record = RoundRecord::new(round, instruction, generated);
                record.latency_ms = latency_ms;
                session.rounds.push(record);
            }
            TraceEvent::Describe { round, text } => {
                let i = current(&mut session, round)?;
                session.rounds[i].target_description = Some(text);
            }
            TraceEvent::Assess {
                round,
                consistency_score,
                conflicts,
                omissions,
                hallucinations,
                rationale,
            } => {
                let i = current(&mut session, round)?;
                session.rounds[i].assessment = Some(Assessment {
                    consistency_score,
                    conflicts,
                    omissions,
                    hallucinations,
                    rationale,
                });
            }
            TraceEvent::Conclude {
                round,
                tag,
                reasoning,
                refinement_instruction,
            } => {
                let i = current(&mut session, round)?;
                let tag = ConclusionTag::from_trace_name(&tag)
                    .ok_or_else(|| structure(format!("unknown conclusion tag {tag:?}")))?;
                session.rounds[i].conclusion = Some(ReflectionConclusion {
                    tag,
                    reasoning,
                    refinement_instruction,
                });
            }
            TraceEvent::Score {
                round,
                semantic_consistency,
                perceptual_quality,
                ..
            } => {
                let i = current(&mut session, round)?;
                let vie = VieScore::new(semantic_consistency, perceptual_quality)
                    .map_err(|e| e.within(&format!("rounds[{i}].vie")))?;
                session.rounds[i].vie = Some(vie);
            }
            TraceEvent::Stop {
                status,
                chosen_round,
            } => {
                session.status = status;
                session.chosen_round = chosen_round;
                stopped = true;
            }
        }
    }
    if !saw_think {
        return Err(TraceError::Structure {
            line: 1,
            message: "missing think event".into(),
        });
    }
    session.validate()?;
    Ok(session)
}
