//! The thinking-editing-reflection state machine and the re-roll baseline.
//!
//! Per mode:
//!
//! - `base`: one edit with the original instruction, no reasoner calls.
//! - `thinking`: think, then one edit with the thought.
//! - `thinking_reflection`: think, edit, then per round reflect and score.
//!   `Reflect` chains a refinement edit onto the generated image, `Success`
//!   stops (when `stop_on_success_tag`), `Failed` stops with no further edits.
//!   The last edit allowed by the budget is scored but not reflected on.
//! - `reroll`: think, then `reroll_attempts + 1` independent edits with fresh
//!   seeds, each scored.
//!
//! The returned image is the round with the highest overall VIEScore, ties
//! going to the earliest round.

use std::sync::Arc;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uuid::Uuid;

use crate::backends::{edit_image, BackendError, EditRequest, GeneratorBackend, DEFAULT_GUIDANCE, DEFAULT_STEPS};
use crate::reasoner::{Reasoner, ReasonerError};
use crate::types::{
    ConclusionTag, EditSession, ImageRef, Instruction, InvariantError, LoopMode, LoopPolicy,
    RoundRecord, SessionStatus,
};

pub mod batch;

pub use batch::{read_manifest, BatchError, BatchItem, BatchRunner, BatchSummary, ManifestRow, SessionSummary};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EngineError {
    #[error(transparent)]
    Invariant(#[from] InvariantError),
    #[error(transparent)]
    Reasoner(#[from] ReasonerError),
    #[error("generator: {0}")]
    Generator(#[from] BackendError),
    #[error("cannot select a stopping round from an empty list")]
    EmptySelection,
}

impl EngineError {
    fn is_refusal(&self) -> bool {
        match self {
            EngineError::Generator(e) => e.is_refusal(),
            EngineError::Reasoner(ReasonerError::Backend(e)) => e.is_refusal(),
            _ => false,
        }
    }
}

/// Wall-clock source for round latencies.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

pub struct SystemClock {
    origin: Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        Self {
            origin: Instant::now(),
        }
    }
}

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        self.origin.elapsed().as_millis() as u64
    }
}

/// Always reads zero; keeps traces byte-stable on offline backends.
#[derive(Debug, Default, Clone, Copy)]
pub struct FrozenClock;

impl Clock for FrozenClock {
    fn now_ms(&self) -> u64 {
        0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionOutcome {
    pub final_image: ImageRef,
    pub chosen_round: u32,
    pub status: SessionStatus,
    pub total_latency_ms: u64,
    pub rounds_executed: u32,
}

/// A finished session: its full state, the outcome when any round was
/// produced, and the error that cut it short, if one did.
#[derive(Debug, Clone)]
pub struct SessionRun {
    pub session: EditSession,
    pub outcome: Option<SessionOutcome>,
    pub error: Option<EngineError>,
}

/// Index of the round with maximal overall score; ties go to the earliest.
pub fn select_stopping_round(scored: &[(u32, f64)]) -> Result<u32, EngineError> {
    scored
        .iter()
        .copied()
        .reduce(|best, cur| {
            if cur.1 > best.1 || (cur.1 == best.1 && cur.0 < best.0) {
                cur
            } else {
                best
            }
        })
        .map(|(i, _)| i)
        .ok_or(EngineError::EmptySelection)
}

/// Running maximum of a score series.
pub fn cumulative_best(scores: &[f64]) -> Vec<f64> {
    scores
        .iter()
        .scan(f64::NEG_INFINITY, |best, &s| {
            *best = best.max(s);
            Some(*best)
        })
        .collect()
}

pub const EDIT_STREAM: u64 = 0x6564_6974;
pub const SESSION_STREAM: u64 = 0x7365_7373;

/// Child seed for `(stream, index)` under `seed` (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_add(1).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Version-4 UUID drawn from a seeded generator.
pub fn session_uuid(seed: u64) -> Uuid {
    let mut bytes = [0u8; 16];
    ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut bytes);
    uuid::Builder::from_random_bytes(bytes).into_uuid()
}

enum Ending {
    Completed,
    Failed,
}

pub struct Engine {
    reasoner: Reasoner,
    generator: Arc<dyn GeneratorBackend>,
    clock: Arc<dyn Clock>,
    steps: u32,
    guidance: f64,
}

impl Engine {
    pub fn new(reasoner: Reasoner, generator: Arc<dyn GeneratorBackend>) -> Self {
        Self {
            reasoner,
            generator,
            clock: Arc::new(SystemClock::default()),
            steps: DEFAULT_STEPS,
            guidance: DEFAULT_GUIDANCE,
        }
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_sampler(mut self, steps: u32, guidance: f64) -> Self {
        self.steps = steps;
        self.guidance = guidance;
        self
    }

    pub fn reasoner(&self) -> &Reasoner {
        &self.reasoner
    }

    /// Run one session to completion.
    ///
    /// Only invalid inputs are returned as `Err`; backend failures end the
    /// session early and are reported in [`SessionRun::error`].
    pub fn run_session(
        &self,
        reference: &ImageRef,
        instruction: &Instruction,
        policy: LoopPolicy,
        seed: u64,
    ) -> Result<SessionRun, EngineError> {
        policy.validate().map_err(|e| e.within("policy"))?;
        instruction.validate().map_err(|e| e.within("instruction"))?;
        reference.validate().map_err(|e| e.within("reference"))?;

        let started = self.clock.now_ms();
        let mut session = EditSession::new(
            session_uuid(seed),
            reference.clone(),
            instruction.clone(),
            policy,
            seed,
        );
        let result = self.drive(&mut session);
        let (status, error) = match result {
            Ok(Ending::Completed) => (SessionStatus::Succeeded, None),
            Ok(Ending::Failed) => (SessionStatus::Failed, None),
            Err(e) if e.is_refusal() => (SessionStatus::Failed, Some(e)),
            Err(e) => (SessionStatus::Stopped, Some(e)),
        };
        if let Some(e) = &error {
            tracing::warn!(session = %session.session_id, error = %e, "session ended early");
        }

        let scored: Vec<(u32, f64)> = session
            .rounds
            .iter()
            .filter_map(|r| r.vie.map(|v| (r.index, v.overall)))
            .collect();
        let chosen = match select_stopping_round(&scored) {
            Ok(i) => Some(i),
            Err(_) => session.rounds.last().map(|r| r.index),
        };
        session.chosen_round = chosen;
        session.status = status;
        let outcome = chosen.map(|i| SessionOutcome {
            final_image: session.rounds[i as usize].generated.clone(),
            chosen_round: i,
            status,
            total_latency_ms: self.clock.now_ms().saturating_sub(started),
            rounds_executed: session.rounds.len() as u32,
        });
        Ok(SessionRun {
            session,
            outcome,
            error,
        })
    }

    fn drive(&self, s: &mut EditSession) -> Result<Ending, EngineError> {
        let reasoner = self.reasoner.clone().with_seed(Some(s.seed));
        let reference = s.reference.clone();
        let original = s.original_instruction.clone();
        let policy = s.policy;

        let conditioning = if policy.mode == LoopMode::Base {
            original.clone()
        } else {
            let thought = reasoner.think(&reference, &original)?;
            s.thought = Some(thought.clone());
            thought
        };

        match policy.mode {
            LoopMode::Base | LoopMode::Thinking => {
                self.edit_round(s, &reference, &conditioning)?;
                Ok(Ending::Completed)
            }
            LoopMode::Reroll => {
                for _ in 0..=policy.reroll_attempts {
                    let round = self.edit_round(s, &reference, &conditioning)?;
                    self.score_round(&reasoner, s, round)?;
                }
                Ok(Ending::Completed)
            }
            LoopMode::ThinkingReflection => {
                let mut source = reference.clone();
                let mut instruction = conditioning.clone();
                let mut reflections = 0;
                loop {
                    let round = self.edit_round(s, &source, &instruction)?;
                    let generated = s.rounds[round].generated.clone();
                    let tick = self.clock.now_ms();
                    let conclusion = if reflections < policy.max_reflection_rounds {
                        reflections += 1;
                        let r = reasoner.reflect(policy.reflection_variant, &reference, &generated, &original);
                        let r = r.inspect_err(|_| self.add_latency(s, round, tick))?;
                        let record = &mut s.rounds[round];
                        record.target_description = r.target_description;
                        record.assessment = r.assessment;
                        record.conclusion = Some(r.conclusion.clone());
                        Some(r.conclusion)
                    } else {
                        None
                    };
                    self.add_latency(s, round, tick);
                    self.score_round(&reasoner, s, round)?;

                    let Some(conclusion) = conclusion else {
                        return Ok(Ending::Completed);
                    };
                    match conclusion.tag {
                        ConclusionTag::Failed => return Ok(Ending::Failed),
                        ConclusionTag::Success if policy.stop_on_success_tag => {
                            return Ok(Ending::Completed)
                        }
                        ConclusionTag::Success => {
                            source = reference.clone();
                            instruction = conditioning.clone();
                        }
                        ConclusionTag::Reflect => {
                            source = generated;
                            instruction = conclusion
                                .refinement_instruction
                                .expect("validated Reflect carries an instruction");
                        }
                    }
                }
            }
        }
    }

    fn add_latency(&self, s: &mut EditSession, round: usize, since: u64) {
        s.rounds[round].latency_ms += self.clock.now_ms().saturating_sub(since);
    }

    /// Edit `source` and append the round; returns its index.
    fn edit_round(
        &self,
        s: &mut EditSession,
        source: &ImageRef,
        instruction: &Instruction,
    ) -> Result<usize, EngineError> {
        let index = s.rounds.len();
        let tick = self.clock.now_ms();
        let mut request = EditRequest::new(
            source.clone(),
            instruction.clone(),
            derive_seed(s.seed, EDIT_STREAM, index as u64),
        );
        request.steps = self.steps;
        request.guidance = self.guidance;
        let generated = edit_image(self.generator.as_ref(), &request)?;
        let mut record = RoundRecord::new(index as u32, instruction.clone(), generated);
        record.latency_ms = self.clock.now_ms().saturating_sub(tick);
        s.rounds.push(record);
        Ok(index)
    }

    fn score_round(&self, reasoner: &Reasoner, s: &mut EditSession, round: usize) -> Result<(), EngineError> {
        let tick = self.clock.now_ms();
        let vie = reasoner.score_vie(&s.reference, &s.rounds[round].generated, &s.original_instruction);
        self.add_latency(s, round, tick);
        s.rounds[round].vie = Some(vie?);
        Ok(())
    }
}

#[cfg(test)]
mod tests;
