//! Thinking pairs: classify raw instructions, annotate in the direction the
//! class calls for, review, then mix to the target proportions.
//!
//! Complex instructions are decomposed into a concrete rewrite. Simple ones
//! are either given an invented abstract phrasing or kept as passthrough
//! pairs; which of the two is decided per item by a seeded draw weighted by
//! the target fractions.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{allocate, read_jsonl, shuffled, write_json, write_jsonl, CompositionTarget, Deficit, ForgeError, Reject};
use crate::engine::derive_seed;
use crate::reasoner::{labels, normalize_thought, Reasoner, ReasonerError};
use crate::types::{Instruction, InstructionKind, InvariantError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Complexity {
    Simple,
    Complex,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    SimplifiedFromComplex,
    AbstractedFromSimple,
    Passthrough,
}

impl Provenance {
    pub const ALL: [Provenance; 3] = [
        Provenance::SimplifiedFromComplex,
        Provenance::AbstractedFromSimple,
        Provenance::Passthrough,
    ];

    pub fn bucket(self) -> &'static str {
        match self {
            Provenance::SimplifiedFromComplex => "simplified",
            Provenance::AbstractedFromSimple => "abstracted",
            Provenance::Passthrough => "passthrough",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Review {
    Accepted,
    Rejected,
    Pending,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThinkingPair {
    pub id: String,
    pub abstract_instruction: Instruction,
    pub concrete_instruction: Instruction,
    pub provenance: Provenance,
    pub review: Review,
}

impl ThinkingPair {
    /// A clear instruction kept as-is on both sides.
    pub fn passthrough(id: impl Into<String>, instruction: &Instruction) -> Self {
        let text = instruction.text.trim().to_string();
        Self {
            id: id.into(),
            abstract_instruction: Instruction {
                text: text.clone(),
                kind: InstructionKind::Passthrough,
            },
            concrete_instruction: Instruction {
                text,
                kind: InstructionKind::Passthrough,
            },
            provenance: Provenance::Passthrough,
            review: Review::Pending,
        }
    }

    pub fn validate(&self) -> Result<(), InvariantError> {
        self.abstract_instruction
            .validate()
            .map_err(|e| e.within("abstract_instruction"))?;
        self.concrete_instruction
            .validate()
            .map_err(|e| e.within("concrete_instruction"))?;
        if self.provenance == Provenance::Passthrough
            && self.abstract_instruction.text != self.concrete_instruction.text
        {
            return Err(InvariantError::new(
                "concrete_instruction",
                "passthrough pair must repeat the abstract instruction",
            ));
        }
        Ok(())
    }
}

/// Parse a reply that must be exactly one of `options`, ignoring case,
/// surrounding quotes and punctuation.
fn one_word(raw: &str, options: &[&'static str]) -> Result<&'static str, String> {
    let word = raw
        .trim()
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_ascii_lowercase();
    options
        .iter()
        .find(|o| **o == word)
        .copied()
        .ok_or_else(|| format!("expected one of {options:?}, got {raw:?}"))
}

pub fn classify_instruction(reasoner: &Reasoner, instruction: &Instruction) -> Result<Complexity, ReasonerError> {
    let request = reasoner.request(labels::CLASSIFY, &[], &[("instruction", &instruction.text)])?;
    reasoner.call_structured(labels::CLASSIFY, request, |raw| {
        one_word(raw, &["simple", "complex"]).map(|w| match w {
            "simple" => Complexity::Simple,
            _ => Complexity::Complex,
        })
    })
}

fn non_empty(raw: &str) -> Result<String, String> {
    let text = normalize_thought(raw);
    if text.is_empty() {
        Err("empty reply".into())
    } else {
        Ok(text)
    }
}

/// Annotate in the direction the class calls for: complex instructions are
/// decomposed, simple ones gain an abstract phrasing.
pub fn annotate_pair(
    reasoner: &Reasoner,
    id: &str,
    instruction: &Instruction,
    label: Complexity,
) -> Result<ThinkingPair, ReasonerError> {
    let original = instruction.text.trim();
    let (abstract_text, concrete_text, provenance) = match label {
        Complexity::Complex => {
            let request = reasoner.request(labels::DECOMPOSE, &[], &[("instruction", original)])?;
            let concrete = reasoner.call_structured(labels::DECOMPOSE, request, non_empty)?;
            (original.to_string(), concrete, Provenance::SimplifiedFromComplex)
        }
        Complexity::Simple => {
            let request = reasoner.request(labels::ABSTRACT, &[], &[("instruction", original)])?;
            let abstracted = reasoner.call_structured(labels::ABSTRACT, request, non_empty)?;
            (abstracted, original.to_string(), Provenance::AbstractedFromSimple)
        }
    };
    Ok(ThinkingPair {
        id: id.to_string(),
        abstract_instruction: Instruction {
            text: abstract_text,
            kind: InstructionKind::Abstract,
        },
        concrete_instruction: Instruction {
            text: concrete_text,
            kind: InstructionKind::Concrete,
        },
        provenance,
        review: Review::Pending,
    })
}

/// Verdict on a pending pair. Pairs that fail local validation are rejected
/// and valid passthrough pairs accepted, both without consulting the
/// reviewer.
pub fn review_pair(reasoner: &Reasoner, pair: &ThinkingPair) -> Result<Review, ReasonerError> {
    if pair.validate().is_err() {
        return Ok(Review::Rejected);
    }
    if pair.provenance == Provenance::Passthrough {
        return Ok(Review::Accepted);
    }
    let request = reasoner.request(
        labels::REVIEW,
        &[],
        &[
            ("abstract", &pair.abstract_instruction.text),
            ("concrete", &pair.concrete_instruction.text),
        ],
    )?;
    reasoner.call_structured(labels::REVIEW, request, |raw| {
        one_word(raw, &["accept", "reject"]).map(|w| match w {
            "accept" => Review::Accepted,
            _ => Review::Rejected,
        })
    })
}

/// Mix accepted pairs to the target proportions and shuffle.
pub fn compose_thinking_dataset(
    pairs: &[ThinkingPair],
    target: &CompositionTarget,
    seed: u64,
) -> Result<Vec<ThinkingPair>, ForgeError> {
    target.validate()?;
    let wanted = allocate(target.total, &target.fractions());
    let mut chosen = Vec::with_capacity(target.total);
    let mut deficits = Vec::new();
    for (salt, (provenance, &want)) in Provenance::ALL.iter().zip(&wanted).enumerate() {
        let bucket: Vec<ThinkingPair> = pairs
            .iter()
            .filter(|p| p.provenance == *provenance && p.review == Review::Accepted)
            .cloned()
            .collect();
        if bucket.len() < want {
            deficits.push(Deficit {
                bucket: provenance.bucket().to_string(),
                wanted: want,
                available: bucket.len(),
            });
            continue;
        }
        chosen.extend(shuffled(bucket, seed, salt as u64).into_iter().take(want));
    }
    if !deficits.is_empty() {
        return Err(ForgeError::Shortfall(deficits));
    }
    Ok(shuffled(chosen, seed, Provenance::ALL.len() as u64))
}

/// One row of the raw instruction pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolRow {
    pub id: String,
    pub instruction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct QueueRow {
    id: String,
    review: Review,
    provenance: Provenance,
    #[serde(rename = "abstract")]
    abstract_text: String,
    concrete: String,
}

/// Every annotated pair with its verdict, plus the items dropped on the way.
#[derive(Debug, Clone, PartialEq)]
pub struct ThinkingRun {
    pub pairs: Vec<ThinkingPair>,
    pub rejects: Vec<Reject>,
    pub classified: BTreeMap<Complexity, usize>,
}

impl ThinkingRun {
    pub fn accepted(&self, provenance: Provenance) -> usize {
        self.pairs
            .iter()
            .filter(|p| p.provenance == provenance && p.review == Review::Accepted)
            .count()
    }
}

const ROUTE_STREAM: u64 = 0x726f_7574;
const ITEM_STREAM: u64 = 0x6974_656d;

pub struct ThinkingForge {
    reasoner: Reasoner,
    concurrency: usize,
}

enum Outcome {
    Pair(ThinkingPair, Complexity),
    Dropped(Reject, Option<Complexity>),
}

impl ThinkingForge {
    pub fn new(reasoner: Reasoner) -> Self {
        Self {
            reasoner,
            concurrency: 4,
        }
    }

    pub fn concurrency(mut self, limit: usize) -> Self {
        self.concurrency = limit.max(1);
        self
    }

    /// Classify, annotate and review every row. `verdicts` holds reviews
    /// recorded earlier (for instance by a human editing the review queue);
    /// accepted or rejected entries there are used instead of the reviewer.
    pub fn run(
        &self,
        rows: &[PoolRow],
        target: &CompositionTarget,
        seed: u64,
        verdicts: &BTreeMap<String, Review>,
    ) -> Result<ThinkingRun, ForgeError> {
        target.validate()?;
        let share = target.fraction_passthrough / (target.fraction_passthrough + target.fraction_abstracted);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.concurrency)
            .build()
            .map_err(|e| ForgeError::Precondition(e.to_string()))?;
        let outcomes: Vec<Outcome> = pool.install(|| {
            rows.par_iter()
                .enumerate()
                .map(|(i, row)| self.one(i as u64, row, seed, share, verdicts))
                .collect()
        });

        let mut run = ThinkingRun {
            pairs: Vec::new(),
            rejects: Vec::new(),
            classified: BTreeMap::new(),
        };
        for outcome in outcomes {
            let label = match outcome {
                Outcome::Pair(pair, label) => {
                    if pair.review == Review::Rejected {
                        run.rejects.push(Reject {
                            id: pair.id.clone(),
                            stage: "review".into(),
                            reason: "rejected by reviewer".into(),
                        });
                    }
                    run.pairs.push(pair);
                    Some(label)
                }
                Outcome::Dropped(reject, label) => {
                    run.rejects.push(reject);
                    label
                }
            };
            if let Some(label) = label {
                *run.classified.entry(label).or_default() += 1;
            }
        }
        Ok(run)
    }

    fn one(&self, index: u64, row: &PoolRow, seed: u64, share: f64, verdicts: &BTreeMap<String, Review>) -> Outcome {
        let reasoner = self
            .reasoner
            .clone()
            .with_seed(Some(derive_seed(seed, ITEM_STREAM, index)));
        let drop = |stage: &str, reason: String, label| {
            Outcome::Dropped(
                Reject {
                    id: row.id.clone(),
                    stage: stage.to_string(),
                    reason,
                },
                label,
            )
        };
        let instruction = match Instruction::new(&row.instruction, InstructionKind::Abstract) {
            Ok(i) => i,
            Err(e) => return drop("input", e.to_string(), None),
        };
        let label = match classify_instruction(&reasoner, &instruction) {
            Ok(l) => l,
            Err(e) => return drop("classify", e.to_string(), None),
        };
        let draw = derive_seed(seed, ROUTE_STREAM, index) as f64 / u64::MAX as f64;
        let mut pair = if label == Complexity::Simple && draw < share {
            ThinkingPair::passthrough(&row.id, &instruction)
        } else {
            match annotate_pair(&reasoner, &row.id, &instruction, label) {
                Ok(p) => p,
                Err(e) => return drop("annotate", e.to_string(), Some(label)),
            }
        };
        pair.review = match verdicts.get(&row.id) {
            Some(&v @ (Review::Accepted | Review::Rejected)) => v,
            _ => match review_pair(&reasoner, &pair) {
                Ok(v) => v,
                Err(e) => return drop("review", e.to_string(), Some(label)),
            },
        };
        Outcome::Pair(pair, label)
    }

    /// Run the whole pipeline into `out`: `thinking_pairs.jsonl`,
    /// `rejects.jsonl`, `review_queue.jsonl` and `composition_report.json`.
    /// An existing review queue in `out` is honored. The report is written
    /// even when composition falls short.
    pub fn forge_to_dir(
        &self,
        rows: &[PoolRow],
        target: &CompositionTarget,
        seed: u64,
        out: &Path,
    ) -> Result<Vec<ThinkingPair>, ForgeError> {
        std::fs::create_dir_all(out)?;
        let queue_path = out.join("review_queue.jsonl");
        let verdicts: BTreeMap<String, Review> = if queue_path.exists() {
            read_jsonl::<QueueRow>(&queue_path)?
                .into_iter()
                .map(|q| (q.id, q.review))
                .collect()
        } else {
            BTreeMap::new()
        };
        let run = self.run(rows, target, seed, &verdicts)?;
        let queue: Vec<QueueRow> = run
            .pairs
            .iter()
            .map(|p| QueueRow {
                id: p.id.clone(),
                review: p.review,
                provenance: p.provenance,
                abstract_text: p.abstract_instruction.text.clone(),
                concrete: p.concrete_instruction.text.clone(),
            })
            .collect();
        write_jsonl(&queue_path, &queue)?;
        write_jsonl(&out.join("rejects.jsonl"), &run.rejects)?;

        let composed = compose_thinking_dataset(&run.pairs, target, seed);
        let dataset = composed.as_deref().unwrap_or(&[]);
        write_jsonl(&out.join("thinking_pairs.jsonl"), dataset)?;
        write_json(&out.join("composition_report.json"), &report(&run, target, dataset, rows.len(), composed.as_ref().err()))?;
        composed
    }
}

fn report(
    run: &ThinkingRun,
    target: &CompositionTarget,
    dataset: &[ThinkingPair],
    pool: usize,
    error: Option<&ForgeError>,
) -> serde_json::Value {
    let wanted = allocate(target.total, &target.fractions());
    let mut buckets = serde_json::Map::new();
    for (provenance, want) in Provenance::ALL.iter().zip(wanted) {
        let count = dataset.iter().filter(|p| p.provenance == *provenance).count();
        let produced = run.pairs.iter().filter(|p| p.provenance == *provenance).count();
        let accepted = run.accepted(*provenance);
        buckets.insert(
            provenance.bucket().to_string(),
            json!({
                "target": want,
                "count": count,
                "fraction": if dataset.is_empty() { 0.0 } else { count as f64 / dataset.len() as f64 },
                "produced": produced,
                "accepted": accepted,
                "accept_rate": if produced == 0 { None } else { Some(accepted as f64 / produced as f64) },
            }),
        );
    }
    let shortfall = match error {
        Some(ForgeError::Shortfall(d)) => json!(d),
        Some(e) => json!(e.to_string()),
        None => serde_json::Value::Null,
    };
    json!({
        "dataset": "thinking_pairs",
        "pool": pool,
        "total": dataset.len(),
        "target": target,
        "classified": {
            "simple": run.classified.get(&Complexity::Simple).copied().unwrap_or(0),
            "complex": run.classified.get(&Complexity::Complex).copied().unwrap_or(0),
        },
        "rejects": run.rejects.len(),
        "buckets": buckets,
        "shortfall": shortfall,
    })
}
