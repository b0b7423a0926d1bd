//! Dataset pipelines: abstract-to-concrete thinking pairs and reflection
//! triples, with seeded composition to target bucket proportions.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::derive_seed;
use crate::reasoner::ReasonerError;
use crate::types::InvariantError;

pub mod thinking;
pub mod triples;

pub use thinking::{
    annotate_pair, classify_instruction, compose_thinking_dataset, review_pair, Complexity,
    PoolRow, Provenance, Review, ThinkingForge, ThinkingPair, ThinkingRun,
};
pub use triples::{
    build_reflection_triples, forge_triples_to_dir, tag_viescores, EditSource, ReflectionTriple, TripleOutcome,
    TripleSet,
};

#[derive(Debug, thiserror::Error)]
pub enum ForgeError {
    #[error("shortfall: {}", describe_shortfall(.0))]
    Shortfall(Vec<Deficit>),
    #[error(transparent)]
    Invariant(#[from] InvariantError),
    #[error(transparent)]
    Reasoner(#[from] ReasonerError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{0}")]
    Precondition(String),
}

/// A bucket that could not be filled.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Deficit {
    pub bucket: String,
    pub wanted: usize,
    pub available: usize,
}

fn describe_shortfall(deficits: &[Deficit]) -> String {
    deficits
        .iter()
        .map(|d| format!("{} needs {} more ({} of {})", d.bucket, d.wanted - d.available, d.available, d.wanted))
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionTarget {
    pub total: usize,
    pub fraction_simplified: f64,
    pub fraction_abstracted: f64,
    pub fraction_passthrough: f64,
    /// Relative weights of success, reflection and failed triples.
    pub triple_ratio: [f64; 3],
}

impl Default for CompositionTarget {
    fn default() -> Self {
        Self {
            total: 400,
            fraction_simplified: 0.31,
            fraction_abstracted: 0.44,
            fraction_passthrough: 0.25,
            triple_ratio: [3.0, 1.0, 1.0],
        }
    }
}

impl CompositionTarget {
    pub fn with_total(total: usize) -> Self {
        Self {
            total,
            ..Self::default()
        }
    }

    pub fn fractions(&self) -> [f64; 3] {
        [
            self.fraction_simplified,
            self.fraction_abstracted,
            self.fraction_passthrough,
        ]
    }

    pub fn validate(&self) -> Result<(), InvariantError> {
        let f = self.fractions();
        if f.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(InvariantError::new("fractions", "each must lie in [0, 1]"));
        }
        if (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(InvariantError::new("fractions", "must sum to 1"));
        }
        if self.triple_ratio.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(InvariantError::new("triple_ratio", "weights must be positive"));
        }
        Ok(())
    }
}

/// Split `total` across buckets in proportion to `weights` by the largest
/// remainder method; ties go to the earlier bucket.
pub fn allocate(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || sum <= 0.0 {
        return vec![0; weights.len()];
    }
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let assigned: usize = counts.iter().sum();
    for &i in order.iter().cycle().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

pub(crate) const SHUFFLE_STREAM: u64 = 0x7368_7566;

pub(crate) fn shuffled<T>(mut items: Vec<T>, seed: u64, salt: u64) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, SHUFFLE_STREAM, salt));
    items.shuffle(&mut rng);
    items
}

pub(crate) fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, ForgeError> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| ForgeError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), ForgeError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut out, row).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ForgeError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(std::io::Error::from)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

/// An item dropped from a pipeline, with the stage that dropped it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reject {
    pub id: String,
    pub stage: String,
    pub reason: String,
}
