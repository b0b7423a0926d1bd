//! Per-sample judge scores under three benchmark conventions and their
//! aggregation into a report.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScoreError {
    #[error("{name} = {value} is outside [{lo}, {hi}]")]
    Range { name: String, value: f64, lo: f64, hi: f64 },
    #[error("record {index}: missing dimension {name}")]
    MissingDim { index: usize, name: String },
    #[error("cannot aggregate an empty record list")]
    Empty,
    #[error("record {index} is {found:?}, expected {expected:?}")]
    MixedBenchmarks {
        index: usize,
        expected: Benchmark,
        found: Benchmark,
    },
}

fn check(name: &str, value: f64, lo: f64, hi: f64) -> Result<(), ScoreError> {
    if value.is_finite() && (lo..=hi).contains(&value) {
        Ok(())
    } else {
        Err(ScoreError::Range {
            name: name.to_string(),
            value,
            lo,
            hi,
        })
    }
}

/// Geometric mean of semantic consistency and perceptual quality.
pub fn vie_overall(sc: f64, pq: f64) -> Result<f64, ScoreError> {
    check("semantic_consistency", sc, 0.0, 10.0)?;
    check("perceptual_quality", pq, 0.0, 10.0)?;
    Ok((sc * pq).sqrt())
}

/// Mean of adherence and the two adherence-capped axes.
pub fn imgedit_sample_score(adherence: f64, quality: f64, preservation: f64) -> Result<f64, ScoreError> {
    check("adherence", adherence, 1.0, 5.0)?;
    check("quality", quality, 1.0, 5.0)?;
    check("preservation", preservation, 1.0, 5.0)?;
    let mean = (adherence + quality.min(adherence) + preservation.min(adherence)) / 3.0;
    Ok(mean.min(adherence))
}

pub const KRIS_DIMS: [&str; 4] = [
    "visual_consistency",
    "visual_quality",
    "instruction_following",
    "knowledge_plausibility",
];

/// Mean of four 1–5 ratings mapped linearly onto [0, 100].
pub fn kris_sample_score(dims: [f64; 4]) -> Result<f64, ScoreError> {
    for (name, v) in KRIS_DIMS.iter().zip(dims) {
        check(name, v, 1.0, 5.0)?;
    }
    let mean = dims.iter().sum::<f64>() / 4.0;
    Ok(25.0 * (mean - 1.0))
}

/// Arithmetic mean and standard error (sample sd over sqrt n; 0 for n = 1).
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Benchmark {
    Gedit,
    Kris,
    Imgedit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    ZeroToTen,
    OneToFive,
}

impl Scale {
    fn bounds(self) -> (f64, f64) {
        match self {
            Scale::ZeroToTen => (0.0, 10.0),
            Scale::OneToFive => (1.0, 5.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeRecord {
    pub benchmark: Benchmark,
    pub dims: BTreeMap<String, f64>,
    pub scale: Scale,
}

impl JudgeRecord {
    pub fn gedit(sc: f64, pq: f64) -> Self {
        Self {
            benchmark: Benchmark::Gedit,
            dims: BTreeMap::from([
                ("perceptual_quality".to_string(), pq),
                ("semantic_consistency".to_string(), sc),
            ]),
            scale: Scale::ZeroToTen,
        }
    }

    pub fn validate(&self) -> Result<(), ScoreError> {
        let (lo, hi) = self.scale.bounds();
        self.dims.iter().try_for_each(|(name, &v)| check(name, v, lo, hi))
    }

    /// The benchmark's per-sample score for this record.
    pub fn sample_score(&self, index: usize) -> Result<f64, ScoreError> {
        self.validate()?;
        let dim = |name: &str| {
            self.dims.get(name).copied().ok_or_else(|| ScoreError::MissingDim {
                index,
                name: name.to_string(),
            })
        };
        match self.benchmark {
            Benchmark::Gedit => vie_overall(dim("semantic_consistency")?, dim("perceptual_quality")?),
            Benchmark::Imgedit => imgedit_sample_score(dim("adherence")?, dim("quality")?, dim("preservation")?),
            Benchmark::Kris => kris_sample_score([
                dim(KRIS_DIMS[0])?,
                dim(KRIS_DIMS[1])?,
                dim(KRIS_DIMS[2])?,
                dim(KRIS_DIMS[3])?,
            ]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub stderr: f64,
}

impl Stat {
    fn of(xs: &[f64]) -> Self {
        let (mean, stderr) = mean_stderr(xs);
        Self { mean, stderr }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub benchmark: Benchmark,
    pub n: usize,
    pub dims: BTreeMap<String, Stat>,
    pub overall: Stat,
}

/// Per-dimension and overall mean with standard error over one benchmark.
pub fn aggregate(records: &[JudgeRecord]) -> Result<Report, ScoreError> {
    let first = records.first().ok_or(ScoreError::Empty)?;
    let mut overall = Vec::with_capacity(records.len());
    let mut dims: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (index, r) in records.iter().enumerate() {
        if r.benchmark != first.benchmark {
            return Err(ScoreError::MixedBenchmarks {
                index,
                expected: first.benchmark,
                found: r.benchmark,
            });
        }
        overall.push(r.sample_score(index)?);
        for (name, &v) in &r.dims {
            dims.entry(name.clone()).or_default().push(v);
        }
    }
    Ok(Report {
        benchmark: first.benchmark,
        n: records.len(),
        dims: dims.into_iter().map(|(k, v)| (k, Stat::of(&v))).collect(),
        overall: Stat::of(&overall),
    })
}
