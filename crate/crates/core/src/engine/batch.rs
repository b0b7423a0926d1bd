//! Many sessions over shared backends with a bounded number in flight.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{derive_seed, Engine, SessionRun, SESSION_STREAM};
use crate::image_store::ImageStore;
use crate::scoring::mean_stderr;
use crate::trace::{write_trace, TraceError};
use crate::types::{ImageRef, Instruction, InstructionKind, LoopPolicy, SessionStatus};

#[derive(Debug, thiserror::Error)]
pub enum BatchError {
    #[error("{path}:{line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("trace for {id}: {source}")]
    Trace { id: String, source: TraceError },
    #[error("cannot build a pool of {0} workers")]
    Pool(usize),
}

/// One manifest row; `image` is resolved relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    #[serde(default)]
    pub id: Option<String>,
    pub image: String,
    pub instruction: String,
    #[serde(default)]
    pub kind: Option<InstructionKind>,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>, BatchError> {
    let file = fs::File::open(path)?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line).map_err(|e| BatchError::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        rows.push(row);
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub id: String,
    pub reference: ImageRef,
    pub instruction: Instruction,
}

impl BatchItem {
    /// Import the rows' images into `store`; ids default to the row number.
    pub fn from_manifest(
        rows: &[ManifestRow],
        manifest: &Path,
        store: &ImageStore,
    ) -> Result<Vec<Self>, BatchError> {
        let base = manifest.parent().unwrap_or(Path::new("."));
        rows.iter()
            .enumerate()
            .map(|(i, row)| {
                let err = |message: String| BatchError::Manifest {
                    path: manifest.to_path_buf(),
                    line: i + 1,
                    message,
                };
                let reference = store
                    .import(&base.join(&row.image))
                    .map_err(|e| err(e.to_string()))?;
                let kind = row.kind.unwrap_or(InstructionKind::Abstract);
                let instruction = Instruction::new(&row.instruction, kind).map_err(|e| err(e.to_string()))?;
                Ok(BatchItem {
                    id: row.id.clone().unwrap_or_else(|| format!("{i:05}")),
                    reference,
                    instruction,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub id: String,
    pub session_id: String,
    pub status: SessionStatus,
    pub chosen_round: Option<u32>,
    pub rounds_executed: u32,
    pub final_image: Option<String>,
    pub overall: Option<f64>,
    pub trace: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub policy: LoopPolicy,
    pub seed: u64,
    pub sessions: usize,
    pub completed: usize,
    pub mean_overall: Option<f64>,
    pub stderr_overall: Option<f64>,
    pub outcomes: Vec<SessionSummary>,
}

impl BatchSummary {
    pub fn completion_rate(&self) -> f64 {
        if self.sessions == 0 {
            1.0
        } else {
            self.completed as f64 / self.sessions as f64
        }
    }
}

pub struct BatchRunner<'a> {
    engine: &'a Engine,
    concurrency: usize,
    trace_dir: Option<PathBuf>,
    judge_unscored: bool,
}

impl<'a> BatchRunner<'a> {
    pub fn new(engine: &'a Engine) -> Self {
        Self {
            engine,
            concurrency: 4,
            trace_dir: None,
            judge_unscored: true,
        }
    }

    pub fn concurrency(mut self, limit: usize) -> Self {
        self.concurrency = limit.max(1);
        self
    }

    /// Write `<dir>/<session_id>.jsonl` per session; trace paths in the
    /// summary are relative to `dir`'s parent.
    pub fn traces_to(mut self, dir: impl Into<PathBuf>) -> Self {
        self.trace_dir = Some(dir.into());
        self
    }

    /// Whether sessions without a VIEScore on their chosen round (base and
    /// thinking modes) are scored once by the reasoner for the summary.
    pub fn judge_unscored(mut self, on: bool) -> Self {
        self.judge_unscored = on;
        self
    }

    /// Session `i` runs with seed `derive_seed(seed, SESSION_STREAM, i)`.
    pub fn run(&self, items: &[BatchItem], policy: LoopPolicy, seed: u64) -> Result<BatchSummary, BatchError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.concurrency)
            .build()
            .map_err(|_| BatchError::Pool(self.concurrency))?;
        if let Some(dir) = &self.trace_dir {
            fs::create_dir_all(dir)?;
        }
        let outcomes = pool.install(|| {
            items
                .par_iter()
                .enumerate()
                .map(|(i, item)| self.one(item, policy, derive_seed(seed, SESSION_STREAM, i as u64)))
                .collect::<Result<Vec<_>, _>>()
        })?;

        let completed = outcomes
            .iter()
            .filter(|o| matches!(o.status, SessionStatus::Succeeded | SessionStatus::Failed))
            .count();
        let overall: Vec<f64> = outcomes.iter().filter_map(|o| o.overall).collect();
        let stats = (!overall.is_empty()).then(|| mean_stderr(&overall));
        Ok(BatchSummary {
            policy,
            seed,
            sessions: items.len(),
            completed,
            mean_overall: stats.map(|s| s.0),
            stderr_overall: stats.map(|s| s.1),
            outcomes,
        })
    }

    fn one(&self, item: &BatchItem, policy: LoopPolicy, seed: u64) -> Result<SessionSummary, BatchError> {
        let run = match self.engine.run_session(&item.reference, &item.instruction, policy, seed) {
            Ok(run) => run,
            Err(e) => {
                return Ok(SessionSummary {
                    id: item.id.clone(),
                    session_id: String::new(),
                    status: SessionStatus::Stopped,
                    chosen_round: None,
                    rounds_executed: 0,
                    final_image: None,
                    overall: None,
                    trace: None,
                    error: Some(e.to_string()),
                })
            }
        };
        let trace = match &self.trace_dir {
            Some(dir) => {
                let name = format!("{}.jsonl", run.session.session_id);
                let file = fs::File::create(dir.join(&name))?;
                write_trace(&run.session, std::io::BufWriter::new(file)).map_err(|source| {
                    BatchError::Trace {
                        id: item.id.clone(),
                        source,
                    }
                })?;
                let folder = dir.file_name().map(|f| f.to_string_lossy().into_owned());
                Some(match folder {
                    Some(folder) => format!("{folder}/{name}"),
                    None => name,
                })
            }
            None => None,
        };
        let overall = self.final_overall(&run, item);
        let SessionRun { session, outcome, error } = run;
        Ok(SessionSummary {
            id: item.id.clone(),
            session_id: session.session_id.to_string(),
            status: session.status,
            chosen_round: session.chosen_round,
            rounds_executed: session.rounds.len() as u32,
            final_image: outcome.map(|o| o.final_image.uri),
            overall,
            trace,
            error: error.map(|e| e.to_string()),
        })
    }

    fn final_overall(&self, run: &SessionRun, item: &BatchItem) -> Option<f64> {
        let outcome = run.outcome.as_ref()?;
        let round = &run.session.rounds[outcome.chosen_round as usize];
        match round.vie {
            Some(v) => Some(v.overall),
            None if self.judge_unscored => self
                .engine
                .reasoner()
                .clone()
                .with_seed(Some(run.session.seed))
                .score_vie(&item.reference, &outcome.final_image, &item.instruction)
                .ok()
                .map(|v| v.overall),
            None => None,
        }
    }
}
