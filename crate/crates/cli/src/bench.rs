use std::path::PathBuf;

use anyhow::Context as _;
use clap::Args;
use reasonloop_core::engine::{read_manifest, BatchItem, BatchRunner, BatchSummary};
use reasonloop_core::LoopMode;
use serde::Serialize;

use crate::context::{print_json, write_json, CommonArgs, Context};
use crate::edit::PolicyArgs;
use crate::Exit;

/// Share of sessions that must reach a verdict for a clean exit.
const MIN_COMPLETION: f64 = 0.9;

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// JSONL manifest of `{"id", "image", "instruction", "kind"}` rows.
    #[arg(long)]
    manifest: PathBuf,
    /// Budgets to sweep: reflection rounds, or extra attempts for reroll.
    /// Ignored by base and thinking.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    budgets: Vec<u32>,
    #[command(flatten)]
    policy: PolicyArgs,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Serialize)]
struct BudgetEntry {
    budget: u32,
    completion_rate: f64,
    #[serde(flatten)]
    summary: BatchSummary,
}

#[derive(Serialize)]
struct BenchReport {
    seed: u64,
    mode: LoopMode,
    n: usize,
    budgets: Vec<BudgetEntry>,
    /// Best mean overall reached at or below each budget.
    cumulative_best: Vec<Option<f64>>,
}

/// Running maximum that skips budgets without a score.
fn running_best(means: &[Option<f64>]) -> Vec<Option<f64>> {
    let mut best: Option<f64> = None;
    means
        .iter()
        .map(|m| {
            if let Some(m) = m {
                best = Some(best.map_or(*m, |b| b.max(*m)));
            }
            best
        })
        .collect()
}

pub fn run(args: BenchArgs) -> anyhow::Result<Exit> {
    let rows = read_manifest(&args.manifest).with_context(|| format!("cannot read manifest {}", args.manifest.display()))?;
    anyhow::ensure!(!rows.is_empty(), "manifest {} has no rows", args.manifest.display());
    let ctx = Context::open(&args.common)?;
    let items = BatchItem::from_manifest(&rows, &args.manifest, &ctx.store)?;
    let engine = ctx.engine();

    let budgets: Vec<u32> = match args.policy.mode {
        LoopMode::Base | LoopMode::Thinking => vec![0],
        _ => args.budgets.clone(),
    };
    let mut entries = Vec::with_capacity(budgets.len());
    for &budget in &budgets {
        let mut policy_args = args.policy.clone();
        policy_args.max_reflections = budget;
        policy_args.reroll_attempts = budget;
        let policy = policy_args.policy();
        tracing::info!(budget, sessions = items.len(), "running budget");
        let summary = BatchRunner::new(&engine)
            .concurrency(ctx.concurrency)
            .traces_to(ctx.out.join(format!("traces-b{budget}")))
            .run(&items, policy, ctx.seed)?;
        entries.push(BudgetEntry {
            budget,
            completion_rate: summary.completion_rate(),
            summary,
        });
    }

    let means: Vec<Option<f64>> = entries.iter().map(|e| e.summary.mean_overall).collect();
    let short = entries.iter().any(|e| e.completion_rate < MIN_COMPLETION);
    let report = BenchReport {
        seed: ctx.seed,
        mode: args.policy.mode,
        n: items.len(),
        cumulative_best: running_best(&means),
        budgets: entries,
    };
    write_json(&ctx.out.join("summary.json"), &report)?;
    print_json(&report)?;
    if short {
        tracing::warn!("fewer than {:.0}% of sessions completed", MIN_COMPLETION * 100.0);
        return Ok(Exit::Partial);
    }
    Ok(Exit::Ok)
}
