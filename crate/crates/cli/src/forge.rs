use std::io::BufRead;
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use clap::{Args, Subcommand};
use reasonloop_core::engine::{read_manifest, BatchItem};
use reasonloop_core::forge::{forge_triples_to_dir, CompositionTarget, EditSource, ForgeError, PoolRow, ThinkingForge};

use crate::context::{CommonArgs, Context};
use crate::Exit;

#[derive(Subcommand, Debug)]
pub enum ForgeCommand {
    /// Classify, annotate and review a raw instruction pool into
    /// abstract-to-concrete pairs.
    Thinking(ThinkingArgs),
    /// Edit, reflect and correct source images into reflection triples.
    Triples(TriplesArgs),
}

#[derive(Args, Debug)]
pub struct ThinkingArgs {
    /// JSONL rows of `{"id", "instruction"}`.
    #[arg(long)]
    pool: PathBuf,
    #[arg(long, default_value_t = 400)]
    total: usize,
    /// Shares of simplified, abstracted and passthrough pairs.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.31, 0.44, 0.25])]
    fractions: Vec<f64>,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args, Debug)]
pub struct TriplesArgs {
    /// JSONL manifest of `{"id", "image", "instruction"}` rows.
    #[arg(long)]
    sources: PathBuf,
    #[arg(long, default_value_t = 500)]
    total: usize,
    /// Relative weights of success, reflection and failed triples.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [3.0, 1.0, 1.0])]
    ratio: Vec<f64>,
    #[command(flatten)]
    common: CommonArgs,
}

pub fn run(cmd: ForgeCommand) -> anyhow::Result<Exit> {
    match cmd {
        ForgeCommand::Thinking(args) => thinking(args),
        ForgeCommand::Triples(args) => triples(args),
    }
}

fn read_pool(path: &Path) -> anyhow::Result<Vec<PoolRow>> {
    let file = std::fs::File::open(path).with_context(|| format!("cannot read pool {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    anyhow::ensure!(!rows.is_empty(), "pool {} has no rows", path.display());
    Ok(rows)
}

/// Echo the written report and map a shortfall to a partial exit.
fn finish(out: &Path, result: Result<usize, ForgeError>) -> anyhow::Result<Exit> {
    let report_path = out.join("composition_report.json");
    if report_path.exists() {
        let report = std::fs::read(&report_path)?;
        std::io::Write::write_all(&mut std::io::stdout().lock(), &report)?;
    }
    match result {
        Ok(n) => {
            tracing::info!(items = n, "dataset written");
            Ok(Exit::Ok)
        }
        Err(e @ ForgeError::Shortfall(_)) => {
            eprintln!("error: {e}");
            Ok(Exit::Partial)
        }
        Err(e) => Err(e.into()),
    }
}

fn thinking(args: ThinkingArgs) -> anyhow::Result<Exit> {
    let rows = read_pool(&args.pool)?;
    let target = CompositionTarget {
        total: args.total,
        fraction_simplified: args.fractions[0],
        fraction_abstracted: args.fractions[1],
        fraction_passthrough: args.fractions[2],
        ..CompositionTarget::default()
    };
    target.validate()?;
    let ctx = Context::open(&args.common)?;
    let result = ThinkingForge::new(ctx.reasoner())
        .concurrency(ctx.concurrency)
        .forge_to_dir(&rows, &target, ctx.seed, &ctx.out)
        .map(|pairs| pairs.len());
    finish(&ctx.out, result)
}

fn triples(args: TriplesArgs) -> anyhow::Result<Exit> {
    let rows = read_manifest(&args.sources).with_context(|| format!("cannot read sources {}", args.sources.display()))?;
    anyhow::ensure!(!rows.is_empty(), "sources {} has no rows", args.sources.display());
    let target = CompositionTarget {
        total: args.total,
        triple_ratio: [args.ratio[0], args.ratio[1], args.ratio[2]],
        ..CompositionTarget::default()
    };
    target.validate()?;
    let ctx = Context::open(&args.common)?;
    let sources: Vec<EditSource> = BatchItem::from_manifest(&rows, &args.sources, &ctx.store)?
        .into_iter()
        .map(|item| EditSource {
            id: item.id,
            image: item.reference,
            instruction: item.instruction,
        })
        .collect();
    let result = forge_triples_to_dir(
        &sources,
        &ctx.backends.editors,
        &ctx.reasoner(),
        &target,
        ctx.seed,
        ctx.concurrency,
        &ctx.out,
    )
    .map(|t| t.len());
    finish(&ctx.out, result)
}
