use std::path::PathBuf;

use anyhow::Context as _;
use clap::Args;
use reasonloop_core::trace::write_trace;
use reasonloop_core::{Instruction, InstructionKind, LoopMode, LoopPolicy, ReflectionVariant, SessionStatus};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::context::{print_json, CommonArgs, Context};
use crate::Exit;

/// Parse a snake_case enum value through its serde representation.
pub fn parse_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

/// Loop policy flags shared by `edit` and `bench`.
#[derive(Args, Debug, Clone)]
pub struct PolicyArgs {
    /// base, thinking, thinking_reflection or reroll.
    #[arg(long, default_value = "thinking_reflection", value_parser = parse_enum::<LoopMode>)]
    pub mode: LoopMode,
    /// Reflection budget for thinking_reflection.
    #[arg(long, default_value_t = 2)]
    pub max_reflections: u32,
    /// Extra attempts for reroll.
    #[arg(long, default_value_t = 2)]
    pub reroll_attempts: u32,
    /// dual_image, single_image or multi_round.
    #[arg(long, default_value = "multi_round", value_parser = parse_enum::<ReflectionVariant>)]
    pub variant: ReflectionVariant,
    /// Keep refining from the reference after a success verdict.
    #[arg(long)]
    pub no_stop_on_success: bool,
}

impl PolicyArgs {
    pub fn policy(&self) -> LoopPolicy {
        LoopPolicy {
            mode: self.mode,
            max_reflection_rounds: if self.mode == LoopMode::ThinkingReflection { self.max_reflections } else { 0 },
            reroll_attempts: if self.mode == LoopMode::Reroll { self.reroll_attempts } else { 0 },
            reflection_variant: self.variant,
            stop_on_success_tag: !self.no_stop_on_success,
        }
    }
}

#[derive(Args, Debug)]
pub struct EditArgs {
    /// Reference image (PNG or JPEG).
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    instruction: String,
    /// abstract or concrete.
    #[arg(long, default_value = "abstract", value_parser = parse_enum::<InstructionKind>)]
    kind: InstructionKind,
    #[command(flatten)]
    policy: PolicyArgs,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Serialize)]
struct EditReport {
    session_id: String,
    seed: u64,
    status: SessionStatus,
    chosen_round: Option<u32>,
    rounds_executed: usize,
    reference: String,
    final_image: Option<String>,
    trace: String,
    error: Option<String>,
}

pub fn run(args: EditArgs) -> anyhow::Result<Exit> {
    let ctx = Context::open(&args.common)?;
    let reference = ctx
        .store
        .import(&args.image)
        .with_context(|| format!("cannot import reference image {}", args.image.display()))?;
    let instruction = Instruction::new(&args.instruction, args.kind)?;
    let policy = args.policy.policy();
    let run = ctx.engine().run_session(&reference, &instruction, policy, ctx.seed)?;

    let traces = ctx.out.join("traces");
    std::fs::create_dir_all(&traces)?;
    let trace_path = traces.join(format!("{}.jsonl", run.session.session_id));
    let file = std::fs::File::create(&trace_path).with_context(|| format!("cannot write {}", trace_path.display()))?;
    write_trace(&run.session, std::io::BufWriter::new(file))?;
    if let Some(e) = &run.error {
        tracing::warn!(error = %e, "session ended early");
    }

    let status = run.session.status;
    print_json(&EditReport {
        session_id: run.session.session_id.to_string(),
        seed: ctx.seed,
        status,
        chosen_round: run.outcome.as_ref().map(|o| o.chosen_round),
        rounds_executed: run.session.rounds.len(),
        reference: reference.uri.clone(),
        final_image: run.outcome.as_ref().map(|o| o.final_image.uri.clone()),
        trace: ctx.relative(&trace_path),
        error: run.error.as_ref().map(ToString::to_string),
    })?;
    Ok(if status == SessionStatus::Failed { Exit::Failed } else { Exit::Ok })
}
