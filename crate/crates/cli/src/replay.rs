use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::Context as _;
use clap::Args;
use reasonloop_core::trace::{parse_events, parse_trace, TraceEvent};
use reasonloop_core::{Instruction, LoopMode};

use crate::context::print_json;
use crate::Exit;

#[derive(Args, Debug)]
pub struct ReplayArgs {
    /// Trace file (JSONL).
    trace: PathBuf,
    /// Print the parsed events as a JSON array instead of the timeline.
    #[arg(long)]
    json: bool,
}

fn quoted(i: &Instruction) -> String {
    format!("[{}] {:?}", serde_json::to_value(i.kind).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default(), i.text)
}

fn list(items: &[String]) -> String {
    if items.is_empty() {
        "-".to_string()
    } else {
        items.join("; ")
    }
}

/// One line per event, in trace order.
pub fn timeline(events: &[TraceEvent]) -> String {
    let mut out = String::new();
    for event in events {
        let _ = match event {
            TraceEvent::Header(h) => {
                let budget = match h.policy.mode {
                    LoopMode::ThinkingReflection => format!(", up to {} reflections", h.policy.max_reflection_rounds),
                    LoopMode::Reroll => format!(", up to {} rerolls", h.policy.reroll_attempts),
                    _ => String::new(),
                };
                let mode = serde_json::to_value(h.policy.mode).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default();
                writeln!(out, "session {} seed {} ({mode}{budget})", h.session_id, h.seed)
                    .and_then(|_| writeln!(out, "reference {}", h.reference.uri))
                    .and_then(|_| writeln!(out, "instruction {}", quoted(&h.original_instruction)))
            }
            TraceEvent::Think { thought } => match thought {
                Some(t) => writeln!(out, "think            {}", quoted(t)),
                None => writeln!(out, "think            (no thought)"),
            },
            TraceEvent::Edit {
                round,
                instruction,
                generated,
                latency_ms,
            } => writeln!(out, "round {round:<2} edit      {} -> {} ({latency_ms} ms)", quoted(instruction), generated.uri),
            TraceEvent::Describe { round, text } => writeln!(out, "round {round:<2} describe  {text:?}"),
            TraceEvent::Assess {
                round,
                consistency_score,
                conflicts,
                omissions,
                hallucinations,
                ..
            } => writeln!(
                out,
                "round {round:<2} assess    consistency {consistency_score:.4}; conflicts: {}; omissions: {}; hallucinations: {}",
                list(conflicts),
                list(omissions),
                list(hallucinations)
            ),
            TraceEvent::Conclude {
                round,
                tag,
                reasoning,
                refinement_instruction,
            } => match refinement_instruction {
                Some(r) => writeln!(out, "round {round:<2} conclude  {tag} {reasoning:?} -> {}", quoted(r)),
                None => writeln!(out, "round {round:<2} conclude  {tag} {reasoning:?}"),
            },
            TraceEvent::Score {
                round,
                semantic_consistency,
                perceptual_quality,
                overall,
            } => writeln!(
                out,
                "round {round:<2} score     SC {semantic_consistency:.4} PQ {perceptual_quality:.4} overall {overall:.4}"
            ),
            TraceEvent::Stop { status, chosen_round } => match chosen_round {
                Some(r) => writeln!(out, "stop             {status:?}, chosen round {r}"),
                None => writeln!(out, "stop             {status:?}, no round chosen"),
            },
        };
    }
    out
}

pub fn run(args: ReplayArgs) -> anyhow::Result<Exit> {
    let bytes = std::fs::read(&args.trace).with_context(|| format!("cannot read trace {}", args.trace.display()))?;
    parse_trace(&bytes).with_context(|| format!("invalid trace {}", args.trace.display()))?;
    let events: Vec<TraceEvent> = parse_events(&bytes)?.into_iter().map(|(_, e)| e).collect();
    if args.json {
        print_json(&events)?;
    } else {
        print!("{}", timeline(&events));
    }
    Ok(Exit::Ok)
}
