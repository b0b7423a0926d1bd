mod bench;
mod context;
mod edit;
mod forge;
mod replay;
mod verify;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;

/// Process exit statuses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Ok = 0,
    Config = 1,
    Failed = 2,
    Partial = 3,
}

#[derive(Parser)]
#[command(name = "reasonloop", version, about = "Think, edit, reflect: an instruction-driven image editing loop")]
struct Cli {
    /// Raise log verbosity on stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one editing session and print its outcome.
    Edit(edit::EditArgs),
    /// Run a manifest of sessions across reflection budgets.
    Bench(bench::BenchArgs),
    /// Build training datasets.
    #[command(subcommand)]
    Forge(forge::ForgeCommand),
    /// Check the training objectives against their oracles.
    VerifyObjectives(verify::VerifyArgs),
    /// Render a trace as a round-by-round timeline.
    Replay(replay::ReplayArgs),
}

fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(default));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_target(false)
        .init();
}

/// The error chain, skipping causes whose text an outer message already
/// includes.
fn describe(e: &anyhow::Error) -> String {
    let mut message = e.to_string();
    for cause in e.chain().skip(1) {
        let text = cause.to_string();
        if !message.contains(&text) {
            message = format!("{message}: {text}");
        }
    }
    message
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { Exit::Config } else { Exit::Ok };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    init_logging(cli.verbose);
    let result = match cli.command {
        Command::Edit(args) => edit::run(args),
        Command::Bench(args) => bench::run(args),
        Command::Forge(cmd) => forge::run(cmd),
        Command::VerifyObjectives(args) => verify::run(args),
        Command::Replay(args) => replay::run(args),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(Exit::Config as u8)
        }
    }
}
