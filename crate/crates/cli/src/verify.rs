use clap::Args;
use reasonloop_core::objectives::{verify_suite, Check};
use serde::Serialize;

use crate::context::print_json;
use crate::Exit;

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// Seed for the randomized checks.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Print a JSON report instead of the table.
    #[arg(long)]
    json: bool,
}

#[derive(Serialize)]
struct VerifyReport {
    seed: u64,
    passed: usize,
    failed: usize,
    checks: Vec<Check>,
}

/// Fixed-width pass/fail table.
fn table(checks: &[Check]) -> String {
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    checks
        .iter()
        .map(|c| format!("{}  {:width$}  {}\n", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail))
        .collect()
}

pub fn run(args: VerifyArgs) -> anyhow::Result<Exit> {
    let checks = verify_suite(args.seed);
    let passed = checks.iter().filter(|c| c.passed).count();
    let failed = checks.len() - passed;
    if args.json {
        print_json(&VerifyReport {
            seed: args.seed,
            passed,
            failed,
            checks,
        })?;
    } else {
        print!("{}", table(&checks));
        println!("{passed} passed, {failed} failed");
    }
    Ok(if failed == 0 { Exit::Ok } else { Exit::Partial })
}
