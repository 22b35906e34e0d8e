use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use fk_cli::{
    bench_rows, bench_table, check_tcb, load_scenario, oracle_trace, render_deltas, run_scenario, snapshot_deltas,
    snapshot_of, snapshot_summary, violation_json, ParseError, RunOptions, EXIT_FAIL, EXIT_OK, EXIT_PARSE,
};

#[derive(Parser)]
#[command(name = "fk", version, about = "Framekernel model: scenarios, safety-overhead bench, UB oracle, snapshots")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct SeedArg {
    /// RNG seed; overrides the scenario's `seed`.
    #[arg(long, env = "FK_SEED")]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario file.
    Run {
        file: PathBuf,
        #[command(flatten)]
        seed: SeedArg,
        /// Abort on the first scheduler guard violation.
        #[arg(long)]
        strict_guard: bool,
    },
    /// Checked vs unchecked cost of each safety check.
    Bench {
        /// Regex over op names.
        #[arg(long)]
        filter: Option<String>,
        #[arg(long, default_value_t = 100_000)]
        iters: usize,
        /// Also write the rows as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Check a trace file, or run a scenario with the oracle attached.
    Oracle {
        #[arg(long, conflicts_with = "attach", required_unless_present = "attach")]
        trace: Option<PathBuf>,
        #[arg(long)]
        attach: Option<PathBuf>,
        /// Check every interleaving of the trace's threads.
        #[arg(long)]
        exhaustive: bool,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Dump or compare memory snapshots.
    Snapshot {
        #[command(subcommand)]
        cmd: SnapCmd,
    },
    /// Line counts and privileged-call findings for the service sources.
    Tcb {
        #[arg(long, default_value = "crates/core/src")]
        core: PathBuf,
        #[arg(long, default_value = "crates/services/src")]
        services: PathBuf,
    },
}

#[derive(Subcommand)]
enum SnapCmd {
    /// Snapshot of a scenario's final state, or of a snapshot file reloaded.
    Dump {
        input: PathBuf,
        /// Write the binary snapshot here; otherwise print a summary.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Frame-level differences between two snapshots or scenarios.
    Diff {
        a: PathBuf,
        b: PathBuf,
        #[command(flatten)]
        seed: SeedArg,
    },
}

fn run(cmd: Cmd) -> Result<i32> {
    match cmd {
        Cmd::Run { file, seed, strict_guard } => {
            let sc = load_scenario(&file)?;
            let report = run_scenario(&sc, &RunOptions { seed: seed.seed, strict_guard, attach: false })?;
            println!("seed {}", report.seed);
            for line in &report.log {
                println!("{line}");
            }
            if report.oracle_attached {
                for v in &report.violations {
                    println!("{}", violation_json(v));
                }
            }
            let failed = report.failed();
            println!("{} expects, {failed} failed", report.expects.len());
            Ok(if failed == 0 { EXIT_OK } else { EXIT_FAIL })
        }
        Cmd::Bench { filter, iters, csv } => {
            let rows = bench_rows(filter.as_deref(), iters)?;
            print!("{}", bench_table(&rows));
            if let Some(path) = csv {
                std::fs::write(&path, fk_core::bench::to_csv(&rows)).with_context(|| path.display().to_string())?;
            }
            Ok(EXIT_OK)
        }
        Cmd::Oracle { trace, attach, exhaustive, seed } => {
            let violations = if let Some(path) = trace {
                let text = std::fs::read_to_string(&path).with_context(|| path.display().to_string())?;
                let r = oracle_trace(&text, exhaustive, seed.seed.unwrap_or(0))?;
                eprintln!(
                    "{} schedules{}, {} violations",
                    r.schedules,
                    if r.exhaustive { " (all)" } else { "" },
                    r.violations.len()
                );
                r.violations
            } else {
                let path = attach.expect("clap requires one of --trace/--attach");
                let sc = load_scenario(&path)?;
                let report = run_scenario(&sc, &RunOptions { seed: seed.seed, strict_guard: false, attach: true })?;
                eprintln!("{} violations", report.violations.len());
                report.violations
            };
            for v in &violations {
                println!("{}", violation_json(v));
            }
            Ok(if violations.is_empty() { EXIT_OK } else { EXIT_FAIL })
        }
        Cmd::Snapshot { cmd: SnapCmd::Dump { input, out, seed } } => {
            let bytes = snapshot_of(&input, &RunOptions { seed: seed.seed, ..Default::default() })?;
            match out {
                Some(path) => std::fs::write(&path, &bytes).with_context(|| path.display().to_string())?,
                None => print!("{}", snapshot_summary(&bytes)?),
            }
            Ok(EXIT_OK)
        }
        Cmd::Snapshot { cmd: SnapCmd::Diff { a, b, seed } } => {
            let opts = RunOptions { seed: seed.seed, ..Default::default() };
            let deltas = snapshot_deltas(&snapshot_of(&a, &opts)?, &snapshot_of(&b, &opts)?)?;
            print!("{}", render_deltas(&deltas));
            Ok(EXIT_OK)
        }
        Cmd::Tcb { core, services } => {
            let report = check_tcb(&core, &services)?;
            print!("{}", report.render());
            Ok(if report.findings.is_empty() { EXIT_OK } else { EXIT_FAIL })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            let parse = e.chain().any(|c| c.is::<ParseError>() || c.is::<fk_core::oracle::TraceParseError>());
            ExitCode::from(if parse { EXIT_PARSE } else { EXIT_FAIL } as u8)
        }
    }
}
