//! Library side of the `fk` command: scenario parsing and execution, plus
//! the bench, oracle, snapshot and TCB report commands.

pub mod runner;
pub mod scenario;

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use fk_core::bench::{self, BenchRow};
use fk_core::oracle::{check_interleavings, detect_all, parse_trace, ScheduledTrace, Violation, DEFAULT_EXHAUSTIVE_LIMIT};
use fk_core::snapshot::SNAPSHOT_MAGIC;
use fk_core::{snapshot_diff, FrameDelta, MemoryMap, Snapshot};
use regex::Regex;

pub use runner::{run_scenario, RunOptions, RunReport};
pub use scenario::{parse_scenario, ParseError, Scenario};

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_PARSE: i32 = 2;

/// Schedules sampled when a trace is too long to enumerate.
pub const ORACLE_SAMPLES: usize = 10_000;

pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_scenario(&text).map_err(|e| anyhow::Error::new(e).context(path.display().to_string()))
}

pub fn bench_rows(filter: Option<&str>, iters: usize) -> Result<Vec<BenchRow>> {
    let re = filter.map(Regex::new).transpose().context("bad --filter")?;
    Ok(bench::run_all(|op| re.as_ref().is_none_or(|r| r.is_match(op)), iters))
}

pub fn bench_table(rows: &[BenchRow]) -> String {
    let mut s = format!("{:<18} {:>12} {:>12} {:>8} {:>9}\n", "op", "checked ns", "unchecked ns", "ratio", "limit");
    for r in rows {
        let limit = match bench::threshold(&r.op) {
            Some(t) => format!("{:.0}% {}", t * 100.0, if r.within_threshold() { "ok" } else { "over" }),
            None => "-".to_string(),
        };
        let _ = writeln!(
            s,
            "{:<18} {:>12.2} {:>12.2} {:>7.2}% {:>9}",
            r.op,
            r.checked_ns,
            r.unchecked_ns,
            r.ratio() * 100.0,
            limit
        );
    }
    s
}

pub struct OracleRun {
    pub violations: Vec<Violation>,
    pub schedules: usize,
    pub exhaustive: bool,
}

/// Checks a trace file. By default only the recorded order is checked;
/// `exhaustive` checks every interleaving of its threads.
pub fn oracle_trace(text: &str, exhaustive: bool, seed: u64) -> Result<OracleRun> {
    let trace = parse_trace(text)?;
    if !exhaustive {
        let st = ScheduledTrace::from_events(trace.events.clone());
        return Ok(OracleRun { violations: detect_all(&st, trace.frame_size), schedules: 1, exhaustive: false });
    }
    let r = check_interleavings(&trace.threads(), trace.frame_size, DEFAULT_EXHAUSTIVE_LIMIT, ORACLE_SAMPLES, seed);
    Ok(OracleRun { violations: r.violations, schedules: r.schedules_checked, exhaustive: r.exhaustive })
}

pub fn violation_json(v: &Violation) -> String {
    serde_json::to_string(v).expect("violations serialize")
}

pub fn is_snapshot(bytes: &[u8]) -> bool {
    bytes.starts_with(SNAPSHOT_MAGIC)
}

/// Snapshot bytes for `path`: a snapshot file is reloaded and dumped again,
/// a scenario is run first.
pub fn snapshot_of(path: &Path, opts: &RunOptions) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if is_snapshot(&bytes) {
        let map = MemoryMap::from_snapshot(&bytes).with_context(|| path.display().to_string())?;
        return Ok(map.snapshot());
    }
    let text = String::from_utf8(bytes).context("neither a snapshot nor a text scenario")?;
    let sc = parse_scenario(&text).map_err(|e| anyhow::Error::new(e).context(path.display().to_string()))?;
    Ok(run_scenario(&sc, opts)?.map.snapshot())
}

pub fn snapshot_summary(bytes: &[u8]) -> Result<String> {
    let s = Snapshot::parse(bytes)?;
    let mut out = format!("{} frames of {} bytes\n", s.frame_count, s.frame_size);
    for (i, m) in s.meta.iter().enumerate().filter(|(_, m)| !m.state.is_unused()) {
        let _ = writeln!(out, "frame {i:>6}: refs {:>3} {:?} payload {:#x}", m.ref_count, m.state, m.tag.payload);
    }
    Ok(out)
}

pub fn snapshot_deltas(a: &[u8], b: &[u8]) -> Result<Vec<FrameDelta>> {
    Ok(snapshot_diff(&Snapshot::parse(a)?, &Snapshot::parse(b)?)?)
}

pub fn render_deltas(deltas: &[FrameDelta]) -> String {
    let mut out = String::new();
    for d in deltas {
        let _ = write!(out, "frame {:>6}:", d.frame);
        if d.before != d.after {
            let _ = write!(
                out,
                " refs {}->{} {:?}->{:?}",
                d.before.ref_count, d.after.ref_count, d.before.state, d.after.state
            );
        }
        if let Some(first) = d.first_change {
            let _ = write!(out, " {} bytes changed from offset {first:#x}", d.bytes_changed);
        }
        out.push('\n');
    }
    let _ = writeln!(out, "{} frames differ", deltas.len());
    out
}

pub fn check_tcb(core: &Path, services: &Path) -> Result<fk_services::TcbReport> {
    if !core.is_dir() || !services.is_dir() {
        bail!("source roots not found: {} {}", core.display(), services.display());
    }
    Ok(fk_services::tcb_scan(core, services)?)
}
