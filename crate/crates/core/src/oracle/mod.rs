//! Trace-level UB oracle.
//!
//! Scripted threads of [`TraceOp`]s are merged by the interleaving engine and
//! checked by detectors for metadata data races, writes through read-only
//! exposures and byte accesses to released frames. The same detectors run
//! online when a [`Tracer`] is attached to a memory map.

mod attach;
mod detect;
mod event;
mod interleave;
mod trace_file;

pub use attach::Tracer;
pub use detect::{
    detect_all, detect_data_race, detect_mutability, detect_use_after_release, MutabilityDetector, RaceDetector,
    ReleaseDetector, ScheduledTrace,
};
pub use event::{ThreadId, TraceEvent, TraceOp, Violation, ViolationKind};
pub use interleave::{
    explore, interleave_enumerate, interleave_sample, interleaving_count, merge, merge_with, random_schedule, run_schedule,
    schedules_for, InterleaveError, Interleavings, Schedule, ScheduleSet, Step, DEFAULT_EXHAUSTIVE_LIMIT,
};
pub use trace_file::{parse_number, parse_trace, TraceFile, TraceParseError};

/// Reconstructed traces of the two UB classes the oracle targets.
pub mod cases {
    /// Non-atomic drop decrement racing a claim on the same frame.
    pub const DROP_CLAIM_RACE: &str = include_str!("../../traces/drop_claim_race.trace");
    /// The same pair with both sides as compare-and-exchange.
    pub const DROP_CLAIM_CAS: &str = include_str!("../../traces/drop_claim_cas.trace");
    /// Heap area exposed read-only, then written.
    pub const HEAP_INIT_READONLY: &str = include_str!("../../traces/heap_init_readonly.trace");
    /// Heap area exposed mutably, then written.
    pub const HEAP_INIT_MUTABLE: &str = include_str!("../../traces/heap_init_mutable.trace");
}

/// Result of checking a set of schedules.
#[derive(Clone, Debug)]
pub struct OracleReport {
    pub schedules_checked: usize,
    pub exhaustive: bool,
    pub coverage: f64,
    /// Number of schedules with at least one violation.
    pub schedules_with_violations: usize,
    /// Every violation found, grouped by schedule in enumeration order.
    pub violations: Vec<Violation>,
}

impl OracleReport {
    pub fn count(&self, kind: ViolationKind) -> usize {
        self.violations.iter().filter(|v| v.kind == kind).count()
    }
}

/// Runs all detectors over every interleaving of `threads` (or a seeded
/// sample of `samples` schedules when there are more than `limit` events).
pub fn check_interleavings(
    threads: &[Vec<TraceOp>],
    frame_size: usize,
    limit: usize,
    samples: usize,
    seed: u64,
) -> OracleReport {
    let lengths: Vec<usize> = threads.iter().map(Vec::len).collect();
    let set = schedules_for(&lengths, limit, samples, seed);
    let mut violations = Vec::new();
    let mut dirty = 0;
    for schedule in &set.schedules {
        let trace = ScheduledTrace { events: merge(threads, schedule), schedule: schedule.clone() };
        let found = detect_all(&trace, frame_size);
        if !found.is_empty() {
            dirty += 1;
        }
        violations.extend(found);
    }
    OracleReport {
        schedules_checked: set.schedules.len(),
        exhaustive: set.exhaustive,
        coverage: set.coverage,
        schedules_with_violations: dirty,
        violations,
    }
}

/// Checks a trace in the order it was recorded.
pub fn check_recorded(events: Vec<TraceEvent>, frame_size: usize) -> Vec<Violation> {
    detect_all(&ScheduledTrace::from_events(events), frame_size)
}

/// Re-runs a violation's schedule over `threads` and returns what the
/// detectors find.
pub fn replay(threads: &[Vec<TraceOp>], violation: &Violation, frame_size: usize) -> Vec<Violation> {
    let trace = ScheduledTrace { events: merge(threads, &violation.schedule), schedule: violation.schedule.clone() };
    detect_all(&trace, frame_size)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn threads_of(text: &str) -> Vec<Vec<TraceOp>> {
        parse_trace(text).unwrap().threads()
    }

    #[test]
    fn shipped_cases() {
        let race = check_interleavings(&threads_of(cases::DROP_CLAIM_RACE), 4096, 12, 0, 0);
        assert!(race.exhaustive);
        assert_eq!(race.schedules_checked, 6);
        assert!(race.count(ViolationKind::DataRace) >= 1);

        let fixed = check_interleavings(&threads_of(cases::DROP_CLAIM_CAS), 4096, 12, 0, 0);
        assert!(fixed.violations.is_empty());

        let ro = parse_trace(cases::HEAP_INIT_READONLY).unwrap();
        let v = check_recorded(ro.events, 4096);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::MutabilityViolation);

        let rw = parse_trace(cases::HEAP_INIT_MUTABLE).unwrap();
        assert!(check_recorded(rw.events, 4096).is_empty());

        let recorded = parse_trace(cases::DROP_CLAIM_RACE).unwrap();
        assert_eq!(check_recorded(recorded.events, 4096).len(), 1);
    }

    #[test]
    fn witnesses_replay() {
        let threads = threads_of(cases::DROP_CLAIM_RACE);
        let report = check_interleavings(&threads, 4096, 12, 0, 0);
        for v in &report.violations {
            assert!(replay(&threads, v, 4096).contains(v));
        }
    }
}
