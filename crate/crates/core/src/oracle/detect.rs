//! UB detectors over a totally ordered trace.
//!
//! Races use a small happens-before model: per-thread program order plus
//! synchronization through metadata compare-and-exchange. A CAS on a frame
//! acquires everything released by earlier CASes on that frame and releases
//! the thread's clock; a plain metadata read acquires as well. Two metadata
//! accesses to one frame race when neither happens before the other and at
//! least one is a plain write.
//!
//! Mutability tracking keeps, for every byte, the most recent exposure; a
//! write to a byte whose latest exposure is read-only is a violation.

use std::collections::{BTreeMap, HashMap, HashSet};

use super::event::{ThreadId, TraceEvent, TraceOp, Violation, ViolationKind};
use super::interleave::Schedule;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
struct VClock(Vec<u64>);

impl VClock {
    fn get(&self, t: ThreadId) -> u64 {
        self.0.get(t as usize).copied().unwrap_or(0)
    }

    fn tick(&mut self, t: ThreadId) -> u64 {
        let t = t as usize;
        if self.0.len() <= t {
            self.0.resize(t + 1, 0);
        }
        self.0[t] += 1;
        self.0[t]
    }

    fn join(&mut self, other: &VClock) {
        if self.0.len() < other.0.len() {
            self.0.resize(other.0.len(), 0);
        }
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a = (*a).max(*b);
        }
    }
}

/// Last access of one category by each thread: (clock, event index).
type LastAccess = HashMap<ThreadId, (u64, usize)>;

#[derive(Default, Debug)]
struct FrameAccesses {
    sync: VClock,
    writes: LastAccess,
    reads: LastAccess,
    cas: LastAccess,
}

/// Incremental happens-before race detector over metadata events.
#[derive(Default, Debug)]
pub struct RaceDetector {
    threads: HashMap<ThreadId, VClock>,
    frames: HashMap<usize, FrameAccesses>,
    reported: HashSet<(usize, ThreadId, ThreadId)>,
}

impl RaceDetector {
    /// Feeds event number `idx`; returns racing pairs `(earlier, later)`.
    /// Each (frame, thread pair) is reported once.
    pub fn observe(&mut self, idx: usize, ev: &TraceEvent) -> Vec<[usize; 2]> {
        let Some(frame) = ev.op.meta_frame() else {
            return Vec::new();
        };
        let t = ev.thread;
        let clock = self.threads.entry(t).or_default();
        let epoch = clock.tick(t);
        let acc = self.frames.entry(frame).or_default();
        if matches!(ev.op, TraceOp::MetaRead(_) | TraceOp::MetaCas(_)) {
            clock.join(&acc.sync);
        }

        let unordered = |prior: &LastAccess| -> Vec<(ThreadId, usize)> {
            prior
                .iter()
                .filter(|&(&u, &(c, _))| u != t && c > clock.get(u))
                .map(|(&u, &(_, i))| (u, i))
                .collect()
        };
        let mut conflicts = unordered(&acc.writes);
        if matches!(ev.op, TraceOp::MetaWrite(_)) {
            conflicts.extend(unordered(&acc.reads));
            conflicts.extend(unordered(&acc.cas));
        }

        match ev.op {
            TraceOp::MetaRead(_) => {
                acc.reads.insert(t, (epoch, idx));
            }
            TraceOp::MetaWrite(_) => {
                acc.writes.insert(t, (epoch, idx));
            }
            TraceOp::MetaCas(_) => {
                acc.cas.insert(t, (epoch, idx));
                acc.sync = clock.clone();
            }
            _ => unreachable!(),
        }

        conflicts.sort_by_key(|&(_, i)| i);
        let mut out = Vec::new();
        for (u, i) in conflicts {
            if self.reported.insert((frame, u.min(t), u.max(t))) {
                out.push([i, idx]);
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Exposure {
    ReadOnly,
    Mutable,
}

/// Tracks the latest exposure of every byte as disjoint intervals.
#[derive(Default, Debug)]
pub struct MutabilityDetector {
    // start -> (end, mode, event index)
    ranges: BTreeMap<usize, (usize, Exposure, usize)>,
}

impl MutabilityDetector {
    pub fn observe(&mut self, idx: usize, ev: &TraceEvent) -> Option<[usize; 2]> {
        match ev.op {
            TraceOp::ExposeReadOnly { addr, len } => self.expose(addr, len, Exposure::ReadOnly, idx),
            TraceOp::ExposeMutable { addr, len } => self.expose(addr, len, Exposure::Mutable, idx),
            TraceOp::ByteWrite { addr, len } if len > 0 => {
                return self
                    .overlapping(addr, addr + len)
                    .find(|&(_, (_, mode, _))| mode == Exposure::ReadOnly)
                    .map(|(_, (_, _, exposed_at))| [exposed_at, idx]);
            }
            _ => {}
        }
        None
    }

    fn overlapping(&self, start: usize, end: usize) -> impl Iterator<Item = (usize, (usize, Exposure, usize))> + '_ {
        let first = self.ranges.range(..=start).next_back().map(|(&s, _)| s).unwrap_or(start);
        self.ranges
            .range(first..end)
            .filter(move |&(_, &(e, _, _))| e > start)
            .map(|(&s, &v)| (s, v))
    }

    fn expose(&mut self, addr: usize, len: usize, mode: Exposure, idx: usize) {
        if len == 0 {
            return;
        }
        let end = addr + len;
        let hits: Vec<_> = self.overlapping(addr, end).collect();
        for (s, (e, m, i)) in hits {
            self.ranges.remove(&s);
            if s < addr {
                self.ranges.insert(s, (addr, m, i));
            }
            if e > end {
                self.ranges.insert(end, (e, m, i));
            }
        }
        self.ranges.insert(addr, (end, mode, idx));
    }
}

/// Flags byte accesses to frames between their release and next claim.
#[derive(Debug)]
pub struct ReleaseDetector {
    frame_size: usize,
    released: HashMap<usize, usize>,
}

impl ReleaseDetector {
    pub fn new(frame_size: usize) -> Self {
        Self { frame_size, released: HashMap::new() }
    }

    pub fn observe(&mut self, idx: usize, ev: &TraceEvent) -> Option<[usize; 2]> {
        match ev.op {
            TraceOp::Release(f) => {
                self.released.insert(f, idx);
            }
            TraceOp::Claim(f) => {
                self.released.remove(&f);
            }
            TraceOp::ByteRead { addr, len } | TraceOp::ByteWrite { addr, len } if len > 0 => {
                let first = addr / self.frame_size;
                let last = (addr + len - 1) / self.frame_size;
                return (first..=last).find_map(|f| self.released.get(&f).map(|&r| [r, idx]));
            }
            _ => {}
        }
        None
    }
}

/// A merged trace together with the schedule that produced it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScheduledTrace {
    pub schedule: Schedule,
    pub events: Vec<TraceEvent>,
}

impl ScheduledTrace {
    /// Treats an already ordered trace as its own schedule.
    pub fn from_events(events: Vec<TraceEvent>) -> Self {
        Self { schedule: events.iter().map(|e| e.thread).collect(), events }
    }
}

fn witness(kind: ViolationKind, events: [usize; 2], trace: &ScheduledTrace) -> Violation {
    Violation { kind, events, schedule: trace.schedule.clone() }
}

pub fn detect_data_race(trace: &ScheduledTrace) -> Vec<Violation> {
    let mut det = RaceDetector::default();
    let mut out = Vec::new();
    for (i, ev) in trace.events.iter().enumerate() {
        for pair in det.observe(i, ev) {
            out.push(witness(ViolationKind::DataRace, pair, trace));
        }
    }
    out
}

pub fn detect_mutability(trace: &ScheduledTrace) -> Vec<Violation> {
    let mut det = MutabilityDetector::default();
    trace
        .events
        .iter()
        .enumerate()
        .filter_map(|(i, ev)| det.observe(i, ev))
        .map(|pair| witness(ViolationKind::MutabilityViolation, pair, trace))
        .collect()
}

pub fn detect_use_after_release(trace: &ScheduledTrace, frame_size: usize) -> Vec<Violation> {
    let mut det = ReleaseDetector::new(frame_size);
    trace
        .events
        .iter()
        .enumerate()
        .filter_map(|(i, ev)| det.observe(i, ev))
        .map(|pair| witness(ViolationKind::UseAfterRelease, pair, trace))
        .collect()
}

/// All three detectors, violations sorted by the later event.
pub fn detect_all(trace: &ScheduledTrace, frame_size: usize) -> Vec<Violation> {
    let mut out = detect_data_race(trace);
    out.extend(detect_mutability(trace));
    out.extend(detect_use_after_release(trace, frame_size));
    out.sort_by_key(|v| (v.events[1], v.events[0], v.kind));
    out
}
