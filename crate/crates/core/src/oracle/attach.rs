//! Live attachment: the memory model emits one event per metadata or byte
//! operation into a [`Tracer`], which runs the detectors online.

use std::cell::Cell;
use std::collections::HashMap;
use std::sync::Arc;

use parking_lot::Mutex;

use super::detect::{MutabilityDetector, RaceDetector, ReleaseDetector};
use super::event::{ThreadId, TraceEvent, TraceOp, Violation, ViolationKind};

thread_local! {
    static SIM_THREAD: Cell<Option<ThreadId>> = const { Cell::new(None) };
}

struct State {
    log: Vec<TraceEvent>,
    races: RaceDetector,
    mutability: MutabilityDetector,
    release: ReleaseDetector,
    violations: Vec<Violation>,
    os_threads: HashMap<std::thread::ThreadId, ThreadId>,
}

pub struct Tracer {
    state: Mutex<State>,
}

impl std::fmt::Debug for Tracer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let st = self.state.lock();
        f.debug_struct("Tracer")
            .field("events", &st.log.len())
            .field("violations", &st.violations.len())
            .finish()
    }
}

impl Tracer {
    pub fn new(frame_size: usize) -> Arc<Self> {
        Arc::new(Self {
            state: Mutex::new(State {
                log: Vec::new(),
                races: RaceDetector::default(),
                mutability: MutabilityDetector::default(),
                release: ReleaseDetector::new(frame_size),
                violations: Vec::new(),
                os_threads: HashMap::new(),
            }),
        })
    }

    /// Runs `f` with events attributed to simulated thread `tid` instead of
    /// the calling OS thread.
    pub fn with_thread<R>(tid: ThreadId, f: impl FnOnce() -> R) -> R {
        let prev = SIM_THREAD.with(|c| c.replace(Some(tid)));
        struct Restore(Option<ThreadId>);
        impl Drop for Restore {
            fn drop(&mut self) {
                SIM_THREAD.with(|c| c.set(self.0));
            }
        }
        let _restore = Restore(prev);
        f()
    }

    pub fn emit(&self, op: TraceOp) {
        let mut st = self.state.lock();
        let thread = match SIM_THREAD.with(Cell::get) {
            Some(t) => t,
            None => {
                let next = st.os_threads.len() as ThreadId;
                *st.os_threads.entry(std::thread::current().id()).or_insert(next)
            }
        };
        let ev = TraceEvent { thread, op };
        let idx = st.log.len();
        st.log.push(ev);
        let mut found: Vec<(ViolationKind, [usize; 2])> = st
            .races
            .observe(idx, &ev)
            .into_iter()
            .map(|p| (ViolationKind::DataRace, p))
            .collect();
        if let Some(p) = st.mutability.observe(idx, &ev) {
            found.push((ViolationKind::MutabilityViolation, p));
        }
        if let Some(p) = st.release.observe(idx, &ev) {
            found.push((ViolationKind::UseAfterRelease, p));
        }
        for (kind, events) in found {
            let schedule = st.log.iter().map(|e| e.thread).collect();
            st.violations.push(Violation { kind, events, schedule });
        }
    }

    pub fn violations(&self) -> Vec<Violation> {
        self.state.lock().violations.clone()
    }

    pub fn event_count(&self) -> usize {
        self.state.lock().log.len()
    }

    pub fn events(&self) -> Vec<TraceEvent> {
        self.state.lock().log.clone()
    }

    /// Per-thread op lists of the log, indexed by thread id.
    pub fn threads(&self) -> Vec<Vec<TraceOp>> {
        let st = self.state.lock();
        let n = st.log.iter().map(|e| e.thread as usize + 1).max().unwrap_or(0);
        let mut out = vec![Vec::new(); n];
        for e in &st.log {
            out[e.thread as usize].push(e.op);
        }
        out
    }
}
