//! Scheduler injection with simulated CPUs.
//!
//! A policy implements [`Scheduler`] and its per-CPU [`LocalRunQueue`]; the
//! framework owns tasks, per-CPU current slots and the context switch. Every
//! switch checks and sets the task's private running flag first, so a policy
//! that hands out a task already running elsewhere gets a
//! [`SchedReport::GuardViolation`] instead of a task on two CPUs.

mod policy;
mod sim;

use std::any::Any;
use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, OnceLock};

use parking_lot::{Mutex, RwLock};
use serde::Serialize;
use thiserror::Error;

pub use policy::{DoubleBooking, RoundRobin, Vruntime, Weight};
pub use sim::{exhaustive_two_cpus, random_actions, random_schedules, run_threads, setup, SimAction, SimOutcome};

pub type TaskId = u64;

/// One step of a task's scripted behaviour.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum ScriptOp {
    /// Run for this many ticks.
    Run(u32),
    Sleep,
    Yield,
    Exit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum TaskStatus {
    Runnable,
    Running,
    Sleeping,
    Exited,
}

struct TaskInner {
    status: TaskStatus,
    script: VecDeque<ScriptOp>,
    runtime: u64,
    last_cpu: Option<usize>,
}

pub struct Task {
    id: TaskId,
    is_running: AtomicBool,
    attrs: Box<dyn Any + Send + Sync>,
    inner: Mutex<TaskInner>,
}

impl fmt::Debug for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Task")
            .field("id", &self.id)
            .field("running", &self.is_running())
            .field("status", &self.status())
            .finish()
    }
}

/// What the current task did on a tick.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Progress {
    Ran,
    Yield,
    Sleep,
    Exit,
}

impl Task {
    pub fn id(&self) -> TaskId {
        self.id
    }

    /// Scheduler attributes attached at spawn, if they are a `T`.
    pub fn attrs<T: 'static>(&self) -> Option<&T> {
        self.attrs.downcast_ref()
    }

    pub fn is_running(&self) -> bool {
        self.is_running.load(Ordering::Acquire)
    }

    pub fn status(&self) -> TaskStatus {
        self.inner.lock().status
    }

    /// Ticks spent in `Run` ops.
    pub fn runtime(&self) -> u64 {
        self.inner.lock().runtime
    }

    pub fn last_cpu(&self) -> Option<usize> {
        self.inner.lock().last_cpu
    }

    fn advance(&self) -> Progress {
        let mut inner = self.inner.lock();
        match inner.script.front_mut() {
            Some(ScriptOp::Run(n)) => {
                if *n > 0 {
                    *n -= 1;
                    inner.runtime += 1;
                }
                if matches!(inner.script.front(), Some(ScriptOp::Run(0))) {
                    inner.script.pop_front();
                }
                Progress::Ran
            }
            Some(ScriptOp::Yield) => {
                inner.script.pop_front();
                Progress::Yield
            }
            Some(ScriptOp::Sleep) => {
                inner.script.pop_front();
                Progress::Sleep
            }
            Some(ScriptOp::Exit) | None => {
                inner.script.clear();
                Progress::Exit
            }
        }
    }

    fn set_status(&self, s: TaskStatus) {
        self.inner.lock().status = s;
    }
}

/// Why a run queue is being updated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateReason {
    Tick,
    Yield,
    /// The current task is about to leave the queue (sleep or exit).
    Dequeue,
}

/// Per-CPU view a policy hands to the framework inside `local_rq_with`.
pub trait LocalRunQueue {
    fn current(&self) -> Option<&Arc<Task>>;
    /// Accounts the current task. Returns true if it should be switched out.
    fn update_current(&mut self, reason: UpdateReason) -> bool;
    /// Makes the next task current (the old current, if any, goes back to
    /// the queue) and returns it.
    fn pick_next(&mut self) -> Option<Arc<Task>>;
    /// Removes the current task from the queue.
    fn dequeue_current(&mut self) -> Option<Arc<Task>>;
}

/// An injectable scheduling policy.
pub trait Scheduler: Send + Sync {
    /// A task became runnable. Returns the CPU whose queue took it.
    fn enqueue(&self, task: Arc<Task>) -> usize;
    /// Gives `f` exclusive access to `cpu`'s run queue for the call.
    fn local_rq_with(&self, cpu: usize, f: &mut dyn FnMut(&mut dyn LocalRunQueue));
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SchedError {
    #[error("a scheduler is already registered")]
    AlreadyRegistered,
    #[error("tasks exist; the scheduler must be registered first")]
    TooLate,
    #[error("no scheduler registered")]
    NotRegistered,
    #[error("no such cpu {0}")]
    NoSuchCpu(usize),
    #[error("no such task {0}")]
    NoSuchTask(TaskId),
}

/// Non-fatal findings from the switch path.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum SchedReport {
    /// The policy picked a task already running on another CPU.
    GuardViolation { cpu: usize, task: TaskId },
    /// The policy picked a task the framework never spawned.
    Forged { cpu: usize, task: TaskId },
    /// The policy picked a sleeping or exited task.
    NotRunnable { cpu: usize, task: TaskId, status: TaskStatus },
    /// Wake of a task that was not sleeping; ignored.
    WakeOfRunnable { task: TaskId },
}

/// What a scheduling step did on one CPU.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SwitchOutcome {
    pub cpu: usize,
    pub prev: Option<TaskId>,
    pub next: Option<TaskId>,
    pub refused: bool,
}

#[derive(Default)]
struct CpuState {
    current: Option<Arc<Task>>,
    ticks: u64,
}

pub struct SchedCore {
    cpus: Vec<Mutex<CpuState>>,
    policy: OnceLock<Arc<dyn Scheduler>>,
    tasks: RwLock<HashMap<TaskId, Arc<Task>>>,
    next_id: AtomicU64,
    reports: Mutex<Vec<SchedReport>>,
    strict: bool,
    guard_checks: bool,
}

impl fmt::Debug for SchedCore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SchedCore").field("cpus", &self.cpus.len()).field("strict", &self.strict).finish()
    }
}

impl SchedCore {
    pub fn new(cpus: usize) -> Self {
        Self::build(cpus, false, true)
    }

    /// Guard violations panic instead of being reported.
    pub fn new_strict(cpus: usize) -> Self {
        Self::build(cpus, true, true)
    }

    /// Switches without the running-flag check. Bench baseline only.
    pub fn new_unchecked(cpus: usize) -> Self {
        Self::build(cpus, false, false)
    }

    fn build(cpus: usize, strict: bool, guard_checks: bool) -> Self {
        assert!(cpus > 0, "need at least one cpu");
        Self {
            cpus: (0..cpus).map(|_| Mutex::new(CpuState::default())).collect(),
            policy: OnceLock::new(),
            tasks: RwLock::new(HashMap::new()),
            next_id: AtomicU64::new(1),
            reports: Mutex::new(Vec::new()),
            strict,
            guard_checks,
        }
    }

    pub fn cpu_count(&self) -> usize {
        self.cpus.len()
    }

    pub fn register_scheduler(&self, policy: Arc<dyn Scheduler>) -> Result<(), SchedError> {
        if self.policy.get().is_some() {
            return Err(SchedError::AlreadyRegistered);
        }
        if self.next_id.load(Ordering::Acquire) != 1 {
            return Err(SchedError::TooLate);
        }
        self.policy.set(policy).map_err(|_| SchedError::AlreadyRegistered)
    }

    fn policy(&self) -> Result<&Arc<dyn Scheduler>, SchedError> {
        self.policy.get().ok_or(SchedError::NotRegistered)
    }

    pub fn task_spawn(
        &self,
        script: impl IntoIterator<Item = ScriptOp>,
        attrs: impl Any + Send + Sync,
    ) -> Result<TaskId, SchedError> {
        let policy = self.policy()?;
        let id = self.next_id.fetch_add(1, Ordering::AcqRel);
        let task = Arc::new(Task {
            id,
            is_running: AtomicBool::new(false),
            attrs: Box::new(attrs),
            inner: Mutex::new(TaskInner {
                status: TaskStatus::Runnable,
                script: script.into_iter().collect(),
                runtime: 0,
                last_cpu: None,
            }),
        });
        self.tasks.write().insert(id, Arc::clone(&task));
        policy.enqueue(task);
        Ok(id)
    }

    pub fn task(&self, id: TaskId) -> Option<Arc<Task>> {
        self.tasks.read().get(&id).cloned()
    }

    pub fn task_ids(&self) -> Vec<TaskId> {
        let mut ids: Vec<_> = self.tasks.read().keys().copied().collect();
        ids.sort_unstable();
        ids
    }

    pub fn current(&self, cpu: usize) -> Option<TaskId> {
        self.cpus.get(cpu)?.lock().current.as_ref().map(|t| t.id)
    }

    pub fn cpu_ticks(&self, cpu: usize) -> u64 {
        self.cpus.get(cpu).map_or(0, |c| c.lock().ticks)
    }

    pub fn reports(&self) -> Vec<SchedReport> {
        self.reports.lock().clone()
    }

    pub fn guard_violations(&self) -> usize {
        self.reports.lock().iter().filter(|r| matches!(r, SchedReport::GuardViolation { .. })).count()
    }

    fn report(&self, r: SchedReport) {
        log::warn!("scheduler: {r:?}");
        if self.strict && matches!(r, SchedReport::GuardViolation { .. }) {
            panic!("guard violation: {r:?}");
        }
        self.reports.lock().push(r);
    }

    /// One timer tick on `cpu`: the current task advances its script and the
    /// policy decides whether to switch. An idle CPU asks for work.
    pub fn tick(&self, cpu: usize) -> Result<Option<SwitchOutcome>, SchedError> {
        let slot = self.cpus.get(cpu).ok_or(SchedError::NoSuchCpu(cpu))?;
        let mut st = slot.lock();
        st.ticks += 1;
        let reason = match st.current.as_ref().map(|t| t.advance()) {
            None => None,
            Some(Progress::Ran) => Some(UpdateReason::Tick),
            Some(Progress::Yield) => Some(UpdateReason::Yield),
            Some(Progress::Sleep) => {
                st.current.as_ref().unwrap().set_status(TaskStatus::Sleeping);
                Some(UpdateReason::Dequeue)
            }
            Some(Progress::Exit) => {
                st.current.as_ref().unwrap().set_status(TaskStatus::Exited);
                Some(UpdateReason::Dequeue)
            }
        };
        self.reschedule(cpu, &mut st, reason)
    }

    /// The current task on `cpu` yields.
    pub fn task_yield(&self, cpu: usize) -> Result<Option<SwitchOutcome>, SchedError> {
        self.leave(cpu, None)
    }

    /// The current task on `cpu` goes to sleep.
    pub fn task_sleep(&self, cpu: usize) -> Result<Option<SwitchOutcome>, SchedError> {
        self.leave(cpu, Some(TaskStatus::Sleeping))
    }

    /// The current task on `cpu` exits.
    pub fn task_exit(&self, cpu: usize) -> Result<Option<SwitchOutcome>, SchedError> {
        self.leave(cpu, Some(TaskStatus::Exited))
    }

    fn leave(&self, cpu: usize, status: Option<TaskStatus>) -> Result<Option<SwitchOutcome>, SchedError> {
        let slot = self.cpus.get(cpu).ok_or(SchedError::NoSuchCpu(cpu))?;
        let mut st = slot.lock();
        let reason = match (&st.current, status) {
            (None, _) => None,
            (Some(_), None) => Some(UpdateReason::Yield),
            (Some(t), Some(s)) => {
                t.set_status(s);
                Some(UpdateReason::Dequeue)
            }
        };
        self.reschedule(cpu, &mut st, reason)
    }

    /// Makes a sleeping task runnable again.
    pub fn task_wake(&self, id: TaskId) -> Result<(), SchedError> {
        let task = self.task(id).ok_or(SchedError::NoSuchTask(id))?;
        {
            let mut inner = task.inner.lock();
            if inner.status != TaskStatus::Sleeping {
                drop(inner);
                self.report(SchedReport::WakeOfRunnable { task: id });
                return Ok(());
            }
            inner.status = TaskStatus::Runnable;
        }
        // The CPU it slept on may still be finishing the switch away from it.
        while task.is_running() {
            std::hint::spin_loop();
        }
        self.policy()?.enqueue(task);
        Ok(())
    }

    fn reschedule(
        &self,
        cpu: usize,
        st: &mut CpuState,
        reason: Option<UpdateReason>,
    ) -> Result<Option<SwitchOutcome>, SchedError> {
        let policy = self.policy()?;
        let mut switch = false;
        let mut next = None;
        policy.local_rq_with(cpu, &mut |rq| {
            let wants = match reason {
                None => true,
                Some(UpdateReason::Dequeue) => {
                    rq.update_current(UpdateReason::Dequeue);
                    rq.dequeue_current();
                    true
                }
                Some(r) => rq.update_current(r) || r == UpdateReason::Yield,
            };
            if wants {
                switch = true;
                next = rq.pick_next();
            }
        });
        if !switch {
            return Ok(None);
        }
        Ok(Some(self.switch_to(cpu, st, next)))
    }

    fn switch_to(&self, cpu: usize, st: &mut CpuState, next: Option<Arc<Task>>) -> SwitchOutcome {
        let prev = st.current.clone();
        let prev_id = prev.as_ref().map(|t| t.id);
        let mut out = SwitchOutcome { cpu, prev: prev_id, next: prev_id, refused: false };
        let prev_keeps_running = prev.as_ref().is_some_and(|t| t.status() == TaskStatus::Running);

        let Some(next) = next else {
            if let Some(p) = prev {
                if prev_keeps_running {
                    p.set_status(TaskStatus::Runnable);
                }
                st.current = None;
                p.is_running.store(false, Ordering::Release);
            }
            out.next = None;
            return out;
        };
        if prev.as_ref().is_some_and(|p| Arc::ptr_eq(p, &next)) {
            return out;
        }

        let known = self.tasks.read().get(&next.id).is_some_and(|t| Arc::ptr_eq(t, &next));
        if !known {
            self.report(SchedReport::Forged { cpu, task: next.id });
        }
        // The flag is only ever set under the task lock, so load-then-store
        // here is an atomic test-and-set.
        let verdict = if !known {
            Err(None)
        } else {
            let mut inner = next.inner.lock();
            if self.guard_checks && next.is_running.load(Ordering::Acquire) {
                Err(Some(SchedReport::GuardViolation { cpu, task: next.id }))
            } else if self.guard_checks && inner.status != TaskStatus::Runnable {
                Err(Some(SchedReport::NotRunnable { cpu, task: next.id, status: inner.status }))
            } else {
                next.is_running.store(true, Ordering::Release);
                inner.status = TaskStatus::Running;
                inner.last_cpu = Some(cpu);
                Ok(())
            }
        };
        let admitted = match verdict {
            Ok(()) => true,
            Err(report) => {
                if let Some(r) = report {
                    self.report(r);
                }
                false
            }
        };

        if !admitted {
            out.refused = true;
            if !prev_keeps_running {
                if let Some(p) = prev {
                    st.current = None;
                    p.is_running.store(false, Ordering::Release);
                }
                out.next = None;
            }
            return out;
        }

        out.next = Some(next.id);
        st.current = Some(next);
        if let Some(p) = prev {
            if prev_keeps_running {
                p.set_status(TaskStatus::Runnable);
            }
            p.is_running.store(false, Ordering::Release);
        }
        out
    }

    /// Checks the single-run invariant and flag/state agreement. Only
    /// meaningful when no CPU is mid-switch.
    pub fn check_consistency(&self) -> Result<(), String> {
        let mut on_cpu: HashMap<TaskId, usize> = HashMap::new();
        for (cpu, slot) in self.cpus.iter().enumerate() {
            if let Some(t) = &slot.lock().current {
                if let Some(other) = on_cpu.insert(t.id, cpu) {
                    return Err(format!("task {} current on cpus {other} and {cpu}", t.id));
                }
                if !t.is_running() {
                    return Err(format!("task {} current on cpu {cpu} without its flag", t.id));
                }
            }
        }
        for t in self.tasks.read().values() {
            if t.is_running() && !on_cpu.contains_key(&t.id) {
                return Err(format!("task {} flagged running but on no cpu", t.id));
            }
        }
        Ok(())
    }

    /// Number of tasks that are current on more than one CPU.
    pub fn double_booked(&self) -> usize {
        let mut seen: HashMap<TaskId, usize> = HashMap::new();
        for slot in &self.cpus {
            if let Some(t) = &slot.lock().current {
                *seen.entry(t.id).or_default() += 1;
            }
        }
        seen.values().filter(|&&n| n > 1).count()
    }
}
