//! Drivers for simulated CPUs: a deterministic action-list driver and a
//! real-thread stress driver.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{SchedCore, Scheduler, ScriptOp, TaskId, TaskStatus};
use crate::oracle::{interleave_enumerate, merge_with};

/// One step of the deterministic driver.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SimAction {
    Tick(usize),
    Yield(usize),
    /// Wake the n-th spawned task, if it sleeps.
    Wake(usize),
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SimOutcome {
    pub steps: usize,
    /// States, checked after every step, with a task current on two CPUs.
    pub double_run_states: usize,
    /// States whose running flags disagree with the CPU slots.
    pub inconsistent_states: usize,
    pub guard_violations: usize,
}

impl SimOutcome {
    pub fn merge(&mut self, other: &SimOutcome) {
        self.steps += other.steps;
        self.double_run_states += other.double_run_states;
        self.inconsistent_states += other.inconsistent_states;
        self.guard_violations += other.guard_violations;
    }
}

impl SchedCore {
    /// Applies `actions` in order, checking the single-run invariant after
    /// each. `tasks` maps `Wake` indices to task ids.
    pub fn run_actions(&self, tasks: &[TaskId], actions: &[SimAction]) -> SimOutcome {
        let mut out = SimOutcome::default();
        for &a in actions {
            self.apply(tasks, a);
            out.steps += 1;
            if self.double_booked() > 0 {
                out.double_run_states += 1;
            }
            if self.check_consistency().is_err() {
                out.inconsistent_states += 1;
            }
        }
        out.guard_violations = self.guard_violations();
        out
    }

    pub fn apply(&self, tasks: &[TaskId], action: SimAction) {
        match action {
            SimAction::Tick(cpu) => {
                let _ = self.tick(cpu);
            }
            SimAction::Yield(cpu) => {
                let _ = self.task_yield(cpu);
            }
            SimAction::Wake(i) => {
                if let Some(&id) = tasks.get(i) {
                    if self.task(id).is_some_and(|t| t.status() == TaskStatus::Sleeping) {
                        let _ = self.task_wake(id);
                    }
                }
            }
        }
    }
}

/// A random mix of ticks, yields and wakes.
pub fn random_actions(rng: &mut impl Rng, cpus: usize, tasks: usize, len: usize) -> Vec<SimAction> {
    (0..len)
        .map(|_| match rng.gen_range(0..10) {
            0..=5 => SimAction::Tick(rng.gen_range(0..cpus)),
            6 | 7 => SimAction::Yield(rng.gen_range(0..cpus)),
            _ => SimAction::Wake(rng.gen_range(0..tasks.max(1))),
        })
        .collect()
}

/// Builds a core with `cpus` CPUs and the policy from `make`, and spawns
/// `tasks` tasks running `script`.
pub fn setup(make: &dyn Fn(usize) -> Arc<dyn Scheduler>, cpus: usize, tasks: usize, script: &[ScriptOp]) -> (SchedCore, Vec<TaskId>) {
    let core = SchedCore::new(cpus);
    core.register_scheduler(make(cpus)).expect("fresh core");
    let ids = (0..tasks).map(|_| core.task_spawn(script.iter().copied(), ()).expect("registered")).collect();
    (core, ids)
}

/// Every interleaving of two CPUs' event words (each `per_cpu` long over
/// tick/yield) with a waker's two wakes, on two tasks.
pub fn exhaustive_two_cpus(make: &dyn Fn(usize) -> Arc<dyn Scheduler>, per_cpu: usize, script: &[ScriptOp]) -> SimOutcome {
    let words = |cpu: usize| -> Vec<Vec<SimAction>> {
        (0..1u32 << per_cpu)
            .map(|bits| {
                (0..per_cpu)
                    .map(|i| if bits >> i & 1 == 0 { SimAction::Tick(cpu) } else { SimAction::Yield(cpu) })
                    .collect()
            })
            .collect()
    };
    let lengths = [per_cpu, per_cpu, 2];
    let schedules: Vec<_> = interleave_enumerate(&lengths, lengths.iter().sum())
        .expect("within limit")
        .collect();
    let mut out = SimOutcome::default();
    for w0 in words(0) {
        for w1 in words(1) {
            let threads = [w0.clone(), w1.clone(), vec![SimAction::Wake(0), SimAction::Wake(1)]];
            for schedule in &schedules {
                let (core, tasks) = setup(make, 2, 2, script);
                out.merge(&core.run_actions(&tasks, &merge_with(&threads, schedule)));
            }
        }
    }
    out
}

/// `runs` seeded random schedules of `len` actions each.
pub fn random_schedules(
    make: &dyn Fn(usize) -> Arc<dyn Scheduler>,
    cpus: usize,
    tasks: usize,
    runs: usize,
    len: usize,
    seed: u64,
    script: &[ScriptOp],
) -> SimOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SimOutcome::default();
    for _ in 0..runs {
        let (core, ids) = setup(make, cpus, tasks, script);
        let actions = random_actions(&mut rng, cpus, tasks, len);
        out.merge(&core.run_actions(&ids, &actions));
    }
    out
}

/// Drives every CPU from its own OS thread for `ticks_per_cpu` ticks while
/// another thread wakes sleepers. The invariant is checked once all threads
/// have joined; guard reports are collected throughout.
pub fn run_threads(core: &Arc<SchedCore>, tasks: &[TaskId], ticks_per_cpu: usize) -> SimOutcome {
    let done = Arc::new(AtomicBool::new(false));
    std::thread::scope(|s| {
        let waker = {
            let done = Arc::clone(&done);
            let core = Arc::clone(core);
            s.spawn(move || {
                while !done.load(Ordering::Acquire) {
                    for &id in tasks {
                        if core.task(id).is_some_and(|t| t.status() == TaskStatus::Sleeping) {
                            let _ = core.task_wake(id);
                        }
                    }
                    std::thread::yield_now();
                }
            })
        };
        let cpus: Vec<_> = (0..core.cpu_count())
            .map(|cpu| {
                let core = Arc::clone(core);
                s.spawn(move || {
                    for _ in 0..ticks_per_cpu {
                        let _ = core.tick(cpu);
                    }
                })
            })
            .collect();
        for h in cpus {
            h.join().expect("cpu thread panicked");
        }
        done.store(true, Ordering::Release);
        waker.join().expect("waker thread panicked");
    });
    SimOutcome {
        steps: ticks_per_cpu * core.cpu_count(),
        double_run_states: (core.double_booked() > 0) as usize,
        inconsistent_states: core.check_consistency().is_err() as usize,
        guard_violations: core.guard_violations(),
    }
}

#[cfg(test)]
mod tests {
    use super::super::{RoundRobin, ScriptOp, Vruntime};
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn random_round_robin_is_clean() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let core = SchedCore::new(4);
            core.register_scheduler(Arc::new(RoundRobin::new(4))).unwrap();
            let tasks: Vec<_> = (0..8)
                .map(|_| core.task_spawn([ScriptOp::Run(2), ScriptOp::Sleep, ScriptOp::Run(3), ScriptOp::Yield], ()).unwrap())
                .collect();
            let actions = random_actions(&mut rng, 4, 8, 60);
            let out = core.run_actions(&tasks, &actions);
            assert_eq!(out, SimOutcome { steps: 60, ..Default::default() });
        }
    }

    #[test]
    fn real_threads_stay_consistent() {
        for policy in 0..2 {
            let core = Arc::new(SchedCore::new(4));
            if policy == 0 {
                core.register_scheduler(Arc::new(RoundRobin::new(4))).unwrap();
            } else {
                core.register_scheduler(Arc::new(Vruntime::new(4))).unwrap();
            }
            let script: Vec<_> = (0..20).flat_map(|_| [ScriptOp::Run(3), ScriptOp::Sleep, ScriptOp::Yield]).collect();
            let tasks: Vec<_> = (0..8).map(|_| core.task_spawn(script.clone(), ()).unwrap()).collect();
            let out = run_threads(&core, &tasks, 2000);
            assert_eq!((out.double_run_states, out.inconsistent_states, out.guard_violations), (0, 0, 0));
        }
    }
}
