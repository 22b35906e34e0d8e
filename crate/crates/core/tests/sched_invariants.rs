use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Instant;

use fk_core::oracle::{explore, Step};
use fk_core::sched::{
    exhaustive_two_cpus, random_schedules, setup, DoubleBooking, RoundRobin, SimAction, TaskStatus, Vruntime, Weight,
};
use fk_core::{SchedCore, Scheduler, ScriptOp};

const SCRIPT: &[ScriptOp] = &[ScriptOp::Run(1), ScriptOp::Sleep, ScriptOp::Run(2), ScriptOp::Yield, ScriptOp::Run(1)];

fn rr(cpus: usize) -> Arc<dyn Scheduler> {
    Arc::new(RoundRobin::new(cpus))
}

fn fair(cpus: usize) -> Arc<dyn Scheduler> {
    Arc::new(Vruntime::new(cpus))
}

fn adversary(_cpus: usize) -> Arc<dyn Scheduler> {
    Arc::new(DoubleBooking::default())
}

#[test]
fn exhaustive_two_by_two_is_clean() {
    let t = Instant::now();
    for make in [rr as fn(usize) -> Arc<dyn Scheduler>, fair] {
        let out = exhaustive_two_cpus(&make, 4, SCRIPT);
        // 16 * 16 word pairs times 10!/(4!4!2!) interleavings, 10 steps each.
        assert_eq!(out.steps, 256 * 3150 * 10);
        assert_eq!((out.double_run_states, out.inconsistent_states, out.guard_violations), (0, 0, 0));
    }
    assert!(t.elapsed().as_secs() < 60);
}

#[test]
fn ten_thousand_random_schedules_are_clean() {
    for make in [rr as fn(usize) -> Arc<dyn Scheduler>, fair] {
        let out = random_schedules(&make, 4, 8, 10_000, 40, 77, SCRIPT);
        assert_eq!(out.steps, 400_000);
        assert_eq!((out.double_run_states, out.inconsistent_states, out.guard_violations), (0, 0, 0));
    }
}

#[test]
fn adversarial_policy_is_caught_and_state_stays_consistent() {
    let out = random_schedules(&adversary, 4, 8, 200, 40, 3, SCRIPT);
    assert!(out.guard_violations >= 1);
    assert_eq!((out.double_run_states, out.inconsistent_states), (0, 0));
    let out = exhaustive_two_cpus(&adversary, 2, SCRIPT);
    assert!(out.guard_violations >= 1);
    assert_eq!((out.double_run_states, out.inconsistent_states), (0, 0));
}

#[test]
fn spawn_from_two_threads_interleaved() {
    type S = (SchedCore, Vec<u64>);
    let init = || {
        let core = SchedCore::new(2);
        core.register_scheduler(Arc::new(RoundRobin::new(2))).unwrap();
        (core, Vec::new())
    };
    let spawn = || -> Step<'static, S> {
        Box::new(|s: &mut S| {
            let id = s.0.task_spawn([ScriptOp::Run(1)], ()).unwrap();
            s.1.push(id);
        })
    };
    let threads = vec![vec![spawn(), spawn()], vec![spawn(), spawn()]];
    let finals = explore(init, &threads, 12, |_, _| {}).unwrap();
    assert_eq!(finals.len(), 6);
    for (_, (core, ids)) in finals {
        let distinct: BTreeSet<_> = ids.iter().copied().collect();
        assert_eq!(distinct.len(), 4);
        assert_eq!(core.task_ids(), distinct.into_iter().collect::<Vec<_>>());
        // Every spawned task is reachable through the policy.
        let mut seen = BTreeSet::new();
        for _ in 0..8 {
            for cpu in 0..2 {
                core.tick(cpu).unwrap();
                seen.extend(core.current(cpu));
            }
        }
        assert_eq!(seen.len(), 4);
    }
}

#[test]
fn spawn_from_two_os_threads() {
    let core = Arc::new(SchedCore::new(4));
    core.register_scheduler(rr(4)).unwrap();
    let ids: Vec<u64> = std::thread::scope(|s| {
        let hs: Vec<_> = (0..2)
            .map(|_| s.spawn(|| (0..500).map(|_| core.task_spawn([ScriptOp::Run(1)], ()).unwrap()).collect::<Vec<_>>()))
            .collect();
        hs.into_iter().flat_map(|h| h.join().unwrap()).collect()
    });
    let distinct: BTreeSet<_> = ids.iter().collect();
    assert_eq!(distinct.len(), 1000);
    assert_eq!(core.task_ids().len(), 1000);
}

#[test]
fn sleeper_is_repicked_after_wake() {
    for make in [rr as fn(usize) -> Arc<dyn Scheduler>, fair] {
        let (core, ids) = setup(&make, 2, 3, &[ScriptOp::Sleep, ScriptOp::Run(100)]);
        for cpu in 0..2 {
            core.tick(cpu).unwrap();
        }
        for _ in 0..4 {
            for cpu in 0..2 {
                core.tick(cpu).unwrap();
            }
        }
        assert!(ids.iter().all(|&id| core.task(id).unwrap().status() == TaskStatus::Sleeping));
        core.task_wake(ids[1]).unwrap();
        let mut repicked = false;
        for _ in 0..10 {
            for cpu in 0..2 {
                core.tick(cpu).unwrap();
                repicked |= core.current(cpu) == Some(ids[1]);
            }
        }
        assert!(repicked);
        assert!(core.task(ids[1]).unwrap().runtime() > 0);
    }
}

#[test]
fn flag_agrees_with_cpu_slots_at_every_step() {
    let (core, ids) = setup(&rr, 3, 5, SCRIPT);
    let mut rng_actions = Vec::new();
    for i in 0..3000 {
        rng_actions.push(match i % 7 {
            0..=2 => SimAction::Tick(i % 3),
            3 => SimAction::Yield((i / 7) % 3),
            _ => SimAction::Wake(i % 5),
        });
    }
    for a in rng_actions {
        core.apply(&ids, a);
        let current: BTreeSet<u64> = (0..3).filter_map(|c| core.current(c)).collect();
        for &id in &ids {
            assert_eq!(core.task(id).unwrap().is_running(), current.contains(&id));
        }
    }
}

#[test]
fn weighted_split_over_a_thousand_ticks() {
    let core = SchedCore::new(1);
    core.register_scheduler(Arc::new(Vruntime::new(1))).unwrap();
    let heavy = core.task_spawn([ScriptOp::Run(u32::MAX)], Weight(2)).unwrap();
    let light = core.task_spawn([ScriptOp::Run(u32::MAX)], Weight(1)).unwrap();
    for _ in 0..1000 {
        core.tick(0).unwrap();
    }
    let (h, l) = (core.task(heavy).unwrap().runtime(), core.task(light).unwrap().runtime());
    assert!((633..=700).contains(&h), "{h}:{l}");
    assert!((995..=1000).contains(&(h + l)));
}
