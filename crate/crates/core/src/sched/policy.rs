//! Shipped scheduling policies.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;

use super::{LocalRunQueue, Scheduler, Task, TaskId, UpdateReason};

/// Scheduler weight attribute; tasks without one weigh 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Weight(pub u32);

fn least_loaded(lens: impl Iterator<Item = usize>) -> usize {
    lens.enumerate().min_by_key(|&(i, n)| (n, i)).map_or(0, |(i, _)| i)
}

struct RrQueue {
    queue: VecDeque<Arc<Task>>,
    current: Option<Arc<Task>>,
    slice_used: u32,
    time_slice: u32,
}

impl LocalRunQueue for RrQueue {
    fn current(&self) -> Option<&Arc<Task>> {
        self.current.as_ref()
    }

    fn update_current(&mut self, reason: UpdateReason) -> bool {
        match reason {
            UpdateReason::Tick => {
                self.slice_used += 1;
                self.slice_used >= self.time_slice && !self.queue.is_empty()
            }
            UpdateReason::Yield | UpdateReason::Dequeue => true,
        }
    }

    fn pick_next(&mut self) -> Option<Arc<Task>> {
        if let Some(cur) = self.current.take() {
            self.queue.push_back(cur);
        }
        self.slice_used = 0;
        self.current = self.queue.pop_front();
        self.current.clone()
    }

    fn dequeue_current(&mut self) -> Option<Arc<Task>> {
        self.current.take()
    }
}

/// FIFO round-robin, one queue per CPU. New tasks go to the CPU with the
/// fewest queued tasks.
pub struct RoundRobin {
    cpus: Vec<Mutex<RrQueue>>,
    enqueued: AtomicUsize,
}

impl RoundRobin {
    pub fn new(cpus: usize) -> Self {
        Self::with_time_slice(cpus, 1)
    }

    pub fn with_time_slice(cpus: usize, ticks: u32) -> Self {
        Self {
            cpus: (0..cpus)
                .map(|_| {
                    Mutex::new(RrQueue { queue: VecDeque::new(), current: None, slice_used: 0, time_slice: ticks.max(1) })
                })
                .collect(),
            enqueued: AtomicUsize::new(0),
        }
    }

    pub fn enqueued(&self) -> usize {
        self.enqueued.load(Ordering::Relaxed)
    }

    pub fn queue_len(&self, cpu: usize) -> usize {
        self.cpus[cpu].lock().queue.len()
    }
}

impl Scheduler for RoundRobin {
    fn enqueue(&self, task: Arc<Task>) -> usize {
        self.enqueued.fetch_add(1, Ordering::Relaxed);
        let cpu = least_loaded(self.cpus.iter().map(|q| {
            let q = q.lock();
            q.queue.len() + q.current.is_some() as usize
        }));
        self.cpus[cpu].lock().queue.push_back(task);
        cpu
    }

    fn local_rq_with(&self, cpu: usize, f: &mut dyn FnMut(&mut dyn LocalRunQueue)) {
        f(&mut *self.cpus[cpu].lock());
    }
}

/// Virtual runtime grows by this much per tick at weight 1.
const VRUNTIME_UNIT: u64 = 1_000_000;

struct FairQueue {
    /// (vruntime, arrival) -> task
    queue: BTreeMap<(u64, u64), Arc<Task>>,
    current: Option<(u64, Arc<Task>)>,
    arrivals: u64,
}

impl FairQueue {
    fn min_vruntime(&self) -> Option<u64> {
        self.queue.keys().next().map(|k| k.0)
    }

    fn push(&mut self, vr: u64, task: Arc<Task>) {
        self.arrivals += 1;
        self.queue.insert((vr, self.arrivals), task);
    }
}

struct FairRq<'a> {
    q: &'a mut FairQueue,
    vruntimes: &'a Mutex<HashMap<TaskId, u64>>,
}

impl LocalRunQueue for FairRq<'_> {
    fn current(&self) -> Option<&Arc<Task>> {
        self.q.current.as_ref().map(|(_, t)| t)
    }

    fn update_current(&mut self, reason: UpdateReason) -> bool {
        let min = self.q.min_vruntime();
        let Some((vr, task)) = self.q.current.as_mut() else {
            return true;
        };
        if reason == UpdateReason::Tick {
            let w = task.attrs::<Weight>().map_or(1, |w| w.0.max(1)) as u64;
            *vr += VRUNTIME_UNIT / w;
        }
        self.vruntimes.lock().insert(task.id(), *vr);
        match reason {
            UpdateReason::Tick => min.is_some_and(|m| m < *vr),
            _ => true,
        }
    }

    fn pick_next(&mut self) -> Option<Arc<Task>> {
        if let Some((vr, t)) = self.q.current.take() {
            self.q.push(vr, t);
        }
        let (&(vr, arrival), _) = self.q.queue.iter().next()?;
        let task = self.q.queue.remove(&(vr, arrival))?;
        self.q.current = Some((vr, Arc::clone(&task)));
        Some(task)
    }

    fn dequeue_current(&mut self) -> Option<Arc<Task>> {
        self.q.current.take().map(|(_, t)| t)
    }
}

/// Weighted fair policy: always runs the task with the least virtual
/// runtime; a task's virtual runtime grows inversely to its [`Weight`].
pub struct Vruntime {
    cpus: Vec<Mutex<FairQueue>>,
    vruntimes: Mutex<HashMap<TaskId, u64>>,
}

impl Vruntime {
    pub fn new(cpus: usize) -> Self {
        Self {
            cpus: (0..cpus)
                .map(|_| Mutex::new(FairQueue { queue: BTreeMap::new(), current: None, arrivals: 0 }))
                .collect(),
            vruntimes: Mutex::new(HashMap::new()),
        }
    }
}

impl Scheduler for Vruntime {
    fn enqueue(&self, task: Arc<Task>) -> usize {
        let cpu = least_loaded(self.cpus.iter().map(|q| {
            let q = q.lock();
            q.queue.len() + q.current.is_some() as usize
        }));
        let mut q = self.cpus[cpu].lock();
        let own = self.vruntimes.lock().get(&task.id()).copied().unwrap_or(0);
        // A woken task does not get to bank the time it slept.
        let floor = q.min_vruntime().or(q.current.as_ref().map(|c| c.0)).unwrap_or(0);
        q.push(own.max(floor), task);
        cpu
    }

    fn local_rq_with(&self, cpu: usize, f: &mut dyn FnMut(&mut dyn LocalRunQueue)) {
        let mut q = self.cpus[cpu].lock();
        f(&mut FairRq { q: &mut q, vruntimes: &self.vruntimes });
    }
}

/// Adversarial policy: every CPU is handed the oldest live task, whether or
/// not it is already running somewhere.
#[derive(Default)]
pub struct DoubleBooking {
    tasks: Mutex<Vec<Arc<Task>>>,
    current: Mutex<HashMap<usize, Arc<Task>>>,
}

struct DbRq<'a> {
    cpu: usize,
    policy: &'a DoubleBooking,
    current: Option<Arc<Task>>,
}

impl LocalRunQueue for DbRq<'_> {
    fn current(&self) -> Option<&Arc<Task>> {
        self.current.as_ref()
    }

    fn update_current(&mut self, _reason: UpdateReason) -> bool {
        true
    }

    fn pick_next(&mut self) -> Option<Arc<Task>> {
        let next = self.policy.tasks.lock().first().cloned();
        match &next {
            Some(t) => self.policy.current.lock().insert(self.cpu, Arc::clone(t)),
            None => self.policy.current.lock().remove(&self.cpu),
        };
        self.current = next.clone();
        next
    }

    fn dequeue_current(&mut self) -> Option<Arc<Task>> {
        let cur = self.policy.current.lock().remove(&self.cpu)?;
        self.policy.tasks.lock().retain(|t| !Arc::ptr_eq(t, &cur));
        self.current = None;
        Some(cur)
    }
}

impl Scheduler for DoubleBooking {
    fn enqueue(&self, task: Arc<Task>) -> usize {
        let mut tasks = self.tasks.lock();
        if !tasks.iter().any(|t| Arc::ptr_eq(t, &task)) {
            tasks.push(task);
        }
        0
    }

    fn local_rq_with(&self, cpu: usize, f: &mut dyn FnMut(&mut dyn LocalRunQueue)) {
        let current = self.current.lock().get(&cpu).cloned();
        f(&mut DbRq { cpu, policy: self, current });
    }
}

#[cfg(test)]
mod tests {
    use super::super::{SchedCore, ScriptOp};
    use super::*;

    fn split(weights: [u32; 2], ticks: usize) -> [u64; 2] {
        let core = SchedCore::new(1);
        core.register_scheduler(Arc::new(Vruntime::new(1))).unwrap();
        let a = core.task_spawn([ScriptOp::Run(u32::MAX)], Weight(weights[0])).unwrap();
        let b = core.task_spawn([ScriptOp::Run(u32::MAX)], Weight(weights[1])).unwrap();
        core.tick(0).unwrap();
        for _ in 0..ticks {
            core.tick(0).unwrap();
        }
        [core.task(a).unwrap().runtime(), core.task(b).unwrap().runtime()]
    }

    #[test]
    fn equal_weights_split_evenly() {
        let [a, b] = split([1, 1], 1000);
        assert_eq!(a + b, 1000);
        assert!((475..=525).contains(&a), "{a}:{b}");
    }

    #[test]
    fn two_to_one() {
        let [a, b] = split([2, 1], 1000);
        assert_eq!(a + b, 1000);
        assert!((633..=700).contains(&a), "{a}:{b}");
    }

    #[test]
    fn single_task_gets_everything() {
        let core = SchedCore::new(1);
        core.register_scheduler(Arc::new(Vruntime::new(1))).unwrap();
        let a = core.task_spawn([ScriptOp::Run(u32::MAX)], ()).unwrap();
        for _ in 0..101 {
            core.tick(0).unwrap();
        }
        assert_eq!(core.task(a).unwrap().runtime(), 100);
    }

    #[test]
    fn round_robin_spreads_spawns() {
        let rr = RoundRobin::new(3);
        let core = SchedCore::new(3);
        let rr = Arc::new(rr);
        core.register_scheduler(rr.clone()).unwrap();
        for _ in 0..6 {
            core.task_spawn([ScriptOp::Run(1)], ()).unwrap();
        }
        assert_eq!((rr.queue_len(0), rr.queue_len(1), rr.queue_len(2)), (2, 2, 2));
    }
}
