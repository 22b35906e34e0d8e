//! Deterministic interleaving engine.
//!
//! A schedule is the sequence of thread indices in global order; thread `t`
//! appears exactly `lengths[t]` times. Exhaustive enumeration walks the
//! distinct permutations of that multiset in lexicographic order, so every
//! merge of the per-thread orders is produced exactly once.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::event::{ThreadId, TraceEvent, TraceOp};

pub const DEFAULT_EXHAUSTIVE_LIMIT: usize = 12;

pub type Schedule = Vec<ThreadId>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum InterleaveError {
    #[error("{events} events exceed the exhaustive limit of {limit}")]
    TooLarge { events: usize, limit: usize },
}

/// Number of distinct interleavings: the multinomial coefficient
/// `(sum n_i)! / prod(n_i!)`.
pub fn interleaving_count(lengths: &[usize]) -> u128 {
    let mut total: u128 = 1;
    let mut placed: u128 = 0;
    for &n in lengths {
        for k in 1..=n as u128 {
            placed += 1;
            total = total * placed / k;
        }
    }
    total
}

/// Lazily yields every interleaving of threads with the given lengths.
#[derive(Debug, Clone)]
pub struct Interleavings {
    current: Option<Schedule>,
}

impl Interleavings {
    fn new(lengths: &[usize]) -> Self {
        let first = lengths
            .iter()
            .enumerate()
            .flat_map(|(t, &n)| std::iter::repeat_n(t as ThreadId, n))
            .collect();
        Self { current: Some(first) }
    }
}

impl Iterator for Interleavings {
    type Item = Schedule;

    fn next(&mut self) -> Option<Schedule> {
        let out = self.current.take()?;
        let mut next = out.clone();
        if next_permutation(&mut next) {
            self.current = Some(next);
        }
        Some(out)
    }
}

fn next_permutation(v: &mut [ThreadId]) -> bool {
    if v.len() < 2 {
        return false;
    }
    let Some(i) = (0..v.len() - 1).rev().find(|&i| v[i] < v[i + 1]) else {
        return false;
    };
    let j = (i + 1..v.len()).rev().find(|&j| v[j] > v[i]).expect("successor exists");
    v.swap(i, j);
    v[i + 1..].reverse();
    true
}

/// Every interleaving, refusing more than `limit` total events.
pub fn interleave_enumerate(lengths: &[usize], limit: usize) -> Result<Interleavings, InterleaveError> {
    let events: usize = lengths.iter().sum();
    if events > limit {
        return Err(InterleaveError::TooLarge { events, limit });
    }
    Ok(Interleavings::new(lengths))
}

/// Uniformly random interleavings: at each step a thread is chosen with
/// probability proportional to its remaining events.
pub fn interleave_sample(lengths: &[usize], count: usize, seed: u64) -> Vec<Schedule> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| random_schedule(lengths, &mut rng)).collect()
}

pub fn random_schedule(lengths: &[usize], rng: &mut impl Rng) -> Schedule {
    let mut remaining = lengths.to_vec();
    let mut left: usize = remaining.iter().sum();
    let mut out = Vec::with_capacity(left);
    while left > 0 {
        let mut pick = rng.gen_range(0..left);
        let t = remaining
            .iter()
            .position(|&n| {
                if pick < n {
                    true
                } else {
                    pick -= n;
                    false
                }
            })
            .expect("pick within remaining");
        remaining[t] -= 1;
        left -= 1;
        out.push(t as ThreadId);
    }
    out
}

/// Schedules to check: all of them when small enough, otherwise a seeded
/// sample.
#[derive(Debug, Clone)]
pub struct ScheduleSet {
    pub schedules: Vec<Schedule>,
    pub exhaustive: bool,
    /// Distinct schedules visited over the total number that exist.
    pub coverage: f64,
}

pub fn schedules_for(lengths: &[usize], limit: usize, samples: usize, seed: u64) -> ScheduleSet {
    let total = interleaving_count(lengths);
    match interleave_enumerate(lengths, limit) {
        Ok(all) => ScheduleSet { schedules: all.collect(), exhaustive: true, coverage: 1.0 },
        Err(_) => {
            let schedules = interleave_sample(lengths, samples, seed);
            let distinct = schedules.iter().collect::<HashSet<_>>().len();
            ScheduleSet { schedules, exhaustive: false, coverage: distinct as f64 / total as f64 }
        }
    }
}

/// Merges per-thread op lists into one trace following `schedule`.
pub fn merge(threads: &[Vec<TraceOp>], schedule: &[ThreadId]) -> Vec<TraceEvent> {
    let ops = merge_with(threads, schedule);
    schedule.iter().zip(ops).map(|(&thread, op)| TraceEvent { thread, op }).collect()
}

/// Flattens per-thread lists of anything in `schedule` order.
pub fn merge_with<T: Clone>(threads: &[Vec<T>], schedule: &[ThreadId]) -> Vec<T> {
    let mut cursor = vec![0usize; threads.len()];
    schedule
        .iter()
        .map(|&t| {
            let ti = t as usize;
            cursor[ti] += 1;
            threads[ti][cursor[ti] - 1].clone()
        })
        .collect()
}

/// One atomic step of a simulated thread.
pub type Step<'a, S> = Box<dyn Fn(&mut S) + 'a>;

/// Runs `threads` against `state` in the order given by `schedule`, calling
/// `after` with the state and the step's thread after every step.
pub fn run_schedule<S>(
    state: &mut S,
    threads: &[Vec<Step<'_, S>>],
    schedule: &[ThreadId],
    mut after: impl FnMut(&S, ThreadId),
) {
    let mut cursor = vec![0usize; threads.len()];
    for &t in schedule {
        let ti = t as usize;
        (threads[ti][cursor[ti]])(state);
        cursor[ti] += 1;
        after(state, t);
    }
}

/// Runs every interleaving of `threads` on a fresh state from `init` and
/// returns the final states, one per schedule, in enumeration order.
pub fn explore<S>(
    init: impl Fn() -> S,
    threads: &[Vec<Step<'_, S>>],
    limit: usize,
    mut check_step: impl FnMut(&S, &[ThreadId]),
) -> Result<Vec<(Schedule, S)>, InterleaveError> {
    let lengths: Vec<usize> = threads.iter().map(Vec::len).collect();
    let mut out = Vec::new();
    for schedule in interleave_enumerate(&lengths, limit)? {
        let mut state = init();
        let mut prefix = 0;
        run_schedule(&mut state, threads, &schedule, |s, _| {
            prefix += 1;
            check_step(s, &schedule[..prefix]);
        });
        out.push((schedule, state));
    }
    Ok(out)
}
