//! Acceptance run. Each criterion prints one PASS/FAIL line; the process
//! exits non-zero if any fails.

use std::any::Any;
use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use fk_cli::{load_scenario, oracle_trace, run_scenario, RunOptions};
use fk_core::bench::{self, BenchRow};
use fk_core::buddy::BuddyAllocator;
use fk_core::oracle::{cases, ViolationKind};
use fk_core::privsep::{
    Delivery, DmaDirection, DmaError, DmaMode, IoError, IoKind, IoSpace, Iommu, IrqTable, KernelStack, Perms,
    RegisterFile, Sensitivity, StackError, VmError, VmSpace,
};
use fk_core::sched::{exhaustive_two_cpus, random_schedules, DoubleBooking, RoundRobin, SimOutcome, Vruntime};
use fk_core::slab::ActiveSlotsRemain;
use fk_core::{
    alloc_frames, mem_init, register_frame_allocator, snapshot_diff, AllocLayout, FrameState, MemoryMap, MetaKindId,
    PhysAddr, Region, Scheduler, ScriptOp, Segment, Slab, Snapshot, TypeTag,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FS: usize = 4096;

type Outcome = Result<String, String>;
type Criterion = (&'static str, Duration, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn buddy_map(frames: usize) -> Arc<MemoryMap> {
    let map = mem_init(FS, frames, vec![Region::new(0, frames * FS)]).unwrap();
    register_frame_allocator(&map, Arc::new(BuddyAllocator::new(FS))).unwrap();
    map
}

// Safety-check overhead.

const BENCH_ITERS: usize = 100_000;
const BENCH_ATTEMPTS: usize = 3;

fn bench_overhead() -> Outcome {
    let mut summary = Vec::new();
    let mut over = Vec::new();
    for op in bench::OPS {
        let Some(limit) = bench::threshold(op) else { continue };
        let mut best: Option<BenchRow> = None;
        for _ in 0..BENCH_ATTEMPTS {
            let row = bench::run_op(op, BENCH_ITERS).ok_or(format!("no fixture for {op}"))?;
            if best.as_ref().is_none_or(|b| row.ratio() < b.ratio()) {
                best = Some(row);
            }
            if best.as_ref().unwrap().within_threshold() {
                break;
            }
        }
        let row = best.unwrap();
        summary.push(format!("{op} {:.1}%", row.ratio() * 100.0));
        if !row.within_threshold() {
            over.push(format!("{op} {:.1}% > {:.0}%", row.ratio() * 100.0, limit * 100.0));
        }
    }
    ensure!(over.is_empty(), "over threshold: {}", over.join(", "));
    Ok(summary.join(", "))
}

// Frame handles against a set/multiset shadow.

fn frame_shadow() -> Outcome {
    let map = mem_init(FS, 64, vec![Region::new(0, 64 * FS)]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut handles: Vec<(Segment, usize, usize)> = Vec::new();
    let mut unused: BTreeSet<usize> = (0..64).collect();
    let mut counts: BTreeMap<usize, u32> = BTreeMap::new();
    let (mut accepted, mut rejected) = (0, 0);
    for step in 0..10_000 {
        let pick = if handles.is_empty() { 0 } else { rng.gen_range(0..10) };
        match pick {
            0..=3 => {
                let (frame, len) = (rng.gen_range(0..66), rng.gen_range(1..4));
                let want = frame + len <= 64 && (frame..frame + len).all(|f| unused.contains(&f));
                let got = Segment::from_unused(&map, PhysAddr(frame * FS), len, MetaKindId::UNTYPED, &[]);
                ensure!(got.is_ok() == want, "step {step}: claim {frame}+{len} accepted={} shadow={want}", got.is_ok());
                match got {
                    Ok(seg) => {
                        accepted += 1;
                        for f in frame..frame + len {
                            unused.remove(&f);
                            counts.insert(f, 1);
                        }
                        handles.push((seg, frame, len));
                    }
                    Err(_) => rejected += 1,
                }
            }
            4 | 5 => {
                let (seg, frame, len) = &handles[rng.gen_range(0..handles.len())];
                let (frame, len) = (*frame, *len);
                handles.push((seg.clone(), frame, len));
                for f in frame..frame + len {
                    *counts.get_mut(&f).unwrap() += 1;
                }
            }
            _ => {
                let (seg, frame, len) = handles.swap_remove(rng.gen_range(0..handles.len()));
                drop(seg);
                for f in frame..frame + len {
                    let c = counts.get_mut(&f).unwrap();
                    *c -= 1;
                    if *c == 0 {
                        counts.remove(&f);
                        unused.insert(f);
                    }
                }
            }
        }
        for f in 0..64 {
            let rc = map.meta_read(f).unwrap().ref_count;
            let want = counts.get(&f).copied().unwrap_or(0);
            ensure!(rc == want, "step {step}: frame {f} ref_count {rc}, shadow {want}");
        }
        let real: BTreeSet<usize> = map.unused_frames().into_iter().collect();
        ensure!(real == unused, "step {step}: unused set differs");
    }
    ensure!(accepted > 500 && rejected > 500, "weak mix: {accepted} accepted, {rejected} rejected");
    Ok(format!("10000 ops, {accepted} claims accepted, {rejected} rejected"))
}

// Single-run invariant of the scheduler.

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

fn clean(name: &str, out: &SimOutcome) -> Result<(), String> {
    ensure!(
        (out.double_run_states, out.inconsistent_states, out.guard_violations) == (0, 0, 0),
        "{name}: {out:?}"
    );
    Ok(())
}

fn scheduler_single_run() -> Outcome {
    let mut steps = 0;
    for (name, make) in [("rr", rr as fn(usize) -> Arc<dyn Scheduler>), ("vruntime", fair)] {
        let ex = exhaustive_two_cpus(&make, 4, SCRIPT);
        clean(name, &ex)?;
        let rand = random_schedules(&make, 4, 8, 10_000, 40, 77, SCRIPT);
        ensure!(rand.steps == 400_000, "{name}: {} random steps", rand.steps);
        clean(name, &rand)?;
        steps += ex.steps + rand.steps;
    }
    let bad = random_schedules(&adversary, 4, 8, 200, 40, 3, SCRIPT);
    ensure!(bad.guard_violations >= 1, "adversary not caught: {bad:?}");
    ensure!((bad.double_run_states, bad.inconsistent_states) == (0, 0), "adversary corrupted state: {bad:?}");
    Ok(format!("{steps} steps clean, adversary caught {} times", bad.guard_violations))
}

// Slab drop and fit.

fn drop_outcome(slab: Slab) -> Option<ActiveSlotsRemain> {
    catch_unwind(AssertUnwindSafe(move || drop(slab)))
        .err()
        .map(|p: Box<dyn Any + Send>| *p.downcast::<ActiveSlotsRemain>().expect("unexpected panic payload"))
}

fn slab_invariants() -> Outcome {
    let map = buddy_map(512);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut faulted, mut expected) = (0, 0);
    for case in 0..500 {
        let slot_size = [16, 32, 64, 128, 256][rng.gen_range(0..5)];
        let count = rng.gen_range(1..=64);
        let slab = Slab::new(&map, slot_size, count).map_err(|e| format!("case {case}: {e}"))?;
        let allocs = rng.gen_range(0..=count);
        let mut slots: Vec<_> = (0..allocs).map(|_| slab.alloc().unwrap()).collect();
        let keep = if case % 2 == 0 { 0 } else { rng.gen_range(1..=allocs.max(1)).min(allocs) };
        while slots.len() > keep {
            slab.dealloc(slots.pop().unwrap()).unwrap();
        }
        let active = slab.active();
        let backing = slab.backing_frames();
        let got = drop_outcome(slab);
        if active > 0 {
            expected += 1;
            ensure!(got.map(|p| p.active) == Some(active), "case {case}: drop with {active} live slots did not fault");
            faulted += 1;
        } else {
            ensure!(got.is_none(), "case {case}: empty slab faulted");
            ensure!(
                backing.clone().all(|f| map.meta_read(f).unwrap().state == FrameState::Unused),
                "case {case}: frames not returned"
            );
        }
        std::mem::forget(slots);
    }

    let map = buddy_map(16);
    let slab = Slab::new(&map, 64, 64).unwrap();
    let mut grid = 0;
    for size in 1..=128usize {
        for align in [1usize, 2, 4, 8, 16, 32, 64, 128] {
            let slot = slab.alloc().unwrap();
            let want = size <= 64 && slot.addr().0.is_multiple_of(align);
            match slot.into_object(TypeTag::new(size, align)) {
                Ok(obj) => {
                    ensure!(want, "size {size} align {align} accepted");
                    slab.dealloc_object(obj).unwrap();
                }
                Err((_, slot)) => {
                    ensure!(!want, "size {size} align {align} rejected");
                    slab.dealloc(slot).unwrap();
                }
            }
            grid += 1;
        }
    }
    Ok(format!("{faulted}/{expected} live drops faulted, {} clean; {grid} fit cases", 500 - expected))
}

// Privilege separation.

fn untyped(map: &Arc<MemoryMap>, frames: usize) -> Segment {
    alloc_frames(map, AllocLayout::frames(frames, FS).unwrap(), MetaKindId::UNTYPED, &[]).unwrap()
}

fn privsep() -> Outcome {
    let map = buddy_map(64);
    let window = untyped(&map, 2);
    let readonly_window = untyped(&map, 1);
    let stack = KernelStack::new(&map, 2).unwrap();
    let pt = alloc_frames(&map, AllocLayout::frames(1, FS).unwrap(), MetaKindId::PAGE_TABLE, &[]).unwrap();
    let iommu = Iommu::new(&map);
    let m = iommu.dma_map(&window, DmaMode::Stream, DmaDirection::FromDevice).unwrap();
    let ro = iommu.dma_map(&readonly_window, DmaMode::Coherent, DmaDirection::ToDevice).unwrap();
    let before = map.snapshot();

    let mut vm = VmSpace::new(FS);
    ensure!(vm.map_segment(0x1000, &pt, Perms::RW) == Err(VmError::TypedFrameRejected), "typed frame mapped");
    ensure!(vm.mapping_count() == 0, "mapping left behind");
    ensure!(
        iommu.dma_map(&pt, DmaMode::Coherent, DmaDirection::Bidirectional).err() == Some(DmaError::TypedMemoryRejected),
        "typed frame DMA-mapped"
    );

    let io = Arc::new(IoSpace::new());
    io.attach(IoKind::Mem, 0x1000..0x2000, Arc::new(RegisterFile::new(0x1000))).unwrap();
    io.label(IoKind::Mem, 0x1000..0x1400, Sensitivity::Insensitive).unwrap();
    io.label(IoKind::Mem, 0x1400..0x1800, Sensitivity::Sensitive).unwrap();
    io.seal();
    for r in [0x1400..0x1404, 0x1800..0x1804, 0x13fc..0x1404, 0x0..0x10] {
        ensure!(io.iomem_acquire(r.clone()).err() == Some(IoError::SensitiveRange(r.clone())), "acquired {r:x?}");
    }
    ensure!(io.iomem_acquire(0x1000..0x1100).is_ok(), "insensitive range refused");

    let irq = IrqTable::new();
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = Arc::clone(&hits);
    irq.register_with(40, 1, Some(Arc::new(move |_| {
        counter.fetch_add(1, Ordering::Relaxed);
    })))
    .unwrap();
    irq.authorize(3, 40).unwrap();
    for dev in 0..8 {
        let want = if dev == 3 { Delivery::Delivered { handler: 1 } } else { Delivery::Dropped };
        ensure!(irq.device_raise(dev, 40) == want, "device {dev} raise");
    }
    ensure!(hits.load(Ordering::Relaxed) == 1, "handler ran {} times", hits.load(Ordering::Relaxed));

    let mut guard_faults = 0;
    for off in -(FS as i64)..0 {
        ensure!(matches!(stack.write(off, &[0xaa; 4]), Err(StackError::GuardFault(_))), "guard write at {off}");
        guard_faults += 1;
    }
    ensure!(stack.guard_intact(), "guard damaged");

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut landed = 0;
    for _ in 0..10_000 {
        let base = if rng.gen_bool(0.5) { m.iova() } else { ro.iova() };
        let iova = (base as i64 + rng.gen_range(-3 * FS as i64..4 * FS as i64)) as usize;
        let len = rng.gen_range(1..128);
        landed += iommu.device_dma_write(9, iova, &vec![0x5a; len]).is_ok() as usize;
    }
    let after = map.snapshot();
    let diff = snapshot_diff(&Snapshot::parse(&before).unwrap(), &Snapshot::parse(&after).unwrap()).unwrap();
    let allowed: BTreeSet<usize> = window.frames().collect();
    for d in &diff {
        ensure!(allowed.contains(&d.frame), "frame {} changed outside the writable window", d.frame);
        ensure!(d.before == d.after, "metadata of frame {} changed", d.frame);
    }
    ensure!(landed > 0 && !diff.is_empty(), "no device write landed");
    Ok(format!("{guard_faults} guard faults, {landed}/10000 device writes landed, all inside the window"))
}

// Reconstructed UB cases.

fn ub_cases() -> Outcome {
    let race = oracle_trace(cases::DROP_CLAIM_RACE, true, 0).map_err(|e| e.to_string())?;
    let races = race.violations.iter().filter(|v| v.kind == ViolationKind::DataRace).count();
    ensure!(race.exhaustive && races >= 1, "flawed drop/claim: {races} races");
    let cas = oracle_trace(cases::DROP_CLAIM_CAS, true, 0).map_err(|e| e.to_string())?;
    ensure!(cas.exhaustive && cas.violations.is_empty(), "CAS drop/claim: {:?}", cas.violations);
    let ro = oracle_trace(cases::HEAP_INIT_READONLY, true, 0).map_err(|e| e.to_string())?;
    ensure!(
        ro.violations.len() == 1 && ro.violations[0].kind == ViolationKind::MutabilityViolation,
        "read-only exposure: {:?}",
        ro.violations
    );
    let rw = oracle_trace(cases::HEAP_INIT_MUTABLE, true, 0).map_err(|e| e.to_string())?;
    ensure!(rw.violations.is_empty(), "mutable exposure: {:?}", rw.violations);
    Ok(format!("race {races} over {} schedules, CAS 0 over {}, read-only 1, mutable 0", race.schedules, cas.schedules))
}

// Demo scenarios under the oracle, and the service line scan.

fn clean_run() -> Outcome {
    let dir = root().join("scenarios/demo");
    let mut files: Vec<_> = std::fs::read_dir(&dir)
        .map_err(|e| format!("{}: {e}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "scn"))
        .collect();
    files.sort();
    ensure!(!files.is_empty(), "no scenarios in {}", dir.display());
    let mut expects = 0;
    for f in &files {
        let name = f.file_name().unwrap().to_string_lossy().into_owned();
        let sc = load_scenario(f).map_err(|e| format!("{e:#}"))?;
        let report = run_scenario(&sc, &RunOptions { attach: true, ..Default::default() })
            .map_err(|e| format!("{name}: {e}"))?;
        ensure!(report.oracle_attached, "{name}: oracle not attached");
        ensure!(report.violations.is_empty(), "{name}: {:?}", report.violations);
        ensure!(report.failed() == 0, "{name}: {} expects failed", report.failed());
        expects += report.expects.len();
    }
    let tcb = fk_services::tcb_scan(&root().join("crates/core/src"), &root().join("crates/services/src"))
        .map_err(|e| e.to_string())?;
    ensure!(tcb.findings.is_empty(), "privileged calls in services: {:?}", tcb.findings);
    Ok(format!(
        "{} scenarios, {expects} expects, 0 violations; tcb {:.1}% privileged, 0 findings",
        files.len(),
        tcb.ratio() * 100.0
    ))
}

fn main() -> ExitCode {
    let prev = std::panic::take_hook();
    std::panic::set_hook(Box::new(move |info| {
        if info.payload().downcast_ref::<ActiveSlotsRemain>().is_none() {
            prev(info);
        }
    }));
    let criteria: [Criterion; 7] = [
        ("safety-check overhead", Duration::from_secs(120), bench_overhead),
        ("frame handles match shadow", Duration::from_secs(10), frame_shadow),
        ("scheduler single-run", Duration::from_secs(60), scheduler_single_run),
        ("slab drop and fit", Duration::from_secs(10), slab_invariants),
        ("privilege separation", Duration::from_secs(30), privsep),
        ("ub case studies", Duration::from_secs(5), ub_cases),
        ("end-to-end clean run", Duration::from_secs(60), clean_run),
    ];
    let mut failed = 0;
    for (name, limit, check) in criteria {
        let t = Instant::now();
        let mut result = catch_unwind(check).unwrap_or_else(|p| Err(panic_text(&*p)));
        let took = t.elapsed();
        if result.is_ok() && took > limit {
            result = Err(format!("took {took:.1?}, limit {limit:?}"));
        }
        match result {
            Ok(detail) => println!("PASS {name} ({took:.1?}): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name} ({took:.1?}): {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 7 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn panic_text(p: &(dyn Any + Send)) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "panicked".into())
}
