use std::sync::Arc;

use fk_core::buddy::BuddyAllocator;
use fk_core::mem::FaultInjection;
use fk_core::oracle::{
    cases, check_interleavings, detect_mutability, interleave_enumerate, parse_trace, replay, ScheduledTrace, TraceEvent,
    TraceOp, Tracer, ViolationKind, DEFAULT_EXHAUSTIVE_LIMIT,
};
use fk_core::{register_frame_allocator, GlobalHeap, MapConfig, MemoryMap, Region, TypeTag};

const FS: usize = 4096;

fn threads(text: &str) -> Vec<Vec<TraceOp>> {
    parse_trace(text).unwrap().threads()
}

#[test]
fn drop_claim_race_and_its_fix() {
    let flawed = check_interleavings(&threads(cases::DROP_CLAIM_RACE), FS, DEFAULT_EXHAUSTIVE_LIMIT, 0, 0);
    assert!(flawed.exhaustive);
    assert!(flawed.count(ViolationKind::DataRace) >= 1);
    let fixed = check_interleavings(&threads(cases::DROP_CLAIM_CAS), FS, DEFAULT_EXHAUSTIVE_LIMIT, 0, 0);
    assert!(fixed.exhaustive);
    assert_eq!(fixed.violations, vec![]);
}

#[test]
fn heap_exposure_cases() {
    let ro = check_interleavings(&threads(cases::HEAP_INIT_READONLY), FS, DEFAULT_EXHAUSTIVE_LIMIT, 0, 0);
    assert_eq!(ro.schedules_checked, 1);
    assert_eq!(ro.count(ViolationKind::MutabilityViolation), 1);
    assert_eq!(ro.violations.len(), 1);
    let rw = check_interleavings(&threads(cases::HEAP_INIT_MUTABLE), FS, DEFAULT_EXHAUSTIVE_LIMIT, 0, 0);
    assert_eq!(rw.violations, vec![]);
}

#[test]
fn every_witness_replays() {
    let t = threads(cases::DROP_CLAIM_RACE);
    let report = check_interleavings(&t, FS, DEFAULT_EXHAUSTIVE_LIMIT, 0, 0);
    for v in &report.violations {
        assert!(replay(&t, v, FS).contains(v));
    }
}

#[test]
fn readonly_then_mutable_reexposure_flags_only_the_first_write() {
    let ops = [
        TraceOp::ExposeReadOnly { addr: 0x1000, len: 64 },
        TraceOp::ByteWrite { addr: 0x1008, len: 8 },
        TraceOp::ExposeMutable { addr: 0x1000, len: 64 },
        TraceOp::ByteWrite { addr: 0x1008, len: 8 },
    ];
    let events = ops.iter().map(|&op| TraceEvent { thread: 0, op }).collect();
    let v = detect_mutability(&ScheduledTrace::from_events(events));
    assert_eq!(v.len(), 1);
    assert_eq!(v[0].events, [0, 1]);
}

#[test]
fn three_by_two_enumeration_has_ninety_schedules() {
    assert_eq!(interleave_enumerate(&[2, 2, 2], 12).unwrap().count(), 90);
}

fn traced_heap(faults: FaultInjection) -> (Arc<MemoryMap>, Arc<Tracer>) {
    let tracer = Tracer::new(FS);
    let cfg = MapConfig::new(FS, 64, vec![Region::new(0, 64 * FS)]).with_tracer(tracer.clone()).with_faults(faults);
    let map = MemoryMap::new(cfg).unwrap();
    register_frame_allocator(&map, Arc::new(BuddyAllocator::new(FS))).unwrap();
    (map, tracer)
}

fn heap_init(map: &Arc<MemoryMap>) {
    let (heap, _) = GlobalHeap::register(map, &[32, 64, 128]).unwrap();
    let obj = heap.alloc(TypeTag::new(48, 8)).unwrap();
    obj.write(0, &[7; 48]).unwrap();
    let mut back = [0; 48];
    obj.read(0, &mut back).unwrap();
    assert_eq!(back, [7; 48]);
    heap.free(obj).unwrap();
}

#[test]
fn live_heap_init_is_clean_unless_exposed_readonly() {
    let (map, tracer) = traced_heap(FaultInjection::default());
    heap_init(&map);
    assert_eq!(tracer.violations(), vec![]);

    let (map, tracer) = traced_heap(FaultInjection { readonly_heap_exposure: true, ..Default::default() });
    heap_init(&map);
    let v = tracer.violations();
    assert_eq!(v.len(), 1, "{v:?}");
    assert_eq!(v[0].kind, ViolationKind::MutabilityViolation);
}
