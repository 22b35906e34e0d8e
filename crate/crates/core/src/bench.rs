//! Checked versus unchecked timings for the hot paths.
//!
//! Every op has a fixture that runs one iteration in either mode. Timing
//! alternates batches of the two modes and reports per-op medians, so drift
//! on a busy machine hits both sides alike.

use std::hint::black_box;
use std::sync::Arc;
use std::time::Instant;

use crate::buddy::BuddyAllocator;
use crate::frame::{MetaKindId, Segment, USegment};
use crate::frame_alloc::{alloc_frames, alloc_frames_unchecked, register_frame_allocator, AllocLayout};
use crate::mem::{mem_init, MemoryMap, PhysAddr, Region};
use crate::privsep::{IoHandle, IoKind, IoSpace, KernelStack, RegisterFile, Sensitivity};
use crate::sched::{RoundRobin, SchedCore, ScriptOp};
use crate::slab::{Slab, TypeTag};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Checked,
    Unchecked,
}

pub const OPS: &[&str] = &[
    "uframe_read_4k",
    "uframe_write_4k",
    "iomem_read_once",
    "iomem_write_once",
    "stack_new",
    "task_yield",
    "alloc_frames",
    "heap_object",
];

/// Largest acceptable `(checked - unchecked) / checked`, where one is set.
pub fn threshold(op: &str) -> Option<f64> {
    match op {
        "uframe_read_4k" | "uframe_write_4k" | "iomem_read_once" | "iomem_write_once" => Some(0.10),
        "task_yield" | "heap_object" => Some(0.05),
        "alloc_frames" => Some(0.15),
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub op: String,
    pub checked_ns: f64,
    pub unchecked_ns: f64,
}

impl BenchRow {
    pub fn ratio(&self) -> f64 {
        if self.checked_ns <= 0.0 {
            0.0
        } else {
            (self.checked_ns - self.unchecked_ns) / self.checked_ns
        }
    }

    pub fn within_threshold(&self) -> bool {
        threshold(&self.op).is_none_or(|t| self.ratio() <= t)
    }
}

pub fn csv_header() -> &'static str {
    "op,checked_ns,unchecked_ns,ratio"
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(csv_header());
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{:.2},{:.2},{:.4}\n", r.op, r.checked_ns, r.unchecked_ns, r.ratio()));
    }
    out
}

/// One op's state. `step` returns a value derived from the work so the
/// two modes can be compared.
pub trait Fixture {
    fn step(&mut self, mode: Mode, i: usize) -> u64;
    /// Final memory image, for comparing modes.
    fn image(&self) -> Vec<u8> {
        Vec::new()
    }
}

fn heap_map(frames: usize) -> Arc<MemoryMap> {
    let map = mem_init(4096, frames, vec![Region::new(0, frames * 4096)]).expect("bench map");
    register_frame_allocator(&map, Arc::new(BuddyAllocator::new(4096))).expect("bench allocator");
    map
}

struct UFrame {
    map: Arc<MemoryMap>,
    seg: USegment,
    buf: Vec<u8>,
    write: bool,
}

impl UFrame {
    fn new(write: bool) -> Self {
        let map = mem_init(4096, 4, vec![Region::new(0, 4 * 4096)]).expect("bench map");
        let seg = Segment::from_unused(&map, PhysAddr(0), 1, MetaKindId::UNTYPED, &[])
            .expect("bench frame")
            .try_into_untyped()
            .expect("untyped");
        let buf: Vec<u8> = (0..4096).map(|i| (i * 7) as u8).collect();
        seg.write_bytes(0, &buf).expect("fill");
        Self { map, seg, buf, write }
    }
}

impl Fixture for UFrame {
    fn step(&mut self, mode: Mode, i: usize) -> u64 {
        if self.write {
            self.buf[i % 4096] = i as u8;
            match mode {
                Mode::Checked => self.seg.write_bytes(0, &self.buf).expect("in bounds"),
                Mode::Unchecked => self.seg.write_bytes_unchecked(0, &self.buf),
            }
            0
        } else {
            match mode {
                Mode::Checked => self.seg.read_into(0, &mut self.buf).expect("in bounds"),
                Mode::Unchecked => self.seg.read_bytes_unchecked(0, &mut self.buf),
            }
            self.buf[i % 4096] as u64
        }
    }

    fn image(&self) -> Vec<u8> {
        self.map.snapshot()
    }
}

struct IoMem {
    regs: Arc<RegisterFile>,
    handle: IoHandle,
    write: bool,
}

impl IoMem {
    fn new(write: bool) -> Self {
        let space = Arc::new(IoSpace::new());
        let regs = Arc::new(RegisterFile::new(0x100));
        space.attach(IoKind::Mem, 0x1000..0x1100, regs.clone()).expect("attach");
        space.label(IoKind::Mem, 0x1000..0x1100, Sensitivity::Insensitive).expect("label");
        space.seal();
        let handle = space.iomem_acquire(0x1000..0x1100).expect("acquire");
        Self { regs, handle, write }
    }
}

impl Fixture for IoMem {
    fn step(&mut self, mode: Mode, i: usize) -> u64 {
        let off = (i * 4) % 0x100;
        if self.write {
            match mode {
                Mode::Checked => self.handle.write_once(off, i as u32).expect("in bounds"),
                Mode::Unchecked => self.handle.write_once_unchecked(off, i as u32),
            }
            0
        } else {
            let v: u32 = match mode {
                Mode::Checked => self.handle.read_once(off).expect("in bounds"),
                Mode::Unchecked => self.handle.read_once_unchecked(off),
            };
            v as u64
        }
    }

    fn image(&self) -> Vec<u8> {
        let mut out = vec![0; 0x100];
        for (i, chunk) in out.chunks_mut(4).enumerate() {
            let v: u32 = self.handle.read_once(i * 4).expect("in bounds");
            chunk.copy_from_slice(&v.to_le_bytes());
        }
        let _ = self.regs.reads();
        out
    }
}

struct Stack {
    map: Arc<MemoryMap>,
}

impl Fixture for Stack {
    fn step(&mut self, mode: Mode, i: usize) -> u64 {
        let s = match mode {
            Mode::Checked => KernelStack::new(&self.map, 1),
            Mode::Unchecked => KernelStack::new_unchecked(&self.map, 1),
        }
        .expect("stack");
        s.write(0, &(i as u64).to_le_bytes()).expect("in bounds");
        let mut b = [0; 8];
        s.read(0, &mut b).expect("in bounds");
        u64::from_le_bytes(b)
    }
}

struct Yield {
    core: SchedCore,
}

impl Yield {
    fn new(mode: Mode) -> Self {
        let core = match mode {
            Mode::Checked => SchedCore::new(1),
            Mode::Unchecked => SchedCore::new_unchecked(1),
        };
        core.register_scheduler(Arc::new(RoundRobin::new(1))).expect("register");
        for _ in 0..2 {
            core.task_spawn([ScriptOp::Run(u32::MAX)], ()).expect("spawn");
        }
        core.tick(0).expect("tick");
        Self { core }
    }
}

impl Fixture for Yield {
    fn step(&mut self, _mode: Mode, _i: usize) -> u64 {
        let out = self.core.task_yield(0).expect("yield").expect("switch");
        out.next.unwrap_or(0)
    }
}

struct Frames {
    map: Arc<MemoryMap>,
    layout: AllocLayout,
}

impl Fixture for Frames {
    fn step(&mut self, mode: Mode, _i: usize) -> u64 {
        let seg = match mode {
            Mode::Checked => alloc_frames(&self.map, self.layout, MetaKindId::UNTYPED, &[]),
            Mode::Unchecked => alloc_frames_unchecked(&self.map, self.layout, MetaKindId::UNTYPED),
        }
        .expect("alloc");
        seg.start_paddr().0 as u64
    }

    fn image(&self) -> Vec<u8> {
        self.map.snapshot()
    }
}

struct Heap {
    slab: Slab,
    tag: TypeTag,
}

impl Fixture for Heap {
    fn step(&mut self, mode: Mode, _i: usize) -> u64 {
        let slot = self.slab.alloc().expect("slot");
        let obj = match mode {
            Mode::Checked => slot.into_object(self.tag).map_err(|(e, _)| e).expect("fits"),
            Mode::Unchecked => slot.into_object_unchecked(self.tag),
        };
        let addr = obj.addr().0 as u64;
        self.slab.dealloc_object(obj).expect("dealloc");
        addr
    }
}

/// Fresh fixture for `op`, or `None` if the name is unknown. Some ops need
/// the mode at construction.
pub fn fixture(op: &str, mode: Mode) -> Option<Box<dyn Fixture>> {
    Some(match op {
        "uframe_read_4k" => Box::new(UFrame::new(false)),
        "uframe_write_4k" => Box::new(UFrame::new(true)),
        "iomem_read_once" => Box::new(IoMem::new(false)),
        "iomem_write_once" => Box::new(IoMem::new(true)),
        "stack_new" => Box::new(Stack { map: heap_map(64) }),
        "task_yield" => Box::new(Yield::new(mode)),
        "alloc_frames" => {
            let map = heap_map(64);
            let layout = AllocLayout::frames(1, 4096).expect("layout");
            Box::new(Frames { map, layout })
        }
        "heap_object" => {
            let map = heap_map(16);
            let slab = Slab::new(&map, 64, 32).expect("slab");
            Box::new(Heap { slab, tag: TypeTag::of::<u64>() })
        }
        _ => return None,
    })
}

fn time_batch(f: &mut dyn Fixture, mode: Mode, start: usize, n: usize) -> f64 {
    let t = Instant::now();
    for i in start..start + n {
        black_box(f.step(mode, black_box(i)));
    }
    t.elapsed().as_nanos() as f64 / n as f64
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub const BATCHES: usize = 51;

/// Times `iters` iterations per mode in `BATCHES` alternating batches.
pub fn run_op(op: &str, iters: usize) -> Option<BenchRow> {
    let mut checked = fixture(op, Mode::Checked)?;
    let mut unchecked = fixture(op, Mode::Unchecked)?;
    let per = (iters / BATCHES).max(1);
    time_batch(checked.as_mut(), Mode::Checked, 0, per);
    time_batch(unchecked.as_mut(), Mode::Unchecked, 0, per);
    let (mut c, mut u) = (Vec::with_capacity(BATCHES), Vec::with_capacity(BATCHES));
    for b in 0..BATCHES {
        let start = (b + 1) * per;
        if b % 2 == 0 {
            c.push(time_batch(checked.as_mut(), Mode::Checked, start, per));
            u.push(time_batch(unchecked.as_mut(), Mode::Unchecked, start, per));
        } else {
            u.push(time_batch(unchecked.as_mut(), Mode::Unchecked, start, per));
            c.push(time_batch(checked.as_mut(), Mode::Checked, start, per));
        }
    }
    Some(BenchRow { op: op.to_string(), checked_ns: median(c), unchecked_ns: median(u) })
}

pub fn run_all(filter: impl Fn(&str) -> bool, iters: usize) -> Vec<BenchRow> {
    OPS.iter().filter(|op| filter(op)).filter_map(|op| run_op(op, iters)).collect()
}

/// Runs `n` iterations in each mode on fresh fixtures. Returns true if the
/// step results and final images are identical.
pub fn modes_agree(op: &str, n: usize) -> Option<bool> {
    let mut c = fixture(op, Mode::Checked)?;
    let mut u = fixture(op, Mode::Unchecked)?;
    let rc: Vec<u64> = (0..n).map(|i| c.step(Mode::Checked, i)).collect();
    let ru: Vec<u64> = (0..n).map(|i| u.step(Mode::Unchecked, i)).collect();
    Some(rc == ru && c.image() == u.image())
}
