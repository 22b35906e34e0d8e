//! Simulated physical memory.
//!
//! A [`MemoryMap`] owns a zero-filled byte store cut into fixed-size frames,
//! a metadata record per frame kept in a separate array, and the list of
//! usable regions handed to the frame allocator at registration time.
//!
//! Every metadata mutation goes through a compare-and-exchange step
//! ([`MemoryMap::meta_transition`]), so the reference count and state of a
//! frame are always read and written as one unit.

use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, OnceLock};

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::KindRegistry;
use crate::frame_alloc::FrameAlloc;
use crate::oracle::{TraceOp, Tracer};
use crate::store::Store;

pub const DEFAULT_FRAME_SIZE: usize = 4096;
pub const DEFAULT_FRAME_COUNT: usize = 4096;
pub const MIN_FRAME_SIZE: usize = 256;

/// Bytes one metadata record occupies when serialized (snapshot layout).
pub const META_RECORD_BYTES: usize = 16;

/// A byte address into simulated physical memory.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PhysAddr(pub usize);

impl PhysAddr {
    pub const fn new(value: usize) -> Self {
        Self(value)
    }

    pub const fn value(self) -> usize {
        self.0
    }

    pub const fn is_aligned(self, align: usize) -> bool {
        self.0.is_multiple_of(align)
    }

    pub fn checked_add(self, len: usize) -> Option<PhysAddr> {
        self.0.checked_add(len).map(PhysAddr)
    }
}

impl fmt::Display for PhysAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

/// Privileged uses of typed frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TypedKind {
    PageTable,
    KernelStack,
    Slab,
    Metadata,
}

impl TypedKind {
    pub const ALL: [TypedKind; 4] = [
        TypedKind::PageTable,
        TypedKind::KernelStack,
        TypedKind::Slab,
        TypedKind::Metadata,
    ];

    pub(crate) fn code(self) -> u16 {
        match self {
            TypedKind::PageTable => 0,
            TypedKind::KernelStack => 1,
            TypedKind::Slab => 2,
            TypedKind::Metadata => 3,
        }
    }

    pub(crate) fn from_code(code: u16) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.code() == code)
    }
}

/// Identifier of a registered metadata kind.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MetaKindId(pub u16);

/// Usage state of one frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FrameState {
    Unused,
    Typed(TypedKind),
    Untyped(MetaKindId),
}

impl FrameState {
    pub fn is_unused(self) -> bool {
        matches!(self, FrameState::Unused)
    }

    pub fn is_untyped(self) -> bool {
        matches!(self, FrameState::Untyped(_))
    }
}

/// Client-registered metadata slot: the kind plus an opaque payload.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MetaTag {
    pub kind: MetaKindId,
    pub payload: u64,
}

impl MetaTag {
    pub const EMPTY: MetaTag = MetaTag { kind: MetaKindId(0), payload: 0 };
}

/// Per-frame metadata record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrameMeta {
    pub ref_count: u32,
    pub state: FrameState,
    pub tag: MetaTag,
}

impl FrameMeta {
    pub const UNUSED: FrameMeta = FrameMeta {
        ref_count: 0,
        state: FrameState::Unused,
        tag: MetaTag::EMPTY,
    };

    /// A live record must hold a reference; a free one must hold none.
    pub fn is_consistent(&self) -> bool {
        match self.state {
            FrameState::Unused => self.ref_count == 0 && self.tag == MetaTag::EMPTY,
            _ => self.ref_count > 0,
        }
    }
}

/// A `[start, start + len)` byte range of physical memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Region {
    pub start: PhysAddr,
    pub len: usize,
}

impl Region {
    pub const fn new(start: usize, len: usize) -> Self {
        Self { start: PhysAddr(start), len }
    }

    pub fn end(&self) -> usize {
        self.start.0 + self.len
    }

    pub fn contains_range(&self, start: usize, len: usize) -> bool {
        match start.checked_add(len) {
            Some(end) => start >= self.start.0 && end <= self.end(),
            None => false,
        }
    }

    pub fn overlaps(&self, other: &Region) -> bool {
        self.start.0 < other.end() && other.start.0 < self.end()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MemError {
    #[error("frame size {0} is not a power of two >= {MIN_FRAME_SIZE}")]
    BadFrameSize(usize),
    #[error("usable regions overlap: {0:?} and {1:?}")]
    OverlappingRegions(Region, Region),
    #[error("usable region {0:?} is not frame-aligned")]
    UnalignedRegion(Region),
    #[error("out of bounds")]
    OutOfBounds,
    #[error("metadata transition conflict (current {current:?})")]
    Conflict { current: FrameMeta },
    #[error("inconsistent metadata record {0:?}")]
    InvalidMeta(FrameMeta),
}

/// Fault-injection switches used to check that the UB oracle catches the
/// bugs it is meant to catch. All off by default.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FaultInjection {
    /// Replace compare-and-exchange metadata updates with a separate
    /// unsynchronized read and write.
    pub unsync_meta: bool,
    /// Expose slab-heap backing memory read-only at heap registration.
    pub readonly_heap_exposure: bool,
}

#[derive(Clone, Debug)]
pub struct MapConfig {
    pub frame_size: usize,
    pub frame_count: usize,
    pub usable: Vec<Region>,
    /// Reserve low frames as `Typed(Metadata)` to mimic a metadata array
    /// living inside physical memory.
    pub reserve_metadata: bool,
    pub faults: FaultInjection,
    pub tracer: Option<Arc<Tracer>>,
}

impl MapConfig {
    pub fn new(frame_size: usize, frame_count: usize, usable: Vec<Region>) -> Self {
        Self {
            frame_size,
            frame_count,
            usable,
            reserve_metadata: false,
            faults: FaultInjection::default(),
            tracer: None,
        }
    }

    /// `frame_count` frames, all usable.
    pub fn flat(frame_size: usize, frame_count: usize) -> Self {
        Self::new(frame_size, frame_count, vec![Region::new(0, frame_size * frame_count)])
    }

    pub fn with_tracer(mut self, tracer: Arc<Tracer>) -> Self {
        self.tracer = Some(tracer);
        self
    }

    pub fn with_faults(mut self, faults: FaultInjection) -> Self {
        self.faults = faults;
        self
    }

    pub fn reserve_metadata(mut self, on: bool) -> Self {
        self.reserve_metadata = on;
        self
    }
}

impl Default for MapConfig {
    fn default() -> Self {
        Self::flat(DEFAULT_FRAME_SIZE, DEFAULT_FRAME_COUNT)
    }
}

pub struct MemoryMap {
    frame_size: usize,
    frame_count: usize,
    store: Store,
    meta: Box<[Mutex<FrameMeta>]>,
    usable: Vec<Region>,
    reserved_frames: usize,
    pub(crate) kinds: RwLock<KindRegistry>,
    claimed_any: AtomicBool,
    pub(crate) allocator: OnceLock<Arc<dyn FrameAlloc>>,
    pub(crate) heap_registered: AtomicBool,
    faults: FaultInjection,
    tracer: Option<Arc<Tracer>>,
}

impl fmt::Debug for MemoryMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MemoryMap")
            .field("frame_size", &self.frame_size)
            .field("frame_count", &self.frame_count)
            .field("usable", &self.usable)
            .finish_non_exhaustive()
    }
}

/// Builds a map of `frame_count` frames of `frame_size` bytes.
pub fn mem_init(frame_size: usize, frame_count: usize, usable: Vec<Region>) -> Result<Arc<MemoryMap>, MemError> {
    MemoryMap::new(MapConfig::new(frame_size, frame_count, usable))
}

impl MemoryMap {
    pub fn new(config: MapConfig) -> Result<Arc<Self>, MemError> {
        let MapConfig { frame_size, frame_count, usable, reserve_metadata, faults, tracer } = config;
        if !frame_size.is_power_of_two() || frame_size < MIN_FRAME_SIZE {
            return Err(MemError::BadFrameSize(frame_size));
        }
        let total = frame_size.checked_mul(frame_count).ok_or(MemError::OutOfBounds)?;
        for r in &usable {
            if r.start.0 % frame_size != 0 || r.len % frame_size != 0 {
                return Err(MemError::UnalignedRegion(*r));
            }
            if r.start.0.checked_add(r.len).is_none_or(|end| end > total) {
                return Err(MemError::OutOfBounds);
            }
        }
        let mut sorted = usable.clone();
        sorted.sort_by_key(|r| r.start);
        for w in sorted.windows(2) {
            if w[0].overlaps(&w[1]) {
                return Err(MemError::OverlappingRegions(w[0], w[1]));
            }
        }

        let mut meta: Vec<Mutex<FrameMeta>> = (0..frame_count).map(|_| Mutex::new(FrameMeta::UNUSED)).collect();
        let mut usable = sorted;
        usable.retain(|r| r.len > 0);
        let mut reserved_frames = 0;
        if reserve_metadata {
            reserved_frames = (frame_count * META_RECORD_BYTES).div_ceil(frame_size).min(frame_count);
            let kind = crate::frame::MetaKindId::METADATA;
            for m in meta.iter_mut().take(reserved_frames) {
                *m.get_mut() = FrameMeta {
                    ref_count: 1,
                    state: FrameState::Typed(TypedKind::Metadata),
                    tag: MetaTag { kind, payload: 0 },
                };
            }
            usable = trim_below(&usable, reserved_frames * frame_size);
        }

        Ok(Arc::new(Self {
            frame_size,
            frame_count,
            store: Store::new(total),
            meta: meta.into_boxed_slice(),
            usable,
            reserved_frames,
            kinds: RwLock::new(KindRegistry::with_builtins()),
            claimed_any: AtomicBool::new(false),
            allocator: OnceLock::new(),
            heap_registered: AtomicBool::new(false),
            faults,
            tracer,
        }))
    }

    pub fn frame_size(&self) -> usize {
        self.frame_size
    }

    pub fn frame_count(&self) -> usize {
        self.frame_count
    }

    pub fn total_bytes(&self) -> usize {
        self.store.len()
    }

    /// Usable regions, sorted by address. Frames reserved for metadata are
    /// already cut out.
    pub fn usable(&self) -> &[Region] {
        &self.usable
    }

    pub fn usable_bytes(&self) -> usize {
        self.usable.iter().map(|r| r.len).sum()
    }

    pub fn reserved_frames(&self) -> usize {
        self.reserved_frames
    }

    pub fn faults(&self) -> FaultInjection {
        self.faults
    }

    pub fn tracer(&self) -> Option<&Arc<Tracer>> {
        self.tracer.as_ref()
    }

    pub fn frame_addr(&self, frame: usize) -> PhysAddr {
        PhysAddr(frame * self.frame_size)
    }

    pub fn frame_of(&self, addr: PhysAddr) -> usize {
        addr.0 / self.frame_size
    }

    pub fn is_usable(&self, start: usize, len: usize) -> bool {
        self.usable.iter().any(|r| r.contains_range(start, len))
    }

    /// True once any frame has been claimed since init.
    pub fn has_claims(&self) -> bool {
        self.claimed_any.load(Ordering::Acquire)
    }

    pub(crate) fn note_claim(&self) {
        self.claimed_any.store(true, Ordering::Release);
    }

    pub(crate) fn trace(&self, op: TraceOp) {
        if let Some(t) = &self.tracer {
            t.emit(op);
        }
    }

    /// Consistent snapshot of one frame's metadata.
    pub fn meta_read(&self, frame: usize) -> Result<FrameMeta, MemError> {
        let slot = self.meta.get(frame).ok_or(MemError::OutOfBounds)?;
        let guard = slot.lock();
        self.trace(TraceOp::MetaRead(frame));
        Ok(*guard)
    }

    /// Compare-and-exchange on a frame's metadata: installs `new` only if the
    /// current record equals `expected`.
    pub fn meta_transition(&self, frame: usize, expected: FrameMeta, new: FrameMeta) -> Result<(), MemError> {
        if !new.is_consistent() {
            return Err(MemError::InvalidMeta(new));
        }
        self.meta_update(frame, |cur| (cur == expected).then_some(new))
            .map(|_| ())
    }

    /// Atomic read-modify-write of one record. `f` sees the current record
    /// and returns the replacement, or `None` to leave it untouched (reported
    /// as `Conflict`). Returns the record that was replaced.
    pub(crate) fn meta_update<F>(&self, frame: usize, mut f: F) -> Result<FrameMeta, MemError>
    where
        F: FnMut(FrameMeta) -> Option<FrameMeta>,
    {
        let slot = self.meta.get(frame).ok_or(MemError::OutOfBounds)?;
        if self.faults.unsync_meta {
            // Torn: the read and the write are two separate steps.
            let cur = {
                let g = slot.lock();
                self.trace(TraceOp::MetaRead(frame));
                *g
            };
            let new = f(cur).ok_or(MemError::Conflict { current: cur })?;
            let mut g = slot.lock();
            *g = new;
            self.trace(TraceOp::MetaWrite(frame));
            return Ok(cur);
        }
        let mut g = slot.lock();
        let cur = *g;
        self.trace(TraceOp::MetaCas(frame));
        match f(cur) {
            Some(new) => {
                *g = new;
                Ok(cur)
            }
            None => Err(MemError::Conflict { current: cur }),
        }
    }

    /// Unconditional store of a record, bypassing the compare step. Only the
    /// unchecked bench paths and snapshot loading use it.
    pub(crate) fn meta_store(&self, frame: usize, new: FrameMeta) {
        let mut g = self.meta[frame].lock();
        self.trace(TraceOp::MetaWrite(frame));
        *g = new;
    }

    /// Metadata of every frame, in frame order. Each record is individually
    /// consistent; the array as a whole is not a single atomic snapshot.
    pub fn meta_all(&self) -> Vec<FrameMeta> {
        self.meta.iter().map(|m| *m.lock()).collect()
    }

    pub fn unused_frames(&self) -> Vec<usize> {
        self.meta
            .iter()
            .enumerate()
            .filter(|(_, m)| m.lock().state.is_unused())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn total_ref_count(&self) -> u64 {
        self.meta.iter().map(|m| m.lock().ref_count as u64).sum()
    }

    pub(crate) fn store(&self) -> &Store {
        &self.store
    }

    /// Raw copy out of the store, no ownership or bounds checks beyond the
    /// store itself. For snapshots and store-diff oracles.
    pub fn raw_read(&self, addr: usize, len: usize) -> Vec<u8> {
        let mut out = vec![0; len];
        self.store.read(addr, &mut out);
        out
    }
}

fn trim_below(regions: &[Region], floor: usize) -> Vec<Region> {
    regions
        .iter()
        .filter_map(|r| {
            if r.end() <= floor {
                None
            } else if r.start.0 >= floor {
                Some(*r)
            } else {
                Some(Region::new(floor, r.end() - floor))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIB: usize = 1 << 20;

    #[test]
    fn fresh_map_is_unused() {
        let map = mem_init(4096, 4, vec![Region::new(0, 16384)]).unwrap();
        assert_eq!(map.frame_count(), 4);
        for f in 0..4 {
            assert_eq!(map.meta_read(f).unwrap(), FrameMeta::UNUSED);
        }
        assert!(map.raw_read(0, 16384).iter().all(|&b| b == 0));
    }

    #[test]
    fn overlapping_regions_rejected() {
        let err = mem_init(4096, 4, vec![Region::new(0, 8192), Region::new(4096, 8192)]).unwrap_err();
        assert!(matches!(err, MemError::OverlappingRegions(..)));
    }

    #[test]
    fn unaligned_and_out_of_bounds_regions_rejected() {
        assert!(matches!(
            mem_init(4096, 4, vec![Region::new(100, 4096)]),
            Err(MemError::UnalignedRegion(_))
        ));
        assert!(matches!(
            mem_init(4096, 4, vec![Region::new(0, 5 * 4096)]),
            Err(MemError::OutOfBounds)
        ));
        assert!(matches!(mem_init(100, 4, vec![]), Err(MemError::BadFrameSize(100))));
        assert!(matches!(mem_init(128, 4, vec![]), Err(MemError::BadFrameSize(128))));
    }

    #[test]
    fn large_map_census_is_zero() {
        let map = mem_init(4096, 4096, vec![Region::new(0, 16 * MIB)]).unwrap();
        assert_eq!(map.frame_count(), 4096);
        let census: u64 = map.meta_all().iter().map(|m| m.ref_count as u64).sum();
        assert_eq!(census, 0);
        assert_eq!(map.unused_frames().len(), 4096);
    }

    #[test]
    fn meta_read_out_of_bounds() {
        let map = mem_init(4096, 4, vec![]).unwrap();
        assert_eq!(map.meta_read(4), Err(MemError::OutOfBounds));
    }

    #[test]
    fn transition_is_compare_and_exchange() {
        let map = mem_init(4096, 4, vec![Region::new(0, 16384)]).unwrap();
        let claimed = FrameMeta {
            ref_count: 1,
            state: FrameState::Untyped(MetaKindId(4)),
            tag: MetaTag { kind: MetaKindId(4), payload: 0 },
        };
        map.meta_transition(0, FrameMeta::UNUSED, claimed).unwrap();
        assert_eq!(map.meta_read(0).unwrap(), claimed);
        let err = map.meta_transition(0, FrameMeta::UNUSED, claimed).unwrap_err();
        assert_eq!(err, MemError::Conflict { current: claimed });
        assert_eq!(map.meta_read(0).unwrap(), claimed);
        assert_eq!(
            map.meta_transition(9, FrameMeta::UNUSED, claimed),
            Err(MemError::OutOfBounds)
        );
    }

    #[test]
    fn transition_rejects_inconsistent_records() {
        let map = mem_init(4096, 1, vec![]).unwrap();
        let bad = FrameMeta { ref_count: 3, ..FrameMeta::UNUSED };
        assert_eq!(map.meta_transition(0, FrameMeta::UNUSED, bad), Err(MemError::InvalidMeta(bad)));
    }

    #[test]
    fn reserved_metadata_frames_are_cut_from_usable() {
        let map = MemoryMap::new(MapConfig::flat(4096, 4096).reserve_metadata(true)).unwrap();
        // 4096 records * 16 bytes = 16 frames.
        assert_eq!(map.reserved_frames(), 16);
        assert_eq!(map.usable(), &[Region::new(16 * 4096, (4096 - 16) * 4096)]);
        assert_eq!(map.meta_read(0).unwrap().state, FrameState::Typed(TypedKind::Metadata));
        assert_eq!(map.meta_read(16).unwrap(), FrameMeta::UNUSED);
    }

    #[test]
    fn concurrent_claims_have_one_winner() {
        let map = mem_init(4096, 1, vec![Region::new(0, 4096)]).unwrap();
        let winners = std::sync::atomic::AtomicUsize::new(0);
        std::thread::scope(|s| {
            for t in 0..8u64 {
                let map = &map;
                let winners = &winners;
                s.spawn(move || {
                    let new = FrameMeta {
                        ref_count: 1,
                        state: FrameState::Untyped(MetaKindId(4)),
                        tag: MetaTag { kind: MetaKindId(4), payload: t },
                    };
                    if map.meta_transition(0, FrameMeta::UNUSED, new).is_ok() {
                        winners.fetch_add(1, Ordering::SeqCst);
                    }
                });
            }
        });
        assert_eq!(winners.load(Ordering::SeqCst), 1);
    }
}
