//! Slabs, heap slots and the global heap.
//!
//! A [`Slab`] owns `Typed(Slab)` frames cut into fixed-size slots. The slab
//! counts its live slots itself, so a cache policy cannot corrupt the count,
//! and dropping a slab with live slots is a fault. A [`HeapSlot`] becomes a
//! [`HeapObject`] only if the object's size and alignment fit the slot.
//!
//! The [`GlobalHeap`] routes allocations through an injected [`SlabPolicy`]
//! (the shipped one is [`SizeClassCache`]) and checks every slot it gets
//! back before handing out an object.

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use thiserror::Error;

use crate::frame::{FrameError, MetaKindId, Segment};
use crate::frame_alloc::{alloc_frames, AllocError, AllocLayout};
use crate::mem::{MemoryMap, PhysAddr};
use crate::oracle::TraceOp;

static NEXT_SLAB_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SlabError {
    #[error("bad slab geometry: slot size {slot_size}, {slot_count} slots")]
    BadGeometry { slot_size: usize, slot_count: usize },
    #[error("frame allocation failed: {0}")]
    Exhausted(AllocError),
    #[error("slab is full")]
    SlabFull,
    #[error("slot belongs to slab {slot_parent}, not {slab}")]
    ForeignSlot { slab: u64, slot_parent: u64 },
    #[error("slot {index} of slab {slab} is not live")]
    DoubleFree { slab: u64, index: usize },
    #[error("object of {size} bytes aligned {align} does not fit slot of {slot_size} bytes at {addr}")]
    Misfit { size: usize, align: usize, slot_size: usize, addr: PhysAddr },
    #[error("slab {slab} still has {active} active slots")]
    ActiveSlotsRemain { slab: u64, active: usize },
}

/// Panic payload raised when a slab is dropped with live slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ActiveSlotsRemain {
    pub slab: u64,
    pub active: usize,
}

/// Size and alignment of a value to be placed in a slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TypeTag {
    pub size: usize,
    pub align: usize,
}

impl TypeTag {
    pub const fn new(size: usize, align: usize) -> Self {
        Self { size, align }
    }

    pub fn of<T>() -> Self {
        Self { size: std::mem::size_of::<T>(), align: std::mem::align_of::<T>() }
    }

    pub fn fits(&self, slot_size: usize, addr: PhysAddr) -> bool {
        self.align.is_power_of_two() && self.size <= slot_size && addr.0.is_multiple_of(self.align)
    }
}

struct SlabInner {
    free: Vec<usize>,
    live: Vec<bool>,
}

pub struct Slab {
    id: u64,
    backing: Option<Segment>,
    slot_size: usize,
    slot_count: usize,
    active: AtomicUsize,
    inner: Mutex<SlabInner>,
}

impl fmt::Debug for Slab {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Slab")
            .field("id", &self.id)
            .field("slot_size", &self.slot_size)
            .field("slot_count", &self.slot_count)
            .field("active", &self.active())
            .finish()
    }
}

impl Slab {
    /// Allocates enough whole frames for `slot_count` slots of `slot_size`
    /// bytes. Remainder bytes at the end of the last frame are unused.
    pub fn new(map: &Arc<MemoryMap>, slot_size: usize, slot_count: usize) -> Result<Slab, SlabError> {
        let bad = SlabError::BadGeometry { slot_size, slot_count };
        if slot_size == 0 || slot_count == 0 {
            return Err(bad);
        }
        let fs = map.frame_size();
        let bytes = slot_size.checked_mul(slot_count).ok_or(bad.clone())?;
        let frames = bytes.div_ceil(fs);
        let layout = AllocLayout::frames(frames, fs).map_err(|_| bad)?;
        let payloads = vec![slot_size as u64; frames];
        let backing = alloc_frames(map, layout, MetaKindId::SLAB, &payloads).map_err(SlabError::Exhausted)?;
        let exposure = if map.faults().readonly_heap_exposure {
            TraceOp::ExposeReadOnly { addr: backing.start_paddr().0, len: backing.span() }
        } else {
            TraceOp::ExposeMutable { addr: backing.start_paddr().0, len: backing.span() }
        };
        map.trace(exposure);
        Ok(Slab {
            id: NEXT_SLAB_ID.fetch_add(1, Ordering::Relaxed),
            backing: Some(backing),
            slot_size,
            slot_count,
            active: AtomicUsize::new(0),
            inner: Mutex::new(SlabInner { free: (0..slot_count).rev().collect(), live: vec![false; slot_count] }),
        })
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn slot_size(&self) -> usize {
        self.slot_size
    }

    pub fn slot_count(&self) -> usize {
        self.slot_count
    }

    pub fn active(&self) -> usize {
        self.active.load(Ordering::Acquire)
    }

    pub fn free_slots(&self) -> usize {
        self.inner.lock().free.len()
    }

    fn backing(&self) -> &Segment {
        self.backing.as_ref().expect("slab backing present while the slab lives")
    }

    pub fn backing_frames(&self) -> std::ops::Range<usize> {
        self.backing().frames()
    }

    pub fn base(&self) -> PhysAddr {
        self.backing().start_paddr()
    }

    pub fn alloc(&self) -> Result<HeapSlot, SlabError> {
        let mut inner = self.inner.lock();
        let index = inner.free.pop().ok_or(SlabError::SlabFull)?;
        inner.live[index] = true;
        self.active.fetch_add(1, Ordering::AcqRel);
        Ok(HeapSlot {
            parent: self.id,
            index,
            addr: PhysAddr(self.base().0 + index * self.slot_size),
            size: self.slot_size,
            map: Arc::clone(self.backing().map()),
        })
    }

    pub fn dealloc(&self, slot: HeapSlot) -> Result<(), SlabError> {
        if slot.parent != self.id {
            return Err(SlabError::ForeignSlot { slab: self.id, slot_parent: slot.parent });
        }
        let mut inner = self.inner.lock();
        match inner.live.get_mut(slot.index) {
            Some(live) if *live => *live = false,
            _ => return Err(SlabError::DoubleFree { slab: self.id, index: slot.index }),
        }
        inner.free.push(slot.index);
        self.active.fetch_sub(1, Ordering::AcqRel);
        Ok(())
    }

    /// Returns the object's slot to this slab.
    pub fn dealloc_object(&self, obj: HeapObject) -> Result<(), SlabError> {
        match obj.storage {
            Storage::Slot(slot) => self.dealloc(slot),
            Storage::Frames(_) => Err(SlabError::ForeignSlot { slab: self.id, slot_parent: 0 }),
        }
    }

    /// Drops the slab without the fault: with live slots the backing frames
    /// are leaked and the error returned.
    pub fn release(mut self) -> Result<(), SlabError> {
        let active = self.active();
        if active > 0 {
            std::mem::forget(self.backing.take());
            return Err(SlabError::ActiveSlotsRemain { slab: self.id, active });
        }
        Ok(())
    }
}

impl Drop for Slab {
    fn drop(&mut self) {
        let active = self.active();
        if active > 0 && self.backing.is_some() {
            std::mem::forget(self.backing.take());
            if !std::thread::panicking() {
                std::panic::panic_any(ActiveSlotsRemain { slab: self.id, active });
            }
            log::error!("slab {} dropped during unwind with {active} active slots", self.id);
        }
    }
}

/// One free slot. Not clonable; goes back through [`Slab::dealloc`] or turns
/// into a [`HeapObject`].
pub struct HeapSlot {
    parent: u64,
    index: usize,
    addr: PhysAddr,
    size: usize,
    map: Arc<MemoryMap>,
}

impl fmt::Debug for HeapSlot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HeapSlot")
            .field("parent", &self.parent)
            .field("index", &self.index)
            .field("addr", &self.addr)
            .field("size", &self.size)
            .finish()
    }
}

impl HeapSlot {
    pub fn parent(&self) -> u64 {
        self.parent
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn addr(&self) -> PhysAddr {
        self.addr
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Builds a slot out of thin air, for double-free and foreign-slot tests.
    #[doc(hidden)]
    pub fn forge(slab: &Slab, index: usize) -> HeapSlot {
        HeapSlot {
            parent: slab.id,
            index,
            addr: PhysAddr(slab.base().0 + index * slab.slot_size),
            size: slab.slot_size,
            map: Arc::clone(slab.backing().map()),
        }
    }

    /// Places an object of shape `tag` in the slot if it fits; otherwise the
    /// slot comes back with the error.
    pub fn into_object(self, tag: TypeTag) -> Result<HeapObject, (SlabError, HeapSlot)> {
        if !tag.fits(self.size, self.addr) {
            let err = SlabError::Misfit { size: tag.size, align: tag.align, slot_size: self.size, addr: self.addr };
            return Err((err, self));
        }
        Ok(self.into_object_unchecked(tag))
    }

    /// No fit check. Bench baseline only.
    pub fn into_object_unchecked(self, tag: TypeTag) -> HeapObject {
        HeapObject { addr: self.addr, map: Arc::clone(&self.map), tag, storage: Storage::Slot(self) }
    }
}

enum Storage {
    Slot(HeapSlot),
    Frames(Segment),
}

/// A placed heap value. Byte access is limited to the tag's size.
pub struct HeapObject {
    addr: PhysAddr,
    map: Arc<MemoryMap>,
    tag: TypeTag,
    storage: Storage,
}

impl fmt::Debug for HeapObject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HeapObject")
            .field("addr", &self.addr)
            .field("tag", &self.tag)
            .field("direct", &self.is_direct())
            .finish()
    }
}

impl HeapObject {
    pub fn addr(&self) -> PhysAddr {
        self.addr
    }

    pub fn tag(&self) -> TypeTag {
        self.tag
    }

    /// True if the object sits on frames of its own rather than in a slot.
    pub fn is_direct(&self) -> bool {
        matches!(self.storage, Storage::Frames(_))
    }

    /// Frames backing a direct object.
    pub fn direct_frames(&self) -> Option<std::ops::Range<usize>> {
        match &self.storage {
            Storage::Frames(seg) => Some(seg.frames()),
            Storage::Slot(_) => None,
        }
    }

    pub fn slot(&self) -> Option<&HeapSlot> {
        match &self.storage {
            Storage::Slot(s) => Some(s),
            Storage::Frames(_) => None,
        }
    }

    /// Gives the slot back, ending the object's life.
    pub fn into_slot(self) -> Option<HeapSlot> {
        match self.storage {
            Storage::Slot(s) => Some(s),
            Storage::Frames(_) => None,
        }
    }

    fn check(&self, offset: usize, len: usize) -> Result<(), FrameError> {
        match offset.checked_add(len) {
            Some(end) if end <= self.tag.size => Ok(()),
            _ => Err(FrameError::OutOfBounds { offset, len, span: self.tag.size }),
        }
    }

    pub fn write(&self, offset: usize, data: &[u8]) -> Result<(), FrameError> {
        self.check(offset, data.len())?;
        let addr = self.addr.0 + offset;
        self.map.trace(TraceOp::ByteWrite { addr, len: data.len() });
        self.map.store().write(addr, data);
        Ok(())
    }

    pub fn read(&self, offset: usize, out: &mut [u8]) -> Result<(), FrameError> {
        self.check(offset, out.len())?;
        let addr = self.addr.0 + offset;
        self.map.trace(TraceOp::ByteRead { addr, len: out.len() });
        self.map.store().read(addr, out);
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HeapError {
    #[error("a heap is already registered for this memory map")]
    AlreadyRegistered,
    #[error("size classes must be non-empty and strictly increasing")]
    BadClasses,
    #[error("invalid type tag {0:?}")]
    BadTag(TypeTag),
    #[error("no size class holds {0:?}")]
    Oversize(TypeTag),
    #[error("heap exhausted: {0}")]
    Exhausted(SlabError),
    #[error("policy returned a slot that does not fit: {0}")]
    PolicyMisfit(SlabError),
    #[error(transparent)]
    Slab(SlabError),
}

/// An injectable slab cache. Returns slots and takes them back; the heap
/// checks every slot before use.
pub trait SlabPolicy: Send + Sync {
    /// A free slot suitable for `tag`, or `Oversize` to route the request
    /// to whole frames.
    fn alloc(&self, tag: TypeTag) -> Result<HeapSlot, HeapError>;
    fn dealloc(&self, slot: HeapSlot) -> Result<(), HeapError>;
}

/// Reference cache: one list of slabs per size class, grown on demand.
pub struct SizeClassCache {
    map: Arc<MemoryMap>,
    classes: Vec<usize>,
    slabs: Vec<Mutex<Vec<Arc<Slab>>>>,
    by_id: Mutex<HashMap<u64, Arc<Slab>>>,
}

impl fmt::Debug for SizeClassCache {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SizeClassCache").field("classes", &self.classes).finish()
    }
}

/// Largest power of two dividing `n`, capped at `cap`.
fn natural_align(n: usize, cap: usize) -> usize {
    (1usize << n.trailing_zeros()).min(cap)
}

impl SizeClassCache {
    pub fn new(map: &Arc<MemoryMap>, classes: &[usize]) -> Result<Self, HeapError> {
        if classes.is_empty() || classes[0] == 0 || classes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(HeapError::BadClasses);
        }
        Ok(Self {
            map: Arc::clone(map),
            classes: classes.to_vec(),
            slabs: classes.iter().map(|_| Mutex::new(Vec::new())).collect(),
            by_id: Mutex::new(HashMap::new()),
        })
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    /// Index of the smallest class that holds `tag` at its natural alignment.
    pub fn class_for(&self, tag: TypeTag) -> Option<usize> {
        let fs = self.map.frame_size();
        self.classes.iter().position(|&c| c >= tag.size && natural_align(c, fs) >= tag.align)
    }

    pub fn slab_count(&self) -> usize {
        self.by_id.lock().len()
    }

    /// Live slots across all slabs.
    pub fn active(&self) -> usize {
        self.by_id.lock().values().map(|s| s.active()).sum()
    }
}

impl SlabPolicy for SizeClassCache {
    fn alloc(&self, tag: TypeTag) -> Result<HeapSlot, HeapError> {
        let class = self.class_for(tag).ok_or(HeapError::Oversize(tag))?;
        let size = self.classes[class];
        let mut list = self.slabs[class].lock();
        for slab in list.iter() {
            if let Ok(slot) = slab.alloc() {
                return Ok(slot);
            }
        }
        let per_slab = (self.map.frame_size() / size).max(1);
        let slab = Arc::new(Slab::new(&self.map, size, per_slab).map_err(HeapError::Exhausted)?);
        let slot = slab.alloc().map_err(HeapError::Slab)?;
        self.by_id.lock().insert(slab.id(), Arc::clone(&slab));
        list.push(slab);
        Ok(slot)
    }

    fn dealloc(&self, slot: HeapSlot) -> Result<(), HeapError> {
        let slab = self.by_id.lock().get(&slot.parent()).cloned();
        match slab {
            Some(slab) => slab.dealloc(slot).map_err(HeapError::Slab),
            None => Err(HeapError::Slab(SlabError::ForeignSlot { slab: 0, slot_parent: slot.parent() })),
        }
    }
}

/// Heap front end: dispatches through the registered policy, checks fit,
/// and sends requests no class can hold straight to the frame allocator.
#[derive(Clone)]
pub struct GlobalHeap {
    map: Arc<MemoryMap>,
    policy: Arc<dyn SlabPolicy>,
}

impl fmt::Debug for GlobalHeap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GlobalHeap").finish_non_exhaustive()
    }
}

impl GlobalHeap {
    /// Registers the reference cache with the given size classes.
    pub fn register(map: &Arc<MemoryMap>, classes: &[usize]) -> Result<(GlobalHeap, Arc<SizeClassCache>), HeapError> {
        let cache = Arc::new(SizeClassCache::new(map, classes)?);
        let heap = Self::register_policy(map, Arc::clone(&cache) as Arc<dyn SlabPolicy>)?;
        Ok((heap, cache))
    }

    /// Registers a custom policy. Once per memory map.
    pub fn register_policy(map: &Arc<MemoryMap>, policy: Arc<dyn SlabPolicy>) -> Result<GlobalHeap, HeapError> {
        if map.heap_registered.swap(true, Ordering::AcqRel) {
            return Err(HeapError::AlreadyRegistered);
        }
        Ok(GlobalHeap { map: Arc::clone(map), policy })
    }

    pub fn alloc(&self, tag: TypeTag) -> Result<HeapObject, HeapError> {
        if !tag.align.is_power_of_two() || tag.size == 0 {
            return Err(HeapError::BadTag(tag));
        }
        match self.policy.alloc(tag) {
            Ok(slot) => match slot.into_object(tag) {
                Ok(obj) => Ok(obj),
                Err((e, slot)) => {
                    log::warn!("slab policy returned an unfit slot: {e}");
                    let _ = self.policy.dealloc(slot);
                    Err(HeapError::PolicyMisfit(e))
                }
            },
            Err(HeapError::Oversize(_)) => self.alloc_direct(tag),
            Err(e) => Err(e),
        }
    }

    fn alloc_direct(&self, tag: TypeTag) -> Result<HeapObject, HeapError> {
        let fs = self.map.frame_size();
        let layout = AllocLayout::new(tag.size.div_ceil(fs) * fs, tag.align.max(fs), fs)
            .map_err(|e| HeapError::Exhausted(SlabError::Exhausted(e)))?;
        let seg = alloc_frames(&self.map, layout, MetaKindId::SLAB, &[])
            .map_err(|e| HeapError::Exhausted(SlabError::Exhausted(e)))?;
        self.map.trace(TraceOp::ExposeMutable { addr: seg.start_paddr().0, len: seg.span() });
        Ok(HeapObject { addr: seg.start_paddr(), map: Arc::clone(&self.map), tag, storage: Storage::Frames(seg) })
    }

    pub fn free(&self, obj: HeapObject) -> Result<(), HeapError> {
        match obj.storage {
            Storage::Slot(slot) => self.policy.dealloc(slot),
            Storage::Frames(_) => Ok(()),
        }
    }
}
