//! Frame-allocator injection.
//!
//! A client policy implementing [`FrameAlloc`] is registered once, before any
//! frame is claimed, and is told about every usable region. Allocation
//! requests go to the policy, but whatever address it returns is turned into
//! a handle only through [`Segment::claim`], so a policy that hands out
//! in-use or out-of-range memory produces an error instead of aliasing.
//!
//! Policies must not call back into the framework from `alloc`, `dealloc` or
//! `add_free_memory`; re-entrant allocation is rejected with
//! [`AllocError::Reentrant`].

use std::cell::Cell;
use std::sync::Arc;

use thiserror::Error;

use crate::frame::{FrameError, MetaKindId, Origin, Segment};
use crate::mem::{MemoryMap, PhysAddr};

/// Size and alignment of a frame allocation request.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AllocLayout {
    size: usize,
    align: usize,
}

impl AllocLayout {
    /// `size` must be a non-zero multiple of `frame_size`; `align` a power of
    /// two no smaller than `frame_size`.
    pub fn new(size: usize, align: usize, frame_size: usize) -> Result<Self, AllocError> {
        if size == 0 || !size.is_multiple_of(frame_size) || !align.is_power_of_two() || align < frame_size {
            return Err(AllocError::BadLayout { size, align });
        }
        Ok(Self { size, align })
    }

    /// `frames` frames at natural frame alignment.
    pub fn frames(frames: usize, frame_size: usize) -> Result<Self, AllocError> {
        Self::new(frames * frame_size, frame_size, frame_size)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn align(&self) -> usize {
        self.align
    }
}

/// An injectable frame allocator.
pub trait FrameAlloc: Send + Sync {
    /// Returns the start of a free range satisfying `layout`, or `None`.
    fn alloc(&self, layout: AllocLayout) -> Option<PhysAddr>;
    /// Gives back a range previously returned by `alloc`.
    fn dealloc(&self, addr: PhysAddr, size: usize);
    /// Adds a range of usable frames.
    fn add_free_memory(&self, addr: PhysAddr, size: usize);
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AllocError {
    #[error("a frame allocator is already registered")]
    AlreadyRegistered,
    #[error("frames were claimed before the allocator was registered")]
    TooLate,
    #[error("no frame allocator registered")]
    NotRegistered,
    #[error("invalid layout: size {size}, align {align}")]
    BadLayout { size: usize, align: usize },
    #[error("allocator policy has no memory for the request")]
    PolicyExhausted,
    #[error("allocator policy returned an unsound range at {addr}: {reason}")]
    PolicyUnsound { addr: PhysAddr, reason: String },
    #[error("frame allocator re-entered from a policy callback")]
    Reentrant,
    #[error(transparent)]
    Claim(FrameError),
}

thread_local! {
    static IN_POLICY: Cell<bool> = const { Cell::new(false) };
}

fn in_policy<R>(f: impl FnOnce() -> R) -> R {
    struct Reset;
    impl Drop for Reset {
        fn drop(&mut self) {
            IN_POLICY.with(|p| p.set(false));
        }
    }
    IN_POLICY.with(|p| p.set(true));
    let _reset = Reset;
    f()
}

fn policy_active() -> bool {
    IN_POLICY.with(Cell::get)
}

/// Installs `allocator` and hands it every usable region.
pub fn register_frame_allocator(map: &MemoryMap, allocator: Arc<dyn FrameAlloc>) -> Result<(), AllocError> {
    if map.has_claims() {
        return Err(AllocError::TooLate);
    }
    map.allocator.set(Arc::clone(&allocator)).map_err(|_| AllocError::AlreadyRegistered)?;
    in_policy(|| {
        for r in map.usable() {
            allocator.add_free_memory(r.start, r.len);
        }
    });
    Ok(())
}

/// Allocates frames through the registered policy and validates the result.
///
/// `metas` is one payload per frame, or empty.
pub fn alloc_frames(
    map: &Arc<MemoryMap>,
    layout: AllocLayout,
    kind: MetaKindId,
    metas: &[u64],
) -> Result<Segment, AllocError> {
    if policy_active() {
        return Err(AllocError::Reentrant);
    }
    let policy = map.allocator.get().ok_or(AllocError::NotRegistered)?;
    let fs = map.frame_size();
    if !layout.size.is_multiple_of(fs) || layout.align < fs {
        return Err(AllocError::BadLayout { size: layout.size, align: layout.align });
    }
    let addr = in_policy(|| policy.alloc(layout)).ok_or(AllocError::PolicyExhausted)?;
    if !addr.is_aligned(layout.align) {
        return Err(unsound(addr, format!("not aligned to {}", layout.align)));
    }
    Segment::claim(map, addr, layout.size / fs, kind, metas, Origin::Allocator).map_err(|e| match e {
        FrameError::InUse { .. } | FrameError::OutOfRange | FrameError::Unaligned(_) => {
            unsound(addr, e.to_string())
        }
        // Caller errors (bad kind or payload): the policy did nothing wrong,
        // so its range goes back.
        other => {
            in_policy(|| policy.dealloc(addr, layout.size));
            AllocError::Claim(other)
        }
    })
}

/// Allocation with the policy's answer taken on trust. Bench baseline only.
pub fn alloc_frames_unchecked(map: &Arc<MemoryMap>, layout: AllocLayout, kind: MetaKindId) -> Result<Segment, AllocError> {
    let policy = map.allocator.get().ok_or(AllocError::NotRegistered)?;
    let addr = in_policy(|| policy.alloc(layout)).ok_or(AllocError::PolicyExhausted)?;
    Ok(Segment::claim_unchecked(map, addr, layout.size / map.frame_size(), kind))
}

fn unsound(addr: PhysAddr, reason: String) -> AllocError {
    log::warn!("frame allocator policy bug: {addr}: {reason}");
    AllocError::PolicyUnsound { addr, reason }
}

/// Hands released frames back to the policy, one call per contiguous run.
pub(crate) fn return_frames(map: &MemoryMap, frames: &[usize]) {
    let Some(policy) = map.allocator.get() else {
        return;
    };
    assert!(!policy_active(), "frame allocator re-entered from a policy callback");
    let fs = map.frame_size();
    let mut i = 0;
    while i < frames.len() {
        let start = frames[i];
        let mut len = 1;
        while i + len < frames.len() && frames[i + len] == start + len {
            len += 1;
        }
        in_policy(|| policy.dealloc(map.frame_addr(start), len * fs));
        i += len;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::buddy::BuddyAllocator;
    use crate::mem::{mem_init, FrameMeta, Region};
    use parking_lot::Mutex;

    /// Records every call and serves a fixed address.
    #[derive(Default)]
    struct Recorder {
        regions: Mutex<Vec<(PhysAddr, usize)>>,
        deallocs: Mutex<Vec<(PhysAddr, usize)>>,
        next: Mutex<Option<PhysAddr>>,
    }

    impl FrameAlloc for Recorder {
        fn alloc(&self, _layout: AllocLayout) -> Option<PhysAddr> {
            *self.next.lock()
        }
        fn dealloc(&self, addr: PhysAddr, size: usize) {
            self.deallocs.lock().push((addr, size));
        }
        fn add_free_memory(&self, addr: PhysAddr, size: usize) {
            self.regions.lock().push((addr, size));
        }
    }

    #[test]
    fn registration_reports_usable_regions() {
        let regions = vec![Region::new(0, 8192), Region::new(16384, 4096)];
        let map = mem_init(4096, 8, regions.clone()).unwrap();
        let rec = Arc::new(Recorder::default());
        register_frame_allocator(&map, rec.clone()).unwrap();
        let seen: Vec<_> = rec.regions.lock().iter().map(|&(a, s)| Region { start: a, len: s }).collect();
        assert_eq!(seen, regions);
        assert_eq!(
            register_frame_allocator(&map, Arc::new(Recorder::default())),
            Err(AllocError::AlreadyRegistered)
        );
    }

    #[test]
    fn registration_after_claim_is_too_late() {
        let map = mem_init(4096, 2, vec![Region::new(0, 8192)]).unwrap();
        let _f = crate::frame::Frame::from_unused(&map, PhysAddr(0), MetaKindId::UNTYPED, 0).unwrap();
        assert_eq!(
            register_frame_allocator(&map, Arc::new(Recorder::default())),
            Err(AllocError::TooLate)
        );
    }

    #[test]
    fn unsound_policy_is_caught() {
        let map = mem_init(4096, 4, vec![Region::new(0, 3 * 4096)]).unwrap();
        let rec = Arc::new(Recorder::default());
        register_frame_allocator(&map, rec.clone()).unwrap();
        let layout = AllocLayout::frames(1, 4096).unwrap();

        *rec.next.lock() = None;
        assert_eq!(alloc_frames(&map, layout, MetaKindId::UNTYPED, &[]).unwrap_err(), AllocError::PolicyExhausted);

        *rec.next.lock() = Some(PhysAddr(0));
        let held = alloc_frames(&map, layout, MetaKindId::UNTYPED, &[]).unwrap();
        let before = map.meta_all();
        // Same address again: in use.
        assert!(matches!(
            alloc_frames(&map, layout, MetaKindId::UNTYPED, &[]),
            Err(AllocError::PolicyUnsound { .. })
        ));
        // Unusable frame 3, misaligned, and beyond the end.
        for bad in [3 * 4096, 100, 1 << 40] {
            *rec.next.lock() = Some(PhysAddr(bad));
            assert!(matches!(
                alloc_frames(&map, layout, MetaKindId::UNTYPED, &[]),
                Err(AllocError::PolicyUnsound { .. })
            ));
        }
        assert_eq!(map.meta_all(), before);
        drop(held);
        assert_eq!(rec.deallocs.lock().as_slice(), &[(PhysAddr(0), 4096)]);
        assert_eq!(map.meta_read(0).unwrap(), FrameMeta::UNUSED);
    }

    #[test]
    fn dealloc_once_per_claim_even_with_duplicates() {
        let map = mem_init(4096, 4, vec![Region::new(0, 4 * 4096)]).unwrap();
        let rec = Arc::new(Recorder::default());
        register_frame_allocator(&map, rec.clone()).unwrap();
        *rec.next.lock() = Some(PhysAddr(4096));
        let seg = alloc_frames(&map, AllocLayout::frames(2, 4096).unwrap(), MetaKindId::UNTYPED, &[]).unwrap();
        let dup = seg.clone();
        drop(seg);
        assert!(rec.deallocs.lock().is_empty());
        drop(dup);
        assert_eq!(rec.deallocs.lock().as_slice(), &[(PhysAddr(4096), 8192)]);
    }

    #[test]
    fn layout_validation() {
        assert!(AllocLayout::new(0, 4096, 4096).is_err());
        assert!(AllocLayout::new(4097, 4096, 4096).is_err());
        assert!(AllocLayout::new(4096, 2048, 4096).is_err());
        assert!(AllocLayout::new(4096, 3 * 4096, 4096).is_err());
        assert!(AllocLayout::new(8192, 16384, 4096).is_ok());
    }

    #[test]
    fn alloc_without_registration() {
        let map = mem_init(4096, 1, vec![Region::new(0, 4096)]).unwrap();
        assert_eq!(
            alloc_frames(&map, AllocLayout::frames(1, 4096).unwrap(), MetaKindId::UNTYPED, &[]).unwrap_err(),
            AllocError::NotRegistered
        );
    }

    struct Reentrant(Mutex<Option<Arc<MemoryMap>>>);

    impl FrameAlloc for Reentrant {
        fn alloc(&self, layout: AllocLayout) -> Option<PhysAddr> {
            let map = self.0.lock().clone().unwrap();
            let inner = alloc_frames(&map, layout, MetaKindId::UNTYPED, &[]);
            assert_eq!(inner.unwrap_err(), AllocError::Reentrant);
            Some(PhysAddr(0))
        }
        fn dealloc(&self, _: PhysAddr, _: usize) {}
        fn add_free_memory(&self, _: PhysAddr, _: usize) {}
    }

    #[test]
    fn reentrant_alloc_rejected() {
        let map = mem_init(4096, 1, vec![Region::new(0, 4096)]).unwrap();
        let policy = Arc::new(Reentrant(Mutex::new(Some(map.clone()))));
        register_frame_allocator(&map, policy.clone()).unwrap();
        let seg = alloc_frames(&map, AllocLayout::frames(1, 4096).unwrap(), MetaKindId::UNTYPED, &[]).unwrap();
        assert_eq!(seg.first_frame(), 0);
        drop(seg);
        *policy.0.lock() = None;
    }

    #[test]
    fn buddy_backs_lowest_address_first() {
        let map = mem_init(4096, 16, vec![Region::new(0, 16 * 4096)]).unwrap();
        register_frame_allocator(&map, Arc::new(BuddyAllocator::new(4096))).unwrap();
        let layout = AllocLayout::frames(1, 4096).unwrap();
        let segs: Vec<_> = (0..16)
            .map(|_| alloc_frames(&map, layout, MetaKindId::UNTYPED, &[]).unwrap())
            .collect();
        let firsts: Vec<_> = segs.iter().map(Segment::first_frame).collect();
        assert_eq!(firsts, (0..16).collect::<Vec<_>>());
        assert_eq!(alloc_frames(&map, layout, MetaKindId::UNTYPED, &[]).unwrap_err(), AllocError::PolicyExhausted);
    }
}
