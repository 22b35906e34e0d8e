//! Counted frame and segment handles, and the untyped-memory interface.
//!
//! A handle can only be created out of frames that are currently `Unused`
//! (checked through the metadata array), every clone bumps the per-frame
//! reference count, and the last drop returns the frames to `Unused` and,
//! for allocator-backed claims, to the injected frame allocator.
//!
//! Untyped handles allow copy-in/copy-out byte access and POD values;
//! typed handles never expose their bytes through this interface.

use std::fmt;
use std::ops::Deref;
use std::sync::Arc;

use thiserror::Error;

pub use crate::mem::MetaKindId;
use crate::mem::{FrameMeta, FrameState, MemError, MemoryMap, MetaTag, PhysAddr, TypedKind};
use crate::oracle::TraceOp;

impl MetaKindId {
    pub const PAGE_TABLE: MetaKindId = MetaKindId(0);
    pub const KERNEL_STACK: MetaKindId = MetaKindId(1);
    pub const SLAB: MetaKindId = MetaKindId(2);
    pub const METADATA: MetaKindId = MetaKindId(3);
    /// Anonymous untyped memory with no payload.
    pub const UNTYPED: MetaKindId = MetaKindId(4);
}

/// What a metadata kind may be used for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KindUsage {
    Typed(TypedKind),
    /// The kind is registered as usable for untyped memory.
    Untyped,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MetaKindSpec {
    pub name: String,
    /// Payload width in bytes, at most 8.
    pub payload_size: u8,
    pub usage: KindUsage,
}

impl MetaKindSpec {
    pub fn untyped(name: impl Into<String>, payload_size: u8) -> Self {
        Self { name: name.into(), payload_size, usage: KindUsage::Untyped }
    }

    pub fn typed(name: impl Into<String>, payload_size: u8, kind: TypedKind) -> Self {
        Self { name: name.into(), payload_size, usage: KindUsage::Typed(kind) }
    }

    fn state(&self, id: MetaKindId) -> FrameState {
        match self.usage {
            KindUsage::Typed(k) => FrameState::Typed(k),
            KindUsage::Untyped => FrameState::Untyped(id),
        }
    }

    fn payload_fits(&self, payload: u64) -> bool {
        self.payload_size >= 8 || payload >> (8 * self.payload_size as u32) == 0
    }
}

/// Registered metadata kinds; the id is the index.
#[derive(Debug)]
pub struct KindRegistry {
    kinds: Vec<MetaKindSpec>,
}

impl KindRegistry {
    pub(crate) fn with_builtins() -> Self {
        let kinds = vec![
            MetaKindSpec::typed("page-table", 0, TypedKind::PageTable),
            MetaKindSpec::typed("kernel-stack", 0, TypedKind::KernelStack),
            MetaKindSpec::typed("slab", 8, TypedKind::Slab),
            MetaKindSpec::typed("metadata", 0, TypedKind::Metadata),
            MetaKindSpec::untyped("untyped", 0),
        ];
        Self { kinds }
    }

    pub fn get(&self, id: MetaKindId) -> Option<&MetaKindSpec> {
        self.kinds.get(id.0 as usize)
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FrameError {
    #[error("frame {frame} is in use")]
    InUse { frame: usize },
    #[error("range is outside usable memory")]
    OutOfRange,
    #[error("address {0} is not frame-aligned")]
    Unaligned(PhysAddr),
    #[error("access [{offset}, +{len}) exceeds span of {span} bytes")]
    OutOfBounds { offset: usize, len: usize, span: usize },
    #[error("offset {offset} is not aligned to {align}")]
    Misaligned { offset: usize, align: usize },
    #[error("byte access to typed memory")]
    TypedAccess,
    #[error("unknown metadata kind {0:?}")]
    UnknownKind(MetaKindId),
    #[error("metadata payload {payload:#x} does not fit kind {kind:?}")]
    PayloadTooLarge { kind: MetaKindId, payload: u64 },
    #[error("expected {expected} metadata payloads, got {got}")]
    MetaCount { expected: usize, got: usize },
    #[error("metadata kinds cannot be registered after the first claim")]
    RegistrySealed,
    #[error("payload size {0} exceeds 8 bytes")]
    BadPayloadSize(u8),
}

impl MemoryMap {
    /// Registers a metadata kind. Rejected once any frame has been claimed,
    /// which keeps ids stable for snapshots.
    pub fn register_meta_kind(&self, spec: MetaKindSpec) -> Result<MetaKindId, FrameError> {
        if spec.payload_size > 8 {
            return Err(FrameError::BadPayloadSize(spec.payload_size));
        }
        let mut kinds = self.kinds.write();
        if self.has_claims() {
            return Err(FrameError::RegistrySealed);
        }
        let id = MetaKindId(kinds.kinds.len() as u16);
        kinds.kinds.push(spec);
        Ok(id)
    }

    pub fn meta_kind(&self, id: MetaKindId) -> Option<MetaKindSpec> {
        self.kinds.read().get(id).cloned()
    }
}

/// Where a claim came from, which decides where its frames go on release.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Origin {
    Direct,
    Allocator,
}

/// Counted handle to one or more contiguous frames.
pub struct Segment {
    map: Arc<MemoryMap>,
    first: usize,
    len: usize,
    kind: MetaKindId,
    state: FrameState,
    origin: Origin,
}

impl fmt::Debug for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Segment")
            .field("first", &self.first)
            .field("len", &self.len)
            .field("state", &self.state)
            .finish()
    }
}

impl Segment {
    /// Claims `len_frames` frames starting at `addr`. All or nothing: if any
    /// frame is in use, the frames already claimed are rolled back.
    ///
    /// `metas` holds one payload per frame, or is empty for zero payloads.
    pub fn from_unused(
        map: &Arc<MemoryMap>,
        addr: PhysAddr,
        len_frames: usize,
        kind: MetaKindId,
        metas: &[u64],
    ) -> Result<Segment, FrameError> {
        Self::claim(map, addr, len_frames, kind, metas, Origin::Direct)
    }

    pub(crate) fn claim(
        map: &Arc<MemoryMap>,
        addr: PhysAddr,
        len_frames: usize,
        kind: MetaKindId,
        metas: &[u64],
        origin: Origin,
    ) -> Result<Segment, FrameError> {
        let fs = map.frame_size();
        if !addr.is_aligned(fs) {
            return Err(FrameError::Unaligned(addr));
        }
        if len_frames == 0 {
            return Err(FrameError::OutOfRange);
        }
        let span = len_frames.checked_mul(fs).ok_or(FrameError::OutOfRange)?;
        if !map.is_usable(addr.0, span) {
            return Err(FrameError::OutOfRange);
        }
        if !metas.is_empty() && metas.len() != len_frames {
            return Err(FrameError::MetaCount { expected: len_frames, got: metas.len() });
        }
        let state = {
            let kinds = map.kinds.read();
            let spec = kinds.get(kind).ok_or(FrameError::UnknownKind(kind))?;
            if let Some(&payload) = metas.iter().find(|&&p| !spec.payload_fits(p)) {
                return Err(FrameError::PayloadTooLarge { kind, payload });
            }
            spec.state(kind)
        };
        let first = map.frame_of(addr);
        let record = |i: usize| FrameMeta {
            ref_count: 1,
            state,
            tag: MetaTag { kind, payload: metas.get(i).copied().unwrap_or(0) },
        };

        // The registry seals at the first claim attempt that passes validation.
        map.note_claim();
        for i in 0..len_frames {
            let frame = first + i;
            let res = map.meta_update(frame, |cur| cur.state.is_unused().then(|| record(i)));
            match res {
                Ok(_) => map.trace(TraceOp::Claim(frame)),
                Err(MemError::Conflict { .. }) => {
                    for j in (0..i).rev() {
                        let undo = map.meta_update(first + j, |cur| (cur == record(j)).then_some(FrameMeta::UNUSED));
                        debug_assert!(undo.is_ok() || map.faults().unsync_meta, "rollback lost a frame");
                        map.trace(TraceOp::Release(first + j));
                    }
                    return Err(FrameError::InUse { frame });
                }
                Err(_) => return Err(FrameError::OutOfRange),
            }
        }
        Ok(Segment { map: Arc::clone(map), first, len: len_frames, kind, state, origin })
    }

    /// Installs claim records with plain stores: no alignment, range,
    /// in-use or payload checks. Bench baseline only.
    pub(crate) fn claim_unchecked(map: &Arc<MemoryMap>, addr: PhysAddr, len_frames: usize, kind: MetaKindId) -> Segment {
        let state = map.kinds.read().get(kind).map_or(FrameState::Untyped(kind), |spec| spec.state(kind));
        let first = map.frame_of(addr);
        map.note_claim();
        for frame in first..first + len_frames {
            map.meta_store(frame, FrameMeta { ref_count: 1, state, tag: MetaTag { kind, payload: 0 } });
        }
        Segment { map: Arc::clone(map), first, len: len_frames, kind, state, origin: Origin::Allocator }
    }

    pub fn map(&self) -> &Arc<MemoryMap> {
        &self.map
    }

    pub fn start_paddr(&self) -> PhysAddr {
        self.map.frame_addr(self.first)
    }

    pub fn first_frame(&self) -> usize {
        self.first
    }

    pub fn frames(&self) -> std::ops::Range<usize> {
        self.first..self.first + self.len
    }

    pub fn len_frames(&self) -> usize {
        self.len
    }

    /// Size in bytes.
    pub fn span(&self) -> usize {
        self.len * self.map.frame_size()
    }

    pub fn kind(&self) -> MetaKindId {
        self.kind
    }

    pub fn state(&self) -> FrameState {
        self.state
    }

    pub fn is_untyped(&self) -> bool {
        self.state.is_untyped()
    }

    /// Narrows to an untyped handle, or gives the handle back if it is typed.
    pub fn try_into_untyped(self) -> Result<USegment, Segment> {
        if self.is_untyped() {
            Ok(USegment(self))
        } else {
            Err(self)
        }
    }

    fn check(&self, offset: usize, len: usize) -> Result<(), FrameError> {
        if !self.is_untyped() {
            return Err(FrameError::TypedAccess);
        }
        self.check_span(offset, len)
    }

    pub(crate) fn check_span(&self, offset: usize, len: usize) -> Result<(), FrameError> {
        let span = self.span();
        match offset.checked_add(len) {
            Some(end) if end <= span => Ok(()),
            _ => Err(FrameError::OutOfBounds { offset, len, span }),
        }
    }

    pub fn read_bytes(&self, offset: usize, len: usize) -> Result<Vec<u8>, FrameError> {
        self.check(offset, len)?;
        let mut out = vec![0; len];
        self.read_into(offset, &mut out)?;
        Ok(out)
    }

    pub fn read_into(&self, offset: usize, out: &mut [u8]) -> Result<(), FrameError> {
        self.check(offset, out.len())?;
        self.raw_read(offset, out);
        Ok(())
    }

    pub fn write_bytes(&self, offset: usize, data: &[u8]) -> Result<(), FrameError> {
        self.check(offset, data.len())?;
        self.raw_write(offset, data);
        Ok(())
    }

    pub fn read_pod<T: Pod>(&self, offset: usize) -> Result<T, FrameError> {
        if !offset.is_multiple_of(T::ALIGN) {
            return Err(FrameError::Misaligned { offset, align: T::ALIGN });
        }
        let mut buf = [0u8; 16];
        self.read_into(offset, &mut buf[..T::SIZE])?;
        Ok(T::decode(&buf[..T::SIZE]))
    }

    pub fn write_pod<T: Pod>(&self, offset: usize, value: T) -> Result<(), FrameError> {
        if !offset.is_multiple_of(T::ALIGN) {
            return Err(FrameError::Misaligned { offset, align: T::ALIGN });
        }
        let mut buf = [0u8; 16];
        value.encode(&mut buf[..T::SIZE]);
        self.write_bytes(offset, &buf[..T::SIZE])
    }

    /// Copy-out with no untyped or span check. Bench baseline only; out of
    /// range panics in the store instead of returning an error.
    pub fn read_bytes_unchecked(&self, offset: usize, out: &mut [u8]) {
        self.raw_read(offset, out);
    }

    pub fn write_bytes_unchecked(&self, offset: usize, data: &[u8]) {
        self.raw_write(offset, data);
    }

    /// Store access without the untyped or span checks. Typed-memory owners
    /// inside the framework (slabs, stacks) and the unchecked bench paths use
    /// this; slice bounds of the store still apply.
    pub(crate) fn raw_read(&self, offset: usize, out: &mut [u8]) {
        let addr = self.start_paddr().0 + offset;
        self.map.trace(TraceOp::ByteRead { addr, len: out.len() });
        self.map.store().read(addr, out);
    }

    pub(crate) fn raw_write(&self, offset: usize, data: &[u8]) {
        let addr = self.start_paddr().0 + offset;
        self.map.trace(TraceOp::ByteWrite { addr, len: data.len() });
        self.map.store().write(addr, data);
    }
}

impl Clone for Segment {
    /// Duplicates the handle: every covered frame gains one reference.
    fn clone(&self) -> Self {
        for f in self.frames() {
            let res = self.map.meta_update(f, |cur| {
                if cur.ref_count == u32::MAX {
                    panic!("frame {f}: reference count saturated");
                }
                Some(FrameMeta { ref_count: cur.ref_count + 1, ..cur })
            });
            debug_assert!(res.is_ok());
        }
        Segment {
            map: Arc::clone(&self.map),
            first: self.first,
            len: self.len,
            kind: self.kind,
            state: self.state,
            origin: self.origin,
        }
    }
}

impl Drop for Segment {
    fn drop(&mut self) {
        let mut released = Vec::new();
        for f in self.frames() {
            let res = self.map.meta_update(f, |cur| {
                if cur.ref_count == 0 {
                    return None;
                }
                Some(if cur.ref_count == 1 {
                    FrameMeta::UNUSED
                } else {
                    FrameMeta { ref_count: cur.ref_count - 1, ..cur }
                })
            });
            match res {
                Ok(prev) if prev.ref_count == 1 => {
                    self.map.trace(TraceOp::Release(f));
                    released.push(f);
                }
                Ok(_) => {}
                Err(e) => log::error!("dropping handle to frame {f}: {e}"),
            }
        }
        if self.origin == Origin::Allocator && !released.is_empty() {
            crate::frame_alloc::return_frames(&self.map, &released);
        }
    }
}

/// A single-frame handle.
#[derive(Clone, Debug)]
pub struct Frame(Segment);

impl Frame {
    pub fn from_unused(
        map: &Arc<MemoryMap>,
        addr: PhysAddr,
        kind: MetaKindId,
        initial_meta: u64,
    ) -> Result<Frame, FrameError> {
        Segment::from_unused(map, addr, 1, kind, &[initial_meta]).map(Frame)
    }

    pub fn index(&self) -> usize {
        self.0.first
    }

    pub fn into_segment(self) -> Segment {
        self.0
    }
}

impl Deref for Frame {
    type Target = Segment;

    fn deref(&self) -> &Segment {
        &self.0
    }
}

impl From<Frame> for Segment {
    fn from(f: Frame) -> Segment {
        f.0
    }
}

/// A segment known to be untyped.
#[derive(Clone, Debug)]
pub struct USegment(Segment);

impl USegment {
    pub fn into_segment(self) -> Segment {
        self.0
    }
}

impl Deref for USegment {
    type Target = Segment;

    fn deref(&self) -> &Segment {
        &self.0
    }
}

/// Plain-old-data: every `SIZE`-byte pattern is a valid value. Encoded
/// little-endian in the store.
pub trait Pod: Copy {
    const SIZE: usize;
    const ALIGN: usize;

    fn decode(bytes: &[u8]) -> Self;
    fn encode(self, out: &mut [u8]);

    fn descriptor() -> PodDescriptor {
        PodDescriptor { size: Self::SIZE, align: Self::ALIGN }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PodDescriptor {
    pub size: usize,
    pub align: usize,
}

macro_rules! impl_pod {
    ($($t:ty),*) => {$(
        impl Pod for $t {
            const SIZE: usize = std::mem::size_of::<$t>();
            const ALIGN: usize = std::mem::size_of::<$t>();

            fn decode(bytes: &[u8]) -> Self {
                let mut buf = [0u8; std::mem::size_of::<$t>()];
                buf.copy_from_slice(bytes);
                <$t>::from_le_bytes(buf)
            }

            fn encode(self, out: &mut [u8]) {
                out.copy_from_slice(&self.to_le_bytes());
            }
        }
    )*};
}

impl_pod!(u8, u16, u32, u64, u128, i8, i16, i32, i64, i128);

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mem::{mem_init, Region};

    fn map(frames: usize) -> Arc<MemoryMap> {
        mem_init(4096, frames, vec![Region::new(0, frames * 4096)]).unwrap()
    }

    #[test]
    fn from_unused_claims_once() {
        let m = map(4);
        let f = Frame::from_unused(&m, PhysAddr(0), MetaKindId::UNTYPED, 0).unwrap();
        let meta = m.meta_read(0).unwrap();
        assert_eq!(meta.ref_count, 1);
        assert_eq!(meta.state, FrameState::Untyped(MetaKindId::UNTYPED));
        assert_eq!(
            Frame::from_unused(&m, PhysAddr(0), MetaKindId::UNTYPED, 0).unwrap_err(),
            FrameError::InUse { frame: 0 }
        );
        drop(f);
        assert_eq!(m.meta_read(0).unwrap(), FrameMeta::UNUSED);
    }

    #[test]
    fn from_unused_validates_address() {
        let m = mem_init(4096, 4, vec![Region::new(0, 2 * 4096)]).unwrap();
        assert_eq!(
            Frame::from_unused(&m, PhysAddr(100), MetaKindId::UNTYPED, 0).unwrap_err(),
            FrameError::Unaligned(PhysAddr(100))
        );
        assert_eq!(
            Frame::from_unused(&m, PhysAddr(3 * 4096), MetaKindId::UNTYPED, 0).unwrap_err(),
            FrameError::OutOfRange
        );
        assert_eq!(
            Frame::from_unused(&m, PhysAddr(usize::MAX & !4095), MetaKindId::UNTYPED, 0).unwrap_err(),
            FrameError::OutOfRange
        );
    }

    #[test]
    fn segment_claim_is_all_or_nothing() {
        let m = map(4);
        let seg = Segment::from_unused(&m, PhysAddr(0), 2, MetaKindId::UNTYPED, &[]).unwrap();
        assert_eq!(m.meta_read(0).unwrap().ref_count, 1);
        assert_eq!(m.meta_read(1).unwrap().ref_count, 1);
        drop(seg);

        let busy = Frame::from_unused(&m, PhysAddr(4096), MetaKindId::UNTYPED, 0).unwrap();
        let err = Segment::from_unused(&m, PhysAddr(0), 2, MetaKindId::UNTYPED, &[]).unwrap_err();
        assert_eq!(err, FrameError::InUse { frame: 1 });
        assert_eq!(m.meta_read(0).unwrap(), FrameMeta::UNUSED);
        assert_eq!(m.meta_read(1).unwrap().ref_count, 1);
        drop(busy);

        assert_eq!(
            Segment::from_unused(&m, PhysAddr(0), 0, MetaKindId::UNTYPED, &[]).unwrap_err(),
            FrameError::OutOfRange
        );
    }

    #[test]
    fn duplicate_and_drop_are_inverse() {
        let m = map(1);
        let f = Frame::from_unused(&m, PhysAddr(0), MetaKindId::UNTYPED, 0).unwrap();
        let d = f.clone();
        assert_eq!(m.meta_read(0).unwrap().ref_count, 2);
        let dups: Vec<_> = (0..10).map(|_| f.clone()).collect();
        assert_eq!(m.meta_read(0).unwrap().ref_count, 12);
        drop(dups);
        drop(d);
        let meta = m.meta_read(0).unwrap();
        assert_eq!(meta.ref_count, 1);
        assert_eq!(meta.state, FrameState::Untyped(MetaKindId::UNTYPED));
    }

    #[test]
    #[should_panic(expected = "saturated")]
    fn saturated_count_is_fatal() {
        let m = map(1);
        let f = Frame::from_unused(&m, PhysAddr(0), MetaKindId::UNTYPED, 0).unwrap();
        let cur = m.meta_read(0).unwrap();
        m.meta_transition(0, cur, FrameMeta { ref_count: u32::MAX, ..cur }).unwrap();
        let _ = f.clone();
    }

    #[test]
    fn byte_access_bounds() {
        let m = map(2);
        let f = Frame::from_unused(&m, PhysAddr(0), MetaKindId::UNTYPED, 0).unwrap();
        assert_eq!(f.read_bytes(0, 0).unwrap(), Vec::<u8>::new());
        assert!(matches!(f.read_bytes(4090, 8), Err(FrameError::OutOfBounds { .. })));
        f.write_bytes(0, &[7u8; 4096]).unwrap();
        assert!(matches!(f.write_bytes(4096, &[1]), Err(FrameError::OutOfBounds { .. })));
        assert!(f.write_bytes(4096, &[]).is_ok());
        assert!(matches!(f.read_bytes(usize::MAX, 2), Err(FrameError::OutOfBounds { .. })));
        assert!(matches!(f.read_bytes(1, usize::MAX), Err(FrameError::OutOfBounds { .. })));
        // The neighbouring frame is untouched.
        assert!(m.raw_read(4096, 4096).iter().all(|&b| b == 0));
    }

    #[test]
    fn typed_handles_reject_byte_access() {
        let m = map(1);
        let f = Frame::from_unused(&m, PhysAddr(0), MetaKindId::PAGE_TABLE, 0).unwrap();
        assert_eq!(f.read_bytes(0, 1).unwrap_err(), FrameError::TypedAccess);
        assert_eq!(f.write_bytes(0, &[1]).unwrap_err(), FrameError::TypedAccess);
        assert_eq!(f.read_pod::<u32>(0).unwrap_err(), FrameError::TypedAccess);
        let seg = f.into_segment();
        assert!(seg.try_into_untyped().is_err());
    }

    #[test]
    fn pod_is_little_endian() {
        let m = map(1);
        let f = Frame::from_unused(&m, PhysAddr(0), MetaKindId::UNTYPED, 0).unwrap();
        f.write_pod(8, 0u32).unwrap();
        assert_eq!(f.read_pod::<u32>(8).unwrap(), 0);
        f.write_pod(8, 0xA1B2_C3D4u32).unwrap();
        assert_eq!(f.read_bytes(8, 4).unwrap(), vec![0xD4, 0xC3, 0xB2, 0xA1]);
        assert_eq!(f.read_pod::<u32>(8).unwrap(), 0xA1B2_C3D4);
    }

    #[test]
    fn pod_alignment_sweep() {
        let m = map(1);
        let f = Frame::from_unused(&m, PhysAddr(0), MetaKindId::UNTYPED, 0).unwrap();
        for offset in 0..8 {
            let res = f.write_pod(offset, 1u32);
            assert_eq!(res.is_err(), offset % 4 != 0, "offset {offset}");
            if offset % 4 != 0 {
                assert_eq!(res.unwrap_err(), FrameError::Misaligned { offset, align: 4 });
            }
        }
    }

    #[test]
    fn kind_registration_seals_at_first_claim() {
        let m = map(2);
        let k = m.register_meta_kind(MetaKindSpec::untyped("dma-buf", 2)).unwrap();
        assert_eq!(k, MetaKindId(5));
        assert!(matches!(
            Frame::from_unused(&m, PhysAddr(0), k, 0x1_0000),
            Err(FrameError::PayloadTooLarge { .. })
        ));
        let f = Frame::from_unused(&m, PhysAddr(0), k, 0xffff).unwrap();
        assert_eq!(m.meta_read(0).unwrap().tag, MetaTag { kind: k, payload: 0xffff });
        assert_eq!(
            m.register_meta_kind(MetaKindSpec::untyped("late", 0)),
            Err(FrameError::RegistrySealed)
        );
        drop(f);
        assert!(matches!(
            Frame::from_unused(&m, PhysAddr(0), MetaKindId(99), 0),
            Err(FrameError::UnknownKind(_))
        ));
    }

    #[test]
    fn concurrent_disjoint_writes_are_both_visible() {
        let m = map(1);
        let f = Frame::from_unused(&m, PhysAddr(0), MetaKindId::UNTYPED, 0).unwrap();
        std::thread::scope(|s| {
            let a = f.clone();
            let b = f.clone();
            s.spawn(move || a.write_bytes(0, &[0x11; 2048]).unwrap());
            s.spawn(move || b.write_bytes(2048, &[0x22; 2048]).unwrap());
        });
        let bytes = f.read_bytes(0, 4096).unwrap();
        assert!(bytes[..2048].iter().all(|&b| b == 0x11));
        assert!(bytes[2048..].iter().all(|&b| b == 0x22));
        assert_eq!(m.meta_read(0).unwrap().ref_count, 1);
    }
}
