//! Privileged framework core of a desk-scale framekernel.
//!
//! The crate owns everything whose correctness memory safety rests on: the
//! simulated physical memory and its metadata array, counted frame handles,
//! the guarded injection points for frame allocators, slab caches and
//! schedulers, the privilege-separation checks around user space, DMA,
//! port/MMIO access and interrupts, and a trace oracle for metadata races and
//! mutability violations.

pub mod bench;
pub mod buddy;
pub mod frame;
pub mod frame_alloc;
pub mod mem;
pub mod oracle;
pub mod privsep;
pub mod sched;
pub mod slab;
pub mod snapshot;
mod store;

pub use buddy::BuddyAllocator;
pub use frame::{Frame, FrameError, MetaKindId, MetaKindSpec, Pod, Segment, USegment};
pub use frame_alloc::{alloc_frames, alloc_frames_unchecked, register_frame_allocator, AllocError, AllocLayout, FrameAlloc};
pub use mem::{mem_init, FrameMeta, FrameState, MapConfig, MemError, MemoryMap, PhysAddr, Region, TypedKind};
pub use slab::{GlobalHeap, HeapObject, HeapSlot, SizeClassCache, Slab, SlabError, SlabPolicy, TypeTag};
pub use snapshot::{snapshot_diff, FrameDelta, Snapshot, SnapshotError};
pub use sched::{LocalRunQueue, SchedCore, SchedError, SchedReport, Scheduler, ScriptOp, Task, TaskId};
