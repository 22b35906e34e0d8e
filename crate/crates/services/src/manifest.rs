//! Which services to load and how to bring them up.

use std::sync::Arc;

use fk_core::privsep::{Iommu, IoSpace, IrqTable};
use fk_core::sched::{DoubleBooking, RoundRobin, Vruntime};
use fk_core::{register_frame_allocator, BuddyAllocator, GlobalHeap, MemoryMap, SchedCore, Scheduler, SizeClassCache};

use crate::ServiceError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SchedPolicy {
    RoundRobin,
    Vruntime,
    /// Hands the same task to every CPU. For negative tests.
    DoubleBooking,
}

impl SchedPolicy {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "round-robin" | "rr" => Some(Self::RoundRobin),
            "vruntime" | "fair" => Some(Self::Vruntime),
            "double-booking" => Some(Self::DoubleBooking),
            _ => None,
        }
    }

    pub fn build(self, cpus: usize) -> Arc<dyn Scheduler> {
        match self {
            Self::RoundRobin => Arc::new(RoundRobin::new(cpus)),
            Self::Vruntime => Arc::new(Vruntime::new(cpus)),
            Self::DoubleBooking => Arc::new(DoubleBooking::default()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Syscall {
    Write,
    Yield,
    Exit,
}

/// Service units to load at boot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ServiceManifest {
    pub cpus: usize,
    pub scheduler: SchedPolicy,
    /// Register the buddy frame allocator.
    pub buddy: bool,
    /// Size classes for the global heap; empty means no heap.
    pub slab_classes: Vec<usize>,
    /// Syscall numbers and what they do.
    pub syscalls: Vec<(u64, Syscall)>,
}

impl Default for ServiceManifest {
    fn default() -> Self {
        Self {
            cpus: 1,
            scheduler: SchedPolicy::RoundRobin,
            buddy: true,
            slab_classes: vec![16, 32, 64, 128, 256, 512, 1024, 2048],
            syscalls: vec![(0, Syscall::Write), (1, Syscall::Yield), (2, Syscall::Exit)],
        }
    }
}

impl ServiceManifest {
    pub fn syscall(&self, n: u64) -> Option<Syscall> {
        self.syscalls.iter().find(|(k, _)| *k == n).map(|(_, s)| *s)
    }
}

/// A booted system: the memory map plus every registered service.
pub struct Services {
    pub manifest: ServiceManifest,
    pub map: Arc<MemoryMap>,
    pub sched: Arc<SchedCore>,
    pub heap: Option<(GlobalHeap, Arc<SizeClassCache>)>,
    pub iommu: Arc<Iommu>,
    pub io: Arc<IoSpace>,
    pub irq: Arc<IrqTable>,
}

impl std::fmt::Debug for Services {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Services").field("manifest", &self.manifest).finish_non_exhaustive()
    }
}

impl Services {
    /// Registers the manifest's policies on a fresh map and scheduler core.
    pub fn boot(map: &Arc<MemoryMap>, sched: SchedCore, manifest: ServiceManifest) -> Result<Self, ServiceError> {
        if manifest.buddy {
            register_frame_allocator(map, Arc::new(BuddyAllocator::new(map.frame_size())))?;
        }
        sched.register_scheduler(manifest.scheduler.build(sched.cpu_count()))?;
        let heap = if manifest.slab_classes.is_empty() {
            None
        } else {
            Some(GlobalHeap::register(map, &manifest.slab_classes)?)
        };
        log::info!("booted {} cpus, {:?}", sched.cpu_count(), manifest.scheduler);
        Ok(Self {
            manifest,
            map: Arc::clone(map),
            sched: Arc::new(sched),
            heap,
            iommu: Iommu::new(map),
            io: Arc::new(IoSpace::new()),
            irq: Arc::new(IrqTable::new()),
        })
    }
}
