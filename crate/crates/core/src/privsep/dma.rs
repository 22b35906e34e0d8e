//! DMA through a simulated IOMMU.
//!
//! No memory is device-visible until an untyped segment is mapped. Each
//! mapping opens a window of device addresses over exactly the segment's
//! frames; device accesses outside every live window are blocked and logged.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use thiserror::Error;

use crate::frame::Segment;
use crate::mem::MemoryMap;
use crate::oracle::TraceOp;

/// First device address handed out; keeps windows away from zero.
const IOVA_BASE: usize = 0x1_0000_0000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DmaMode {
    /// Long-lived, always coherent.
    Coherent,
    /// Streaming; the mapping is for one transfer direction.
    Stream,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DmaDirection {
    ToDevice,
    FromDevice,
    Bidirectional,
}

impl DmaDirection {
    fn device_may_write(self) -> bool {
        !matches!(self, DmaDirection::ToDevice)
    }

    fn device_may_read(self) -> bool {
        !matches!(self, DmaDirection::FromDevice)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DmaError {
    #[error("only untyped memory can be mapped for DMA")]
    TypedMemoryRejected,
    #[error("segment belongs to a different memory map")]
    ForeignMap,
}

/// A blocked device access.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Blocked {
    pub device: u32,
    pub iova: usize,
    pub len: usize,
    pub write: bool,
}

struct Window {
    seg: Segment,
    direction: DmaDirection,
}

struct Tables {
    windows: BTreeMap<usize, Window>,
    next_iova: usize,
    blocked: Vec<Blocked>,
}

pub struct Iommu {
    map: Arc<MemoryMap>,
    tables: Mutex<Tables>,
    landed: AtomicUsize,
}

impl fmt::Debug for Iommu {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = self.tables.lock();
        f.debug_struct("Iommu").field("windows", &t.windows.len()).field("blocked", &t.blocked.len()).finish()
    }
}

impl Iommu {
    pub fn new(map: &Arc<MemoryMap>) -> Arc<Self> {
        Arc::new(Self {
            map: Arc::clone(map),
            tables: Mutex::new(Tables { windows: BTreeMap::new(), next_iova: IOVA_BASE, blocked: Vec::new() }),
            landed: AtomicUsize::new(0),
        })
    }

    /// Opens a window over `seg`. The mapping keeps its own reference.
    pub fn dma_map(self: &Arc<Self>, seg: &Segment, mode: DmaMode, direction: DmaDirection) -> Result<DmaMapping, DmaError> {
        if !seg.is_untyped() {
            return Err(DmaError::TypedMemoryRejected);
        }
        if !Arc::ptr_eq(seg.map(), &self.map) {
            return Err(DmaError::ForeignMap);
        }
        let fs = self.map.frame_size();
        let mut t = self.tables.lock();
        let iova = t.next_iova;
        // A one-frame gap between windows so an overrun never lands in the next.
        t.next_iova += seg.span() + fs;
        t.windows.insert(iova, Window { seg: seg.clone(), direction });
        Ok(DmaMapping { iommu: Arc::clone(self), iova, len: seg.span(), mode, direction })
    }

    fn window_for(t: &Tables, iova: usize, len: usize) -> Option<(&Window, usize)> {
        let (&base, w) = t.windows.range(..=iova).next_back()?;
        let off = iova - base;
        let end = off.checked_add(len)?;
        (end <= w.seg.span()).then_some((w, off))
    }

    /// A device write. Lands only if `[iova, iova + len)` lies inside one
    /// live window that allows device writes.
    pub fn device_dma_write(&self, device: u32, iova: usize, data: &[u8]) -> Result<(), Blocked> {
        let mut t = self.tables.lock();
        match Self::window_for(&t, iova, data.len()) {
            Some((w, off)) if w.direction.device_may_write() => {
                let addr = w.seg.start_paddr().0 + off;
                self.map.trace(TraceOp::ByteWrite { addr, len: data.len() });
                self.map.store().write(addr, data);
                self.landed.fetch_add(1, Ordering::Relaxed);
                Ok(())
            }
            _ => {
                let b = Blocked { device, iova, len: data.len(), write: true };
                log::warn!("iommu: blocked device write {b:?}");
                t.blocked.push(b.clone());
                Err(b)
            }
        }
    }

    pub fn device_dma_read(&self, device: u32, iova: usize, len: usize) -> Result<Vec<u8>, Blocked> {
        let mut t = self.tables.lock();
        match Self::window_for(&t, iova, len) {
            Some((w, off)) if w.direction.device_may_read() => {
                let addr = w.seg.start_paddr().0 + off;
                self.map.trace(TraceOp::ByteRead { addr, len });
                Ok(self.map.raw_read(addr, len))
            }
            _ => {
                let b = Blocked { device, iova, len, write: false };
                log::warn!("iommu: blocked device read {b:?}");
                t.blocked.push(b.clone());
                Err(b)
            }
        }
    }

    pub fn blocked(&self) -> Vec<Blocked> {
        self.tables.lock().blocked.clone()
    }

    pub fn landed_writes(&self) -> usize {
        self.landed.load(Ordering::Relaxed)
    }

    /// Frames currently writable by devices.
    pub fn device_writable_frames(&self) -> Vec<usize> {
        let t = self.tables.lock();
        t.windows.values().filter(|w| w.direction.device_may_write()).flat_map(|w| w.seg.frames()).collect()
    }

    pub fn live_windows(&self) -> Vec<(usize, usize)> {
        self.tables.lock().windows.iter().map(|(&b, w)| (b, w.seg.span())).collect()
    }
}

/// A live DMA window. Dropping it closes the window.
pub struct DmaMapping {
    iommu: Arc<Iommu>,
    iova: usize,
    len: usize,
    mode: DmaMode,
    direction: DmaDirection,
}

impl fmt::Debug for DmaMapping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DmaMapping")
            .field("iova", &format_args!("{:#x}", self.iova))
            .field("len", &self.len)
            .field("mode", &self.mode)
            .field("direction", &self.direction)
            .finish()
    }
}

impl DmaMapping {
    /// Device-visible start address.
    pub fn iova(&self) -> usize {
        self.iova
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn mode(&self) -> DmaMode {
        self.mode
    }

    pub fn direction(&self) -> DmaDirection {
        self.direction
    }

    pub fn unmap(self) {}
}

impl Drop for DmaMapping {
    fn drop(&mut self) {
        self.iommu.tables.lock().windows.remove(&self.iova);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::MetaKindId;
    use crate::mem::{mem_init, PhysAddr, Region};

    #[test]
    fn window_and_unmap() {
        let map = mem_init(4096, 16, vec![Region::new(0, 16 * 4096)]).unwrap();
        let iommu = Iommu::new(&map);
        let seg = Segment::from_unused(&map, PhysAddr(4096), 2, MetaKindId::UNTYPED, &[]).unwrap();
        let m = iommu.dma_map(&seg, DmaMode::Coherent, DmaDirection::FromDevice).unwrap();
        assert_eq!(m.len(), 8192);
        iommu.device_dma_write(1, m.iova() + 100, b"xyz").unwrap();
        assert_eq!(seg.read_bytes(100, 3).unwrap(), b"xyz");
        assert!(iommu.device_dma_write(1, m.iova() + 8192, b"x").is_err());
        assert!(iommu.device_dma_write(1, m.iova() + 8190, b"xyz").is_err());
        assert!(iommu.device_dma_read(1, m.iova(), 4).is_err());
        let iova = m.iova();
        m.unmap();
        assert!(iommu.device_dma_write(1, iova, b"x").is_err());
        assert_eq!(iommu.blocked().len(), 4);

        let typed = Segment::from_unused(&map, PhysAddr(8 * 4096), 1, MetaKindId::SLAB, &[]).unwrap();
        assert_eq!(iommu.dma_map(&typed, DmaMode::Stream, DmaDirection::Bidirectional).unwrap_err(), DmaError::TypedMemoryRejected);
    }
}
