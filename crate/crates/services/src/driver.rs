//! Echo device and its driver.
//!
//! The device exposes a small register window. The driver loads a payload
//! into `DATA`, points the device at its DMA buffer, starts it and polls
//! `STATUS`. The device copies the payload back into the buffer by DMA.

use std::ops::Range;
use std::sync::Arc;

use fk_core::privsep::{DmaDirection, DmaMapping, DmaMode, IoDevice, IoHandle, IoKind, Iommu, IrqTable, Sensitivity};
use fk_core::{alloc_frames, AllocLayout, MetaKindId, Segment};
use parking_lot::Mutex;

use crate::manifest::Services;
use crate::ServiceError;

pub const REG_CMD: usize = 0x00;
pub const REG_LEN: usize = 0x04;
pub const REG_IOVA_LO: usize = 0x08;
pub const REG_IOVA_HI: usize = 0x0c;
pub const REG_STATUS: usize = 0x10;
pub const REG_DATA: usize = 0x40;
pub const DATA_LEN: usize = 0x40;
pub const WINDOW_LEN: usize = 0x100;

pub const CMD_ECHO: u32 = 1;

pub const STATUS_IDLE: u32 = 0;
pub const STATUS_BUSY: u32 = 1;
pub const STATUS_DONE: u32 = 2;
pub const STATUS_ERROR: u32 = 3;

/// Status polls a request may take before the driver gives up.
pub const DEFAULT_BUDGET: usize = 1000;

struct DeviceState {
    regs: [u8; WINDOW_LEN],
    remaining: usize,
}

impl DeviceState {
    fn reg(&self, off: usize) -> u32 {
        u32::from_le_bytes(self.regs[off..off + 4].try_into().unwrap())
    }

    fn set_reg(&mut self, off: usize, v: u32) {
        self.regs[off..off + 4].copy_from_slice(&v.to_le_bytes());
    }
}

/// A device that echoes `DATA` into host memory by DMA. Each `STATUS` read
/// moves it forward one step.
pub struct DemoDevice {
    id: u32,
    iommu: Arc<Iommu>,
    irq: Option<(Arc<IrqTable>, usize)>,
    state: Mutex<DeviceState>,
}

impl DemoDevice {
    pub fn new(id: u32, iommu: Arc<Iommu>, irq: Option<(Arc<IrqTable>, usize)>) -> Self {
        Self { id, iommu, irq, state: Mutex::new(DeviceState { regs: [0; WINDOW_LEN], remaining: 0 }) }
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    fn start(&self, st: &mut DeviceState) {
        let len = st.reg(REG_LEN) as usize;
        if len > DATA_LEN {
            st.set_reg(REG_STATUS, STATUS_ERROR);
            return;
        }
        st.remaining = 2 + len / 16;
        st.set_reg(REG_STATUS, STATUS_BUSY);
    }

    fn step(&self, st: &mut DeviceState) {
        if st.reg(REG_STATUS) != STATUS_BUSY {
            return;
        }
        if st.remaining > 0 {
            st.remaining -= 1;
            return;
        }
        let len = st.reg(REG_LEN) as usize;
        let iova = (st.reg(REG_IOVA_HI) as usize) << 32 | st.reg(REG_IOVA_LO) as usize;
        let data = st.regs[REG_DATA..REG_DATA + len].to_vec();
        // A blocked write leaves the device busy; it retries on the next poll.
        if self.iommu.device_dma_write(self.id, iova, &data).is_ok() {
            st.set_reg(REG_STATUS, STATUS_DONE);
            if let Some((irq, vec)) = &self.irq {
                irq.device_raise(self.id, *vec);
            }
        }
    }
}

impl IoDevice for DemoDevice {
    fn read(&self, offset: usize, out: &mut [u8]) {
        let mut st = self.state.lock();
        if offset == REG_STATUS {
            self.step(&mut st);
        }
        let end = (offset + out.len()).min(WINDOW_LEN);
        let n = end.saturating_sub(offset);
        out[..n].copy_from_slice(&st.regs[offset.min(WINDOW_LEN)..end]);
        out[n..].fill(0xff);
    }

    fn write(&self, offset: usize, data: &[u8]) {
        let mut st = self.state.lock();
        if offset == REG_STATUS || offset >= WINDOW_LEN {
            return;
        }
        let end = (offset + data.len()).min(WINDOW_LEN);
        st.regs[offset..end].copy_from_slice(&data[..end - offset]);
        if offset == REG_CMD && st.reg(REG_CMD) == CMD_ECHO {
            self.start(&mut st);
        }
    }
}

/// Driver for [`DemoDevice`].
pub struct EchoDriver {
    regs: IoHandle,
    buffer: Segment,
    mapping: Option<DmaMapping>,
    iommu: Arc<Iommu>,
    /// Status polls per request.
    pub budget: usize,
}

impl std::fmt::Debug for EchoDriver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EchoDriver").field("regs", &self.regs).field("mapped", &self.mapping.is_some()).finish()
    }
}

impl EchoDriver {
    /// Attaches `device` at `window` and labels the window insensitive. Must
    /// run before the registry is sealed.
    pub fn install(sys: &Services, device: Arc<DemoDevice>, window: Range<usize>) -> Result<(), ServiceError> {
        sys.io.attach(IoKind::Mem, window.clone(), device)?;
        sys.io.label(IoKind::Mem, window, Sensitivity::Insensitive)?;
        Ok(())
    }

    /// Seals the registry if needed, takes the window of an installed device
    /// and allocates the DMA buffer. The buffer is not mapped yet.
    pub fn open(sys: &Services, window: Range<usize>, buffer_frames: usize) -> Result<Self, ServiceError> {
        sys.io.seal();
        let regs = sys.io.iomem_acquire(window)?;
        let fs = sys.map.frame_size();
        let buffer = alloc_frames(&sys.map, AllocLayout::frames(buffer_frames.max(1), fs)?, MetaKindId::UNTYPED, &[])?;
        Ok(Self { regs, buffer, mapping: None, iommu: Arc::clone(&sys.iommu), budget: DEFAULT_BUDGET })
    }

    /// `install` followed by `open`.
    pub fn probe(
        sys: &Services,
        device: Arc<DemoDevice>,
        window: Range<usize>,
        buffer_frames: usize,
    ) -> Result<Self, ServiceError> {
        Self::install(sys, device, window.clone())?;
        Self::open(sys, window, buffer_frames)
    }

    pub fn map_buffer(&mut self) -> Result<usize, ServiceError> {
        let m = self.iommu.dma_map(&self.buffer, DmaMode::Coherent, DmaDirection::FromDevice)?;
        let iova = m.iova();
        self.mapping = Some(m);
        Ok(iova)
    }

    pub fn unmap_buffer(&mut self) {
        self.mapping = None;
    }

    pub fn buffer(&self) -> &Segment {
        &self.buffer
    }

    /// Sends `data` and returns what the device wrote back.
    pub fn request(&self, data: &[u8]) -> Result<Vec<u8>, ServiceError> {
        if data.len() > DATA_LEN {
            return Err(ServiceError::RequestTooLarge { len: data.len(), max: DATA_LEN });
        }
        for (i, &b) in data.iter().enumerate() {
            self.regs.write_once(REG_DATA + i, b)?;
        }
        let iova = self.mapping.as_ref().map_or(0, DmaMapping::iova) as u64;
        self.regs.write_once(REG_LEN, data.len() as u32)?;
        self.regs.write_once(REG_IOVA_LO, iova as u32)?;
        self.regs.write_once(REG_IOVA_HI, (iova >> 32) as u32)?;
        self.regs.write_once(REG_CMD, CMD_ECHO)?;
        for _ in 0..self.budget {
            match self.regs.read_once::<u32>(REG_STATUS)? {
                STATUS_DONE => {
                    self.regs.write_once(REG_CMD, 0u32)?;
                    return Ok(self.buffer.read_bytes(0, data.len())?);
                }
                STATUS_ERROR => return Err(ServiceError::RequestTooLarge { len: data.len(), max: DATA_LEN }),
                _ => {}
            }
        }
        Err(ServiceError::DeviceTimeout { steps: self.budget })
    }
}
