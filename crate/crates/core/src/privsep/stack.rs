//! Kernel stacks with a guard frame below the usable range.

use std::sync::Arc;

use thiserror::Error;

use crate::frame::{MetaKindId, Segment};
use crate::frame_alloc::{alloc_frames, alloc_frames_unchecked, AllocError, AllocLayout};
use crate::mem::MemoryMap;

/// Byte the guard frame is filled with.
pub const GUARD_POISON: u8 = 0xA5;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StackError {
    #[error("a stack needs at least one frame")]
    Empty,
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error("access at offset {0} touches the guard frame")]
    GuardFault(i64),
    #[error("access at offset {offset} (+{len}) is outside the stack")]
    OutOfBounds { offset: i64, len: usize },
}

/// A `Typed(KernelStack)` stack. Offsets are relative to the lowest usable
/// byte; the guard frame sits at `[-frame_size, 0)`.
#[derive(Debug)]
pub struct KernelStack {
    backing: Segment,
    guarded: bool,
}

impl KernelStack {
    pub fn new(map: &Arc<MemoryMap>, frames: usize) -> Result<Self, StackError> {
        if frames == 0 {
            return Err(StackError::Empty);
        }
        let fs = map.frame_size();
        let layout = AllocLayout::frames(frames + 1, fs)?;
        let backing = alloc_frames(map, layout, MetaKindId::KERNEL_STACK, &[])?;
        map.store().fill(backing.start_paddr().0, fs, GUARD_POISON);
        Ok(Self { backing, guarded: true })
    }

    /// A stack without a guard frame. Bench baseline only.
    pub fn new_unchecked(map: &Arc<MemoryMap>, frames: usize) -> Result<Self, StackError> {
        let layout = AllocLayout::frames(frames.max(1), map.frame_size())?;
        let backing = alloc_frames_unchecked(map, layout, MetaKindId::KERNEL_STACK)?;
        Ok(Self { backing, guarded: false })
    }

    fn guard_len(&self) -> usize {
        if self.guarded {
            self.backing.map().frame_size()
        } else {
            0
        }
    }

    /// Usable bytes.
    pub fn size(&self) -> usize {
        self.backing.span() - self.guard_len()
    }

    /// All frames including the guard.
    pub fn frames(&self) -> std::ops::Range<usize> {
        self.backing.frames()
    }

    pub fn guard_frame(&self) -> Option<usize> {
        self.guarded.then(|| self.backing.first_frame())
    }

    /// Physical address of usable offset 0.
    pub fn base(&self) -> usize {
        self.backing.start_paddr().0 + self.guard_len()
    }

    fn check(&self, offset: i64, len: usize) -> Result<usize, StackError> {
        let size = self.size() as i64;
        let guard = self.guard_len() as i64;
        let end = offset.checked_add(len as i64).ok_or(StackError::OutOfBounds { offset, len })?;
        if offset >= 0 && end <= size {
            return Ok(offset as usize);
        }
        // Any overlap with [-guard, 0) is a guard hit.
        if offset < 0 && end > -guard && offset.max(-guard) < end.min(0) {
            return Err(StackError::GuardFault(offset.max(-guard)));
        }
        if len == 0 && (-guard..0).contains(&offset) {
            return Err(StackError::GuardFault(offset));
        }
        Err(StackError::OutOfBounds { offset, len })
    }

    pub fn write(&self, offset: i64, data: &[u8]) -> Result<(), StackError> {
        let off = self.check(offset, data.len())?;
        self.backing.raw_write(self.guard_len() + off, data);
        Ok(())
    }

    pub fn read(&self, offset: i64, out: &mut [u8]) -> Result<(), StackError> {
        let off = self.check(offset, out.len())?;
        self.backing.raw_read(self.guard_len() + off, out);
        Ok(())
    }

    /// True if every guard byte still holds the poison pattern.
    pub fn guard_intact(&self) -> bool {
        if !self.guarded {
            return true;
        }
        let fs = self.guard_len();
        self.backing.map().raw_read(self.backing.start_paddr().0, fs).iter().all(|&b| b == GUARD_POISON)
    }
}
