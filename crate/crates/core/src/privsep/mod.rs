//! Privilege separation: what de-privileged code may touch.
//!
//! User contexts hide the sensitive flag bits, address spaces and DMA only
//! take untyped memory, kernel stacks carry a guard frame, I/O handles only
//! cover ranges labeled insensitive, and interrupts reach a handler only from
//! devices authorized for the vector.

mod dma;
mod io;
mod irq;
mod stack;
mod user;

pub use dma::{Blocked, DmaDirection, DmaError, DmaMapping, DmaMode, Iommu};
pub use io::{IoDevice, IoError, IoHandle, IoKind, IoSpace, RegisterFile, Sensitivity};
pub use irq::{Delivery, IrqError, IrqHandler, IrqTable, IRQ_VECTORS};
pub use stack::{KernelStack, StackError, GUARD_POISON};
pub use user::{
    reg_index, Perms, TrapReason, UserContext, UserMode, UserOp, VmError, VmSpace, FLAG_IF, FLAG_IOPL, REG_NAMES,
    SENSITIVE_MASK,
};
