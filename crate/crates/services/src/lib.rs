//! Example OS services built only on the safe `fk-core` API.
//!
//! A syscall loop that runs scripted user programs on simulated CPUs, an
//! echo device driver that talks to its device through an I/O window and a
//! DMA buffer, and a scanner that checks this crate stays off the
//! privileged-only entry points.

pub mod driver;
pub mod manifest;
pub mod program;
pub mod syscall;
pub mod tcb;

use fk_core::privsep::{DmaError, IoError, IrqError, VmError};
use fk_core::slab::HeapError;
use fk_core::{AllocError, FrameError, SchedError};
use thiserror::Error;

pub use driver::{DemoDevice, EchoDriver, DEFAULT_BUDGET};
pub use manifest::{SchedPolicy, ServiceManifest, Services, Syscall};
pub use program::{parse_program, ProgramError};
pub use syscall::{demo_syscall_loop, SyscallRun, TaskEnd, TaskRun, TrapRecord, UserProgram, USER_BASE};
pub use tcb::{tcb_scan, Finding, ModuleLines, TcbReport, FORBIDDEN};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Sched(#[from] SchedError),
    #[error(transparent)]
    Heap(#[from] HeapError),
    #[error(transparent)]
    Vm(#[from] VmError),
    #[error(transparent)]
    Dma(#[from] DmaError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Irq(#[from] IrqError),
    #[error("device did not complete within {steps} steps")]
    DeviceTimeout { steps: usize },
    #[error("request of {len} bytes exceeds the device limit of {max}")]
    RequestTooLarge { len: usize, max: usize },
}
