//! System call loop: scripted user programs on the simulated CPUs.

use std::collections::BTreeMap;

use fk_core::privsep::{Perms, TrapReason, UserContext, UserMode, UserOp, VmSpace};
use fk_core::{alloc_frames, AllocLayout, MetaKindId, ScriptOp, Segment, TaskId};

use crate::manifest::{Services, Syscall};
use crate::ServiceError;

/// Where user memory starts in every address space.
pub const USER_BASE: usize = 0x40_0000;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserProgram {
    pub name: String,
    pub ops: Vec<UserOp>,
    /// Frames of user memory mapped at `USER_BASE`.
    pub frames: usize,
}

impl UserProgram {
    pub fn new(name: impl Into<String>, ops: Vec<UserOp>) -> Self {
        Self { name: name.into(), ops, frames: 1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskEnd {
    Exited,
    UnknownSyscall(u64),
    PageFault { vaddr: usize, write: bool },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrapRecord {
    pub task: TaskId,
    pub cpu: usize,
    pub trap: TrapReason,
}

#[derive(Debug)]
pub struct TaskRun {
    pub id: TaskId,
    pub name: String,
    /// Bytes the task passed to `write`.
    pub output: Vec<u8>,
    pub end: Option<TaskEnd>,
    pub syscalls: usize,
    user: UserMode,
    space: VmSpace,
    _memory: Segment,
}

#[derive(Debug)]
pub struct SyscallRun {
    pub tasks: Vec<TaskRun>,
    pub traps: Vec<TrapRecord>,
    pub steps: usize,
}

impl SyscallRun {
    pub fn task(&self, name: &str) -> Option<&TaskRun> {
        self.tasks.iter().find(|t| t.name == name)
    }

    pub fn finished(&self) -> bool {
        self.tasks.iter().all(|t| t.end.is_some())
    }

    /// Order in which tasks trapped, consecutive repeats collapsed.
    pub fn trap_order(&self) -> Vec<TaskId> {
        let mut out: Vec<TaskId> = Vec::new();
        for r in &self.traps {
            if out.last() != Some(&r.task) {
                out.push(r.task);
            }
        }
        out
    }
}

fn spawn(sys: &Services, prog: &UserProgram) -> Result<TaskRun, ServiceError> {
    let fs = sys.map.frame_size();
    let memory = alloc_frames(&sys.map, AllocLayout::frames(prog.frames.max(1), fs)?, MetaKindId::UNTYPED, &[])?;
    let mut space = VmSpace::new(fs);
    space.map_segment(USER_BASE, &memory, Perms::RW)?;
    let id = sys.sched.task_spawn([ScriptOp::Run(u32::MAX)], prog.name.clone())?;
    Ok(TaskRun {
        id,
        name: prog.name.clone(),
        output: Vec::new(),
        end: None,
        syscalls: 0,
        user: UserMode::new(UserContext::new(), prog.ops.clone()),
        space,
        _memory: memory,
    })
}

/// Runs `programs` as user tasks until they all end or `budget` rounds pass.
/// Each round gives every CPU one trap's worth of user execution.
pub fn demo_syscall_loop(sys: &Services, programs: &[UserProgram], budget: usize) -> Result<SyscallRun, ServiceError> {
    let mut tasks = BTreeMap::new();
    for p in programs {
        let t = spawn(sys, p)?;
        tasks.insert(t.id, t);
    }
    let mut traps = Vec::new();
    let mut steps = 0;
    while steps < budget && tasks.values().any(|t| t.end.is_none()) {
        steps += 1;
        for cpu in 0..sys.sched.cpu_count() {
            let Some(id) = sys.sched.current(cpu) else {
                sys.sched.tick(cpu)?;
                continue;
            };
            let Some(t) = tasks.get_mut(&id) else {
                sys.sched.tick(cpu)?;
                continue;
            };
            let trap = t.user.run(&t.space);
            traps.push(TrapRecord { task: id, cpu, trap });
            match trap {
                TrapReason::Syscall(n) => {
                    t.syscalls += 1;
                    match sys.manifest.syscall(n) {
                        Some(Syscall::Write) => {
                            let ptr = t.user.ctx.reg("rdi").unwrap_or(0) as usize;
                            let len = t.user.ctx.reg("rsi").unwrap_or(0) as usize;
                            let ret = match t.space.read_user(ptr, len) {
                                Ok(bytes) => {
                                    t.output.extend_from_slice(&bytes);
                                    len as u64
                                }
                                Err(_) => u64::MAX,
                            };
                            t.user.ctx.set_reg("rax", ret);
                            sys.sched.tick(cpu)?;
                        }
                        Some(Syscall::Yield) => {
                            sys.sched.task_yield(cpu)?;
                        }
                        Some(Syscall::Exit) => {
                            t.end = Some(TaskEnd::Exited);
                            sys.sched.task_exit(cpu)?;
                        }
                        None => {
                            log::warn!("task {} ({}): unknown syscall {n}", id, t.name);
                            t.end = Some(TaskEnd::UnknownSyscall(n));
                            sys.sched.task_exit(cpu)?;
                        }
                    }
                }
                TrapReason::PageFault { vaddr, write } => {
                    log::warn!("task {} ({}): page fault at {vaddr:#x}", id, t.name);
                    t.end = Some(TaskEnd::PageFault { vaddr, write });
                    sys.sched.task_exit(cpu)?;
                }
                TrapReason::Exit => {
                    t.end = Some(TaskEnd::Exited);
                    sys.sched.task_exit(cpu)?;
                }
            }
        }
    }
    Ok(SyscallRun { tasks: tasks.into_values().collect(), traps, steps })
}
