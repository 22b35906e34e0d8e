//! User contexts, address spaces and scripted user programs.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::BitOr;

use thiserror::Error;

use crate::frame::Segment;
use crate::frame::USegment;

/// Interrupt-enable bit of the flags register.
pub const FLAG_IF: u64 = 1 << 9;
/// I/O privilege level bits.
pub const FLAG_IOPL: u64 = 0b11 << 12;
/// Bits user code can never change.
pub const SENSITIVE_MASK: u64 = FLAG_IF | FLAG_IOPL;
/// Always-one reserved bit.
const FLAG_RESERVED: u64 = 1 << 1;

pub const REG_NAMES: [&str; 17] = [
    "rax", "rbx", "rcx", "rdx", "rsi", "rdi", "rbp", "rsp", "r8", "r9", "r10", "r11", "r12", "r13", "r14", "r15",
    "rip",
];

pub fn reg_index(name: &str) -> Option<usize> {
    REG_NAMES.iter().position(|&n| n == name)
}

/// Saved user register state.
#[derive(Clone, PartialEq, Eq)]
pub struct UserContext {
    regs: [u64; 17],
    flags: u64,
}

impl fmt::Debug for UserContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut d = f.debug_struct("UserContext");
        for (n, v) in REG_NAMES.iter().zip(self.regs) {
            if v != 0 {
                d.field(n, &format_args!("{v:#x}"));
            }
        }
        d.field("flags", &format_args!("{:#x}", self.flags)).finish()
    }
}

impl Default for UserContext {
    fn default() -> Self {
        Self::new()
    }
}

impl UserContext {
    /// Interrupts enabled, I/O privilege 0.
    pub fn new() -> Self {
        Self { regs: [0; 17], flags: FLAG_IF | FLAG_RESERVED }
    }

    pub fn reg(&self, name: &str) -> Option<u64> {
        reg_index(name).map(|i| self.regs[i])
    }

    pub fn set_reg(&mut self, name: &str, value: u64) -> bool {
        match reg_index(name) {
            Some(i) => {
                self.regs[i] = value;
                true
            }
            None => false,
        }
    }

    pub fn regs(&self) -> &[u64; 17] {
        &self.regs
    }

    /// The user-visible flags, sensitive bits cleared.
    pub fn flags(&self) -> u64 {
        self.flags & !SENSITIVE_MASK
    }

    /// Updates the non-sensitive flag bits; sensitive bits keep their value.
    pub fn set_flags(&mut self, value: u64) {
        self.flags = (self.flags & SENSITIVE_MASK) | (value & !SENSITIVE_MASK);
    }

    /// The full stored register, for the framework's own checks.
    pub fn raw_flags(&self) -> u64 {
        self.flags
    }
}

/// Page permissions.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Perms(u8);

impl Perms {
    pub const NONE: Perms = Perms(0);
    pub const R: Perms = Perms(1);
    pub const W: Perms = Perms(2);
    pub const X: Perms = Perms(4);
    pub const RW: Perms = Perms(3);
    pub const RX: Perms = Perms(5);

    pub fn contains(self, other: Perms) -> bool {
        self.0 & other.0 == other.0
    }

    pub fn parse(s: &str) -> Option<Perms> {
        s.chars().try_fold(Perms::NONE, |p, c| match c {
            'r' => Some(p | Perms::R),
            'w' => Some(p | Perms::W),
            'x' => Some(p | Perms::X),
            '-' => Some(p),
            _ => None,
        })
    }
}

impl BitOr for Perms {
    type Output = Perms;

    fn bitor(self, rhs: Perms) -> Perms {
        Perms(self.0 | rhs.0)
    }
}

impl fmt::Debug for Perms {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = |p: Perms, ch: char| if self.contains(p) { ch } else { '-' };
        write!(f, "{}{}{}", c(Perms::R, 'r'), c(Perms::W, 'w'), c(Perms::X, 'x'))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VmError {
    #[error("typed frames cannot be mapped into user space")]
    TypedFrameRejected,
    #[error("mapping at {0:#x} overlaps an existing one")]
    Overlap(usize),
    #[error("address {0:#x} is not page-aligned")]
    Unaligned(usize),
    #[error("address {0:#x} is not mapped")]
    NotMapped(usize),
    #[error("access at {addr:#x} needs {need:?}")]
    PermissionDenied { addr: usize, need: Perms },
}

struct Mapping {
    seg: Segment,
    perms: Perms,
}

/// A user address space. Only untyped memory can be mapped; every mapping
/// holds its own reference to the frames.
pub struct VmSpace {
    page_size: usize,
    maps: BTreeMap<usize, Mapping>,
}

impl fmt::Debug for VmSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut m = f.debug_map();
        for (va, mp) in &self.maps {
            m.entry(&format_args!("{va:#x}"), &format_args!("{} frames {:?}", mp.seg.len_frames(), mp.perms));
        }
        m.finish()
    }
}

impl VmSpace {
    pub fn new(page_size: usize) -> Self {
        Self { page_size, maps: BTreeMap::new() }
    }

    pub fn page_size(&self) -> usize {
        self.page_size
    }

    /// Maps an untyped segment.
    pub fn map(&mut self, vaddr: usize, seg: &USegment, perms: Perms) -> Result<(), VmError> {
        self.map_segment(vaddr, seg, perms)
    }

    /// Maps a segment of unknown kind; typed segments are refused.
    pub fn map_segment(&mut self, vaddr: usize, seg: &Segment, perms: Perms) -> Result<(), VmError> {
        if !seg.is_untyped() {
            return Err(VmError::TypedFrameRejected);
        }
        if !vaddr.is_multiple_of(self.page_size) {
            return Err(VmError::Unaligned(vaddr));
        }
        let end = vaddr.checked_add(seg.span()).ok_or(VmError::Overlap(vaddr))?;
        if let Some((&va, m)) = self.maps.range(..end).next_back() {
            if va + m.seg.span() > vaddr {
                return Err(VmError::Overlap(vaddr));
            }
        }
        self.maps.insert(vaddr, Mapping { seg: seg.clone(), perms });
        Ok(())
    }

    /// Removes the mapping that starts at `vaddr`.
    pub fn unmap(&mut self, vaddr: usize) -> Result<(), VmError> {
        self.maps.remove(&vaddr).map(drop).ok_or(VmError::NotMapped(vaddr))
    }

    pub fn mapping_count(&self) -> usize {
        self.maps.len()
    }

    /// Frames reachable through this space, with multiplicity.
    pub fn mapped_frames(&self) -> Vec<usize> {
        self.maps.values().flat_map(|m| m.seg.frames()).collect()
    }

    /// Resolves `vaddr` to the mapping containing it and the offset inside.
    fn lookup(&self, vaddr: usize) -> Option<(&Mapping, usize)> {
        let (&va, m) = self.maps.range(..=vaddr).next_back()?;
        (vaddr - va < m.seg.span()).then(|| (m, vaddr - va))
    }

    /// Splits `[vaddr, vaddr + len)` into per-mapping pieces after checking
    /// every byte is mapped with `need`.
    fn pieces(&self, vaddr: usize, len: usize, need: Perms) -> Result<Vec<(&Mapping, usize, usize)>, VmError> {
        let mut out = Vec::new();
        let mut pos = vaddr;
        let end = vaddr.checked_add(len).ok_or(VmError::NotMapped(usize::MAX))?;
        while pos < end {
            let (m, off) = self.lookup(pos).ok_or(VmError::NotMapped(pos))?;
            if !m.perms.contains(need) {
                return Err(VmError::PermissionDenied { addr: pos, need });
            }
            let n = (m.seg.span() - off).min(end - pos);
            out.push((m, off, n));
            pos += n;
        }
        Ok(out)
    }

    pub fn read_user(&self, vaddr: usize, len: usize) -> Result<Vec<u8>, VmError> {
        let pieces = self.pieces(vaddr, len, Perms::R)?;
        let mut out = Vec::with_capacity(len);
        for (m, off, n) in pieces {
            out.extend(m.seg.read_bytes(off, n).expect("piece lies inside an untyped mapping"));
        }
        Ok(out)
    }

    pub fn write_user(&self, vaddr: usize, data: &[u8]) -> Result<(), VmError> {
        let pieces = self.pieces(vaddr, data.len(), Perms::W)?;
        let mut done = 0;
        for (m, off, n) in pieces {
            m.seg.write_bytes(off, &data[done..done + n]).expect("piece lies inside an untyped mapping");
            done += n;
        }
        Ok(())
    }
}

/// One instruction of a scripted user program.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum UserOp {
    /// Load 8 bytes little-endian into a register.
    Load { vaddr: usize, reg: usize },
    Store { vaddr: usize, data: Vec<u8> },
    SetReg { reg: usize, value: u64 },
    SetFlags(u64),
    Syscall(u64),
    Exit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrapReason {
    /// System call; the number is also left in `rax`.
    Syscall(u64),
    PageFault { vaddr: usize, write: bool },
    Exit,
}

/// Runs a user program against an address space until the next trap.
#[derive(Clone, Debug)]
pub struct UserMode {
    pub ctx: UserContext,
    program: Vec<UserOp>,
}

impl UserMode {
    pub fn new(ctx: UserContext, program: Vec<UserOp>) -> Self {
        Self { ctx, program }
    }

    pub fn pc(&self) -> usize {
        self.ctx.regs[16] as usize
    }

    pub fn finished(&self) -> bool {
        self.pc() >= self.program.len()
    }

    /// Executes from the saved program counter until a trap. A faulting
    /// instruction is not retired, so running again retries it. Falling off
    /// the end is an exit.
    pub fn run(&mut self, space: &VmSpace) -> TrapReason {
        loop {
            let pc = self.pc();
            let Some(op) = self.program.get(pc) else {
                return TrapReason::Exit;
            };
            let trap = match op {
                UserOp::Load { vaddr, reg } => match space.read_user(*vaddr, 8) {
                    Ok(b) => {
                        self.ctx.regs[*reg] = u64::from_le_bytes(b.try_into().unwrap());
                        None
                    }
                    Err(_) => return TrapReason::PageFault { vaddr: *vaddr, write: false },
                },
                UserOp::Store { vaddr, data } => match space.write_user(*vaddr, data) {
                    Ok(()) => None,
                    Err(_) => return TrapReason::PageFault { vaddr: *vaddr, write: true },
                },
                UserOp::SetReg { reg, value } => {
                    self.ctx.regs[*reg] = *value;
                    None
                }
                UserOp::SetFlags(v) => {
                    self.ctx.set_flags(*v);
                    None
                }
                UserOp::Syscall(n) => {
                    self.ctx.regs[0] = *n;
                    Some(TrapReason::Syscall(*n))
                }
                UserOp::Exit => Some(TrapReason::Exit),
            };
            self.ctx.regs[16] = pc as u64 + 1;
            if let Some(t) = trap {
                return t;
            }
        }
    }
}
