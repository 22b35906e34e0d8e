use std::fmt;

use serde::{Deserialize, Serialize};

/// Logical thread identifier inside a trace.
pub type ThreadId = u32;

/// One traced memory operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TraceOp {
    /// Plain (non-atomic) read of a frame's metadata.
    MetaRead(usize),
    /// Plain (non-atomic) write of a frame's metadata.
    MetaWrite(usize),
    /// Atomic compare-and-exchange on a frame's metadata.
    MetaCas(usize),
    ByteRead { addr: usize, len: usize },
    ByteWrite { addr: usize, len: usize },
    /// A byte range becomes reachable through a read-only view.
    ExposeReadOnly { addr: usize, len: usize },
    /// A byte range becomes reachable through a mutable view.
    ExposeMutable { addr: usize, len: usize },
    /// A frame left the unused state.
    Claim(usize),
    /// A frame returned to the unused state.
    Release(usize),
}

impl TraceOp {
    pub fn meta_frame(&self) -> Option<usize> {
        match *self {
            TraceOp::MetaRead(f) | TraceOp::MetaWrite(f) | TraceOp::MetaCas(f) => Some(f),
            _ => None,
        }
    }

    pub fn mnemonic(&self) -> &'static str {
        match self {
            TraceOp::MetaRead(_) => "meta-read",
            TraceOp::MetaWrite(_) => "meta-write",
            TraceOp::MetaCas(_) => "meta-cas",
            TraceOp::ByteRead { .. } => "byte-read",
            TraceOp::ByteWrite { .. } => "byte-write",
            TraceOp::ExposeReadOnly { .. } => "expose-ro",
            TraceOp::ExposeMutable { .. } => "expose-mut",
            TraceOp::Claim(_) => "claim",
            TraceOp::Release(_) => "release",
        }
    }
}

impl fmt::Display for TraceOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            TraceOp::MetaRead(fr) | TraceOp::MetaWrite(fr) | TraceOp::MetaCas(fr) | TraceOp::Claim(fr) | TraceOp::Release(fr) => {
                write!(f, "{} {}", self.mnemonic(), fr)
            }
            TraceOp::ByteRead { addr, len }
            | TraceOp::ByteWrite { addr, len }
            | TraceOp::ExposeReadOnly { addr, len }
            | TraceOp::ExposeMutable { addr, len } => write!(f, "{} {:#x} {}", self.mnemonic(), addr, len),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TraceEvent {
    pub thread: ThreadId,
    pub op: TraceOp,
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.thread, self.op)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ViolationKind {
    DataRace,
    MutabilityViolation,
    UseAfterRelease,
}

/// A detected UB finding with its witness.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    /// Indices of the conflicting pair in the merged trace, earlier first.
    pub events: [usize; 2],
    /// Thread order that produced the trace; replaying it reproduces the
    /// violation.
    pub schedule: Vec<ThreadId>,
}
