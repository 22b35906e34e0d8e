//! Scenario files: a `[config]` section of `key = value` lines and an
//! `[actions]` section with one verb per line. See `docs/scenario-grammar.md`.

use std::collections::HashSet;
use std::fmt;
use std::ops::Range;

use fk_core::mem::FaultInjection;
use fk_core::privsep::{DmaDirection, DmaMode, IoKind, Sensitivity, UserOp};
use fk_core::{MetaKindId, Region, ScriptOp};
use fk_services::{parse_program, SchedPolicy};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{line}:{column}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeviceSpec {
    pub name: String,
    pub id: u32,
    pub window: Range<usize>,
    pub irq: Option<usize>,
    pub buffer_frames: usize,
}

#[derive(Clone, Debug)]
pub struct Config {
    pub frame_size: usize,
    pub frame_count: usize,
    /// Empty means all of memory.
    pub regions: Vec<Region>,
    pub cpus: usize,
    pub scheduler: SchedPolicy,
    pub buddy: bool,
    pub slab_classes: Vec<usize>,
    pub labels: Vec<(IoKind, Range<usize>, Sensitivity)>,
    pub devices: Vec<DeviceSpec>,
    pub seed: u64,
    pub oracle: bool,
    pub faults: FaultInjection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            frame_size: 4096,
            frame_count: 256,
            regions: Vec::new(),
            cpus: 1,
            scheduler: SchedPolicy::RoundRobin,
            buddy: true,
            slab_classes: vec![16, 32, 64, 128, 256, 512, 1024, 2048],
            labels: Vec::new(),
            devices: Vec::new(),
            seed: 0,
            oracle: false,
            faults: FaultInjection::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cmp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl Cmp {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "==" => Self::Eq,
            "!=" => Self::Ne,
            "<" => Self::Lt,
            "<=" => Self::Le,
            ">" => Self::Gt,
            ">=" => Self::Ge,
            _ => return None,
        })
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Self::Eq => "==",
            Self::Ne => "!=",
            Self::Lt => "<",
            Self::Le => "<=",
            Self::Gt => ">",
            Self::Ge => ">=",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Value {
    Int(i64),
    Str(String),
}

impl Value {
    pub fn from_token(s: &str) -> Self {
        match parse_int(s) {
            Some(n) => Value::Int(n),
            None => Value::Str(s.to_string()),
        }
    }

    /// Strings quoted, numbers bare.
    pub fn quoted(&self) -> String {
        match self {
            Value::Int(n) => n.to_string(),
            Value::Str(s) => format!("{s:?}"),
        }
    }

    /// `None` when the comparison is undefined (ordering on strings).
    pub fn compare(&self, op: Cmp, rhs: &Value) -> Option<bool> {
        use std::cmp::Ordering::*;
        let ord = match (self, rhs) {
            (Value::Int(a), Value::Int(b)) => a.cmp(b),
            (a, b) => {
                let eq = a.to_string() == b.to_string();
                return match op {
                    Cmp::Eq => Some(eq),
                    Cmp::Ne => Some(!eq),
                    _ => None,
                };
            }
        };
        Some(match op {
            Cmp::Eq => ord == Equal,
            Cmp::Ne => ord != Equal,
            Cmp::Lt => ord == Less,
            Cmp::Le => ord != Greater,
            Cmp::Gt => ord == Greater,
            Cmp::Ge => ord != Less,
        })
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(n) => write!(f, "{n}"),
            Value::Str(s) => write!(f, "{s}"),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Action {
    Alloc { name: String, frames: usize, kind: MetaKindId },
    Claim { name: String, frame: usize, count: usize },
    Dup { name: String, from: String },
    Drop { name: String },
    Write { name: String, offset: usize, data: Vec<u8> },
    Read { name: String, offset: usize, len: usize },
    RandomOps { count: usize },
    Spawn { name: String, script: Vec<ScriptOp>, weight: Option<u32> },
    Tick { cpu: usize, times: usize },
    Yield { cpu: usize },
    Sleep { cpu: usize },
    Exit { cpu: usize },
    Wake { name: String },
    User { name: String, frames: usize, program: Vec<UserOp> },
    RunSyscalls { budget: usize },
    VmMap { seg: String, vaddr: usize },
    DmaMap { name: String, seg: String, direction: DmaDirection, mode: DmaMode },
    DmaUnmap { name: String },
    DmaWrite { device: u32, mapping: String, offset: i64, data: Vec<u8> },
    Acquire { name: String, kind: IoKind, range: Range<usize> },
    Release { name: String },
    IrqRegister { vec: usize, handler: u32 },
    Authorize { device: u32, vec: usize },
    Raise { device: u32, vec: usize },
    MapBuffer { device: String },
    UnmapBuffer { device: String },
    Request { device: String, data: Vec<u8> },
    Stack { name: String, frames: usize },
    StackWrite { name: String, offset: i64, data: Vec<u8> },
    HeapAlloc { name: String, size: usize, align: usize },
    HeapWrite { name: String, offset: usize, data: Vec<u8> },
    HeapFree { name: String },
    Expect { path: String, op: Cmp, value: Value },
}

impl Action {
    pub fn verb(&self) -> &'static str {
        match self {
            Action::Alloc { .. } => "alloc",
            Action::Claim { .. } => "claim",
            Action::Dup { .. } => "dup",
            Action::Drop { .. } => "drop",
            Action::Write { .. } => "write",
            Action::Read { .. } => "read",
            Action::RandomOps { .. } => "random-ops",
            Action::Spawn { .. } => "spawn",
            Action::Tick { .. } => "tick",
            Action::Yield { .. } => "yield",
            Action::Sleep { .. } => "sleep",
            Action::Exit { .. } => "exit",
            Action::Wake { .. } => "wake",
            Action::User { .. } => "user",
            Action::RunSyscalls { .. } => "run-syscalls",
            Action::VmMap { .. } => "vm-map",
            Action::DmaMap { .. } => "dma-map",
            Action::DmaUnmap { .. } => "dma-unmap",
            Action::DmaWrite { .. } => "dma-write",
            Action::Acquire { .. } => "acquire",
            Action::Release { .. } => "release",
            Action::IrqRegister { .. } => "irq-register",
            Action::Authorize { .. } => "authorize",
            Action::Raise { .. } => "raise",
            Action::MapBuffer { .. } => "map-buffer",
            Action::UnmapBuffer { .. } => "unmap-buffer",
            Action::Request { .. } => "request",
            Action::Stack { .. } => "stack",
            Action::StackWrite { .. } => "stack-write",
            Action::HeapAlloc { .. } => "heap-alloc",
            Action::HeapWrite { .. } => "heap-write",
            Action::HeapFree { .. } => "heap-free",
            Action::Expect { .. } => "expect",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Step {
    pub line: usize,
    pub action: Action,
}

#[derive(Clone, Debug, Default)]
pub struct Scenario {
    pub config: Config,
    pub steps: Vec<Step>,
}

#[derive(Clone, Debug)]
struct Tok {
    col: usize,
    text: String,
    quoted: bool,
}

fn unescape(s: &str, line: usize, col: usize) -> Result<Vec<u8>, ParseError> {
    let b = s.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < b.len() {
        if b[i] != b'\\' {
            out.push(b[i]);
            i += 1;
            continue;
        }
        let err = |m: &str| ParseError { line, column: col + i + 1, message: m.to_string() };
        match b.get(i + 1) {
            Some(b'n') => out.push(b'\n'),
            Some(b't') => out.push(b'\t'),
            Some(b'0') => out.push(0),
            Some(b'\\') => out.push(b'\\'),
            Some(b'"') => out.push(b'"'),
            Some(b'x') => {
                let hex = s.get(i + 2..i + 4).ok_or_else(|| err("short \\x escape"))?;
                out.push(u8::from_str_radix(hex, 16).map_err(|_| err("bad \\x escape"))?);
                i += 2;
            }
            _ => return Err(err("unknown escape")),
        }
        i += 2;
    }
    Ok(out)
}

fn tokenize(line: &str, ln: usize) -> Result<Vec<Tok>, ParseError> {
    let b = line.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < b.len() {
        match b[i] {
            b' ' | b'\t' | b'\r' => i += 1,
            b'#' => break,
            b'"' => {
                let start = i;
                i += 1;
                let body = i;
                while i < b.len() && b[i] != b'"' {
                    i += if b[i] == b'\\' { 2 } else { 1 };
                }
                if i >= b.len() {
                    return Err(ParseError { line: ln, column: start + 1, message: "unterminated string".into() });
                }
                out.push(Tok { col: start + 1, text: line[body..i].to_string(), quoted: true });
                i += 1;
            }
            _ => {
                let start = i;
                while i < b.len() && !matches!(b[i], b' ' | b'\t' | b'\r' | b'#' | b'"') {
                    i += 1;
                }
                out.push(Tok { col: start + 1, text: line[start..i].to_string(), quoted: false });
            }
        }
    }
    Ok(out)
}

pub fn parse_int(s: &str) -> Option<i64> {
    let s = s.replace('_', "");
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest.to_string()),
        None => (false, s),
    };
    let v = match body.strip_prefix("0x") {
        Some(hex) => i64::from_str_radix(hex, 16).ok()?,
        None => body.parse::<i64>().ok()?,
    };
    Some(if neg { -v } else { v })
}

const NAMESPACES: [&str; 8] = ["segment", "task", "mapping", "handle", "device", "stack", "object", "user"];

struct Line<'a> {
    ln: usize,
    toks: &'a [Tok],
}

impl Line<'_> {
    fn err(&self, col: usize, msg: impl Into<String>) -> ParseError {
        ParseError { line: self.ln, column: col, message: msg.into() }
    }

    fn end_col(&self) -> usize {
        self.toks.last().map_or(1, |t| t.col + t.text.len() + 1)
    }

    fn tok(&self, i: usize, what: &str) -> Result<&Tok, ParseError> {
        self.toks.get(i).ok_or_else(|| self.err(self.end_col(), format!("expected {what}")))
    }

    fn word(&self, i: usize, what: &str) -> Result<&str, ParseError> {
        let t = self.tok(i, what)?;
        if t.quoted {
            return Err(self.err(t.col, format!("expected {what}, found a string")));
        }
        Ok(&t.text)
    }

    fn int(&self, i: usize, what: &str) -> Result<i64, ParseError> {
        let t = self.tok(i, what)?;
        parse_int(&t.text).filter(|_| !t.quoted).ok_or_else(|| self.err(t.col, format!("expected {what}, found {:?}", t.text)))
    }

    fn uint(&self, i: usize, what: &str) -> Result<usize, ParseError> {
        let t = self.tok(i, what)?;
        let v = self.int(i, what)?;
        usize::try_from(v).map_err(|_| self.err(t.col, format!("{what} must not be negative")))
    }

    fn bytes(&self, i: usize) -> Result<Vec<u8>, ParseError> {
        let t = self.tok(i, "a quoted string")?;
        if !t.quoted {
            return Err(self.err(t.col, "expected a quoted string"));
        }
        unescape(&t.text, self.ln, t.col)
    }

    fn range(&self, i: usize) -> Result<Range<usize>, ParseError> {
        let t = self.tok(i, "a range START..END")?;
        let bad = || self.err(t.col, format!("expected START..END, found {:?}", t.text));
        let (a, b) = t.text.split_once("..").ok_or_else(bad)?;
        let a = parse_int(a).and_then(|v| usize::try_from(v).ok()).ok_or_else(bad)?;
        let b = parse_int(b).and_then(|v| usize::try_from(v).ok()).ok_or_else(bad)?;
        if a >= b {
            return Err(self.err(t.col, "empty range"));
        }
        Ok(a..b)
    }

    fn arity(&self, min: usize, max: usize) -> Result<(), ParseError> {
        let n = self.toks.len() - 1;
        if n > max {
            return Err(self.err(self.toks[max + 1].col, "unexpected extra argument"));
        }
        if n < min {
            return Err(self.err(self.end_col(), format!("{} takes at least {min} arguments", self.toks[0].text)));
        }
        Ok(())
    }
}

struct Names {
    sets: Vec<HashSet<String>>,
}

impl Names {
    fn idx(ns: &str) -> usize {
        NAMESPACES.iter().position(|&n| n == ns).unwrap()
    }

    fn define(&mut self, l: &Line<'_>, i: usize, ns: &str) -> Result<String, ParseError> {
        let name = l.word(i, &format!("a {ns} name"))?.to_string();
        if !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
            return Err(l.err(l.toks[i].col, format!("bad name {name:?}")));
        }
        self.sets[Self::idx(ns)].insert(name.clone());
        Ok(name)
    }

    fn get(&self, l: &Line<'_>, i: usize, ns: &str) -> Result<String, ParseError> {
        let name = l.word(i, &format!("a {ns} name"))?;
        if !self.sets[Self::idx(ns)].contains(name) {
            return Err(l.err(l.toks[i].col, format!("unknown {ns} {name:?}")));
        }
        Ok(name.to_string())
    }
}

fn kind_of(l: &Line<'_>, i: usize) -> Result<MetaKindId, ParseError> {
    Ok(match l.word(i, "a frame kind")? {
        "untyped" => MetaKindId::UNTYPED,
        "page-table" => MetaKindId::PAGE_TABLE,
        "kernel-stack" => MetaKindId::KERNEL_STACK,
        "slab" => MetaKindId::SLAB,
        other => return Err(l.err(l.toks[i].col, format!("unknown frame kind {other:?}"))),
    })
}

fn io_kind(l: &Line<'_>, i: usize) -> Result<IoKind, ParseError> {
    match l.word(i, "mem or port")? {
        "mem" => Ok(IoKind::Mem),
        "port" => Ok(IoKind::Port),
        other => Err(l.err(l.toks[i].col, format!("expected mem or port, found {other:?}"))),
    }
}

fn parse_script(l: &Line<'_>, from: usize) -> Result<(Vec<ScriptOp>, Option<u32>), ParseError> {
    let mut script = Vec::new();
    let mut weight = None;
    let mut i = from;
    while i < l.toks.len() {
        match l.word(i, "a script op")? {
            "run" => {
                let n = l.uint(i + 1, "a tick count")?;
                script.push(ScriptOp::Run(u32::try_from(n).map_err(|_| l.err(l.toks[i + 1].col, "tick count too large"))?));
                i += 2;
            }
            "forever" => {
                script.push(ScriptOp::Run(u32::MAX));
                i += 1;
            }
            "sleep" => {
                script.push(ScriptOp::Sleep);
                i += 1;
            }
            "yield" => {
                script.push(ScriptOp::Yield);
                i += 1;
            }
            "exit" => {
                script.push(ScriptOp::Exit);
                i += 1;
            }
            "weight" => {
                let w = l.uint(i + 1, "a weight")?;
                weight = Some(u32::try_from(w).ok().filter(|&w| w > 0).ok_or_else(|| l.err(l.toks[i + 1].col, "bad weight"))?);
                i += 2;
            }
            other => return Err(l.err(l.toks[i].col, format!("unknown script op {other:?}"))),
        }
    }
    if script.is_empty() {
        script.push(ScriptOp::Run(u32::MAX));
    }
    Ok((script, weight))
}

/// Paths an `expect` clause may name. A trailing `*` takes one more
/// dot-separated component.
pub const PATHS: [&str; 30] = [
    "last",
    "census.unused",
    "census.claimed",
    "census.untyped",
    "census.typed",
    "census.refs",
    "census.ref.*",
    "random.mismatches",
    "random.ops",
    "sched.guard_violations",
    "sched.double_booked",
    "sched.consistent",
    "sched.current.*",
    "sched.status.*",
    "sched.runtime.*",
    "traps.count",
    "traps.order",
    "output.*",
    "end.*",
    "response.*",
    "dma.blocked",
    "dma.landed",
    "irq.delivered",
    "irq.dropped",
    "io.handles",
    "stack.*",
    "oracle.violations",
    "oracle.races",
    "oracle.mutability",
    "oracle.released",
];

pub fn valid_path(p: &str) -> bool {
    PATHS.iter().any(|pat| match pat.strip_suffix('*') {
        Some(prefix) => p.strip_prefix(prefix).is_some_and(|rest| !rest.is_empty() && !rest.contains('.')),
        None => p == *pat,
    })
}

fn parse_action(l: &Line<'_>, names: &mut Names) -> Result<Action, ParseError> {
    let verb = l.word(0, "a verb")?;
    let a = match verb {
        "alloc" => {
            l.arity(2, 3)?;
            let frames = l.uint(2, "a frame count")?;
            let kind = if l.toks.len() > 3 { kind_of(l, 3)? } else { MetaKindId::UNTYPED };
            Action::Alloc { name: names.define(l, 1, "segment")?, frames, kind }
        }
        "claim" => {
            l.arity(2, 3)?;
            let frame = l.uint(2, "a frame number")?;
            let count = if l.toks.len() > 3 { l.uint(3, "a frame count")? } else { 1 };
            Action::Claim { name: names.define(l, 1, "segment")?, frame, count }
        }
        "dup" => {
            l.arity(2, 2)?;
            let from = names.get(l, 2, "segment")?;
            Action::Dup { name: names.define(l, 1, "segment")?, from }
        }
        "drop" => {
            l.arity(1, 1)?;
            Action::Drop { name: names.get(l, 1, "segment")? }
        }
        "write" => {
            l.arity(3, 3)?;
            Action::Write { name: names.get(l, 1, "segment")?, offset: l.uint(2, "an offset")?, data: l.bytes(3)? }
        }
        "read" => {
            l.arity(3, 3)?;
            Action::Read { name: names.get(l, 1, "segment")?, offset: l.uint(2, "an offset")?, len: l.uint(3, "a length")? }
        }
        "random-ops" => {
            l.arity(1, 1)?;
            Action::RandomOps { count: l.uint(1, "an op count")? }
        }
        "spawn" => {
            l.arity(1, usize::MAX)?;
            let (script, weight) = parse_script(l, 2)?;
            Action::Spawn { name: names.define(l, 1, "task")?, script, weight }
        }
        "tick" => {
            l.arity(1, 2)?;
            let times = if l.toks.len() > 2 { l.uint(2, "a repeat count")? } else { 1 };
            Action::Tick { cpu: l.uint(1, "a cpu")?, times }
        }
        "yield" | "sleep" | "exit" => {
            l.arity(1, 1)?;
            let cpu = l.uint(1, "a cpu")?;
            match verb {
                "yield" => Action::Yield { cpu },
                "sleep" => Action::Sleep { cpu },
                _ => Action::Exit { cpu },
            }
        }
        "wake" => {
            l.arity(1, 1)?;
            Action::Wake { name: names.get(l, 1, "task")? }
        }
        "user" => {
            l.arity(3, 3)?;
            let frames = l.uint(2, "a frame count")?;
            let t = l.tok(3, "a program")?;
            let text = String::from_utf8_lossy(&l.bytes(3)?).into_owned();
            let program = parse_program(&text).map_err(|e| l.err(t.col + 1 + e.offset, e.msg))?;
            Action::User { name: names.define(l, 1, "user")?, frames, program }
        }
        "run-syscalls" => {
            l.arity(1, 1)?;
            Action::RunSyscalls { budget: l.uint(1, "a step budget")? }
        }
        "vm-map" => {
            l.arity(2, 2)?;
            Action::VmMap { seg: names.get(l, 1, "segment")?, vaddr: l.uint(2, "a virtual address")? }
        }
        "dma-map" => {
            l.arity(3, 4)?;
            let seg = names.get(l, 2, "segment")?;
            let direction = match l.word(3, "a direction")? {
                "to-device" => DmaDirection::ToDevice,
                "from-device" => DmaDirection::FromDevice,
                "bidirectional" => DmaDirection::Bidirectional,
                other => return Err(l.err(l.toks[3].col, format!("unknown direction {other:?}"))),
            };
            let mode = match l.toks.get(4).map(|t| t.text.as_str()) {
                None | Some("coherent") => DmaMode::Coherent,
                Some("stream") => DmaMode::Stream,
                Some(other) => return Err(l.err(l.toks[4].col, format!("unknown mode {other:?}"))),
            };
            Action::DmaMap { name: names.define(l, 1, "mapping")?, seg, direction, mode }
        }
        "dma-unmap" => {
            l.arity(1, 1)?;
            Action::DmaUnmap { name: names.get(l, 1, "mapping")? }
        }
        "dma-write" => {
            l.arity(4, 4)?;
            let device = u32::try_from(l.uint(1, "a device id")?).map_err(|_| l.err(l.toks[1].col, "device id too large"))?;
            Action::DmaWrite { device, mapping: names.get(l, 2, "mapping")?, offset: l.int(3, "an offset")?, data: l.bytes(4)? }
        }
        "acquire" => {
            l.arity(3, 3)?;
            let kind = io_kind(l, 2)?;
            let range = l.range(3)?;
            Action::Acquire { name: names.define(l, 1, "handle")?, kind, range }
        }
        "release" => {
            l.arity(1, 1)?;
            Action::Release { name: names.get(l, 1, "handle")? }
        }
        "irq-register" => {
            l.arity(2, 2)?;
            let handler = u32::try_from(l.uint(2, "a handler id")?).map_err(|_| l.err(l.toks[2].col, "id too large"))?;
            Action::IrqRegister { vec: l.uint(1, "a vector")?, handler }
        }
        "authorize" | "raise" => {
            l.arity(2, 2)?;
            let device = u32::try_from(l.uint(1, "a device id")?).map_err(|_| l.err(l.toks[1].col, "device id too large"))?;
            let vec = l.uint(2, "a vector")?;
            if verb == "raise" {
                Action::Raise { device, vec }
            } else {
                Action::Authorize { device, vec }
            }
        }
        "map-buffer" | "unmap-buffer" => {
            l.arity(1, 1)?;
            let device = names.get(l, 1, "device")?;
            if verb == "map-buffer" {
                Action::MapBuffer { device }
            } else {
                Action::UnmapBuffer { device }
            }
        }
        "request" => {
            l.arity(2, 2)?;
            Action::Request { device: names.get(l, 1, "device")?, data: l.bytes(2)? }
        }
        "stack" => {
            l.arity(2, 2)?;
            let frames = l.uint(2, "a frame count")?;
            Action::Stack { name: names.define(l, 1, "stack")?, frames }
        }
        "stack-write" => {
            l.arity(3, 3)?;
            Action::StackWrite { name: names.get(l, 1, "stack")?, offset: l.int(2, "an offset")?, data: l.bytes(3)? }
        }
        "heap-alloc" => {
            l.arity(2, 3)?;
            let size = l.uint(2, "a size")?;
            let align = if l.toks.len() > 3 { l.uint(3, "an alignment")? } else { 8 };
            Action::HeapAlloc { name: names.define(l, 1, "object")?, size, align }
        }
        "heap-write" => {
            l.arity(3, 3)?;
            Action::HeapWrite { name: names.get(l, 1, "object")?, offset: l.uint(2, "an offset")?, data: l.bytes(3)? }
        }
        "heap-free" => {
            l.arity(1, 1)?;
            Action::HeapFree { name: names.get(l, 1, "object")? }
        }
        "expect" => {
            l.arity(3, 3)?;
            let path = l.word(1, "a state path")?;
            if !valid_path(path) {
                return Err(l.err(l.toks[1].col, format!("unknown state path {path:?}")));
            }
            let op_tok = l.tok(2, "a comparison")?;
            let op = Cmp::parse(&op_tok.text).ok_or_else(|| l.err(op_tok.col, format!("unknown comparison {:?}", op_tok.text)))?;
            let v = l.tok(3, "a value")?;
            let value = if v.quoted {
                Value::Str(String::from_utf8_lossy(&unescape(&v.text, l.ln, v.col)?).into_owned())
            } else {
                Value::from_token(&v.text)
            };
            if matches!(value, Value::Str(_)) && !matches!(op, Cmp::Eq | Cmp::Ne) {
                return Err(l.err(op_tok.col, "strings only compare with == or !="));
            }
            Action::Expect { path: path.to_string(), op, value }
        }
        other => return Err(l.err(l.toks[0].col, format!("unknown action {other:?}"))),
    };
    Ok(a)
}

fn parse_config(l: &Line<'_>, cfg: &mut Config, names: &mut Names) -> Result<(), ParseError> {
    let key = l.word(0, "a key")?;
    match l.toks.get(1) {
        Some(t) if t.text == "=" && !t.quoted => {}
        Some(t) => return Err(l.err(t.col, "expected '='")),
        None => return Err(l.err(l.end_col(), "expected '='")),
    }
    let vals = Line { ln: l.ln, toks: &l.toks[1..] };
    let one = |what: &str| -> Result<usize, ParseError> {
        vals.arity(1, 1)?;
        vals.uint(1, what)
    };
    match key {
        "frame_size" => cfg.frame_size = one("a frame size")?,
        "frame_count" => cfg.frame_count = one("a frame count")?,
        "cpus" => cfg.cpus = one("a cpu count")?.max(1),
        "seed" => cfg.seed = one("a seed")? as u64,
        "region" => {
            vals.arity(2, 2)?;
            cfg.regions.push(Region::new(vals.uint(1, "a start address")?, vals.uint(2, "a length")?));
        }
        "scheduler" => {
            vals.arity(1, 1)?;
            let s = vals.word(1, "a scheduler")?;
            cfg.scheduler = SchedPolicy::parse(s).ok_or_else(|| l.err(l.toks[2].col, format!("unknown scheduler {s:?}")))?;
        }
        "buddy" | "oracle" => {
            vals.arity(1, 1)?;
            let on = match vals.word(1, "on or off")? {
                "on" | "true" | "yes" => true,
                "off" | "false" | "no" => false,
                other => return Err(l.err(l.toks[2].col, format!("expected on or off, found {other:?}"))),
            };
            if key == "buddy" {
                cfg.buddy = on;
            } else {
                cfg.oracle = on;
            }
        }
        "slab_classes" => {
            cfg.slab_classes = (1..vals.toks.len()).map(|i| vals.uint(i, "a size class")).collect::<Result<_, _>>()?;
        }
        "label" => {
            vals.arity(3, 3)?;
            let kind = io_kind(&vals, 1)?;
            let range = vals.range(2)?;
            let s = match vals.word(3, "a sensitivity")? {
                "insensitive" => Sensitivity::Insensitive,
                "sensitive" => Sensitivity::Sensitive,
                other => return Err(l.err(l.toks[4].col, format!("unknown sensitivity {other:?}"))),
            };
            cfg.labels.push((kind, range, s));
        }
        "device" => {
            // device = NAME ID RANGE [irq VEC] [buffer FRAMES]
            vals.arity(3, 7)?;
            let id = u32::try_from(vals.uint(2, "a device id")?).map_err(|_| l.err(l.toks[3].col, "device id too large"))?;
            let window = vals.range(3)?;
            let mut spec = DeviceSpec { name: String::new(), id, window, irq: None, buffer_frames: 1 };
            let mut i = 4;
            while i < vals.toks.len() {
                match vals.word(i, "irq or buffer")? {
                    "irq" => spec.irq = Some(vals.uint(i + 1, "a vector")?),
                    "buffer" => spec.buffer_frames = vals.uint(i + 1, "a frame count")?.max(1),
                    other => return Err(l.err(vals.toks[i].col, format!("unknown device option {other:?}"))),
                }
                i += 2;
            }
            spec.name = names.define(&vals, 1, "device")?;
            cfg.devices.push(spec);
        }
        "faults" => {
            for i in 1..vals.toks.len() {
                match vals.word(i, "a fault name")? {
                    "unsync-meta" => cfg.faults.unsync_meta = true,
                    "readonly-heap-exposure" => cfg.faults.readonly_heap_exposure = true,
                    other => return Err(l.err(vals.toks[i].col, format!("unknown fault {other:?}"))),
                }
            }
        }
        other => return Err(l.err(l.toks[0].col, format!("unknown config key {other:?}"))),
    }
    Ok(())
}

pub fn parse_scenario(text: &str) -> Result<Scenario, ParseError> {
    #[derive(PartialEq)]
    enum Section {
        None,
        Config,
        Actions,
    }
    let mut section = Section::None;
    let mut sc = Scenario::default();
    let mut names = Names { sets: vec![HashSet::new(); NAMESPACES.len()] };
    for (i, raw) in text.lines().enumerate() {
        let ln = i + 1;
        let toks = tokenize(raw, ln)?;
        let Some(first) = toks.first() else { continue };
        if !first.quoted && first.text.starts_with('[') {
            if toks.len() > 1 {
                return Err(ParseError { line: ln, column: toks[1].col, message: "unexpected text after section".into() });
            }
            section = match first.text.as_str() {
                "[config]" if section == Section::None => Section::Config,
                "[actions]" if section != Section::Actions => Section::Actions,
                other => {
                    return Err(ParseError { line: ln, column: first.col, message: format!("unexpected section {other}") })
                }
            };
            continue;
        }
        let l = Line { ln, toks: &toks };
        match section {
            Section::None => return Err(l.err(first.col, "expected [config] or [actions]")),
            Section::Config => parse_config(&l, &mut sc.config, &mut names)?,
            Section::Actions => sc.steps.push(Step { line: ln, action: parse_action(&l, &mut names)? }),
        }
    }
    let c = &sc.config;
    if c.frame_size == 0 || c.frame_count == 0 {
        return Err(ParseError { line: 1, column: 1, message: "frame_size and frame_count must be positive".into() });
    }
    Ok(sc)
}
