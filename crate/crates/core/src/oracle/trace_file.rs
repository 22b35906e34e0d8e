//! Text trace format: one event per line, `tid op args`.
//!
//! ```text
//! # comment
//! frame-size 4096
//! 0 meta-read 3
//! 1 meta-cas 3
//! 0 byte-write 0x3000 16
//! ```
//!
//! Ops: `meta-read F`, `meta-write F`, `meta-cas F`, `claim F`, `release F`,
//! `byte-read ADDR LEN`, `byte-write ADDR LEN`, `expose-ro ADDR LEN`,
//! `expose-mut ADDR LEN`. Numbers are decimal or `0x` hex.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use super::event::{ThreadId, TraceEvent, TraceOp};
use crate::mem::DEFAULT_FRAME_SIZE;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{line}:{column}: {message}")]
pub struct TraceParseError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceFile {
    pub frame_size: usize,
    /// Events in file order.
    pub events: Vec<TraceEvent>,
}

impl TraceFile {
    /// Per-thread op lists, threads renumbered densely in ascending id order.
    pub fn threads(&self) -> Vec<Vec<TraceOp>> {
        let mut by_tid: BTreeMap<ThreadId, Vec<TraceOp>> = BTreeMap::new();
        for e in &self.events {
            by_tid.entry(e.thread).or_default().push(e.op);
        }
        by_tid.into_values().collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if self.frame_size != DEFAULT_FRAME_SIZE {
            let _ = writeln!(out, "frame-size {}", self.frame_size);
        }
        for e in &self.events {
            let _ = writeln!(out, "{e}");
        }
        out
    }
}

pub fn parse_number(tok: &str) -> Option<usize> {
    let tok = tok.replace('_', "");
    match tok.strip_prefix("0x").or_else(|| tok.strip_prefix("0X")) {
        Some(hex) => usize::from_str_radix(hex, 16).ok(),
        None => tok.parse().ok(),
    }
}

pub fn parse_trace(text: &str) -> Result<TraceFile, TraceParseError> {
    let mut frame_size = DEFAULT_FRAME_SIZE;
    let mut events = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("");
        let toks = tokens(line);
        let err = |col: usize, message: String| TraceParseError { line: ln + 1, column: col + 1, message };
        let Some(&(c0, first)) = toks.first() else {
            continue;
        };
        let num = |i: usize| -> Result<usize, TraceParseError> {
            let &(c, t) = toks.get(i).ok_or_else(|| err(line.len(), "missing argument".into()))?;
            parse_number(t).ok_or_else(|| err(c, format!("bad number `{t}`")))
        };
        if first == "frame-size" {
            frame_size = num(1)?;
            if !frame_size.is_power_of_two() {
                return Err(err(toks[1].0, "frame size must be a power of two".into()));
            }
            continue;
        }
        let thread = parse_number(first)
            .and_then(|t| ThreadId::try_from(t).ok())
            .ok_or_else(|| err(c0, format!("bad thread id `{first}`")))?;
        let &(c1, op) = toks.get(1).ok_or_else(|| err(line.len(), "missing op".into()))?;
        let (op, argc) = match op {
            "meta-read" => (TraceOp::MetaRead(num(2)?), 1),
            "meta-write" => (TraceOp::MetaWrite(num(2)?), 1),
            "meta-cas" => (TraceOp::MetaCas(num(2)?), 1),
            "claim" => (TraceOp::Claim(num(2)?), 1),
            "release" => (TraceOp::Release(num(2)?), 1),
            "byte-read" => (TraceOp::ByteRead { addr: num(2)?, len: num(3)? }, 2),
            "byte-write" => (TraceOp::ByteWrite { addr: num(2)?, len: num(3)? }, 2),
            "expose-ro" => (TraceOp::ExposeReadOnly { addr: num(2)?, len: num(3)? }, 2),
            "expose-mut" => (TraceOp::ExposeMutable { addr: num(2)?, len: num(3)? }, 2),
            other => return Err(err(c1, format!("unknown op `{other}`"))),
        };
        if let Some(&(c, extra)) = toks.get(2 + argc) {
            return Err(err(c, format!("unexpected `{extra}`")));
        }
        events.push(TraceEvent { thread, op });
    }
    Ok(TraceFile { frame_size, events })
}

/// Whitespace-separated tokens with their byte columns.
fn tokens(line: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, ch) in line.char_indices() {
        match (ch.is_whitespace(), start) {
            (true, Some(s)) => {
                out.push((s, &line[s..i]));
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, &line[s..]));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_all_ops() {
        let t = parse_trace(
            "# header\nframe-size 256\n0 meta-read 3\n1 meta-cas 0x3 # trailing\n\n2 expose-ro 0x100 16\n2 byte-write 256 4\n",
        )
        .unwrap();
        assert_eq!(t.frame_size, 256);
        assert_eq!(t.events.len(), 4);
        assert_eq!(t.events[1], TraceEvent { thread: 1, op: TraceOp::MetaCas(3) });
        assert_eq!(t.threads().len(), 3);
        assert_eq!(parse_trace(&t.to_text()).unwrap(), t);
    }

    #[test]
    fn errors_carry_position() {
        let e = parse_trace("0 meta-read 1\n0 meta-jump 1\n").unwrap_err();
        assert_eq!((e.line, e.column), (2, 3));
        let e = parse_trace("x meta-read 1").unwrap_err();
        assert_eq!((e.line, e.column), (1, 1));
        let e = parse_trace("0 byte-read 1").unwrap_err();
        assert_eq!(e.line, 1);
        assert!(e.message.contains("missing"));
        let e = parse_trace("0 claim 1 2").unwrap_err();
        assert_eq!(e.column, 11);
    }
}
