//! Source scanner for the privileged/unprivileged split.
//!
//! Counts code lines per module and flags any use of privileged-only entry
//! points in service sources. Comments and string literals are ignored.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

/// Names services must not touch. Entries starting with `_` match as a
/// suffix of an identifier; the rest must be whole identifiers.
pub const FORBIDDEN: [&str; 8] =
    ["unsafe", "_unchecked", "meta_transition", "from_unused", "raw_read", "forge", "from_snapshot", "mem_init"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModuleLines {
    pub path: PathBuf,
    pub lines: usize,
    pub privileged: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Finding {
    pub path: PathBuf,
    pub line: usize,
    pub column: usize,
    pub marker: &'static str,
}

#[derive(Clone, Debug, Default)]
pub struct TcbReport {
    pub modules: Vec<ModuleLines>,
    pub findings: Vec<Finding>,
}

impl TcbReport {
    pub fn privileged_lines(&self) -> usize {
        self.modules.iter().filter(|m| m.privileged).map(|m| m.lines).sum()
    }

    pub fn total_lines(&self) -> usize {
        self.modules.iter().map(|m| m.lines).sum()
    }

    /// Privileged share of all counted lines.
    pub fn ratio(&self) -> f64 {
        match self.total_lines() {
            0 => 0.0,
            n => self.privileged_lines() as f64 / n as f64,
        }
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for m in &self.modules {
            let tag = if m.privileged { "privileged" } else { "service" };
            let _ = writeln!(s, "{:>7}  {:<10}  {}", m.lines, tag, m.path.display());
        }
        let _ = writeln!(
            s,
            "privileged {} / total {} lines ({:.1}%)",
            self.privileged_lines(),
            self.total_lines(),
            100.0 * self.ratio()
        );
        for f in &self.findings {
            let _ = writeln!(s, "{}:{}:{}: uses `{}`", f.path.display(), f.line, f.column, f.marker);
        }
        s
    }
}

/// Blanks comments, string and char literals with spaces, keeping newlines
/// so positions still line up.
pub fn strip_code(src: &str) -> String {
    let b = src.as_bytes();
    let mut out = b.to_vec();
    let blank = |out: &mut Vec<u8>, from: usize, to: usize| {
        for c in &mut out[from..to] {
            if *c != b'\n' {
                *c = b' ';
            }
        }
    };
    let mut i = 0;
    while i < b.len() {
        match b[i] {
            b'/' if b.get(i + 1) == Some(&b'/') => {
                let end = b[i..].iter().position(|&c| c == b'\n').map_or(b.len(), |p| i + p);
                blank(&mut out, i, end);
                i = end;
            }
            b'/' if b.get(i + 1) == Some(&b'*') => {
                let (mut depth, mut j) = (1, i + 2);
                while j < b.len() && depth > 0 {
                    if b[j] == b'/' && b.get(j + 1) == Some(&b'*') {
                        depth += 1;
                        j += 2;
                    } else if b[j] == b'*' && b.get(j + 1) == Some(&b'/') {
                        depth -= 1;
                        j += 2;
                    } else {
                        j += 1;
                    }
                }
                blank(&mut out, i, j);
                i = j;
            }
            b'r' | b'b' if raw_string_start(b, i).is_some() => {
                let (hashes, body) = raw_string_start(b, i).unwrap();
                let mut close = vec![b'"'];
                close.extend(std::iter::repeat_n(b'#', hashes));
                let end = b[body..].windows(close.len()).position(|w| w == close.as_slice()).map_or(b.len(), |p| body + p + close.len());
                blank(&mut out, i, end);
                i = end;
            }
            b'"' => {
                let mut j = i + 1;
                while j < b.len() && b[j] != b'"' {
                    j += if b[j] == b'\\' { 2 } else { 1 };
                }
                let end = (j + 1).min(b.len());
                blank(&mut out, i, end);
                i = end;
            }
            b'\'' => match char_literal_len(src, i) {
                Some(n) => {
                    blank(&mut out, i, i + n);
                    i += n;
                }
                // A lifetime or label.
                None => i += 1,
            },
            c if is_ident(c) => {
                // Skip whole identifiers so `br` or `r` inside one is not a prefix.
                while i < b.len() && is_ident(b[i]) {
                    i += 1;
                }
            }
            _ => i += 1,
        }
    }
    String::from_utf8(out).unwrap_or_default()
}

fn raw_string_start(b: &[u8], i: usize) -> Option<(usize, usize)> {
    if i > 0 && is_ident(b[i - 1]) {
        return None;
    }
    let mut j = i;
    if b[j] == b'b' {
        j += 1;
    }
    if b.get(j) != Some(&b'r') {
        return if b[i] == b'b' && b.get(i + 1) == Some(&b'"') { Some((0, i + 2)) } else { None };
    }
    j += 1;
    let hashes = b[j..].iter().take_while(|&&c| c == b'#').count();
    (b.get(j + hashes) == Some(&b'"')).then_some((hashes, j + hashes + 1))
}

fn char_literal_len(src: &str, i: usize) -> Option<usize> {
    let b = src.as_bytes();
    match b.get(i + 1)? {
        b'\\' => {
            let close = b[i + 2..].iter().take(10).position(|&c| c == b'\'')?;
            Some(close + 3)
        }
        _ => {
            let w = src[i + 1..].chars().next()?.len_utf8();
            (b.get(i + 1 + w) == Some(&b'\'')).then_some(w + 2)
        }
    }
}

fn is_ident(c: u8) -> bool {
    c.is_ascii_alphanumeric() || c == b'_'
}

/// Lines with at least one non-blank character after stripping.
pub fn code_lines(stripped: &str) -> usize {
    stripped.lines().filter(|l| !l.trim().is_empty()).count()
}

/// Finds forbidden markers in one source text.
pub fn scan_source(path: &Path, src: &str) -> Vec<Finding> {
    let stripped = strip_code(src);
    let mut out = Vec::new();
    for (ln, line) in stripped.lines().enumerate() {
        let b = line.as_bytes();
        let mut i = 0;
        while i < b.len() {
            if !is_ident(b[i]) {
                i += 1;
                continue;
            }
            let start = i;
            while i < b.len() && is_ident(b[i]) {
                i += 1;
            }
            let ident = &line[start..i];
            for &m in &FORBIDDEN {
                let hit = if m.starts_with('_') { ident.ends_with(m) && ident.len() > m.len() } else { ident == m };
                if hit {
                    out.push(Finding { path: path.to_path_buf(), line: ln + 1, column: start + 1, marker: m });
                }
            }
        }
    }
    out
}

fn rust_files(root: &Path) -> io::Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "rs") {
                files.push(path);
            }
        }
    }
    files.sort();
    Ok(files)
}

/// Counts lines under both roots and scans the services root.
pub fn tcb_scan(privileged_root: &Path, services_root: &Path) -> io::Result<TcbReport> {
    let mut report = TcbReport::default();
    for (root, privileged) in [(privileged_root, true), (services_root, false)] {
        for path in rust_files(root)? {
            let src = fs::read_to_string(&path)?;
            report.modules.push(ModuleLines { path: path.clone(), lines: code_lines(&strip_code(&src)), privileged });
            if !privileged {
                report.findings.extend(scan_source(&path, &src));
            }
        }
    }
    Ok(report)
}
