//! Text form of scripted user programs.
//!
//! Statements are separated by `;` or newlines:
//!
//! ```text
//! store 0x400000 "hi"    # bytes at a user address
//! load 0x400000 rbx      # 8 bytes little-endian into a register
//! set rdi 0x400000
//! flags 0x3202
//! syscall 0
//! exit
//! ```
//!
//! Strings take `\n`, `\t`, `\\`, `\"` and `\xNN` escapes.

use fk_core::privsep::{reg_index, UserOp};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("at byte {offset}: {msg}")]
pub struct ProgramError {
    /// Byte offset into the program text.
    pub offset: usize,
    pub msg: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Word(String),
    Str(Vec<u8>),
    End,
}

fn err(offset: usize, msg: impl Into<String>) -> ProgramError {
    ProgramError { offset, msg: msg.into() }
}

fn lex(text: &str) -> Result<Vec<(usize, Tok)>, ProgramError> {
    let b = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < b.len() {
        match b[i] {
            b' ' | b'\t' | b'\r' => i += 1,
            b';' | b'\n' => {
                out.push((i, Tok::End));
                i += 1;
            }
            b'#' => {
                while i < b.len() && b[i] != b'\n' {
                    i += 1;
                }
            }
            b'"' => {
                let start = i;
                i += 1;
                let mut s = Vec::new();
                loop {
                    match b.get(i) {
                        None => return Err(err(start, "unterminated string")),
                        Some(b'"') => {
                            i += 1;
                            break;
                        }
                        Some(b'\\') => {
                            let esc = *b.get(i + 1).ok_or_else(|| err(i, "dangling escape"))?;
                            i += 2;
                            match esc {
                                b'n' => s.push(b'\n'),
                                b't' => s.push(b'\t'),
                                b'0' => s.push(0),
                                b'\\' | b'"' => s.push(esc),
                                b'x' => {
                                    let hex = text.get(i..i + 2).ok_or_else(|| err(i, "short \\x escape"))?;
                                    s.push(u8::from_str_radix(hex, 16).map_err(|_| err(i, "bad \\x escape"))?);
                                    i += 2;
                                }
                                _ => return Err(err(i - 1, format!("unknown escape \\{}", esc as char))),
                            }
                        }
                        Some(&c) => {
                            s.push(c);
                            i += 1;
                        }
                    }
                }
                out.push((start, Tok::Str(s)));
            }
            _ => {
                let start = i;
                while i < b.len() && !matches!(b[i], b' ' | b'\t' | b'\r' | b'\n' | b';' | b'"' | b'#') {
                    i += 1;
                }
                out.push((start, Tok::Word(text[start..i].to_string())));
            }
        }
    }
    out.push((b.len(), Tok::End));
    Ok(out)
}

fn number(s: &str) -> Option<u64> {
    let s = s.replace('_', "");
    match s.strip_prefix("0x") {
        Some(hex) => u64::from_str_radix(hex, 16).ok(),
        None => s.parse().ok(),
    }
}

pub fn parse_program(text: &str) -> Result<Vec<UserOp>, ProgramError> {
    let toks = lex(text)?;
    let mut ops = Vec::new();
    let mut stmt: Vec<(usize, Tok)> = Vec::new();
    for (pos, t) in toks {
        if t != Tok::End {
            stmt.push((pos, t));
            continue;
        }
        if !stmt.is_empty() {
            ops.push(statement(&stmt)?);
            stmt.clear();
        }
    }
    Ok(ops)
}

fn statement(stmt: &[(usize, Tok)]) -> Result<UserOp, ProgramError> {
    let (pos, Tok::Word(verb)) = &stmt[0] else {
        return Err(err(stmt[0].0, "expected an instruction"));
    };
    let arg = |i: usize| -> Result<(usize, &Tok), ProgramError> {
        stmt.get(i).map(|(p, t)| (*p, t)).ok_or_else(|| err(*pos, format!("{verb}: missing operand {i}")))
    };
    let num = |i: usize| -> Result<u64, ProgramError> {
        match arg(i)? {
            (p, Tok::Word(w)) => number(w).ok_or_else(|| err(p, format!("bad number {w:?}"))),
            (p, _) => Err(err(p, "expected a number")),
        }
    };
    let reg = |i: usize| -> Result<usize, ProgramError> {
        match arg(i)? {
            (p, Tok::Word(w)) => reg_index(w).ok_or_else(|| err(p, format!("unknown register {w:?}"))),
            (p, _) => Err(err(p, "expected a register")),
        }
    };
    let arity = match verb.as_str() {
        "store" | "load" | "set" => 3,
        "flags" | "syscall" => 2,
        "exit" => 1,
        _ => return Err(err(*pos, format!("unknown instruction {verb:?}"))),
    };
    if stmt.len() != arity {
        return Err(err(*pos, format!("{verb} takes {} operands, got {}", arity - 1, stmt.len() - 1)));
    }
    Ok(match verb.as_str() {
        "store" => {
            let vaddr = num(1)? as usize;
            let data = match arg(2)? {
                (_, Tok::Str(s)) => s.clone(),
                (p, _) => return Err(err(p, "store takes a quoted string")),
            };
            UserOp::Store { vaddr, data }
        }
        "load" => UserOp::Load { vaddr: num(1)? as usize, reg: reg(2)? },
        "set" => UserOp::SetReg { reg: reg(1)?, value: num(2)? },
        "flags" => UserOp::SetFlags(num(1)?),
        "syscall" => UserOp::Syscall(num(1)?),
        _ => UserOp::Exit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_every_instruction() {
        let p = parse_program("store 0x400000 \"h\\x69;\"; load 0x400000 rbx\nset rdi 4_096 # note\nflags 0x200; syscall 2; exit")
            .unwrap();
        assert_eq!(
            p,
            vec![
                UserOp::Store { vaddr: 0x40_0000, data: b"hi;".to_vec() },
                UserOp::Load { vaddr: 0x40_0000, reg: 1 },
                UserOp::SetReg { reg: 5, value: 4096 },
                UserOp::SetFlags(0x200),
                UserOp::Syscall(2),
                UserOp::Exit,
            ]
        );
        assert_eq!(parse_program("  \n;; ").unwrap(), vec![]);
    }

    #[test]
    fn errors_point_at_the_token() {
        assert_eq!(parse_program("exit; jump 3").unwrap_err().offset, 6);
        assert_eq!(parse_program("set rzz 1").unwrap_err().offset, 4);
        assert_eq!(parse_program("store 0x10 \"abc").unwrap_err().offset, 11);
        assert!(parse_program("syscall").is_err());
    }
}
