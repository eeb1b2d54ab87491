use std::collections::HashMap;

use thiserror::Error;

use super::encode::encode;
use super::{
    Addr, Block, BrKind, Function, Instr, LogicOp, LogicOperand, MemSize, WideOp, Operand, Program, Reg, Shift,
};
use crate::decoder::{BtiKind, Cond, PStateField, SysRegId};

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("{line}:{col}: {message}")]
    Syntax { line: usize, col: usize, message: String },
    #[error("{line}: duplicate function `{name}`")]
    DuplicateFunction { line: usize, name: String },
    #[error("{line}:{col}: unknown mnemonic `{mnemonic}`")]
    UnknownMnemonic { line: usize, col: usize, mnemonic: String },
    #[error("{line}: duplicate label `{label}`")]
    DuplicateLabel { line: usize, label: String },
    #[error("{line}: undefined label `{label}`")]
    UndefinedLabel { line: usize, label: String },
}

/// An operand with its 1-based starting column.
#[derive(Clone, Copy)]
struct Tok<'a> {
    col: usize,
    text: &'a str,
}

enum Fail {
    At(usize, String),
    Unknown(usize, String),
}

fn fail<T>(col: usize, msg: impl Into<String>) -> Result<T, Fail> {
    Err(Fail::At(col, msg.into()))
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    chars.next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_' || c == '.' || c == '$')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == '$')
}

/// Splits on commas outside `[]` and `{}`.
fn split_operands(text: &str, col0: usize) -> Result<Vec<Tok<'_>>, Fail> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    for (i, c) in text.char_indices() {
        match c {
            '[' | '{' => depth += 1,
            ']' | '}' => depth -= 1,
            ',' if depth == 0 => {
                out.push((start, &text[start..i]));
                start = i + 1;
            }
            _ => {}
        }
        if depth < 0 {
            return fail(col0 + i, "unbalanced bracket");
        }
    }
    if depth != 0 {
        return fail(col0 + text.len(), "unbalanced bracket");
    }
    out.push((start, &text[start..]));
    let toks: Vec<Tok> = out
        .into_iter()
        .map(|(s, t)| {
            let lead = t.len() - t.trim_start().len();
            Tok { col: col0 + s + lead, text: t.trim() }
        })
        .collect();
    if toks.len() == 1 && toks[0].text.is_empty() {
        return Ok(Vec::new());
    }
    if let Some(t) = toks.iter().find(|t| t.text.is_empty()) {
        return fail(t.col, "empty operand");
    }
    Ok(toks)
}

fn reg(t: Tok) -> Result<Reg, Fail> {
    let s = t.text.to_ascii_lowercase();
    let r = match s.as_str() {
        "sp" => Some(Reg::Sp),
        "wsp" => Some(Reg::Wsp),
        "xzr" => Some(Reg::Xzr),
        "wzr" => Some(Reg::Wzr),
        "lr" => Some(Reg::X(30)),
        "fp" => Some(Reg::X(29)),
        _ => {
            let (kind, num) = s.split_at(s.len().min(1));
            let n = num.parse::<u8>().ok().filter(|n| *n <= 30 && (num == "0" || !num.starts_with('0')));
            match (kind, n) {
                ("x", Some(n)) => Some(Reg::X(n)),
                ("w", Some(n)) => Some(Reg::W(n)),
                _ => None,
            }
        }
    };
    r.map_or_else(|| fail(t.col, format!("bad register `{}`", t.text)), Ok)
}

fn xreg(t: Tok) -> Result<Reg, Fail> {
    let r = reg(t)?;
    if !r.is64() || r.is_sp() || r.is_zr() {
        return fail(t.col, format!("expected an x register, got `{}`", t.text));
    }
    Ok(r)
}

fn parse_int(s: &str) -> Option<i128> {
    let s = s.replace('_', "");
    let (neg, body) = match s.strip_prefix('-') {
        Some(b) => (true, b.to_string()),
        None => (false, s),
    };
    let v = match body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        Some(h) => i128::from_str_radix(h, 16).ok()?,
        None => body.parse::<i128>().ok()?,
    };
    Some(if neg { -v } else { v })
}

fn imm(t: Tok) -> Result<i128, Fail> {
    let body = t.text.strip_prefix('#').unwrap_or(t.text);
    parse_int(body.trim()).map_or_else(|| fail(t.col, format!("bad immediate `{}`", t.text)), Ok)
}

fn imm_in(t: Tok, lo: i128, hi: i128) -> Result<i128, Fail> {
    let v = imm(t)?;
    if v < lo || v > hi {
        return fail(t.col, format!("immediate {v} out of range {lo}..={hi}"));
    }
    Ok(v)
}

fn label(t: Tok) -> Result<String, Fail> {
    if !is_ident(t.text) {
        return fail(t.col, format!("bad label `{}`", t.text));
    }
    Ok(t.text.to_string())
}

/// `lsl #n`, `lsr #n`, `asr #n`
fn shift_spec(t: Tok) -> Result<(Shift, u8), Fail> {
    let lower = t.text.to_ascii_lowercase();
    let (kind, rest) = lower.split_once(char::is_whitespace).unwrap_or((lower.as_str(), ""));
    let shift = match kind {
        "lsl" => Shift::Lsl,
        "lsr" => Shift::Lsr,
        "asr" => Shift::Asr,
        _ => return fail(t.col, format!("expected a shift, got `{}`", t.text)),
    };
    let amount = imm_in(Tok { col: t.col, text: rest.trim() }, 0, 63)?;
    Ok((shift, amount as u8))
}

fn count(ops: &[Tok], lo: usize, hi: usize, col: usize) -> Result<(), Fail> {
    if ops.len() < lo || ops.len() > hi {
        let want = if lo == hi { format!("{lo}") } else { format!("{lo} to {hi}") };
        return fail(col, format!("expected {want} operand(s), got {}", ops.len()));
    }
    Ok(())
}

/// Parses `[rn]`, `[rn, #imm]`, `[rn, #imm]!`, `[rn, rm{, lsl #n}]`, plus an
/// optional post-index operand.
fn mem(t: Tok, post: Option<Tok>, size: MemSize, allow_reg: bool) -> Result<Addr, Fail> {
    let (inner, pre) = match t.text.strip_suffix('!') {
        Some(x) => (x.trim_end(), true),
        None => (t.text, false),
    };
    let Some(inner) = inner.strip_prefix('[').and_then(|x| x.strip_suffix(']')) else {
        return fail(t.col, format!("expected a memory operand, got `{}`", t.text));
    };
    let parts = split_operands(inner, t.col + 1)?;
    let Some(first) = parts.first() else {
        return fail(t.col, "empty memory operand");
    };
    let rn = reg(*first)?;
    if !rn.is64() || rn.is_zr() {
        return fail(first.col, "base register must be an x register or sp");
    }
    let addr = match parts.len() {
        1 => Addr::Offset { rn, imm: 0 },
        2 if parts[1].text.starts_with('#') => {
            let v = imm_in(parts[1], -(1 << 20), 1 << 24)? as i64;
            if pre {
                Addr::Pre { rn, imm: v }
            } else {
                Addr::Offset { rn, imm: v }
            }
        }
        2 | 3 if allow_reg => {
            let rm = reg(parts[1])?;
            if !rm.is64() || rm.is_sp() {
                return fail(parts[1].col, "index register must be an x register");
            }
            let scaled = match parts.get(2) {
                None => false,
                Some(s) => {
                    let (shift, amt) = shift_spec(*s)?;
                    if shift != Shift::Lsl || (amt as u32 != size.log2() && amt != 0) {
                        return fail(s.col, format!("index shift must be lsl #{} or #0", size.log2()));
                    }
                    amt != 0
                }
            };
            Addr::RegOffset { rn, rm, scaled }
        }
        _ => return fail(t.col, format!("unsupported addressing mode `{}`", t.text)),
    };
    if pre && !matches!(addr, Addr::Pre { .. }) {
        return fail(t.col, "pre-index needs an immediate offset");
    }
    match (post, &addr) {
        (None, _) => Ok(addr),
        (Some(p), Addr::Offset { rn, imm: 0 }) if !t.text.contains(',') => {
            Ok(Addr::Post { rn: *rn, imm: imm_in(p, -(1 << 20), 1 << 20)? as i64 })
        }
        (Some(p), _) => fail(p.col, "post-index needs a plain `[base]` operand"),
    }
}

fn add_sub(sub: bool, flags: bool, rd: Reg, rn: Reg, rest: &[Tok]) -> Result<Instr, Fail> {
    let t = rest[0];
    if t.text.starts_with('#') {
        let v = imm(t)?;
        // A negative immediate flips the operation for the non-flag forms.
        if v < 0 && !flags {
            let op = imm_operand(t.col, -v, rest.get(1).copied())?;
            return Ok(Instr::AddSub { sub: !sub, flags, rd, rn, op });
        }
    }
    Ok(Instr::AddSub { sub, flags, rd, rn, op: operand(rest)? })
}

fn imm_operand(col: usize, v: i128, shift: Option<Tok>) -> Result<Operand, Fail> {
    let lsl12 = match shift {
        None => false,
        Some(s) => match shift_spec(s)? {
            (Shift::Lsl, 0) => false,
            (Shift::Lsl, 12) => true,
            _ => return fail(s.col, "immediate shift must be lsl #0 or lsl #12"),
        },
    };
    if (0..4096).contains(&v) {
        return Ok(Operand::Imm { imm: v as u16, lsl12 });
    }
    if !lsl12 && v > 0 && v % 4096 == 0 && v / 4096 < 4096 {
        return Ok(Operand::Imm { imm: (v / 4096) as u16, lsl12: true });
    }
    fail(col, format!("immediate {v} is not encodable"))
}

fn operand(rest: &[Tok]) -> Result<Operand, Fail> {
    let t = rest[0];
    if t.text.starts_with('#') {
        return imm_operand(t.col, imm(t)?, rest.get(1).copied());
    }
    let rm = reg(t)?;
    let (shift, amount) = match rest.get(1) {
        None => (Shift::Lsl, 0),
        Some(s) => shift_spec(*s)?,
    };
    Ok(Operand::Reg { rm, shift, amount })
}

fn logic(op: LogicOp, rd: Reg, rn: Reg, rest: &[Tok]) -> Result<Instr, Fail> {
    let t = rest[0];
    let operand = if t.text.starts_with('#') {
        if rest.len() > 1 {
            return fail(rest[1].col, "logical immediates take no shift");
        }
        let v = imm(t)?;
        let bits = if rd.is64() { 64 } else { 32 };
        let masked = if v < 0 { (v as i64 as u64) & (u64::MAX >> (64 - bits)) } else { v as u64 };
        if v > 0 && (v as u128) >> bits != 0 {
            return fail(t.col, format!("immediate {v} does not fit"));
        }
        LogicOperand::Imm(masked)
    } else {
        let rm = reg(t)?;
        let (shift, amount) = match rest.get(1) {
            None => (Shift::Lsl, 0),
            Some(s) => shift_spec(*s)?,
        };
        LogicOperand::Reg { rm, shift, amount }
    };
    Ok(Instr::Logic { op, rd, rn, operand })
}

/// `mov rd, #imm` as `movz`, `movn` or `orr rd, zr, #imm`.
fn mov_imm(rd: Reg, t: Tok) -> Result<Instr, Fail> {
    let v = imm(t)?;
    let bits = if rd.is64() { 64 } else { 32 };
    let mask = u64::MAX >> (64 - bits);
    if v > mask as i128 || v < -(1i128 << (bits - 1)) {
        return fail(t.col, format!("immediate {v} does not fit"));
    }
    let u = (v as i64 as u64) & mask;
    for shift in (0..bits).step_by(16) {
        if u & !(0xFFFFu64 << shift) == 0 {
            return Ok(Instr::MovWide { kind: WideOp::Z, rd, imm: (u >> shift) as u16, shift: shift as u8 });
        }
    }
    let n = !u & mask;
    for shift in (0..bits).step_by(16) {
        if n & !(0xFFFFu64 << shift) == 0 {
            return Ok(Instr::MovWide { kind: WideOp::N, rd, imm: (n >> shift) as u16, shift: shift as u8 });
        }
    }
    if super::encode::encode_bitmask(u, rd.is64()).is_some() {
        return Ok(Instr::Logic { op: LogicOp::Orr, rd, rn: rd.zr_like(), operand: LogicOperand::Imm(u) });
    }
    fail(t.col, format!("immediate {v:#x} needs a movz/movk sequence"))
}

fn mem_size_for(rt: Reg, suffix: &str) -> MemSize {
    match suffix {
        "b" => MemSize::B,
        "h" => MemSize::H,
        _ if rt.is64() => MemSize::X,
        _ => MemSize::W,
    }
}

fn instr(mnem: Tok, ops: &[Tok]) -> Result<Instr, Fail> {
    let m = mnem.text.to_ascii_lowercase();
    let c = mnem.col;
    if let Some(cond) = m.strip_prefix("b.") {
        count(ops, 1, 1, c)?;
        let cond: Cond = cond.parse().map_err(|e: String| Fail::At(c, e))?;
        return Ok(Instr::BCond(cond, label(ops[0])?));
    }
    let ins = match m.as_str() {
        "b" => {
            count(ops, 1, 1, c)?;
            Instr::B(label(ops[0])?)
        }
        "bl" => {
            count(ops, 1, 1, c)?;
            Instr::Bl(label(ops[0])?)
        }
        "cbz" | "cbnz" => {
            count(ops, 2, 2, c)?;
            let rt = reg(ops[0])?;
            if rt.is_sp() {
                return fail(ops[0].col, "cbz cannot test sp");
            }
            Instr::Cbz { nz: m == "cbnz", rt, label: label(ops[1])? }
        }
        "blr" => {
            count(ops, 1, 1, c)?;
            Instr::Blr(xreg(ops[0])?)
        }
        "br" => {
            count(ops, 1, 2, c)?;
            let r = xreg(ops[0])?;
            let kind = match ops.get(1) {
                None => BrKind::Unconstrained,
                Some(t) if t.text == "tail" => BrKind::Tail,
                Some(t) => {
                    let Some(inner) = t.text.strip_prefix('{').and_then(|x| x.strip_suffix('}')) else {
                        return fail(t.col, "expected `tail` or a `{label, ...}` target set");
                    };
                    let targets = split_operands(inner, t.col + 1)?
                        .into_iter()
                        .map(label)
                        .collect::<Result<Vec<_>, _>>()?;
                    if targets.is_empty() {
                        return fail(t.col, "empty target set");
                    }
                    BrKind::Switch(targets)
                }
            };
            Instr::Br(r, kind)
        }
        "ret" => {
            count(ops, 0, 1, c)?;
            Instr::Ret(match ops.first() {
                Some(t) => xreg(*t)?,
                None => Reg::LR,
            })
        }
        "bti" => {
            count(ops, 0, 1, c)?;
            let kind = match ops.first().map(|t| t.text.to_ascii_lowercase()) {
                None => BtiKind::None,
                Some(k) if k == "c" => BtiKind::C,
                Some(k) if k == "j" => BtiKind::J,
                Some(k) if k == "jc" => BtiKind::JC,
                Some(_) => return fail(ops[0].col, "expected c, j or jc"),
            };
            Instr::Bti(kind)
        }
        "add" | "adds" | "sub" | "subs" => {
            count(ops, 3, 4, c)?;
            add_sub(m.starts_with("sub"), m.ends_with('s'), reg(ops[0])?, reg(ops[1])?, &ops[2..])?
        }
        "cmp" => {
            count(ops, 2, 3, c)?;
            let rn = reg(ops[0])?;
            Instr::AddSub { sub: true, flags: true, rd: rn.zr_like(), rn, op: operand(&ops[1..])? }
        }
        "and" | "orr" | "eor" => {
            count(ops, 3, 4, c)?;
            let op = match m.as_str() {
                "and" => LogicOp::And,
                "orr" => LogicOp::Orr,
                _ => LogicOp::Eor,
            };
            logic(op, reg(ops[0])?, reg(ops[1])?, &ops[2..])?
        }
        "mov" => {
            count(ops, 2, 2, c)?;
            let rd = reg(ops[0])?;
            if ops[1].text.starts_with('#') {
                mov_imm(rd, ops[1])?
            } else {
                Instr::Mov { rd, rn: reg(ops[1])? }
            }
        }
        "movz" | "movn" | "movk" => {
            count(ops, 2, 3, c)?;
            let rd = reg(ops[0])?;
            let v = imm_in(ops[1], 0, 0xFFFF)? as u16;
            let shift = match ops.get(2) {
                None => 0,
                Some(t) => match shift_spec(*t)? {
                    (Shift::Lsl, s) if s % 16 == 0 => s,
                    _ => return fail(t.col, "shift must be lsl by a multiple of 16"),
                },
            };
            let kind = match m.as_str() {
                "movz" => WideOp::Z,
                "movn" => WideOp::N,
                _ => WideOp::K,
            };
            Instr::MovWide { kind, rd, imm: v, shift }
        }
        "mul" | "udiv" => {
            count(ops, 3, 3, c)?;
            let (rd, rn, rm) = (reg(ops[0])?, reg(ops[1])?, reg(ops[2])?);
            if m == "mul" {
                Instr::Mul { rd, rn, rm }
            } else {
                Instr::Udiv { rd, rn, rm }
            }
        }
        "lsl" | "lsr" => {
            count(ops, 3, 3, c)?;
            if !ops[2].text.starts_with('#') {
                return fail(ops[2].col, "only immediate shifts are supported");
            }
            Instr::ShiftImm { right: m == "lsr", rd: reg(ops[0])?, rn: reg(ops[1])?, amount: imm_in(ops[2], 0, 63)? as u8 }
        }
        "ldr" | "ldrb" | "ldrh" | "str" | "strb" | "strh" => {
            count(ops, 2, 3, c)?;
            let rt = reg(ops[0])?;
            let size = mem_size_for(rt, &m[3..]);
            if rt.is_sp() || (size != MemSize::X && rt.is64()) {
                return fail(ops[0].col, format!("bad transfer register for {m}"));
            }
            let addr = mem(ops[1], ops.get(2).copied(), size, true)?;
            if m.starts_with("ldr") {
                Instr::Load { size, rt, addr }
            } else {
                Instr::Store { size, rt, addr }
            }
        }
        "ldtr" | "ldtrb" | "ldtrh" | "sttr" | "sttrb" | "sttrh" => {
            count(ops, 2, 2, c)?;
            let rt = reg(ops[0])?;
            let size = mem_size_for(rt, &m[4..]);
            if rt.is_sp() || (size != MemSize::X && rt.is64()) {
                return fail(ops[0].col, format!("bad transfer register for {m}"));
            }
            let (rn, v) = match mem(ops[1], None, size, false)? {
                Addr::Offset { rn, imm } if (-256..256).contains(&imm) => (rn, imm as i16),
                _ => return fail(ops[1].col, "unprivileged loads/stores take [base, #imm9] only"),
            };
            if m.starts_with("ldtr") {
                Instr::LoadUnpriv { size, rt, rn, imm: v }
            } else {
                Instr::StoreUnpriv { size, rt, rn, imm: v }
            }
        }
        "ldp" | "stp" => {
            count(ops, 3, 4, c)?;
            let (rt1, rt2) = (reg(ops[0])?, reg(ops[1])?);
            let addr = mem(ops[2], ops.get(3).copied(), MemSize::X, false)?;
            if m == "ldp" {
                Instr::LoadPair { rt1, rt2, addr }
            } else {
                Instr::StorePair { rt1, rt2, addr }
            }
        }
        "adr" => {
            count(ops, 2, 2, c)?;
            Instr::Adr { rd: xreg(ops[0])?, label: label(ops[1])? }
        }
        "svc" | "brk" => {
            count(ops, 1, 1, c)?;
            let v = imm_in(ops[0], 0, 0xFFFF)? as u16;
            if m == "svc" {
                Instr::Svc(v)
            } else {
                Instr::Brk(v)
            }
        }
        "nop" | "eret" => {
            count(ops, 0, 0, c)?;
            if m == "nop" {
                Instr::Nop
            } else {
                Instr::Eret
            }
        }
        "mrs" => {
            count(ops, 2, 2, c)?;
            let rt = xreg_or_zr(ops[0])?;
            let reg: SysRegId = ops[1].text.parse().map_err(|e: String| Fail::At(ops[1].col, e))?;
            Instr::Mrs { rt, reg }
        }
        "msr" => {
            count(ops, 2, 2, c)?;
            if ops[1].text.starts_with('#') {
                let field = PStateField::from_name(ops[0].text)
                    .ok_or_else(|| Fail::At(ops[0].col, format!("unknown PSTATE field `{}`", ops[0].text)))?;
                Instr::MsrImm { field, imm: imm_in(ops[1], 0, 15)? as u8 }
            } else {
                let reg: SysRegId = ops[0].text.parse().map_err(|e: String| Fail::At(ops[0].col, e))?;
                Instr::MsrReg { reg, rt: xreg_or_zr(ops[1])? }
            }
        }
        ".word" => {
            count(ops, 1, 1, c)?;
            let v = parse_int(ops[0].text).filter(|v| (0..=u32::MAX as i128).contains(v));
            Instr::Word(v.ok_or_else(|| Fail::At(ops[0].col, format!("bad word `{}`", ops[0].text)))? as u32)
        }
        _ => return Err(Fail::Unknown(c, mnem.text.to_string())),
    };
    if !ins.is_pc_relative() {
        encode(&ins).map_err(|e| Fail::At(c, e.to_string()))?;
    }
    Ok(ins)
}

fn xreg_or_zr(t: Tok) -> Result<Reg, Fail> {
    let r = reg(t)?;
    if !r.is64() || r.is_sp() {
        return fail(t.col, format!("expected an x register, got `{}`", t.text));
    }
    Ok(r)
}

fn to_error(line: usize, f: Fail) -> ParseError {
    match f {
        Fail::Unknown(col, mnemonic) => ParseError::UnknownMnemonic { line, col, mnemonic },
        Fail::At(col, message) => ParseError::Syntax { line, col, message },
    }
}

/// Parses `mnemonic operands` starting at column `col0`.
fn parse_at(text: &str, col0: usize) -> Result<Instr, Fail> {
    let (m, rest) = match text.find(char::is_whitespace) {
        Some(i) => (&text[..i], &text[i..]),
        None => (text, ""),
    };
    let lead = rest.len() - rest.trim_start().len();
    let ops = split_operands(rest.trim(), col0 + m.len() + lead)?;
    instr(Tok { col: col0, text: m }, &ops)
}

/// Parses a single instruction line.
pub fn parse_instr(text: &str) -> Result<Instr, ParseError> {
    let lead = text.len() - text.trim_start().len();
    parse_at(text.trim(), 1 + lead).map_err(|e| to_error(1, e))
}

struct FnBuilder {
    name: String,
    line: usize,
    address_taken: bool,
    blocks: Vec<Block>,
}

fn strip_comment(line: &str) -> &str {
    match line.find("//") {
        Some(i) => &line[..i],
        None => line,
    }
}

pub fn parse(text: &str) -> Result<Program, ParseError> {
    let mut prog = Program::default();
    let mut cur: Option<FnBuilder> = None;
    let mut labels: HashMap<String, usize> = HashMap::new();
    let mut refs: Vec<(usize, usize, Instr)> = Vec::new();
    let mut saw_content = false;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if !saw_content {
            if let Some(src) = raw.trim().strip_prefix("// source:") {
                prog.source = Some(src.trim().to_string());
                saw_content = true;
                continue;
            }
        }
        let code = strip_comment(raw);
        let trimmed = code.trim();
        if trimmed.is_empty() {
            continue;
        }
        saw_content = true;
        let col0 = code.len() - code.trim_start().len() + 1;
        let syntax = |col: usize, message: String| ParseError::Syntax { line, col, message };

        if let Some(rest) = trimmed.strip_prefix(".fn") {
            if !rest.is_empty() && !rest.starts_with(char::is_whitespace) {
                return Err(ParseError::UnknownMnemonic { line, col: col0, mnemonic: trimmed.split_whitespace().next().unwrap().into() });
            }
            if let Some(f) = &cur {
                return Err(syntax(col0, format!("`.fn` inside function `{}`", f.name)));
            }
            let words: Vec<&str> = rest.split_whitespace().collect();
            let (name, attrs) = match words.split_first() {
                Some((n, a)) => (*n, a),
                None => return Err(syntax(col0, "`.fn` needs a name".into())),
            };
            if !is_ident(name) {
                return Err(syntax(col0 + 4, format!("bad function name `{name}`")));
            }
            let address_taken = match attrs {
                [] => false,
                ["address_taken"] => true,
                _ => return Err(syntax(col0, format!("unknown function attribute `{}`", attrs.join(" ")))),
            };
            if prog.function(name).is_some() {
                return Err(ParseError::DuplicateFunction { line, name: name.into() });
            }
            if labels.insert(name.to_string(), line).is_some() {
                return Err(ParseError::DuplicateLabel { line, label: name.into() });
            }
            cur = Some(FnBuilder { name: name.into(), line, address_taken, blocks: vec![Block::new(name)] });
            continue;
        }
        if trimmed == ".endfn" {
            let Some(f) = cur.take() else {
                return Err(syntax(col0, "`.endfn` outside a function".into()));
            };
            if f.blocks.iter().all(|b| b.instrs.is_empty()) {
                return Err(syntax(col0, format!("function `{}` is empty", f.name)));
            }
            prog.functions.push(Function::new(f.name, f.blocks, f.address_taken));
            continue;
        }
        let Some(f) = cur.as_mut() else {
            return Err(syntax(col0, "instruction outside a function".into()));
        };

        let mut body = trimmed;
        let mut body_col = col0;
        if let Some(colon) = trimmed.find(':') {
            let name = &trimmed[..colon];
            if is_ident(name) {
                if labels.insert(name.to_string(), line).is_some() {
                    return Err(ParseError::DuplicateLabel { line, label: name.into() });
                }
                f.blocks.push(Block::new(name));
                let after = &trimmed[colon + 1..];
                body_col = col0 + colon + 1 + (after.len() - after.trim_start().len());
                body = after.trim();
                if body.is_empty() {
                    continue;
                }
            }
        }
        let ins = parse_at(body, body_col).map_err(|e| to_error(line, e))?;
        let block = f.blocks.last_mut().unwrap();
        if block.terminator().is_some() {
            return Err(syntax(body_col, "instruction after a block terminator needs a label".into()));
        }
        if !ins.labels().is_empty() {
            refs.push((line, prog.functions.len(), ins.clone()));
        }
        block.instrs.push(ins);
    }
    if let Some(f) = cur {
        return Err(ParseError::Syntax { line: f.line, col: 1, message: format!("function `{}` has no `.endfn`", f.name) });
    }

    for (line, fi, ins) in refs {
        let func = &prog.functions[fi];
        for l in ins.labels() {
            if !labels.contains_key(l) {
                return Err(ParseError::UndefinedLabel { line, label: l.into() });
            }
            let local = func.block_index(l).is_some();
            let entry = prog.is_entry(l);
            let ok = match &ins {
                Instr::B(_) => local || entry,
                Instr::BCond(..) | Instr::Cbz { .. } => local,
                Instr::Bl(_) => entry,
                Instr::Adr { .. } => local || entry,
                _ => true,
            };
            if !ok {
                return Err(ParseError::Syntax {
                    line,
                    col: 1,
                    message: format!("`{ins}` cannot target `{l}` from function `{}`", func.name),
                });
            }
        }
    }
    Ok(prog)
}
