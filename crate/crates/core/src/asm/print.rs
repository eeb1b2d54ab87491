use std::fmt;

use super::{Addr, BrKind, Instr, LogicOp, LogicOperand, MemSize, WideOp, Operand, Program, Reg, Shift};
use crate::decoder::BtiKind;

pub(super) fn write_program(f: &mut fmt::Formatter<'_>, p: &Program) -> fmt::Result {
    if let Some(src) = &p.source {
        writeln!(f, "// source: {src}")?;
    }
    for (i, func) in p.functions.iter().enumerate() {
        if i > 0 {
            writeln!(f)?;
        }
        write!(f, ".fn {}", func.name)?;
        if func.address_taken {
            f.write_str(" address_taken")?;
        }
        writeln!(f)?;
        for (bi, block) in func.blocks.iter().enumerate() {
            if bi > 0 {
                writeln!(f, "{}:", block.label)?;
            }
            for ins in &block.instrs {
                writeln!(f, "    {ins}")?;
            }
        }
        writeln!(f, ".endfn")?;
    }
    Ok(())
}

fn imm(f: &mut fmt::Formatter<'_>, v: i64) -> fmt::Result {
    if v.unsigned_abs() < 4096 {
        write!(f, "#{v}")
    } else if v < 0 {
        write!(f, "#-{:#x}", v.unsigned_abs())
    } else {
        write!(f, "#{v:#x}")
    }
}

fn imm_u(f: &mut fmt::Formatter<'_>, v: u64) -> fmt::Result {
    if v < 4096 {
        write!(f, "#{v}")
    } else {
        write!(f, "#{v:#x}")
    }
}

fn shift_name(s: Shift) -> &'static str {
    match s {
        Shift::Lsl => "lsl",
        Shift::Lsr => "lsr",
        Shift::Asr => "asr",
    }
}

fn shifted(f: &mut fmt::Formatter<'_>, rm: Reg, shift: Shift, amount: u8) -> fmt::Result {
    write!(f, "{rm}")?;
    if amount != 0 || shift != Shift::Lsl {
        write!(f, ", {} #{amount}", shift_name(shift))?;
    }
    Ok(())
}

fn addr(f: &mut fmt::Formatter<'_>, size: MemSize, a: &Addr) -> fmt::Result {
    match *a {
        Addr::Offset { rn, imm: 0 } => write!(f, "[{rn}]"),
        Addr::Offset { rn, imm: v } => {
            write!(f, "[{rn}, ")?;
            imm(f, v)?;
            f.write_str("]")
        }
        Addr::Pre { rn, imm: v } => {
            write!(f, "[{rn}, ")?;
            imm(f, v)?;
            f.write_str("]!")
        }
        Addr::Post { rn, imm: v } => {
            write!(f, "[{rn}], ")?;
            imm(f, v)
        }
        Addr::RegOffset { rn, rm, scaled } => {
            write!(f, "[{rn}, {rm}")?;
            if scaled {
                write!(f, ", lsl #{}", size.log2())?;
            }
            f.write_str("]")
        }
    }
}

fn mem_suffix(size: MemSize) -> &'static str {
    match size {
        MemSize::B => "b",
        MemSize::H => "h",
        _ => "",
    }
}

fn labels(ts: &[String]) -> String {
    let mut s = String::from("{");
    for (i, t) in ts.iter().enumerate() {
        if i > 0 {
            s.push_str(", ");
        }
        s.push_str(t);
    }
    s.push('}');
    s
}

fn small_or_hex(f: &mut fmt::Formatter<'_>, v: u64) -> fmt::Result {
    if v < 256 {
        write!(f, "#{v}")
    } else {
        write!(f, "#{v:#x}")
    }
}

pub(super) fn write_instr(f: &mut fmt::Formatter<'_>, ins: &Instr) -> fmt::Result {
    use Instr::*;
    match ins {
        B(l) => write!(f, "b {l}"),
        BCond(c, l) => write!(f, "b.{c} {l}"),
        Cbz { nz, rt, label } => write!(f, "{} {rt}, {label}", if *nz { "cbnz" } else { "cbz" }),
        Bl(l) => write!(f, "bl {l}"),
        Blr(r) => write!(f, "blr {r}"),
        Br(r, BrKind::Unconstrained) => write!(f, "br {r}"),
        Br(r, BrKind::Tail) => write!(f, "br {r}, tail"),
        Br(r, BrKind::Switch(ts)) => write!(f, "br {r}, {}", labels(ts)),
        Ret(r) if *r == Reg::LR => f.write_str("ret"),
        Ret(r) => write!(f, "ret {r}"),
        Bti(k) => match k {
            BtiKind::None => f.write_str("bti"),
            k => write!(f, "bti {k}"),
        },
        AddSub { sub: true, flags: true, rd, rn, op } if rd.is_zr() => {
            write!(f, "cmp {rn}, ")?;
            operand(f, op)
        }
        AddSub { sub, flags, rd, rn, op } => {
            let m = match (sub, flags) {
                (false, false) => "add",
                (false, true) => "adds",
                (true, false) => "sub",
                (true, true) => "subs",
            };
            write!(f, "{m} {rd}, {rn}, ")?;
            operand(f, op)
        }
        Logic { op, rd, rn, operand } => {
            let m = match op {
                LogicOp::And => "and",
                LogicOp::Orr => "orr",
                LogicOp::Eor => "eor",
            };
            write!(f, "{m} {rd}, {rn}, ")?;
            match *operand {
                LogicOperand::Imm(v) => write!(f, "#{v:#x}"),
                LogicOperand::Reg { rm, shift, amount } => shifted(f, rm, shift, amount),
            }
        }
        Mov { rd, rn } => write!(f, "mov {rd}, {rn}"),
        MovWide { kind: WideOp::Z, rd, imm, shift } => {
            write!(f, "mov {rd}, ")?;
            imm_u(f, (*imm as u64) << shift)
        }
        MovWide { kind, rd, imm, shift } => {
            let m = match kind {
                WideOp::Z => "movz",
                WideOp::N => "movn",
                WideOp::K => "movk",
            };
            write!(f, "{m} {rd}, #{imm:#x}")?;
            if *shift != 0 {
                write!(f, ", lsl #{shift}")?;
            }
            Ok(())
        }
        Mul { rd, rn, rm } => write!(f, "mul {rd}, {rn}, {rm}"),
        Udiv { rd, rn, rm } => write!(f, "udiv {rd}, {rn}, {rm}"),
        ShiftImm { right, rd, rn, amount } => {
            write!(f, "{} {rd}, {rn}, #{amount}", if *right { "lsr" } else { "lsl" })
        }
        Load { size, rt, addr: a } => {
            write!(f, "ldr{} {rt}, ", mem_suffix(*size))?;
            addr(f, *size, a)
        }
        Store { size, rt, addr: a } => {
            write!(f, "str{} {rt}, ", mem_suffix(*size))?;
            addr(f, *size, a)
        }
        LoadUnpriv { size, rt, rn, imm: v } => {
            write!(f, "ldtr{} {rt}, ", mem_suffix(*size))?;
            addr(f, *size, &Addr::Offset { rn: *rn, imm: *v as i64 })
        }
        StoreUnpriv { size, rt, rn, imm: v } => {
            write!(f, "sttr{} {rt}, ", mem_suffix(*size))?;
            addr(f, *size, &Addr::Offset { rn: *rn, imm: *v as i64 })
        }
        LoadPair { rt1, rt2, addr: a } => {
            write!(f, "ldp {rt1}, {rt2}, ")?;
            addr(f, MemSize::X, a)
        }
        StorePair { rt1, rt2, addr: a } => {
            write!(f, "stp {rt1}, {rt2}, ")?;
            addr(f, MemSize::X, a)
        }
        Adr { rd, label } => write!(f, "adr {rd}, {label}"),
        Svc(v) => {
            f.write_str("svc ")?;
            small_or_hex(f, *v as u64)
        }
        Brk(v) => {
            f.write_str("brk ")?;
            small_or_hex(f, *v as u64)
        }
        Nop => f.write_str("nop"),
        Eret => f.write_str("eret"),
        Mrs { rt, reg } => write!(f, "mrs {rt}, {reg}"),
        MsrReg { reg, rt } => write!(f, "msr {reg}, {rt}"),
        MsrImm { field, imm } => {
            let name = field.to_string();
            let bare = name.strip_prefix("PSTATE.").unwrap_or(&name);
            write!(f, "msr {bare}, #{imm}")
        }
        Word(w) => write!(f, ".word {w:#010x}"),
    }
}

fn operand(f: &mut fmt::Formatter<'_>, op: &Operand) -> fmt::Result {
    match *op {
        Operand::Imm { imm: v, lsl12: false } => imm(f, v as i64),
        Operand::Imm { imm: v, lsl12: true } => {
            imm(f, v as i64)?;
            f.write_str(", lsl #12")
        }
        Operand::Reg { rm, shift, amount } => shifted(f, rm, shift, amount),
    }
}
