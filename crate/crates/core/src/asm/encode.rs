//! Instruction encoding and whole-program assembly.

use std::collections::BTreeMap;

use thiserror::Error;

use super::{Addr, Instr, LogicOp, LogicOperand, MemSize, WideOp, Operand, Program, Reg, Shift};

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum AsmError {
    #[error("`{instr}`: {message}")]
    Unencodable { instr: String, message: String },
    #[error("`{instr}` needs a resolved label")]
    NeedsAddress { instr: String },
    #[error("undefined label `{0}`")]
    UndefinedLabel(String),
    #[error("`{instr}`: target out of range")]
    OutOfRange { instr: String },
}

type R<T> = Result<T, String>;

/// Encodes a bitmask immediate as `(N, immr, imms)`.
pub fn encode_bitmask(value: u64, is64: bool) -> Option<(u32, u32, u32)> {
    let v = if is64 {
        value
    } else {
        if value >> 32 != 0 {
            return None;
        }
        value | (value << 32)
    };
    if v == 0 || v == u64::MAX {
        return None;
    }
    let mut size = 64u32;
    while size > 2 {
        let half = size / 2;
        let mask = (1u64 << half) - 1;
        if v & mask != (v >> half) & mask {
            break;
        }
        size = half;
    }
    let mask = if size == 64 { u64::MAX } else { (1u64 << size) - 1 };
    let elem = v & mask;
    let ones = elem.count_ones();
    let run = if ones == 64 { u64::MAX } else { (1u64 << ones) - 1 };
    let rotr = |x: u64, r: u32| -> u64 {
        if r == 0 {
            x
        } else {
            ((x >> r) | (x << (size - r))) & mask
        }
    };
    let r = (0..size).find(|&r| rotr(elem, r) == run)?;
    let immr = (size - r) % size;
    let imms = ((!(size - 1) << 1) & 0x3F) | (ones - 1);
    let n = (size == 64) as u32;
    if !is64 && n == 1 {
        return None;
    }
    Some((n, immr, imms))
}

fn sf(r: Reg) -> u32 {
    (r.is64() as u32) << 31
}

/// Register number in a field where 31 means `sp`.
fn r_sp(r: Reg) -> R<u32> {
    if r.is_zr() {
        return Err(format!("`{r}` is not allowed here"));
    }
    Ok(r.num() as u32)
}

/// Register number in a field where 31 means the zero register.
fn r_zr(r: Reg) -> R<u32> {
    if r.is_sp() {
        return Err(format!("`{r}` is not allowed here"));
    }
    Ok(r.num() as u32)
}

fn same_width(regs: &[Reg]) -> R<()> {
    if regs.windows(2).any(|w| w[0].is64() != w[1].is64()) {
        return Err("operands mix 32- and 64-bit registers".into());
    }
    Ok(())
}

fn shift_bits(s: Shift) -> u32 {
    match s {
        Shift::Lsl => 0,
        Shift::Lsr => 1,
        Shift::Asr => 2,
    }
}

fn check_amount(rd: Reg, amount: u8) -> R<()> {
    let max = if rd.is64() { 63 } else { 31 };
    if amount > max {
        return Err(format!("shift amount {amount} exceeds {max}"));
    }
    Ok(())
}

fn mem_opc(size: MemSize) -> u32 {
    (size as u32) << 30
}

fn imm9(v: i64) -> R<u32> {
    if !(-256..256).contains(&v) {
        return Err(format!("offset {v} outside -256..255"));
    }
    Ok((v as u32) & 0x1FF)
}

fn load_store(load: bool, size: MemSize, rt: Reg, addr: &Addr) -> R<u32> {
    let rt_n = r_zr(rt)?;
    let base = mem_opc(size) | ((load as u32) << 22);
    let w = match *addr {
        Addr::Offset { rn, imm } => {
            let rn = r_sp(rn)? << 5;
            let scale = size.bytes() as i64;
            if imm >= 0 && imm % scale == 0 && imm / scale < 4096 {
                0x3900_0000 | base | ((imm / scale) as u32) << 10 | rn | rt_n
            } else {
                0x3800_0000 | base | imm9(imm)? << 12 | rn | rt_n
            }
        }
        Addr::Pre { rn, imm } | Addr::Post { rn, imm } => {
            if rn.num() == rt.num() && !rn.is_sp() && !rt.is_zr() {
                return Err("writeback base overlaps the transfer register".into());
            }
            let mode = if matches!(addr, Addr::Pre { .. }) { 0xC00 } else { 0x400 };
            0x3800_0000 | base | imm9(imm)? << 12 | mode | r_sp(rn)? << 5 | rt_n
        }
        Addr::RegOffset { rn, rm, scaled } => {
            0x3820_6800 | base | r_zr(rm)? << 16 | (scaled as u32) << 12 | r_sp(rn)? << 5 | rt_n
        }
    };
    Ok(w)
}

fn pair(load: bool, rt1: Reg, rt2: Reg, addr: &Addr) -> R<u32> {
    same_width(&[rt1, rt2])?;
    let scale: i64 = if rt1.is64() { 8 } else { 4 };
    let (rn, imm, mode) = match *addr {
        Addr::Post { rn, imm } => (rn, imm, 1),
        Addr::Offset { rn, imm } => (rn, imm, 2),
        Addr::Pre { rn, imm } => (rn, imm, 3),
        Addr::RegOffset { .. } => return Err("pairs take no register offset".into()),
    };
    if imm % scale != 0 || !(-64..64).contains(&(imm / scale)) {
        return Err(format!("pair offset {imm} not encodable"));
    }
    if load && rt1.num() == rt2.num() {
        return Err("pair load into the same register twice".into());
    }
    if mode != 2 && !rn.is_sp() && (rn.num() == rt1.num() || rn.num() == rt2.num()) {
        return Err("writeback base overlaps a transfer register".into());
    }
    let opc = if rt1.is64() { 0xA800_0000 } else { 0x2800_0000 };
    Ok(opc
        | mode << 23
        | (load as u32) << 22
        | (((imm / scale) as u32) & 0x7F) << 15
        | r_zr(rt2)? << 10
        | r_sp(rn)? << 5
        | r_zr(rt1)?)
}

fn encode_static(ins: &Instr) -> R<u32> {
    use Instr::*;
    Ok(match ins {
        Blr(r) => 0xD63F_0000 | r_zr(*r)? << 5,
        Br(r, _) => 0xD61F_0000 | r_zr(*r)? << 5,
        Ret(r) => 0xD65F_0000 | r_zr(*r)? << 5,
        Bti(k) => k.word(),
        AddSub { sub, flags, rd, rn, op } => {
            let top = sf(*rd) | (*sub as u32) << 30 | (*flags as u32) << 29;
            match *op {
                Operand::Imm { imm, lsl12 } => {
                    same_width(&[*rd, *rn])?;
                    let d = if *flags { r_zr(*rd)? } else { r_sp(*rd)? };
                    top | 0x1100_0000 | (lsl12 as u32) << 22 | (imm as u32) << 10 | r_sp(*rn)? << 5 | d
                }
                Operand::Reg { rm, shift, amount } if rd.is_sp() || rn.is_sp() => {
                    same_width(&[*rd, *rn, rm])?;
                    if shift != Shift::Lsl || amount > 4 {
                        return Err("with sp only lsl #0-4 is allowed".into());
                    }
                    let d = if *flags { r_zr(*rd)? } else { r_sp(*rd)? };
                    let option = if rd.is64() { 3 } else { 2 };
                    top | 0x0B20_0000 | r_zr(rm)? << 16 | option << 13 | (amount as u32) << 10 | r_sp(*rn)? << 5 | d
                }
                Operand::Reg { rm, shift, amount } => {
                    same_width(&[*rd, *rn, rm])?;
                    check_amount(*rd, amount)?;
                    top | 0x0B00_0000
                        | shift_bits(shift) << 22
                        | r_zr(rm)? << 16
                        | (amount as u32) << 10
                        | r_zr(*rn)? << 5
                        | r_zr(*rd)?
                }
            }
        }
        Logic { op, rd, rn, operand } => {
            let opc = match op {
                LogicOp::And => 0,
                LogicOp::Orr => 1,
                LogicOp::Eor => 2,
            } << 29;
            match *operand {
                LogicOperand::Imm(v) => {
                    same_width(&[*rd, *rn])?;
                    let (n, immr, imms) = encode_bitmask(v, rd.is64())
                        .ok_or_else(|| format!("{v:#x} is not a bitmask immediate"))?;
                    sf(*rd) | opc | 0x1200_0000 | n << 22 | immr << 16 | imms << 10 | r_zr(*rn)? << 5 | r_sp(*rd)?
                }
                LogicOperand::Reg { rm, shift, amount } => {
                    same_width(&[*rd, *rn, rm])?;
                    check_amount(*rd, amount)?;
                    sf(*rd)
                        | opc
                        | 0x0A00_0000
                        | shift_bits(shift) << 22
                        | r_zr(rm)? << 16
                        | (amount as u32) << 10
                        | r_zr(*rn)? << 5
                        | r_zr(*rd)?
                }
            }
        }
        Mov { rd, rn } => {
            same_width(&[*rd, *rn])?;
            if rd.is_sp() || rn.is_sp() {
                sf(*rd) | 0x1100_0000 | r_sp(*rn)? << 5 | r_sp(*rd)?
            } else {
                sf(*rd) | 0x2A00_03E0 | r_zr(*rn)? << 16 | r_zr(*rd)?
            }
        }
        MovWide { kind, rd, imm, shift } => {
            if shift % 16 != 0 || (*shift as u32) >= if rd.is64() { 64 } else { 32 } {
                return Err(format!("bad shift {shift}"));
            }
            let opc = match kind {
                WideOp::N => 0x1280_0000,
                WideOp::Z => 0x5280_0000,
                WideOp::K => 0x7280_0000,
            };
            sf(*rd) | opc | ((*shift as u32) / 16) << 21 | (*imm as u32) << 5 | r_zr(*rd)?
        }
        Mul { rd, rn, rm } => {
            same_width(&[*rd, *rn, *rm])?;
            sf(*rd) | 0x1B00_7C00 | r_zr(*rm)? << 16 | r_zr(*rn)? << 5 | r_zr(*rd)?
        }
        Udiv { rd, rn, rm } => {
            same_width(&[*rd, *rn, *rm])?;
            sf(*rd) | 0x1AC0_0800 | r_zr(*rm)? << 16 | r_zr(*rn)? << 5 | r_zr(*rd)?
        }
        ShiftImm { right, rd, rn, amount } => {
            same_width(&[*rd, *rn])?;
            check_amount(*rd, *amount)?;
            let bits: u32 = if rd.is64() { 64 } else { 32 };
            let a = *amount as u32;
            let (immr, imms) = if *right { (a, bits - 1) } else { ((bits - a) % bits, bits - 1 - a) };
            let n = rd.is64() as u32;
            sf(*rd) | 0x5300_0000 | n << 22 | immr << 16 | imms << 10 | r_zr(*rn)? << 5 | r_zr(*rd)?
        }
        Load { size, rt, addr } => load_store(true, *size, *rt, addr)?,
        Store { size, rt, addr } => load_store(false, *size, *rt, addr)?,
        LoadUnpriv { size, rt, rn, imm } | StoreUnpriv { size, rt, rn, imm } => {
            let load = matches!(ins, LoadUnpriv { .. });
            mem_opc(*size) | 0x3800_0800 | (load as u32) << 22 | imm9(*imm as i64)? << 12 | r_sp(*rn)? << 5 | r_zr(*rt)?
        }
        LoadPair { rt1, rt2, addr } => pair(true, *rt1, *rt2, addr)?,
        StorePair { rt1, rt2, addr } => pair(false, *rt1, *rt2, addr)?,
        Svc(v) => 0xD400_0001 | (*v as u32) << 5,
        Brk(v) => 0xD420_0000 | (*v as u32) << 5,
        Nop => 0xD503_201F,
        Eret => 0xD69F_03E0,
        Mrs { rt, reg } => {
            if reg.op0() < 2 {
                return Err("op0 must be 2 or 3".into());
            }
            0xD520_0000 | (reg.0 as u32) << 5 | r_zr(*rt)?
        }
        MsrReg { reg, rt } => {
            if reg.op0() < 2 {
                return Err("op0 must be 2 or 3".into());
            }
            0xD500_0000 | (reg.0 as u32) << 5 | r_zr(*rt)?
        }
        MsrImm { field, imm } => {
            if *imm > 15 {
                return Err("immediate exceeds 15".into());
            }
            0xD500_401F | (field.op1 as u32) << 16 | (*imm as u32) << 8 | (field.op2 as u32) << 5
        }
        Word(w) => *w,
        B(_) | BCond(..) | Cbz { .. } | Bl(_) | Adr { .. } => return Err("needs an address".into()),
    })
}

/// Encodes an instruction whose bits do not depend on its address.
pub fn encode(ins: &Instr) -> Result<u32, AsmError> {
    if ins.is_pc_relative() {
        return Err(AsmError::NeedsAddress { instr: ins.to_string() });
    }
    encode_static(ins).map_err(|message| AsmError::Unencodable { instr: ins.to_string(), message })
}

/// Encodes an instruction placed at `pc`, resolving labels with `resolve`.
pub fn encode_at(ins: &Instr, pc: u64, resolve: &dyn Fn(&str) -> Option<u64>) -> Result<u32, AsmError> {
    if !ins.is_pc_relative() {
        return encode(ins);
    }
    let target_of = |l: &str| resolve(l).ok_or_else(|| AsmError::UndefinedLabel(l.to_string()));
    let range = || AsmError::OutOfRange { instr: ins.to_string() };
    let delta = |l: &str, bits: u32| -> Result<u32, AsmError> {
        let d = target_of(l)?.wrapping_sub(pc) as i64;
        if d % 4 != 0 {
            return Err(range());
        }
        let q = d / 4;
        let lim = 1i64 << (bits - 1);
        if q < -lim || q >= lim {
            return Err(range());
        }
        Ok((q as u32) & ((1u32 << bits) - 1))
    };
    Ok(match ins {
        Instr::B(l) => 0x1400_0000 | delta(l, 26)?,
        Instr::Bl(l) => 0x9400_0000 | delta(l, 26)?,
        Instr::BCond(c, l) => 0x5400_0000 | delta(l, 19)? << 5 | c.bits(),
        Instr::Cbz { nz, rt, label } => {
            let rt_n = r_zr(*rt).map_err(|message| AsmError::Unencodable { instr: ins.to_string(), message })?;
            sf(*rt) | 0x3400_0000 | (*nz as u32) << 24 | delta(label, 19)? << 5 | rt_n
        }
        Instr::Adr { rd, label } => {
            let d = target_of(label)?.wrapping_sub(pc) as i64;
            if !(-(1 << 20)..(1 << 20)).contains(&d) {
                return Err(range());
            }
            let d = d as u32;
            0x1000_0000 | (d & 3) << 29 | ((d >> 2) & 0x7FFFF) << 5 | rd.num() as u32
        }
        _ => unreachable!(),
    })
}

/// Where one word of an image came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Location {
    pub func: usize,
    pub block: usize,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub base: u64,
    pub words: Vec<u32>,
    /// Block labels (function entries included) to addresses.
    pub symbols: BTreeMap<String, u64>,
    pub locations: Vec<Location>,
}

impl Image {
    pub fn bytes(&self) -> Vec<u8> {
        self.words.iter().flat_map(|w| w.to_le_bytes()).collect()
    }

    pub fn end(&self) -> u64 {
        self.base + 4 * self.words.len() as u64
    }

    pub fn location(&self, addr: u64) -> Option<Location> {
        if addr < self.base || !addr.is_multiple_of(4) {
            return None;
        }
        self.locations.get(((addr - self.base) / 4) as usize).copied()
    }

    pub fn address_of(&self, loc: Location) -> Option<u64> {
        self.locations.iter().position(|l| *l == loc).map(|i| self.base + 4 * i as u64)
    }
}

/// Lays the program out contiguously from `base` and encodes every word.
pub fn assemble(p: &Program, base: u64) -> Result<Image, AsmError> {
    let mut symbols = BTreeMap::new();
    let mut locations = Vec::new();
    let mut pc = base;
    for (fi, f) in p.functions.iter().enumerate() {
        for (bi, b) in f.blocks.iter().enumerate() {
            symbols.insert(b.label.clone(), pc);
            for ii in 0..b.instrs.len() {
                locations.push(Location { func: fi, block: bi, index: ii });
                pc += 4;
            }
        }
    }
    let resolve = |l: &str| symbols.get(l).copied();
    let mut words = Vec::with_capacity(locations.len());
    for (i, loc) in locations.iter().enumerate() {
        let ins = &p.functions[loc.func].blocks[loc.block].instrs[loc.index];
        words.push(encode_at(ins, base + 4 * i as u64, &resolve)?);
    }
    Ok(Image { base, words, symbols, locations })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bitmask_examples() {
        assert_eq!(encode_bitmask(0x7FFF_FFFF_FFFF_FFFF, true), Some((1, 0, 62)));
        assert_eq!(encode_bitmask(0xFF, true), Some((1, 0, 7)));
        assert_eq!(encode_bitmask(0x5555_5555_5555_5555, true), Some((0, 0, 0x3C)));
        assert_eq!(encode_bitmask(0, true), None);
        assert_eq!(encode_bitmask(u64::MAX, true), None);
        assert_eq!(encode_bitmask(0x1234, true), None);
    }
}
