//! Security-relevant classification of 32-bit AArch64 instruction words.
//!
//! This is not a disassembler. Each word is sorted into exactly one
//! [`InstrClass`], and only the operands that the scanner, verifier and
//! simulator look at are extracted. Everything else is [`InstrClass::Other`].

mod allowlist;
mod sysreg;

pub use allowlist::{Allowlist, AllowlistError};
pub use sysreg::{CacheOpId, MsrTarget, PStateField, SysRegId};

use std::fmt;
use std::str::FromStr;

/// One fixed-width instruction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct InstrWord(pub u32);

impl From<u32> for InstrWord {
    fn from(w: u32) -> Self {
        InstrWord(w)
    }
}

/// Well-known encodings used across the crate.
pub mod words {
    pub const NOP: u32 = 0xD503_201F;
    pub const BTI: u32 = 0xD503_241F;
    pub const BTI_C: u32 = 0xD503_245F;
    pub const BTI_J: u32 = 0xD503_249F;
    pub const BTI_JC: u32 = 0xD503_24DF;
    pub const ERET: u32 = 0xD69F_03E0;
    pub const RET: u32 = 0xD65F_03C0;
}

/// Clears bit 63 of a control-transfer target.
pub const TOP_BIT_MASK: u64 = 0x7FFF_FFFF_FFFF_FFFF;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BtiKind {
    None,
    C,
    J,
    JC,
}

impl BtiKind {
    pub fn word(self) -> u32 {
        match self {
            BtiKind::None => words::BTI,
            BtiKind::C => words::BTI_C,
            BtiKind::J => words::BTI_J,
            BtiKind::JC => words::BTI_JC,
        }
    }

    /// Whether this landing pad accepts an indirect call (`BLR`, tail `BR`).
    pub fn accepts_call(self) -> bool {
        matches!(self, BtiKind::C | BtiKind::JC)
    }

    /// Whether this landing pad accepts a non-call indirect jump.
    pub fn accepts_jump(self) -> bool {
        matches!(self, BtiKind::J | BtiKind::JC)
    }
}

impl fmt::Display for BtiKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BtiKind::None => "none",
            BtiKind::C => "c",
            BtiKind::J => "j",
            BtiKind::JC => "jc",
        })
    }
}

/// Condition codes for `B.cond` and friends.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Cond {
    Eq,
    Ne,
    Hs,
    Lo,
    Mi,
    Pl,
    Vs,
    Vc,
    Hi,
    Ls,
    Ge,
    Lt,
    Gt,
    Le,
    Al,
    Nv,
}

const COND_NAMES: [&str; 16] = [
    "eq", "ne", "hs", "lo", "mi", "pl", "vs", "vc", "hi", "ls", "ge", "lt", "gt", "le", "al", "nv",
];

impl Cond {
    pub fn from_bits(bits: u32) -> Cond {
        use Cond::*;
        [Eq, Ne, Hs, Lo, Mi, Pl, Vs, Vc, Hi, Ls, Ge, Lt, Gt, Le, Al, Nv][(bits & 15) as usize]
    }

    pub fn bits(self) -> u32 {
        self as u32
    }

    /// Evaluates the condition against an `NZCV` nibble (N in bit 3).
    pub fn holds(self, nzcv: u8) -> bool {
        let n = nzcv & 8 != 0;
        let z = nzcv & 4 != 0;
        let c = nzcv & 2 != 0;
        let v = nzcv & 1 != 0;
        let base = match self.bits() >> 1 {
            0 => z,
            1 => c,
            2 => n,
            3 => v,
            4 => c && !z,
            5 => n == v,
            6 => n == v && !z,
            _ => true,
        };
        // Odd encodings negate, except AL/NV which are both "always".
        if self.bits() & 1 == 1 && self.bits() != 15 {
            !base
        } else {
            base
        }
    }
}

impl fmt::Display for Cond {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(COND_NAMES[self.bits() as usize])
    }
}

impl FromStr for Cond {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.to_ascii_lowercase();
        let lower = match lower.as_str() {
            "cs" => "hs",
            "cc" => "lo",
            other => other,
        };
        COND_NAMES
            .iter()
            .position(|n| *n == lower)
            .map(|i| Cond::from_bits(i as u32))
            .ok_or_else(|| format!("unknown condition `{s}`"))
    }
}

/// Decoded classification of one instruction word.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InstrClass {
    /// `LDTR*` unprivileged load; `size` in bytes.
    LsuLoad { rt: u8, rn: u8, imm: i16, size: u8 },
    /// `STTR*` unprivileged store.
    LsuStore { rt: u8, rn: u8, imm: i16, size: u8 },
    Mrs { reg: SysRegId, rt: u8 },
    Msr { target: MsrTarget, operand: u8 },
    CacheOp { op: CacheOpId, rt: u8 },
    Tlbi,
    Hvc { imm: u16 },
    Smc { imm: u16 },
    Svc { imm: u16 },
    At,
    Eret,
    PredRestrict,
    MteTagMultiple,
    Brb,
    SysOther,
    BtiLabel(BtiKind),
    Ret(u8),
    Br(u8),
    Blr(u8),
    Bl(i32),
    B(i32),
    BCond(Cond, i32),
    /// `AND Xn, Xn, #0x7fffffffffffffff`.
    AndMaskTopBit(u8),
    RegularLoad,
    RegularStore,
    Other,
}

impl InstrClass {
    pub fn is_lsu(&self) -> bool {
        matches!(self, InstrClass::LsuLoad { .. } | InstrClass::LsuStore { .. })
    }
}

impl fmt::Display for InstrClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use InstrClass::*;
        match *self {
            LsuLoad { rt, rn, imm, size } => {
                write!(f, "lsu-load rt={rt} rn={rn} imm={imm} size={size}")
            }
            LsuStore { rt, rn, imm, size } => {
                write!(f, "lsu-store rt={rt} rn={rn} imm={imm} size={size}")
            }
            Mrs { reg, rt } => write!(f, "mrs {reg} rt={rt}"),
            Msr { target: MsrTarget::Reg(r), operand } => write!(f, "msr {r} rt={operand}"),
            Msr { target: MsrTarget::PState(p), operand } => write!(f, "msr {p} imm={operand}"),
            CacheOp { op, rt } => write!(f, "cacheop {op} rt={rt}"),
            Tlbi => f.write_str("tlbi"),
            Hvc { imm } => write!(f, "hvc imm={imm}"),
            Smc { imm } => write!(f, "smc imm={imm}"),
            Svc { imm } => write!(f, "svc imm={imm}"),
            At => f.write_str("at"),
            Eret => f.write_str("eret"),
            PredRestrict => f.write_str("pred-restrict"),
            MteTagMultiple => f.write_str("mte-tag-multiple"),
            Brb => f.write_str("brb"),
            SysOther => f.write_str("sys-other"),
            BtiLabel(k) => write!(f, "bti {k}"),
            Ret(r) => write!(f, "ret x{r}"),
            Br(r) => write!(f, "br x{r}"),
            Blr(r) => write!(f, "blr x{r}"),
            Bl(off) => write!(f, "bl off={off}"),
            B(off) => write!(f, "b off={off}"),
            BCond(c, off) => write!(f, "b.cond {c} off={off}"),
            AndMaskTopBit(r) => write!(f, "and-mask x{r}"),
            RegularLoad => f.write_str("load"),
            RegularStore => f.write_str("store"),
            Other => f.write_str("other"),
        }
    }
}

fn bits(w: u32, lo: u32, len: u32) -> u32 {
    (w >> lo) & ((1 << len) - 1)
}

fn sign_extend(v: u32, len: u32) -> i32 {
    let shift = 32 - len;
    ((v << shift) as i32) >> shift
}

/// Classifies a word. Total and deterministic.
pub fn decode(word: InstrWord) -> InstrClass {
    let w = word.0;
    match bits(w, 25, 4) {
        0b1010 | 0b1011 => decode_branch_system(w),
        0b0100 | 0b0110 | 0b1100 | 0b1110 => decode_load_store(w),
        0b1000 | 0b1001 => decode_dp_imm(w),
        _ => InstrClass::Other,
    }
}

fn decode_dp_imm(w: u32) -> InstrClass {
    // AND (immediate), 64-bit, N=1 immr=0 imms=62: exactly bits [62:0] set.
    if w & 0xFFFF_FC00 == 0x9240_F800 {
        let rn = bits(w, 5, 5) as u8;
        let rd = bits(w, 0, 5) as u8;
        if rn == rd {
            return InstrClass::AndMaskTopBit(rd);
        }
    }
    InstrClass::Other
}

fn decode_branch_system(w: u32) -> InstrClass {
    if w & 0x7C00_0000 == 0x1400_0000 {
        let off = sign_extend(bits(w, 0, 26), 26) * 4;
        return if w >> 31 == 1 { InstrClass::Bl(off) } else { InstrClass::B(off) };
    }
    if w & 0xFF00_0010 == 0x5400_0000 {
        let off = sign_extend(bits(w, 5, 19), 19) * 4;
        return InstrClass::BCond(Cond::from_bits(bits(w, 0, 4)), off);
    }
    if w & 0xFF00_0000 == 0xD400_0000 {
        return decode_exception(w);
    }
    if w & 0xFFC0_0000 == 0xD500_0000 {
        return decode_system(w);
    }
    if w & 0xFE00_0000 == 0xD600_0000 {
        return decode_branch_reg(w);
    }
    InstrClass::Other
}

fn decode_exception(w: u32) -> InstrClass {
    let opc = bits(w, 21, 3);
    let op2 = bits(w, 2, 3);
    let ll = bits(w, 0, 2);
    let imm = bits(w, 5, 16) as u16;
    match (opc, op2, ll) {
        (0, 0, 1) => InstrClass::Svc { imm },
        (0, 0, 2) => InstrClass::Hvc { imm },
        (0, 0, 3) => InstrClass::Smc { imm },
        _ => InstrClass::Other,
    }
}

fn decode_branch_reg(w: u32) -> InstrClass {
    let opc = bits(w, 21, 4);
    let op2 = bits(w, 16, 5);
    let op3 = bits(w, 10, 6);
    let rn = bits(w, 5, 5) as u8;
    let op4 = bits(w, 0, 5);
    if op2 != 0x1F {
        return InstrClass::Other;
    }
    match (opc, op3, op4) {
        (0, 0, 0) => InstrClass::Br(rn),
        (1, 0, 0) => InstrClass::Blr(rn),
        (2, 0, 0) => InstrClass::Ret(rn),
        (4, 0, 0) if rn == 31 => InstrClass::Eret,
        // ERETAA / ERETAB
        (4, 2 | 3, 31) if rn == 31 => InstrClass::Eret,
        _ => InstrClass::Other,
    }
}

fn decode_system(w: u32) -> InstrClass {
    let l = bits(w, 21, 1);
    let op0 = bits(w, 19, 2) as u8;
    let op1 = bits(w, 16, 3) as u8;
    let crn = bits(w, 12, 4) as u8;
    let crm = bits(w, 8, 4) as u8;
    let op2 = bits(w, 5, 3) as u8;
    let rt = bits(w, 0, 5) as u8;

    match (op0, l) {
        (0, 0) => match crn {
            // MSR (immediate); op1=0/op2<=2 are CFINV, XAFLAG and AXFLAG.
            4 if rt == 31 => {
                if op1 == 0 && op2 <= 2 {
                    InstrClass::Other
                } else {
                    InstrClass::Msr {
                        target: MsrTarget::PState(PStateField { op1, op2 }),
                        operand: crm,
                    }
                }
            }
            2 if rt == 31 && crm == 4 && op2 & 1 == 0 => InstrClass::BtiLabel(match op2 >> 1 {
                0 => BtiKind::None,
                1 => BtiKind::C,
                2 => BtiKind::J,
                _ => BtiKind::JC,
            }),
            _ => InstrClass::Other,
        },
        (0, _) => InstrClass::Other,
        (1, 1) => InstrClass::SysOther,
        (1, _) => decode_sys(op1, crn, crm, op2, rt),
        (_, 1) => InstrClass::Mrs { reg: SysRegId::new(op0, op1, crn, crm, op2), rt },
        (_, _) => InstrClass::Msr {
            target: MsrTarget::Reg(SysRegId::new(op0, op1, crn, crm, op2)),
            operand: rt,
        },
    }
}

fn decode_sys(op1: u8, crn: u8, crm: u8, op2: u8, rt: u8) -> InstrClass {
    match crn {
        7 => match (op1, crm, op2) {
            (_, 8, _) | (_, 9, 0 | 1) => InstrClass::At,
            (3, 3, 4 | 5 | 7) => InstrClass::PredRestrict,
            (1, 2, 4 | 5) => InstrClass::Brb,
            _ => InstrClass::CacheOp { op: CacheOpId { op1, crm, op2 }, rt },
        },
        8 | 9 => InstrClass::Tlbi,
        _ => InstrClass::SysOther,
    }
}

fn decode_load_store(w: u32) -> InstrClass {
    // LDGM / STGM / STZGM
    if matches!(w & 0xFFFF_FC00, 0xD9E0_0000 | 0xD9A0_0000 | 0xD920_0000) {
        return InstrClass::MteTagMultiple;
    }
    // Remaining tag-memory instructions (STG, LDG, ...).
    if w & 0xFF20_0000 == 0xD920_0000 {
        return if bits(w, 22, 2) == 0b01 && bits(w, 10, 2) == 0 {
            InstrClass::RegularLoad
        } else {
            InstrClass::RegularStore
        };
    }
    // Load/store register (unprivileged).
    if w & 0x3F20_0C00 == 0x3800_0800 {
        let size = bits(w, 30, 2);
        let opc = bits(w, 22, 2);
        let rt = bits(w, 0, 5) as u8;
        let rn = bits(w, 5, 5) as u8;
        let imm = sign_extend(bits(w, 12, 9), 9) as i16;
        let bytes = 1u8 << size;
        return match (size, opc) {
            (_, 0) => InstrClass::LsuStore { rt, rn, imm, size: bytes },
            (_, 1) => InstrClass::LsuLoad { rt, rn, imm, size: bytes },
            (0 | 1, _) | (2, 2) => InstrClass::LsuLoad { rt, rn, imm, size: bytes },
            _ => InstrClass::Other,
        };
    }
    // Exclusive / ordered.
    if w & 0x3F00_0000 == 0x0800_0000 {
        return load_or_store(bits(w, 22, 1) == 1);
    }
    // Load register (literal).
    if w & 0x3B00_0000 == 0x1800_0000 {
        return InstrClass::RegularLoad;
    }
    // Pairs.
    if w & 0x3800_0000 == 0x2800_0000 {
        return load_or_store(bits(w, 22, 1) == 1);
    }
    // Single register, all addressing modes, plus atomics.
    if w & 0x3800_0000 == 0x3800_0000 {
        let vector = bits(w, 26, 1) == 1;
        let opc = bits(w, 22, 2);
        let atomic = bits(w, 24, 2) == 0 && bits(w, 21, 1) == 1 && bits(w, 10, 2) == 0;
        if atomic {
            return InstrClass::RegularStore;
        }
        let load = if vector { opc & 1 == 1 } else { opc != 0 };
        return load_or_store(load);
    }
    InstrClass::Other
}

fn load_or_store(load: bool) -> InstrClass {
    if load {
        InstrClass::RegularLoad
    } else {
        InstrClass::RegularStore
    }
}

/// True iff `class` belongs to a forbidden privileged category and is not
/// excused by `allow`. `SVC` stays legal: elevated tasks still make system
/// calls with it.
pub fn is_forbidden(class: &InstrClass, allow: &Allowlist) -> bool {
    use InstrClass::*;
    match class {
        Mrs { reg, .. } => !allow.permits_read(*reg),
        Msr { target: MsrTarget::Reg(reg), .. } => !allow.permits_write(*reg),
        Msr { target: MsrTarget::PState(field), .. } => !allow.permits_pstate(*field),
        CacheOp { op, .. } => !allow.permits_cacheop(*op),
        Tlbi | Hvc { .. } | Smc { .. } | At | Eret | PredRestrict | MteTagMultiple | Brb
        | SysOther => true,
        _ => false,
    }
}
