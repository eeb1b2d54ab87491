//! The assembly subset consumed and produced by the rewriter, verifier and
//! simulator.
//!
//! ```text
//! // source: example
//! .fn main
//!     stp x29, x30, [sp, #-16]!
//!     mov x0, #3
//!     bl square
//!     ldp x29, x30, [sp], #16
//!     ret
//! .endfn
//!
//! .fn square address_taken
//!     mul x0, x0, x0
//!     ret
//! .endfn
//! ```
//!
//! A function's entry block is labelled with the function name. Further
//! blocks start at `label:` lines; labels are unique across the program.
//! `B`, `BR`, `RET` and `BRK` end a block, and anything after one needs a
//! new label. A block without a terminator falls through.
//!
//! `BR` carries its target set: `br x9, {case0, case1}` is a jump to one of
//! the listed blocks, `br x9, tail` an indirect tail call, and a bare
//! `br x9` is unconstrained. `B` to another function's entry is a direct
//! tail call.

mod encode;
mod parse;
mod print;

pub use encode::{assemble, encode, encode_at, encode_bitmask, AsmError, Image, Location};
pub use parse::{parse, parse_instr, ParseError};

use std::fmt;

use crate::decoder::{BtiKind, Cond, PStateField, SysRegId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Reg {
    X(u8),
    W(u8),
    Sp,
    Wsp,
    Xzr,
    Wzr,
}

impl Reg {
    pub const LR: Reg = Reg::X(30);
    pub const FP: Reg = Reg::X(29);
    /// Shadow-stack pointer reserved by the rewriter.
    pub const SSP: Reg = Reg::X(28);
    pub const IP0: Reg = Reg::X(16);
    pub const IP1: Reg = Reg::X(17);

    /// Register number; 31 for both `sp` and the zero register.
    pub fn num(self) -> u8 {
        match self {
            Reg::X(n) | Reg::W(n) => n,
            _ => 31,
        }
    }

    pub fn is64(self) -> bool {
        matches!(self, Reg::X(_) | Reg::Sp | Reg::Xzr)
    }

    pub fn is_sp(self) -> bool {
        matches!(self, Reg::Sp | Reg::Wsp)
    }

    pub fn is_zr(self) -> bool {
        matches!(self, Reg::Xzr | Reg::Wzr)
    }

    /// Same register viewed as 64 bits.
    pub fn x(self) -> Reg {
        match self {
            Reg::W(n) => Reg::X(n),
            Reg::Wsp => Reg::Sp,
            Reg::Wzr => Reg::Xzr,
            r => r,
        }
    }

    /// The zero register of this width.
    pub fn zr_like(self) -> Reg {
        if self.is64() {
            Reg::Xzr
        } else {
            Reg::Wzr
        }
    }

    /// Whether this names general register `n` (0-30) at either width.
    pub fn is_gpr(self, n: u8) -> bool {
        matches!(self, Reg::X(m) | Reg::W(m) if m == n)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MemSize {
    B,
    H,
    W,
    X,
}

impl MemSize {
    pub fn bytes(self) -> u64 {
        match self {
            MemSize::B => 1,
            MemSize::H => 2,
            MemSize::W => 4,
            MemSize::X => 8,
        }
    }

    fn log2(self) -> u32 {
        self as u32
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Addr {
    Offset { rn: Reg, imm: i64 },
    Pre { rn: Reg, imm: i64 },
    Post { rn: Reg, imm: i64 },
    /// `[rn, rm]`, or `[rn, rm, lsl #size]` when `scaled`.
    RegOffset { rn: Reg, rm: Reg, scaled: bool },
}

impl Addr {
    pub fn base(&self) -> Reg {
        match *self {
            Addr::Offset { rn, .. } | Addr::Pre { rn, .. } | Addr::Post { rn, .. } | Addr::RegOffset { rn, .. } => rn,
        }
    }

    /// Base register updated by the access, if any.
    pub fn writeback(&self) -> Option<Reg> {
        match *self {
            Addr::Pre { rn, .. } | Addr::Post { rn, .. } => Some(rn),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Shift {
    Lsl,
    Lsr,
    Asr,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Operand {
    /// 12-bit immediate, optionally shifted left by 12.
    Imm { imm: u16, lsl12: bool },
    Reg { rm: Reg, shift: Shift, amount: u8 },
}

impl Operand {
    pub fn imm(v: u16) -> Operand {
        Operand::Imm { imm: v, lsl12: false }
    }

    pub fn reg(rm: Reg) -> Operand {
        Operand::Reg { rm, shift: Shift::Lsl, amount: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LogicOp {
    And,
    Orr,
    Eor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LogicOperand {
    /// A bitmask immediate.
    Imm(u64),
    Reg { rm: Reg, shift: Shift, amount: u8 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum WideOp {
    Z,
    N,
    K,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum BrKind {
    /// Jump to one of the listed blocks of the containing function.
    Switch(Vec<String>),
    /// Indirect tail call.
    Tail,
    Unconstrained,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Instr {
    B(String),
    BCond(Cond, String),
    Cbz { nz: bool, rt: Reg, label: String },
    Bl(String),
    Blr(Reg),
    Br(Reg, BrKind),
    Ret(Reg),
    Bti(BtiKind),
    /// `add`/`sub`/`adds`/`subs`; `cmp` is `subs` into the zero register.
    AddSub { sub: bool, flags: bool, rd: Reg, rn: Reg, op: Operand },
    Logic { op: LogicOp, rd: Reg, rn: Reg, operand: LogicOperand },
    Mov { rd: Reg, rn: Reg },
    MovWide { kind: WideOp, rd: Reg, imm: u16, shift: u8 },
    Mul { rd: Reg, rn: Reg, rm: Reg },
    Udiv { rd: Reg, rn: Reg, rm: Reg },
    /// `lsl`/`lsr` by an immediate.
    ShiftImm { right: bool, rd: Reg, rn: Reg, amount: u8 },
    Load { size: MemSize, rt: Reg, addr: Addr },
    Store { size: MemSize, rt: Reg, addr: Addr },
    /// `ldtr*`: unprivileged load, unscaled immediate offset only.
    LoadUnpriv { size: MemSize, rt: Reg, rn: Reg, imm: i16 },
    StoreUnpriv { size: MemSize, rt: Reg, rn: Reg, imm: i16 },
    LoadPair { rt1: Reg, rt2: Reg, addr: Addr },
    StorePair { rt1: Reg, rt2: Reg, addr: Addr },
    Adr { rd: Reg, label: String },
    Svc(u16),
    Brk(u16),
    Nop,
    Eret,
    Mrs { rt: Reg, reg: SysRegId },
    MsrReg { reg: SysRegId, rt: Reg },
    MsrImm { field: PStateField, imm: u8 },
    /// Raw encoding.
    Word(u32),
}

impl Instr {
    pub fn is_terminator(&self) -> bool {
        matches!(self, Instr::B(_) | Instr::Br(..) | Instr::Ret(_) | Instr::Brk(_))
    }

    /// Whether the encoding depends on where the instruction is placed.
    pub fn is_pc_relative(&self) -> bool {
        matches!(self, Instr::B(_) | Instr::BCond(..) | Instr::Cbz { .. } | Instr::Bl(_) | Instr::Adr { .. })
    }

    /// Labels this instruction refers to.
    pub fn labels(&self) -> Vec<&str> {
        match self {
            Instr::B(l) | Instr::BCond(_, l) | Instr::Bl(l) => vec![l.as_str()],
            Instr::Cbz { label, .. } | Instr::Adr { label, .. } => vec![label.as_str()],
            Instr::Br(_, BrKind::Switch(ts)) => ts.iter().map(String::as_str).collect(),
            _ => Vec::new(),
        }
    }

    /// General registers written, as 64-bit names. Calls clobber x30.
    pub fn defs(&self) -> Vec<Reg> {
        use Instr::*;
        let mut out = match self {
            Bl(_) | Blr(_) => vec![Reg::LR],
            AddSub { rd, .. }
            | Logic { rd, .. }
            | Mov { rd, .. }
            | MovWide { rd, .. }
            | Mul { rd, .. }
            | Udiv { rd, .. }
            | ShiftImm { rd, .. }
            | Adr { rd, .. } => vec![*rd],
            Load { rt, .. } | LoadUnpriv { rt, .. } | Mrs { rt, .. } => vec![*rt],
            LoadPair { rt1, rt2, .. } => vec![*rt1, *rt2],
            _ => Vec::new(),
        };
        match self {
            Load { addr, .. } | Store { addr, .. } | LoadPair { addr, .. } | StorePair { addr, .. } => {
                out.extend(addr.writeback());
            }
            _ => {}
        }
        out.into_iter().filter(|r| !r.is_zr()).map(Reg::x).collect()
    }

    /// Whether this is a regular (non-LSU) store of x30.
    pub fn stores_lr(&self) -> bool {
        match self {
            Instr::Store { rt, .. } => rt.x() == Reg::LR,
            Instr::StorePair { rt1, rt2, .. } => rt1.x() == Reg::LR || rt2.x() == Reg::LR,
            _ => false,
        }
    }

    /// `and xN, xN, #0x7fffffffffffffff`
    pub fn mask(r: Reg) -> Instr {
        Instr::mask_into(r, r)
    }

    /// `and dst, src, #0x7fffffffffffffff`
    pub fn mask_into(dst: Reg, src: Reg) -> Instr {
        Instr::Logic { op: LogicOp::And, rd: dst, rn: src, operand: LogicOperand::Imm(crate::decoder::TOP_BIT_MASK) }
    }

    pub fn is_mask_of(&self, r: Reg) -> bool {
        *self == Instr::mask(r)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Block {
    pub label: String,
    pub instrs: Vec<Instr>,
}

impl Block {
    pub fn new(label: impl Into<String>) -> Self {
        Block { label: label.into(), instrs: Vec::new() }
    }

    pub fn terminator(&self) -> Option<&Instr> {
        self.instrs.last().filter(|i| i.is_terminator())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Function {
    pub name: String,
    pub blocks: Vec<Block>,
    pub address_taken: bool,
    /// Some regular store in the body saves x30.
    pub spills_lr: bool,
}

impl Function {
    pub fn new(name: impl Into<String>, blocks: Vec<Block>, address_taken: bool) -> Self {
        let mut f = Function { name: name.into(), blocks, address_taken, spills_lr: false };
        f.refresh();
        f
    }

    /// Recomputes derived attributes after editing the body.
    pub fn refresh(&mut self) {
        let spills = self.instrs().any(Instr::stores_lr);
        self.spills_lr = spills;
    }

    pub fn entry(&self) -> &Block {
        &self.blocks[0]
    }

    pub fn instrs(&self) -> impl Iterator<Item = &Instr> {
        self.blocks.iter().flat_map(|b| b.instrs.iter())
    }

    pub fn block_index(&self, label: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.label == label)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct Program {
    pub source: Option<String>,
    pub functions: Vec<Function>,
}

impl Program {
    pub fn function(&self, name: &str) -> Option<&Function> {
        self.functions.iter().find(|f| f.name == name)
    }

    /// The function owning block `label`.
    pub fn owner_of(&self, label: &str) -> Option<(usize, usize)> {
        self.functions
            .iter()
            .enumerate()
            .find_map(|(fi, f)| f.block_index(label).map(|bi| (fi, bi)))
    }

    pub fn is_entry(&self, label: &str) -> bool {
        self.function(label).is_some()
    }
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        print::write_program(f, self)
    }
}

impl fmt::Display for Instr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        print::write_instr(f, self)
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Reg::X(n) => write!(f, "x{n}"),
            Reg::W(n) => write!(f, "w{n}"),
            Reg::Sp => f.write_str("sp"),
            Reg::Wsp => f.write_str("wsp"),
            Reg::Xzr => f.write_str("xzr"),
            Reg::Wzr => f.write_str("wzr"),
        }
    }
}

/// Program text.
pub fn print(p: &Program) -> String {
    p.to_string()
}
