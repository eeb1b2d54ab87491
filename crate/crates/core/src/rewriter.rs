//! Instrumentation for elevated tasks: a compact shadow stack indexed by
//! x28, forward-edge CFI labels and checks, and top-bit masking of every
//! indirect branch target.
//!
//! Emitted sequences:
//!
//! ```text
//! push (entry, after any BTI):   sttr x30, [x28]
//!                                add x28, x28, #8
//! pop (before ret / tail call):  sub x28, x28, #8
//!                                ldtr x30, [x28]
//! check (before blr/br xN):      and x16, xN, #0x7fffffffffffffff
//!                                ldr w16, [x16]
//!                                mov w17, #<low half of BTI C or J>
//!                                movk w17, #0xd503, lsl #16
//!                                cmp w16, w17
//!                                b.ne <fn>.cfi_fail
//! mask (before blr/br/ret xN):   and xN, xN, #0x7fffffffffffffff
//! ```
//!
//! The check reads the target word through a masked copy, so a target in
//! the upper half faults in the gap rather than being read.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::asm::{Addr, Block, BrKind, Function, Instr, MemSize, Operand, Program, Reg, WideOp};
use crate::decoder::{BtiKind, Cond};

pub const DEFAULT_TRAP: &str = "__cfi_trap";
/// Immediate of the `brk` in the generated trap function.
pub const TRAP_BRK: u16 = 0xcf1;
pub const SLOT: u64 = 8;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RewriteOptions {
    pub enable_ss: bool,
    pub enable_cfi: bool,
    pub enable_mask: bool,
    pub trap_symbol: String,
}

impl Default for RewriteOptions {
    fn default() -> Self {
        RewriteOptions { enable_ss: true, enable_cfi: true, enable_mask: true, trap_symbol: DEFAULT_TRAP.into() }
    }
}

impl RewriteOptions {
    pub fn none() -> Self {
        RewriteOptions { enable_ss: false, enable_cfi: false, enable_mask: false, ..Self::default() }
    }
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum RewriteError {
    #[error("function `{0}` writes x28, which is reserved for the shadow stack")]
    X28Clobbered(String),
    #[error("function `{0}` uses x16/x17, which the CFI check needs as scratch")]
    ScratchRegister(String),
    #[error("function `{0}` has an indirect jump without a target set")]
    UnconstrainedIndirectJump(String),
    #[error("masking without CFI is refused for programs with indirect calls or jumps")]
    MaskWithoutCfi,
    #[error("program is already instrumented ({0})")]
    AlreadyInstrumented(String),
    #[error("function `{0}` branches back to its own entry block")]
    JumpToEntry(String),
    #[error("function `{func}` switches to `{label}` outside its body")]
    NonLocalSwitchTarget { func: String, label: String },
}

pub fn push_pair() -> [Instr; 2] {
    [
        Instr::StoreUnpriv { size: MemSize::X, rt: Reg::LR, rn: Reg::SSP, imm: 0 },
        Instr::AddSub { sub: false, flags: false, rd: Reg::SSP, rn: Reg::SSP, op: Operand::imm(SLOT as u16) },
    ]
}

pub fn pop_pair() -> [Instr; 2] {
    [
        Instr::AddSub { sub: true, flags: false, rd: Reg::SSP, rn: Reg::SSP, op: Operand::imm(SLOT as u16) },
        Instr::LoadUnpriv { size: MemSize::X, rt: Reg::LR, rn: Reg::SSP, imm: 0 },
    ]
}

pub const CHECK_LEN: usize = 6;

/// Label check on `target` against landing pad `kind`, branching to `fail`.
pub fn cfi_check(target: Reg, kind: BtiKind, fail: &str) -> [Instr; CHECK_LEN] {
    let word = kind.word();
    [
        Instr::mask_into(Reg::IP0, target),
        Instr::Load { size: MemSize::W, rt: Reg::W(16), addr: Addr::Offset { rn: Reg::IP0, imm: 0 } },
        Instr::MovWide { kind: WideOp::Z, rd: Reg::W(17), imm: word as u16, shift: 0 },
        Instr::MovWide { kind: WideOp::K, rd: Reg::W(17), imm: (word >> 16) as u16, shift: 16 },
        Instr::AddSub { sub: true, flags: true, rd: Reg::Wzr, rn: Reg::W(16), op: Operand::reg(Reg::W(17)) },
        Instr::BCond(Cond::Ne, fail.into()),
    ]
}

/// Landing pad an indirect branch of this kind must reach.
pub fn required_pad(ins: &Instr) -> Option<(Reg, BtiKind)> {
    match ins {
        Instr::Blr(r) | Instr::Br(r, BrKind::Tail) => Some((*r, BtiKind::C)),
        Instr::Br(r, BrKind::Switch(_)) => Some((*r, BtiKind::J)),
        _ => None,
    }
}

pub fn fail_label(func: &str) -> String {
    format!("{func}.cfi_fail")
}

/// Composes CFI, then the shadow stack, then masking.
pub fn rewrite(p: &Program, opts: &RewriteOptions) -> Result<Program, RewriteError> {
    check_input(p, opts)?;
    let mut out = p.clone();
    if opts.enable_cfi {
        apply_cfi(&mut out, &opts.trap_symbol);
    }
    if opts.enable_ss {
        let entries: BTreeSet<String> = out.functions.iter().map(|f| f.name.clone()).collect();
        for f in &mut out.functions {
            apply_shadow_stack(f, &entries);
        }
    }
    if opts.enable_mask {
        apply_bitmask(&mut out);
    }
    Ok(out)
}

fn check_input(p: &Program, opts: &RewriteOptions) -> Result<(), RewriteError> {
    if !(opts.enable_ss || opts.enable_cfi || opts.enable_mask) {
        return Ok(());
    }
    if p.function(&opts.trap_symbol).is_some() {
        return Err(RewriteError::AlreadyInstrumented(format!("`{}` already defined", opts.trap_symbol)));
    }
    let indirect = p.functions.iter().flat_map(Function::instrs).any(|i| matches!(i, Instr::Blr(_) | Instr::Br(..)));
    if opts.enable_mask && !opts.enable_cfi && indirect {
        return Err(RewriteError::MaskWithoutCfi);
    }
    let [push, _] = push_pair();
    for f in &p.functions {
        let entry = &f.entry().instrs;
        let skip = usize::from(matches!(entry.first(), Some(Instr::Bti(_))));
        if entry.get(skip) == Some(&push) {
            return Err(RewriteError::AlreadyInstrumented(format!("`{}` pushes to the shadow stack", f.name)));
        }
        for b in &f.blocks {
            for w in b.instrs.windows(2) {
                if let Instr::Ret(r) = w[1] {
                    if w[0].is_mask_of(r) {
                        return Err(RewriteError::AlreadyInstrumented(format!("`{}` masks its return", f.name)));
                    }
                }
            }
        }
        for ins in f.instrs() {
            let defs = ins.defs();
            if opts.enable_ss && defs.contains(&Reg::SSP) {
                return Err(RewriteError::X28Clobbered(f.name.clone()));
            }
            if opts.enable_cfi {
                let scratch = |r: &Reg| r.x() == Reg::IP0 || r.x() == Reg::IP1;
                let target = required_pad(ins).map(|(r, _)| r);
                if defs.iter().any(scratch) || target.as_ref().is_some_and(scratch) {
                    return Err(RewriteError::ScratchRegister(f.name.clone()));
                }
                if matches!(ins, Instr::Br(_, BrKind::Unconstrained)) {
                    return Err(RewriteError::UnconstrainedIndirectJump(f.name.clone()));
                }
            }
            if let Instr::Br(_, BrKind::Switch(ts)) = ins {
                if let Some(t) = ts.iter().find(|t| f.block_index(t).is_none()) {
                    return Err(RewriteError::NonLocalSwitchTarget { func: f.name.clone(), label: t.clone() });
                }
            }
            let back_to_entry = match ins {
                Instr::BCond(_, l) | Instr::Cbz { label: l, .. } => *l == f.name,
                Instr::Br(_, BrKind::Switch(ts)) => ts.contains(&f.name),
                _ => false,
            };
            if back_to_entry && (opts.enable_ss || opts.enable_cfi) {
                return Err(RewriteError::JumpToEntry(f.name.clone()));
            }
        }
    }
    Ok(())
}

/// `BTI C` at every entry, `BTI J` at switch targets, label checks before
/// indirect branches, and a trap function for failed checks.
pub fn apply_cfi(p: &mut Program, trap: &str) {
    for f in &mut p.functions {
        let mut switch_targets = BTreeSet::new();
        let mut needs_fail = false;
        let fail = fail_label(&f.name);
        for b in &mut f.blocks {
            let mut out = Vec::with_capacity(b.instrs.len());
            for ins in b.instrs.drain(..) {
                if let Instr::Br(_, BrKind::Switch(ts)) = &ins {
                    switch_targets.extend(ts.iter().cloned());
                }
                if let Some((r, kind)) = required_pad(&ins) {
                    out.extend(cfi_check(r, kind, &fail));
                    needs_fail = true;
                }
                out.push(ins);
            }
            b.instrs = out;
        }
        for b in f.blocks.iter_mut().skip(1) {
            if switch_targets.contains(&b.label) {
                b.instrs.insert(0, Instr::Bti(BtiKind::J));
            }
        }
        f.blocks[0].instrs.insert(0, Instr::Bti(BtiKind::C));
        if needs_fail {
            let mut fb = Block::new(fail);
            fb.instrs.push(Instr::B(trap.into()));
            f.blocks.push(fb);
        }
    }
    let trap_fn = Function::new(trap, vec![Block { label: trap.into(), instrs: vec![Instr::Bti(BtiKind::C), Instr::Brk(TRAP_BRK)] }], false);
    p.functions.push(trap_fn);
}

/// Push at entry, pop before each return and tail call, and removal of
/// regular-stack reloads of x30. Functions that never spill x30 are left
/// alone. `entries` names every function in the program.
pub fn apply_shadow_stack(f: &mut Function, entries: &BTreeSet<String>) {
    if !f.spills_lr {
        return;
    }
    let fail = fail_label(&f.name);
    for b in f.blocks.iter_mut().filter(|b| b.label != fail) {
        let mut out: Vec<Instr> = Vec::with_capacity(b.instrs.len() + 4);
        for ins in b.instrs.drain(..) {
            let leaves = match &ins {
                Instr::Ret(_) | Instr::Br(_, BrKind::Tail) => true,
                Instr::B(l) => entries.contains(l),
                _ => false,
            };
            if leaves {
                let at = check_start(&out, &fail);
                out.splice(at..at, pop_pair());
                out.push(ins);
            } else {
                out.extend(drop_lr_reload(ins));
            }
        }
        b.instrs = out;
    }
    let entry = &mut f.blocks[0].instrs;
    let at = usize::from(matches!(entry.first(), Some(Instr::Bti(_))));
    entry.splice(at..at, push_pair());
}

/// Index where a trailing CFI check starts, or the end of `out`.
fn check_start(out: &[Instr], fail: &str) -> usize {
    let n = out.len();
    if n >= CHECK_LEN {
        if let Instr::Logic { rn, .. } = &out[n - CHECK_LEN] {
            for kind in [BtiKind::C, BtiKind::J] {
                if out[n - CHECK_LEN..] == cfi_check(*rn, kind, fail) {
                    return n - CHECK_LEN;
                }
            }
        }
    }
    n
}

fn base_adjust(rn: Reg, imm: i64) -> Instr {
    Instr::AddSub { sub: imm < 0, flags: false, rd: rn, rn, op: Operand::imm(imm.unsigned_abs() as u16) }
}

/// Replacement for a regular load that writes x30: the other half of a
/// pair and any base writeback survive.
fn drop_lr_reload(ins: Instr) -> Vec<Instr> {
    let is_lr = |r: Reg| r.x() == Reg::LR;
    match ins {
        Instr::Load { rt, addr, .. } if is_lr(rt) => match addr {
            Addr::Pre { rn, imm } | Addr::Post { rn, imm } => vec![base_adjust(rn, imm)],
            _ => vec![],
        },
        Instr::LoadPair { rt1, rt2, addr } if is_lr(rt2) && !is_lr(rt1) => {
            vec![Instr::Load { size: pair_size(rt1), rt: rt1, addr }]
        }
        Instr::LoadPair { rt1, rt2, addr } if is_lr(rt1) => {
            let step = pair_size(rt1).bytes() as i64;
            if is_lr(rt2) {
                return drop_lr_reload(Instr::Load { size: MemSize::X, rt: rt1, addr });
            }
            let load = |rn, imm| Instr::Load { size: pair_size(rt2), rt: rt2, addr: Addr::Offset { rn, imm } };
            match addr {
                Addr::Offset { rn, imm } => vec![load(rn, imm + step)],
                Addr::Pre { rn, imm } => vec![base_adjust(rn, imm), load(rn, step)],
                Addr::Post { rn, imm } => vec![load(rn, step), base_adjust(rn, imm)],
                Addr::RegOffset { .. } => vec![Instr::LoadPair { rt1, rt2, addr }],
            }
        }
        other => vec![other],
    }
}

fn pair_size(r: Reg) -> MemSize {
    if r.is64() {
        MemSize::X
    } else {
        MemSize::W
    }
}

/// `and xT, xT, #mask` immediately before every `blr`, `br` and `ret`.
pub fn apply_bitmask(p: &mut Program) {
    for f in &mut p.functions {
        for b in &mut f.blocks {
            let mut out = Vec::with_capacity(b.instrs.len() + 1);
            for ins in b.instrs.drain(..) {
                match &ins {
                    Instr::Blr(r) | Instr::Br(r, _) | Instr::Ret(r) => out.push(Instr::mask(*r)),
                    _ => {}
                }
                out.push(ins);
            }
            b.instrs = out;
        }
    }
}
