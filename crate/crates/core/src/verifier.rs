//! Static compliance checks for instrumented programs.
//!
//! | rule | checks |
//! |------|--------|
//! | V1 | a function that spills x30 pushes it to the shadow stack at entry |
//! | V2 | x28 is balanced on every path, and returns use the shadow copy |
//! | V3 | the only `ldtr`/`sttr` are the push and pop pairs |
//! | V4 | label check, then mask, before `blr`/`br`; mask before `ret` |
//! | V5 | `bti c` at entries only; switch targets are local `bti j` blocks |
//! | V6 | no forbidden privileged instruction |
//!
//! Under [`VerifyPolicy::SsOnly`] (binaries built without CFI) only V1, V2,
//! V3 and V6 apply.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use crate::asm::{encode, BrKind, Function, Instr, Program, Reg};
use crate::decoder::{decode, is_forbidden, Allowlist, BtiKind, InstrClass, InstrWord};
use crate::par::{self, Exec};
use crate::rewriter::{cfi_check, pop_pair, push_pair, required_pad, CHECK_LEN};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum VerifyPolicy {
    #[default]
    Full,
    SsOnly,
}

impl FromStr for VerifyPolicy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "full" => Ok(VerifyPolicy::Full),
            "ss-only" => Ok(VerifyPolicy::SsOnly),
            _ => Err(format!("unknown policy `{s}` (expected full or ss-only)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Rule {
    V1,
    V2,
    V3,
    V4,
    V5,
    V6,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Violation {
    pub rule: Rule,
    pub function: String,
    pub block: String,
    pub index: usize,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}:{}:{} {}", self.rule, self.function, self.block, self.index, self.message)
    }
}

pub fn verify(p: &Program, policy: VerifyPolicy) -> Vec<Violation> {
    verify_with(Exec::default(), p, policy, &Allowlist::default())
}

/// Checks functions independently; violations come back in program order.
pub fn verify_with(exec: Exec, p: &Program, policy: VerifyPolicy, allow: &Allowlist) -> Vec<Violation> {
    let noreturn = noreturn_functions(p);
    let ctx = Ctx { p, policy, allow, noreturn: &noreturn };
    par::map(exec, &p.functions, |f| ctx.function(f)).into_iter().flatten().collect()
}

/// Functions with no way to return or tail-call out: every path ends in
/// `brk` (the CFI trap).
fn noreturn_functions(p: &Program) -> BTreeSet<&str> {
    p.functions
        .iter()
        .filter(|f| {
            !f.instrs().any(|i| match i {
                Instr::Ret(_) | Instr::Br(..) => true,
                Instr::B(l) => p.is_entry(l),
                _ => false,
            })
        })
        .map(|f| f.name.as_str())
        .collect()
}

struct Ctx<'a> {
    p: &'a Program,
    policy: VerifyPolicy,
    allow: &'a Allowlist,
    noreturn: &'a BTreeSet<&'a str>,
}

struct Sink<'a> {
    f: &'a Function,
    out: Vec<Violation>,
}

impl Sink<'_> {
    fn add(&mut self, rule: Rule, block: usize, index: usize, message: impl Into<String>) {
        self.out.push(Violation {
            rule,
            function: self.f.name.clone(),
            block: self.f.blocks[block].label.clone(),
            index,
            message: message.into(),
        });
    }
}

/// Offset of the push pair in the entry block, after an optional BTI.
fn push_offset(f: &Function) -> usize {
    usize::from(matches!(f.entry().instrs.first(), Some(Instr::Bti(_))))
}

fn has_push(f: &Function) -> bool {
    let at = push_offset(f);
    f.entry().instrs.get(at..at + 2) == Some(&push_pair()[..])
}

impl Ctx<'_> {
    fn function(&self, f: &Function) -> Vec<Violation> {
        let mut s = Sink { f, out: Vec::new() };
        self.v1(f, &mut s);
        self.v2(f, &mut s);
        self.v3(f, &mut s);
        if self.policy == VerifyPolicy::Full {
            self.v4(f, &mut s);
            self.v5(f, &mut s);
        }
        self.v6(f, &mut s);
        let mut out = s.out;
        out.sort_by(|a, b| {
            let key = |v: &Violation| (f.block_index(&v.block), v.index, v.rule);
            key(a).cmp(&key(b))
        });
        out.dedup();
        out
    }

    fn v1(&self, f: &Function, s: &mut Sink) {
        if f.instrs().any(Instr::stores_lr) && !has_push(f) {
            s.add(Rule::V1, 0, push_offset(f), "x30 is spilled but not pushed to the shadow stack at entry");
        }
    }

    fn v2(&self, f: &Function, s: &mut Sink) {
        let push = push_pair();
        let pop = pop_pair();
        // (block, x28 offset, x30 holds the authentic return address)
        let mut seen: HashSet<(usize, u8, bool)> = HashSet::new();
        let mut work = vec![(0usize, 0u8, true)];
        while let Some(state) = work.pop() {
            if !seen.insert(state) {
                continue;
            }
            let (bi, mut delta, mut lr_ok) = state;
            let instrs = &f.blocks[bi].instrs;
            let mut i = 0;
            let mut ended = false;
            while i < instrs.len() {
                let ins = &instrs[i];
                if instrs.get(i..i + 2) == Some(&push[..]) {
                    if delta != 0 {
                        s.add(Rule::V2, bi, i, "second shadow-stack push on one path");
                    }
                    delta = 1;
                    i += 2;
                    continue;
                }
                if instrs.get(i..i + 2) == Some(&pop[..]) {
                    if delta != 1 {
                        s.add(Rule::V2, bi, i, "shadow-stack pop without a matching push");
                    }
                    delta = 0;
                    lr_ok = true;
                    i += 2;
                    continue;
                }
                let defs = ins.defs();
                if defs.contains(&Reg::SSP) {
                    s.add(Rule::V2, bi, i, "x28 written outside the push/pop pairs");
                }
                if defs.contains(&Reg::LR) && !ins.is_mask_of(Reg::LR) {
                    lr_ok = false;
                }
                let leave = |what: &str, s: &mut Sink| {
                    if delta != 0 {
                        s.add(Rule::V2, bi, i, format!("{what} with x28 unbalanced"));
                    }
                    if !lr_ok {
                        s.add(Rule::V2, bi, i, format!("{what} through an x30 not restored from the shadow stack"));
                    }
                };
                match ins {
                    Instr::Ret(_) | Instr::Br(_, BrKind::Tail) => {
                        leave(if matches!(ins, Instr::Ret(_)) { "return" } else { "tail call" }, s);
                        ended = true;
                    }
                    Instr::B(l) if self.noreturn.contains(l.as_str()) => ended = true,
                    Instr::B(l) if self.p.is_entry(l) => {
                        leave("tail call", s);
                        ended = true;
                    }
                    Instr::B(l) => {
                        if let Some(t) = f.block_index(l) {
                            work.push((t, delta, lr_ok));
                        }
                        ended = true;
                    }
                    Instr::BCond(_, l) | Instr::Cbz { label: l, .. } => {
                        if let Some(t) = f.block_index(l) {
                            work.push((t, delta, lr_ok));
                        }
                    }
                    Instr::Br(_, BrKind::Switch(ts)) => {
                        work.extend(ts.iter().filter_map(|t| f.block_index(t)).map(|t| (t, delta, lr_ok)));
                        ended = true;
                    }
                    Instr::Br(_, BrKind::Unconstrained) | Instr::Brk(_) => ended = true,
                    _ => {}
                }
                if ended {
                    break;
                }
                i += 1;
            }
            if !ended {
                if bi + 1 < f.blocks.len() {
                    work.push((bi + 1, delta, lr_ok));
                } else {
                    s.add(Rule::V2, bi, instrs.len(), "control falls off the end of the function");
                }
            }
        }
    }

    fn v3(&self, f: &Function, s: &mut Sink) {
        let push = push_pair();
        let pop = pop_pair();
        let push_at = has_push(f).then(|| push_offset(f));
        for (bi, b) in f.blocks.iter().enumerate() {
            for (i, ins) in b.instrs.iter().enumerate() {
                let lsu = match ins {
                    Instr::LoadUnpriv { .. } | Instr::StoreUnpriv { .. } => true,
                    Instr::Word(w) => decode(InstrWord(*w)).is_lsu(),
                    _ => false,
                };
                if !lsu {
                    continue;
                }
                let vetted = if *ins == push[0] {
                    bi == 0 && push_at == Some(i)
                } else if *ins == pop[1] {
                    i > 0 && b.instrs[i - 1] == pop[0]
                } else {
                    false
                };
                if !vetted {
                    s.add(Rule::V3, bi, i, format!("unvetted unprivileged access `{ins}`"));
                }
            }
        }
    }

    fn v4(&self, f: &Function, s: &mut Sink) {
        let fail_ok = |label: &str| {
            f.block_index(label).is_some_and(|t| match f.blocks[t].instrs.first() {
                Some(Instr::B(l)) => self.noreturn.contains(l.as_str()),
                Some(Instr::Brk(_)) => true,
                _ => false,
            })
        };
        for (bi, b) in f.blocks.iter().enumerate() {
            for (i, ins) in b.instrs.iter().enumerate() {
                if let Instr::Ret(r) = ins {
                    if i == 0 || !b.instrs[i - 1].is_mask_of(*r) {
                        s.add(Rule::V4, bi, i, format!("`{ins}` is not preceded by a mask of {r}"));
                    }
                    continue;
                }
                let Some((r, kind)) = required_pad(ins) else { continue };
                if i == 0 || !b.instrs[i - 1].is_mask_of(r) {
                    s.add(Rule::V4, bi, i, format!("`{ins}` is not immediately preceded by a mask of {r}"));
                    continue;
                }
                let checked = i > CHECK_LEN
                    && match &b.instrs[i - 1 - CHECK_LEN + 5] {
                        Instr::BCond(_, fail) => {
                            b.instrs[i - 1 - CHECK_LEN..i - 1] == cfi_check(r, kind, fail) && fail_ok(fail)
                        }
                        _ => false,
                    };
                if !checked {
                    s.add(Rule::V4, bi, i, format!("`{ins}` lacks a `bti {kind}` label check before its mask"));
                }
            }
        }
    }

    fn v5(&self, f: &Function, s: &mut Sink) {
        if f.entry().instrs.first() != Some(&Instr::Bti(BtiKind::C)) {
            s.add(Rule::V5, 0, 0, "function does not start with `bti c`");
        }
        let mut switch_targets = BTreeSet::new();
        for (bi, b) in f.blocks.iter().enumerate() {
            for (i, ins) in b.instrs.iter().enumerate() {
                match ins {
                    Instr::Br(_, BrKind::Unconstrained) => {
                        s.add(Rule::V5, bi, i, format!("`{ins}` has no declared target set"));
                    }
                    Instr::Br(_, BrKind::Switch(ts)) => {
                        for t in ts {
                            match f.block_index(t) {
                                None => s.add(Rule::V5, bi, i, format!("switch target `{t}` is outside the function")),
                                Some(ti) if f.blocks[ti].instrs.first() != Some(&Instr::Bti(BtiKind::J)) => {
                                    s.add(Rule::V5, bi, i, format!("switch target `{t}` does not start with `bti j`"))
                                }
                                Some(0) => s.add(Rule::V5, bi, i, "switch to the entry block"),
                                Some(ti) => {
                                    switch_targets.insert(ti);
                                }
                            }
                        }
                    }
                    _ => {}
                }
                let pad = match ins {
                    Instr::Bti(k) => Some(*k),
                    Instr::Word(w) => match decode(InstrWord(*w)) {
                        InstrClass::BtiLabel(k) => Some(k),
                        _ => None,
                    },
                    _ => None,
                };
                match pad {
                    Some(BtiKind::C) if bi == 0 && i == 0 => {}
                    Some(BtiKind::J) if i == 0 && bi > 0 => {}
                    Some(k) => s.add(Rule::V5, bi, i, format!("stray landing pad `bti {k}`")),
                    None => {}
                }
            }
        }
        for (bi, b) in f.blocks.iter().enumerate().skip(1) {
            if b.instrs.first() == Some(&Instr::Bti(BtiKind::J)) && !switch_targets.contains(&bi) {
                s.add(Rule::V5, bi, 0, "`bti j` on a block that is not a switch target");
            }
        }
    }

    fn v6(&self, f: &Function, s: &mut Sink) {
        for (bi, b) in f.blocks.iter().enumerate() {
            for (i, ins) in b.instrs.iter().enumerate() {
                if ins.is_pc_relative() {
                    continue;
                }
                match encode(ins) {
                    Ok(w) => {
                        let class = decode(InstrWord(w));
                        if is_forbidden(&class, self.allow) {
                            s.add(Rule::V6, bi, i, format!("forbidden privileged instruction `{ins}` ({class})"));
                        }
                    }
                    Err(e) => s.add(Rule::V6, bi, i, format!("cannot encode `{ins}`: {e}")),
                }
            }
        }
    }
}
