#![allow(dead_code)]

pub mod attacks;
pub mod layouts;
pub mod oracle;
pub mod pages;

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use privinv::asm::{parse, parse_instr, Instr, Program, Reg};
use privinv::decoder::BtiKind;
use privinv::policy::{configure_elevated, LayoutParams, MemoryLayout, TaskKind};
use privinv::rewriter::{pop_pair, push_pair, required_pad, CHECK_LEN};
use privinv::sim::SimConfig;
use privinv::verifier::Rule;

pub fn corpus_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("corpus")
}

/// Every committed benign program, by file stem, in name order.
pub fn corpus() -> Vec<(String, Program)> {
    let mut files: Vec<_> = std::fs::read_dir(corpus_dir())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "s"))
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| {
            let text = std::fs::read_to_string(&p).unwrap();
            let name = p.file_stem().unwrap().to_string_lossy().into_owned();
            let prog = parse(&text).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            (name, prog)
        })
        .collect()
}

pub fn elevated() -> (MemoryLayout, SimConfig) {
    let (layout, state) = configure_elevated(&LayoutParams::default()).unwrap();
    (layout, SimConfig::new(TaskKind::Elevated, state))
}

// ---------------------------------------------------------------------------
// Random well-formed programs.
//
// Functions only call functions with a higher index, so recursion is
// impossible. Loops have constant trip counts in x10 and contain no calls.
// Arithmetic stays in x0-x7; x9 holds the data base; x11-x14 carry branch
// targets. Nothing relies on a register surviving a call except x0.

const DATA: u64 = 0x80_0000;

struct Gen<'a> {
    rng: &'a mut StdRng,
    fi: usize,
    nfuncs: usize,
    label: usize,
    out: String,
    tails: Vec<String>,
    epilogue: &'static [&'static str],
}

const FRAMES: [(&[&str], &[&str]); 4] = [
    (&["stp x29, x30, [sp, #-16]!"], &["ldp x29, x30, [sp], #16"]),
    (&["str x30, [sp, #-16]!"], &["ldr x30, [sp], #16"]),
    (&["stp x30, x19, [sp, #-16]!"], &["ldp x30, x19, [sp], #16"]),
    (&["sub sp, sp, #32", "stp x29, x30, [sp, #16]"], &["ldp x29, x30, [sp, #16]", "add sp, sp, #32"]),
];

const MASKS: [u64; 5] = [0xff, 0xffff, 0xf0f0_f0f0_f0f0_f0f0, 0x7fff_ffff_ffff_ffff, 0x3ff];
const CONDS: [&str; 8] = ["eq", "ne", "lo", "hs", "lt", "ge", "hi", "ls"];

impl Gen<'_> {
    fn fresh(&mut self, what: &str) -> String {
        self.label += 1;
        format!("f{}_{}{}", self.fi, what, self.label)
    }

    fn line(&mut self, s: &str) {
        let _ = writeln!(self.out, "    {s}");
    }

    fn reg(&mut self) -> String {
        format!("x{}", self.rng.random_range(0..8))
    }

    fn arith(&mut self) {
        let (d, a, b) = (self.reg(), self.reg(), self.reg());
        let imm = self.rng.random_range(0..4096);
        let s = match self.rng.random_range(0..12) {
            0 => format!("add {d}, {a}, #{imm}"),
            1 => format!("sub {d}, {a}, #{imm}"),
            2 => format!("add {d}, {a}, {b}"),
            3 => format!("sub {d}, {a}, {b}, lsl #{}", self.rng.random_range(0..8)),
            4 => format!("mul {d}, {a}, {b}"),
            5 => format!("udiv {d}, {a}, {b}"),
            6 => format!("eor {d}, {a}, {b}"),
            7 => format!("orr {d}, {a}, {b}, lsr #{}", self.rng.random_range(0..8)),
            8 => format!("and {d}, {a}, #{:#x}", MASKS[self.rng.random_range(0..MASKS.len())]),
            9 => format!("lsl {d}, {a}, #{}", self.rng.random_range(0..64)),
            10 => format!("lsr {d}, {a}, #{}", self.rng.random_range(0..64)),
            _ => format!("movk {d}, #{:#x}, lsl #{}", self.rng.random_range(0..0x10000), 16 * self.rng.random_range(0..4)),
        };
        self.line(&s);
    }

    fn memory(&mut self) {
        let r = self.reg();
        let off = 8 * self.rng.random_range(0..64);
        self.line(&format!("mov x9, #{DATA:#x}"));
        if self.rng.random_bool(0.5) {
            self.line(&format!("str {r}, [x9, #{off}]"));
        } else {
            self.line(&format!("ldr {r}, [x9, #{off}]"));
        }
    }

    fn callee(&mut self) -> Option<usize> {
        (self.fi + 1 < self.nfuncs).then(|| self.rng.random_range(self.fi + 1..self.nfuncs))
    }

    fn call(&mut self, j: usize) {
        if self.rng.random_bool(0.5) {
            self.line(&format!("bl f{j}"));
        } else {
            self.line(&format!("adr x11, f{j}"));
            self.line("blr x11");
        }
        self.line("add x1, x0, #1");
    }

    fn straight(&mut self, n: usize) {
        for _ in 0..n {
            if self.rng.random_bool(0.75) {
                self.arith();
            } else {
                self.memory();
            }
        }
    }

    fn stmt(&mut self, depth: usize, calls: bool) {
        let choice = self.rng.random_range(0..10);
        match choice {
            0..=2 => {
                let n = self.rng.random_range(1..4);
                self.straight(n);
            }
            3 if calls => {
                if let Some(j) = self.callee() {
                    self.call(j);
                }
            }
            4 if depth < 2 => {
                let skip = self.fresh("skip");
                let r = self.reg();
                let cond = CONDS[self.rng.random_range(0..CONDS.len())];
                let imm = self.rng.random_range(0..64);
                self.line(&format!("cmp {r}, #{imm}"));
                self.line(&format!("b.{cond} {skip}"));
                for _ in 0..self.rng.random_range(1..3) {
                    self.stmt(depth + 1, calls);
                }
                let _ = writeln!(self.out, "{skip}:");
            }
            5 if depth < 2 => {
                let head = self.fresh("loop");
                let trips = self.rng.random_range(1..6);
                self.line(&format!("mov x10, #{trips}"));
                let _ = writeln!(self.out, "{head}:");
                let n = self.rng.random_range(1..4);
                self.straight(n);
                self.line("subs x10, x10, #1");
                self.line(&format!("b.ne {head}"));
                let after = self.fresh("after");
                let _ = writeln!(self.out, "{after}:");
            }
            6 if depth < 2 => {
                let (a, b, pick_b, disp, join) =
                    (self.fresh("case"), self.fresh("case"), self.fresh("pick"), self.fresh("disp"), self.fresh("join"));
                let r = self.reg();
                self.line(&format!("cbz {r}, {pick_b}"));
                self.line(&format!("adr x13, {a}"));
                self.line(&format!("b {disp}"));
                let _ = writeln!(self.out, "{pick_b}:");
                self.line(&format!("adr x13, {b}"));
                let _ = writeln!(self.out, "{disp}:");
                self.line(&format!("br x13, {{{a}, {b}}}"));
                for case in [&a, &b] {
                    let _ = writeln!(self.out, "{case}:");
                    self.stmt(depth + 1, calls);
                    self.line(&format!("b {join}"));
                }
                let _ = writeln!(self.out, "{join}:");
            }
            7 if depth < 2 => {
                let early = self.fresh("ret");
                let r = self.reg();
                self.line(&format!("cbz {r}, {early}"));
                let mut tail = format!("{early}:\n");
                for s in self.epilogue {
                    let _ = writeln!(tail, "    {s}");
                }
                tail.push_str("    ret\n");
                self.tails.push(tail);
            }
            _ => self.arith(),
        }
    }
}

/// Text of a random well-formed program; `main` is the entry.
pub fn random_program(seed: u64) -> String {
    let mut rng = StdRng::seed_from_u64(seed);
    let nfuncs = rng.random_range(1..6);
    let mut text = format!("// source: random program {seed}\n");
    let mut taken = vec![false; nfuncs];
    let mut bodies = Vec::new();
    for fi in 0..nfuncs {
        let calls = fi + 1 < nfuncs && rng.random_bool(0.7);
        let spill = calls || rng.random_bool(0.2);
        let (pro, epi): (&[&str], &[&str]) = if spill { FRAMES[rng.random_range(0..FRAMES.len())] } else { (&[], &[]) };
        let mut g = Gen { rng: &mut rng, fi, nfuncs, label: 0, out: String::new(), tails: Vec::new(), epilogue: epi };
        for s in pro {
            g.line(s);
        }
        let v = g.rng.random_range(0..100);
        g.line(&format!("mov x0, #{v}"));
        for i in 1..8 {
            let v = g.rng.random_range(0..1000);
            g.line(&format!("mov x{i}, #{v}"));
        }
        for _ in 0..g.rng.random_range(1..7) {
            g.stmt(0, calls);
        }
        for s in epi {
            g.line(s);
        }
        let tail_to = if calls && g.rng.random_bool(0.3) { g.callee() } else { None };
        match tail_to {
            Some(j) if g.rng.random_bool(0.5) => g.line(&format!("b f{j}")),
            Some(j) => {
                g.line(&format!("adr x14, f{j}"));
                g.line("br x14, tail");
            }
            None => g.line("ret"),
        }
        for t in std::mem::take(&mut g.tails) {
            g.out.push_str(&t);
        }
        for (j, t) in taken.iter_mut().enumerate().skip(fi + 1) {
            if g.out.contains(&format!("adr x11, f{j}\n")) || g.out.contains(&format!("adr x14, f{j}\n")) {
                *t = true;
            }
        }
        bodies.push(g.out);
    }
    for (fi, body) in bodies.iter().enumerate() {
        let name = if fi == 0 { "main".to_string() } else { format!("f{fi}") };
        let body = body.replace("f0_", "main_");
        let attr = if taken[fi] { " address_taken" } else { "" };
        let _ = write!(text, "\n.fn {name}{attr}\n{body}.endfn\n");
    }
    text
}

// ---------------------------------------------------------------------------
// Mutations of rewritten programs, each aimed at one verifier rule.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mutation {
    DeleteSttr,
    DeleteLdtr,
    ReorderCheckMask,
    StrayX28Write,
    StrayLsu,
    AddEret,
    DeleteBtiC,
    DeleteRetMask,
}

impl Mutation {
    pub const ALL: [Mutation; 8] = [
        Mutation::DeleteSttr,
        Mutation::DeleteLdtr,
        Mutation::ReorderCheckMask,
        Mutation::StrayX28Write,
        Mutation::StrayLsu,
        Mutation::AddEret,
        Mutation::DeleteBtiC,
        Mutation::DeleteRetMask,
    ];

    pub fn rule(self) -> Rule {
        match self {
            Mutation::DeleteSttr => Rule::V1,
            Mutation::DeleteLdtr | Mutation::StrayX28Write => Rule::V2,
            Mutation::StrayLsu => Rule::V3,
            Mutation::ReorderCheckMask | Mutation::DeleteRetMask => Rule::V4,
            Mutation::DeleteBtiC => Rule::V5,
            Mutation::AddEret => Rule::V6,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mutation::DeleteSttr => "delete sttr",
            Mutation::DeleteLdtr => "delete ldtr",
            Mutation::ReorderCheckMask => "reorder check/mask",
            Mutation::StrayX28Write => "stray x28 write",
            Mutation::StrayLsu => "stray lsu",
            Mutation::AddEret => "add eret",
            Mutation::DeleteBtiC => "delete bti c",
            Mutation::DeleteRetMask => "delete ret mask",
        }
    }
}

/// Positions (function, block, index) of instructions matching `pred`.
fn find(p: &Program, pred: impl Fn(&[Instr], usize) -> bool) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for (fi, f) in p.functions.iter().enumerate() {
        for (bi, b) in f.blocks.iter().enumerate() {
            for i in 0..b.instrs.len() {
                if pred(&b.instrs, i) {
                    out.push((fi, bi, i));
                }
            }
        }
    }
    out
}

/// Applies `m` at the `nth` applicable site (modulo the site count).
/// Returns `None` when the program has no such site.
pub fn mutate(p: &Program, m: Mutation, nth: usize) -> Option<Program> {
    let sites = match m {
        Mutation::DeleteSttr => find(p, |s, i| s[i] == push_pair()[0]),
        Mutation::DeleteLdtr => find(p, |s, i| s[i] == pop_pair()[1]),
        Mutation::ReorderCheckMask => {
            find(p, |s, i| i > CHECK_LEN && required_pad(&s[i]).is_some_and(|(r, _)| s[i - 1].is_mask_of(r)))
        }
        Mutation::StrayX28Write | Mutation::StrayLsu | Mutation::AddEret => {
            find(p, |s, i| i == s.len() - 1 && matches!(s[i], Instr::Ret(_)))
        }
        Mutation::DeleteBtiC => find(p, |s, i| i == 0 && s[0] == Instr::Bti(BtiKind::C)),
        Mutation::DeleteRetMask => find(p, |s, i| matches!(s[i], Instr::Ret(r) if i > 0 && s[i - 1].is_mask_of(r))),
    };
    if sites.is_empty() {
        return None;
    }
    let (fi, bi, i) = sites[nth % sites.len()];
    let mut out = p.clone();
    let instrs = &mut out.functions[fi].blocks[bi].instrs;
    match m {
        Mutation::DeleteSttr | Mutation::DeleteLdtr | Mutation::DeleteBtiC => {
            instrs.remove(i);
        }
        Mutation::DeleteRetMask => {
            instrs.remove(i - 1);
        }
        Mutation::ReorderCheckMask => {
            let mask = instrs.remove(i - 1);
            instrs.insert(i - 1 - CHECK_LEN, mask);
        }
        Mutation::StrayX28Write => instrs.insert(i, parse_instr("add x28, x28, #16").unwrap()),
        Mutation::StrayLsu => instrs.insert(i, parse_instr("sttr x0, [x1]").unwrap()),
        Mutation::AddEret => instrs.insert(i, Instr::Eret),
    }
    out.functions[fi].refresh();
    Some(out)
}

pub fn x(n: u8) -> Reg {
    Reg::X(n)
}

// ---------------------------------------------------------------------------
// Decoder fixtures, labelled by hand with the category they belong to.

const DECODE_FIXTURES: &str = include_str!("../../fixtures/decode_fixtures.txt");

/// Registers and operations reachable from EL0, written out separately from
/// the bundled allowlist file.
const EL0_READ: &[&str] = &[
    "TPIDR_EL0", "TPIDRRO_EL0", "NZCV", "FPCR", "FPSR", "DIT", "SSBS", "CTR_EL0", "DCZID_EL0", "CNTFRQ_EL0",
    "CNTVCT_EL0", "CNTPCT_EL0",
];
const EL0_WRITE: &[&str] = &["TPIDR_EL0", "NZCV", "FPCR", "FPSR", "DIT", "SSBS", "PSTATE.DIT", "PSTATE.SSBS"];
const EL0_CACHEOPS: &[&str] = &["DC_ZVA", "DC_CVAU", "DC_CVAC", "DC_CVAP", "DC_CVADP", "DC_CIVAC", "IC_IVAU"];
const ALWAYS_FORBIDDEN: &[&str] =
    &["tlbi", "hvc", "smc", "at", "eret", "pred-restrict", "mte-tag-multiple", "brb", "sys-other"];

#[derive(Clone, Debug)]
pub struct Fixture {
    pub word: u32,
    pub label: String,
    pub operand: Option<String>,
    /// The full expected decoder rendering.
    pub expected: String,
    pub asm: String,
}

impl Fixture {
    /// Whether a privileged-instruction scan must reject this word.
    pub fn privileged(&self) -> bool {
        let op = self.operand.as_deref().unwrap_or("");
        match self.label.as_str() {
            "mrs" => !EL0_READ.contains(&op),
            "msr" => !EL0_WRITE.contains(&op),
            "cacheop" => !EL0_CACHEOPS.contains(&op),
            l => ALWAYS_FORBIDDEN.contains(&l),
        }
    }
}

pub fn decode_fixtures() -> Vec<Fixture> {
    DECODE_FIXTURES
        .lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|l| {
            let (body, asm) = l.split_once("  # ").unwrap();
            let (hex, expected) = body.split_once(' ').unwrap();
            let mut f = expected.split_whitespace();
            let word = u32::from_str_radix(hex, 16).unwrap();
            let label = f.next().unwrap().to_string();
            let operand = f.next().map(str::to_string);
            Fixture { word, label, operand, expected: expected.trim().to_string(), asm: asm.to_string() }
        })
        .collect()
}

pub fn split_fixtures() -> (Vec<Fixture>, Vec<Fixture>) {
    decode_fixtures().into_iter().partition(Fixture::privileged)
}
