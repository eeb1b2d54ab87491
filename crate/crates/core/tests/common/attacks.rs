//! The five scripted attack scenarios. Each returns a one-line summary on
//! success and an explanation on failure.

use std::collections::BTreeMap;

use privinv::asm::{assemble, parse, Program};
use privinv::decoder::Allowlist;
use privinv::perm_model::FaultReason;
use privinv::policy::{launch, AccessFault, LaunchError, LaunchRequest, MemoryLayout, TaskKind};
use privinv::rewriter::{rewrite, RewriteOptions};
use privinv::scanner::PAGE_SIZE;
use privinv::sim::{longjmp_unwind, run_attack, AttackResult, AttackScript, Event, UnwindError};
use privinv::sim::{Machine, SimConfig, Status};

use super::elevated;

pub type Scenario = Result<String, String>;

const RET_VICTIM: &str = "
.fn main
    stp x29, x30, [sp, #-16]!
    mov x0, #5
    bl victim
    ldp x29, x30, [sp], #16
    ret
.endfn

.fn victim
    stp x29, x30, [sp, #-16]!
    add x0, x0, #1
    bl helper
    ldp x29, x30, [sp], #16
    ret
.endfn

.fn helper
    add x0, x0, #10
    ret
.endfn

.fn gadget address_taken
    mov x0, #0x666
    ret
.endfn
";

const FPTR_VICTIM: &str = "
.fn main
    stp x29, x30, [sp, #-16]!
    mov x9, #0x800000
    adr x1, target
    str x1, [x9]
    bl work
    ldp x29, x30, [sp], #16
    ret
.endfn

.fn work
    stp x29, x30, [sp, #-16]!
    mov x9, #0x800000
    ldr x11, [x9]
    blr x11
    ldp x29, x30, [sp], #16
    ret
.endfn

.fn target address_taken
    mov x0, #7
    ret
.endfn
";

const CHAIN: &str = "
.fn main
    stp x29, x30, [sp, #-16]!
    mov x0, #3
    bl a
    ldp x29, x30, [sp], #16
    ret
.endfn

.fn a
    stp x29, x30, [sp, #-16]!
    bl b
    add x0, x0, #1
    ldp x29, x30, [sp], #16
    ret
.endfn

.fn b
    stp x29, x30, [sp, #-16]!
    bl rec
    add x0, x0, #2
    ldp x29, x30, [sp], #16
    ret
.endfn

.fn rec
    stp x29, x30, [sp, #-16]!
    cbz x0, rec_done
    sub x0, x0, #1
    bl rec
rec_done:
    ldp x29, x30, [sp], #16
    ret
.endfn
";

pub const KERNEL_TEXT: u64 = 0xFFFF_0000_0800_0000;

fn hardened(src: &str) -> Program {
    rewrite(&parse(src).unwrap(), &RewriteOptions::default()).unwrap()
}

/// Machine state where the script's `calls`-th `resume-until call` stops.
fn probe(p: &Program, layout: &MemoryLayout, cfg: &SimConfig, calls: usize) -> Machine {
    let mut m = Machine::new(p, layout, cfg).unwrap();
    for _ in 0..calls {
        m.step();
        while m.at_event() != Some(Event::Call) {
            assert!(m.is_running(), "program ended before call {calls}");
            m.step();
        }
    }
    m
}

fn attack(p: &Program, layout: &MemoryLayout, cfg: &SimConfig, script: &str) -> (AttackResult, Machine) {
    let script: AttackScript = script.parse().unwrap();
    let o = run_attack(p, layout, cfg, &script).unwrap();
    (o.result, o.machine)
}

/// (a) Overwrite the spilled return address of `victim` with `gadget`.
pub fn return_address_corruption() -> Scenario {
    let (layout, cfg) = elevated();
    let raw = parse(RET_VICTIM).unwrap();
    let hard = hardened(RET_VICTIM);
    let benign = privinv::sim::run(&hard, &layout, &cfg).map_err(|e| e.to_string())?.status;

    let mut lines = Vec::new();
    for (name, p, cfg) in [("baseline", &raw, cfg.clone().unverified()), ("hardened", &hard, cfg.clone())] {
        let m = probe(p, &layout, &cfg, 2);
        let gadget = m.symbol("gadget").unwrap();
        let slot = m.sp + 8;
        if m.peek_u64(slot).is_none_or(|v| !m.live_returns().contains(&v)) {
            return Err(format!("{name}: no spilled return address at {slot:#x}"));
        }
        let script = format!("resume-until call\nresume-until call\nwrite64 {slot:#x} {gadget:#x}\n");
        let (result, end) = attack(p, &layout, &cfg, &script);
        lines.push((name, result, end.status, gadget));
    }
    let (_, base_res, _, base_gadget) = &lines[0];
    let (_, hard_res, hard_status, _) = &lines[1];
    if *base_res != AttackResult::Hijacked(*base_gadget) {
        return Err(format!("baseline not hijacked: {base_res}"));
    }
    match hard_res {
        AttackResult::Neutralized(why) if why.contains("shadow copy") && *hard_status == benign => {
            Ok(format!("baseline {base_res}; hardened {hard_res}, exit status unchanged"))
        }
        r => Err(format!("hardened: {r}, status {hard_status:?}, benign {benign:?}")),
    }
}

/// (b) Regular store into the live shadow-stack slot.
pub fn shadow_stack_tamper() -> Scenario {
    let (layout, cfg) = elevated();
    let p = hardened(RET_VICTIM);
    let m = probe(&p, &layout, &cfg, 2);
    let slot = m.regs[28] - 8;
    let gadget = m.symbol("gadget").unwrap();
    let script = format!("resume-until call\nresume-until call\nwrite64 {slot:#x} {gadget:#x}\n");
    let (result, end) = attack(&p, &layout, &cfg, &script);
    match &result {
        AttackResult::Faulted(f) if f.reason() == Some(FaultReason::PanFault) => {
            if end.peek_u64(slot) == m.peek_u64(slot) {
                Ok(format!("{result}; slot unchanged"))
            } else {
                Err("shadow slot changed despite the fault".into())
            }
        }
        r => Err(format!("expected PanFault, got {r}")),
    }
}

fn no_upper_half(m: &Machine) -> Result<(), String> {
    if m.pc >> 63 == 1 {
        return Err(format!("pc ended in the upper half: {:#x}", m.pc));
    }
    if let Some(e) = m.trace.iter().find(|e| e.pc >> 63 == 1) {
        return Err(format!("trace reached the upper half: {e}"));
    }
    Ok(())
}

/// (c) Redirect the function pointer in data memory to kernel text, and to
/// a non-entry instruction of the program.
pub fn function_pointer_redirect() -> Scenario {
    let (layout, cfg) = elevated();
    let raw = parse(FPTR_VICTIM).unwrap();
    let hard = hardened(FPTR_VICTIM);
    let mut out = Vec::new();

    let script = |v: u64| format!("resume-until call\nwrite64 0x800000 {v:#x}\n");
    let (base, _) = attack(&raw, &layout, &cfg.clone().unverified(), &script(KERNEL_TEXT));
    if base != AttackResult::Hijacked(KERNEL_TEXT) {
        return Err(format!("baseline kernel redirect not hijacked: {base}"));
    }
    out.push(format!("baseline {base}"));

    for target in [KERNEL_TEXT, KERNEL_TEXT + 0x100_0000 + 8, 0xFFFF_FFFF_FFFF_FFF0] {
        let (r, m) = attack(&hard, &layout, &cfg, &script(target));
        no_upper_half(&m)?;
        match &r {
            AttackResult::Neutralized(w) if w == "CFI trap" => {}
            AttackResult::Faulted(f) if matches!(f.access(), Some(AccessFault::Unmapped)) => {}
            r => return Err(format!("redirect to {target:#x}: {r}")),
        }
        out.push(format!("{target:#x}: {r}"));
    }

    let mid = probe(&hard, &layout, &cfg, 1).symbol("target").unwrap() + 4;
    let (r, m) = attack(&hard, &layout, &cfg, &script(mid));
    no_upper_half(&m)?;
    if r != AttackResult::Neutralized("CFI trap".into()) {
        return Err(format!("redirect into function body: {r}"));
    }
    out.push(format!("mid-function: {r}"));
    Ok(out.join("; "))
}

/// (d) An elevated binary whose code contains `eret` is refused at load.
pub fn eret_page_denied() -> Scenario {
    let src = "
.fn main
    mov x0, #1
    ret
.endfn

.fn escape
    eret
.endfn
";
    let p = parse(src).map_err(|e| e.to_string())?;
    let image = assemble(&p, 0x40_0000).map_err(|e| e.to_string())?;
    let mut bytes = image.bytes();
    let pad = PAGE_SIZE - bytes.len() % PAGE_SIZE;
    bytes.extend(std::iter::repeat_n(0u8, pad));
    let pages: Vec<Vec<u8>> = bytes.chunks(PAGE_SIZE).map(<[u8]>::to_vec).collect();
    let env = BTreeMap::from([("INVERSOS".to_string(), "1".to_string())]);
    let req = LaunchRequest { env: env.clone(), binary_pages: pages.clone() };
    let allow = Allowlist::el0_default();
    let verdict = match launch(&req, &allow) {
        Err(LaunchError::Denied { page: 0, verdict }) => verdict,
        r => return Err(format!("elevated launch not denied: {r:?}")),
    };
    let eret_at = (image.symbols["escape"] - image.base) as usize;
    if verdict.violations.iter().map(|(o, _)| *o).collect::<Vec<_>>() != vec![eret_at] {
        return Err(format!("violations {:?}, eret at {eret_at}", verdict.violations));
    }
    let legacy = LaunchRequest { env: BTreeMap::new(), binary_pages: pages };
    if launch(&legacy, &allow) != Ok(TaskKind::Legacy) {
        return Err("legacy launch should not scan".into());
    }
    Ok(format!("page 0 denied, eret at offset {eret_at}"))
}

/// Newest slot at or below `top` holding `target`, by scanning memory.
fn brute_force(m: &Machine, base: u64, top: u64, target: u64) -> Option<u64> {
    let mut best = None;
    let mut a = base;
    while a < top {
        if m.peek_u64(a) == Some(target) {
            best = Some(a + 8);
        }
        a += 8;
    }
    best
}

/// (e) longjmp from the deepest frame of a call chain to every live frame,
/// with a saved x28 that no longer matches.
pub fn longjmp_unwinding() -> Scenario {
    let (layout, cfg) = elevated();
    let p = hardened(CHAIN);
    let base = layout.shadow_stack(0).unwrap().span.unwrap().base;

    let mut m = Machine::new(&p, &layout, &cfg).unwrap();
    let mut deepest = m.clone();
    while m.is_running() {
        m.step();
        if m.regs[28] > deepest.regs[28] {
            deepest = m.clone();
        }
    }
    if !matches!(m.status, Status::Exited(_)) {
        return Err(format!("chain program did not exit: {:?}", m.status));
    }
    let top = deepest.regs[28];
    let depth = (top - base) / 8;
    if depth < 6 {
        return Err(format!("chain only {depth} deep"));
    }
    let slots: Vec<u64> = (0..depth).map(|i| deepest.peek_u64(base + 8 * i).unwrap()).collect();
    let stale = base + 8;
    let mut checked = 0;
    for &target in slots.iter().chain([0x1234_5678u64].iter()) {
        let mut j = deepest.clone();
        let got = longjmp_unwind(&mut j, target, stale);
        match (brute_force(&deepest, base, top, target), got) {
            (Some(want), Ok(x28)) if want == x28 && j.regs[28] == want => {}
            (None, Err(UnwindError::Underflow { .. })) => {}
            (want, got) => return Err(format!("target {target:#x}: oracle {want:x?}, unwind {got:?}")),
        }
        checked += 1;
    }
    let mut bad = deepest.clone();
    if longjmp_unwind(&mut bad, slots[1], top + 0x10_0000) != Err(UnwindError::SavedOutsideSpan(top + 0x10_0000)) {
        return Err("saved x28 outside the shadow stack was accepted".into());
    }
    Ok(format!("{checked} targets over a {depth}-deep shadow stack agree with the scan"))
}

pub fn all() -> Vec<(&'static str, Scenario)> {
    vec![
        ("return-address corruption", return_address_corruption()),
        ("shadow-stack tamper", shadow_stack_tamper()),
        ("function-pointer redirect", function_pointer_redirect()),
        ("eret page", eret_page_denied()),
        ("longjmp unwinding", longjmp_unwinding()),
    ]
}
