//! Interpreter for the assembly subset over a [`MemoryLayout`]. Every fetch,
//! load and store is resolved through the layout's permission check before
//! it takes effect.
//!
//! The program is assembled at the base of the task's code region. `sp`
//! starts at the top of the task stack, x28 at the bottom of the thread's
//! shadow stack, and x30 at [`EXIT_SENTINEL`]; returning there ends the run
//! with x0 as the exit code. `svc #0` with x8 = 93 exits and with x8 = 64
//! records x0 as output.

mod attack;
mod unwind;

pub use attack::{run_attack, AttackResult, AttackScript, AttackStep, Event, Outcome, ScriptError};
pub use unwind::{longjmp_unwind, UnwindError};

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::asm::{assemble, Addr, AsmError, BrKind, Image, Instr, LogicOp, LogicOperand, Operand, Program, Reg, Shift, WideOp};
use crate::decoder::{Allowlist, PStateField};
use crate::perm_model::{AccessKind, AccessRequest, AccessVia, CpuSecState, FaultReason, Half};
use crate::policy::{region_verdict, AccessFault, IsolationMode, MemoryLayout, RegionRole, TaskKind};
use crate::rewriter::{cfi_check, pop_pair, required_pad, CHECK_LEN};
use crate::verifier::{verify, Violation, VerifyPolicy};

/// Initial x30. Not mapped in any layout.
pub const EXIT_SENTINEL: u64 = 0xff0;
pub const DEFAULT_FUEL: u64 = 1_000_000;
pub const SYS_EXIT: u64 = 93;
pub const SYS_WRITE: u64 = 64;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SimConfig {
    pub task: TaskKind,
    pub state: CpuSecState,
    pub entry: String,
    pub fuel: u64,
    /// Run elevated code that fails verification.
    pub allow_unverified: bool,
    pub thread: u32,
}

impl SimConfig {
    pub fn new(task: TaskKind, state: CpuSecState) -> Self {
        SimConfig { task, state, entry: "main".into(), fuel: DEFAULT_FUEL, allow_unverified: false, thread: 0 }
    }

    /// The layout's CPU state for `task` in `mode`.
    pub fn for_layout(layout: &MemoryLayout, mode: IsolationMode, task: TaskKind) -> Self {
        SimConfig::new(task, layout.states(mode).get(task))
    }

    pub fn unverified(mut self) -> Self {
        self.allow_unverified = true;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FaultKind {
    Access { addr: u64, kind: AccessKind, via: AccessVia, fault: AccessFault },
    /// Fetch allowed, but no program instruction lives there.
    ForeignCode,
    Undefined(String),
    Breakpoint(u16),
    Syscall(u64),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fault {
    pub pc: u64,
    pub kind: FaultKind,
}

impl Fault {
    pub fn access(&self) -> Option<AccessFault> {
        match self.kind {
            FaultKind::Access { fault, .. } => Some(fault),
            _ => None,
        }
    }

    pub fn reason(&self) -> Option<FaultReason> {
        match self.access() {
            Some(AccessFault::Permission(r)) => Some(r),
            _ => None,
        }
    }
}

impl fmt::Display for Fault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            FaultKind::Access { addr, kind, via, fault } => {
                let what = match kind {
                    AccessKind::Read => "read",
                    AccessKind::Write => "write",
                    AccessKind::InstrFetch => "fetch",
                };
                let via = if *via == AccessVia::Lsu { " (unprivileged)" } else { "" };
                write!(f, "{fault} on {what}{via} of {addr:#x}")?;
            }
            FaultKind::ForeignCode => f.write_str("execution outside the program image")?,
            FaultKind::Undefined(m) => write!(f, "undefined: {m}")?,
            FaultKind::Breakpoint(n) => write!(f, "brk #{n:#x}")?,
            FaultKind::Syscall(n) => write!(f, "unsupported syscall {n}")?,
        }
        write!(f, " at pc {:#x}", self.pc)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Status {
    Running,
    Exited(u64),
    Faulted(Fault),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EventKind {
    Call,
    Ret,
    Syscall,
    /// `sttr`, with the address and value stored.
    UnprivStore,
    Attack,
    Unwind,
    Fault,
    Exit,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EventKind::Call => "call",
            EventKind::Ret => "ret",
            EventKind::Syscall => "syscall",
            EventKind::UnprivStore => "sttr",
            EventKind::Attack => "attack",
            EventKind::Unwind => "unwind",
            EventKind::Fault => "fault",
            EventKind::Exit => "exit",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEvent {
    pub step: u64,
    pub kind: EventKind,
    pub pc: u64,
    pub detail: String,
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {:#x} {}", self.step, self.kind, self.pc, self.detail)
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("out of fuel after {0} steps")]
    FuelExhausted(u64),
    #[error("program fails verification ({} violations, first: {})", .0.len(), .0[0])]
    Unverified(Vec<Violation>),
    #[error(transparent)]
    Assemble(#[from] AsmError),
    #[error("entry `{0}` not found")]
    NoEntry(String),
    #[error("layout has no {0} for the task")]
    NoRegion(&'static str),
    #[error("program image ({0} bytes) does not fit the code region")]
    ImageTooLarge(u64),
}

/// What a run leaves behind that the program is meant to compute.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Observation {
    pub status: Status,
    pub x0: u64,
    pub output: Vec<u64>,
    /// Task data regions other than the stack.
    pub data: Vec<(String, Vec<u8>)>,
}

#[derive(Clone, Debug)]
pub struct Machine {
    pub regs: [u64; 31],
    pub sp: u64,
    pub pc: u64,
    pub nzcv: u8,
    pub sec: CpuSecState,
    pub task: TaskKind,
    pub layout: MemoryLayout,
    pub status: Status,
    pub trace: Vec<TraceEvent>,
    pub steps: u64,
    pub fuel: u64,
    pub thread: u32,
    /// Values passed to the write syscall.
    pub output: Vec<u64>,
    program: Arc<Program>,
    image: Image,
    mem: Vec<Option<Vec<u8>>>,
    sysregs: BTreeMap<u16, u64>,
    allow: Allowlist,
    /// Return addresses of the calls currently in progress.
    live_returns: Vec<u64>,
    /// Start of each instrumented call or return sequence.
    events: HashMap<u64, Event>,
    /// The last control transfer took its target from a register.
    last_indirect: bool,
}

impl Machine {
    pub fn new(p: &Program, layout: &MemoryLayout, cfg: &SimConfig) -> Result<Machine, SimError> {
        if cfg.task == TaskKind::Elevated && !cfg.allow_unverified {
            let v = verify(p, VerifyPolicy::Full);
            if !v.is_empty() {
                return Err(SimError::Unverified(v));
            }
        }
        let owner = cfg.task.owner();
        let own = |role: RegionRole| {
            layout.regions.iter().enumerate().filter(move |(_, r)| r.owner == owner && r.role == role && r.span.is_some())
        };
        let (text_idx, text) = own(RegionRole::TaskCode).next().ok_or(SimError::NoRegion("code region"))?;
        let text_span = text.span.unwrap();
        let image = assemble(p, text_span.base)?;
        if image.end() > text_span.end() {
            return Err(SimError::ImageTooLarge(image.end() - image.base));
        }
        let stack = own(RegionRole::TaskData)
            .find(|(_, r)| r.name.ends_with(".stack"))
            .or_else(|| own(RegionRole::TaskData).next_back())
            .ok_or(SimError::NoRegion("stack"))?
            .1;
        let pc = *image.symbols.get(&cfg.entry).filter(|_| p.is_entry(&cfg.entry)).ok_or_else(|| SimError::NoEntry(cfg.entry.clone()))?;

        let mut mem: Vec<Option<Vec<u8>>> = layout
            .regions
            .iter()
            .map(|r| match (r.span, &r.path, r.role) {
                (Some(s), Some(_), role) if role != RegionRole::Guard => Some(vec![0; s.size as usize]),
                _ => None,
            })
            .collect();
        if let Some(m) = mem[text_idx].as_mut() {
            m[..image.words.len() * 4].copy_from_slice(&image.bytes());
        }

        let mut regs = [0; 31];
        regs[30] = EXIT_SENTINEL;
        if cfg.task == TaskKind::Elevated {
            if let Some(ss) = layout.shadow_stack(cfg.thread).and_then(|r| r.span) {
                regs[28] = ss.base;
            }
        }
        let events = event_starts(p, &image);
        Ok(Machine {
            regs,
            sp: stack.span.unwrap().end(),
            pc,
            nzcv: 0,
            sec: cfg.state,
            task: cfg.task,
            layout: layout.clone(),
            status: Status::Running,
            trace: Vec::new(),
            steps: 0,
            fuel: cfg.fuel,
            thread: cfg.thread,
            output: Vec::new(),
            program: Arc::new(p.clone()),
            image,
            mem,
            sysregs: BTreeMap::new(),
            allow: Allowlist::default(),
            live_returns: vec![EXIT_SENTINEL],
            events,
            last_indirect: false,
        })
    }

    pub fn image(&self) -> &Image {
        &self.image
    }

    pub fn symbol(&self, label: &str) -> Option<u64> {
        self.image.symbols.get(label).copied()
    }

    pub fn is_running(&self) -> bool {
        self.status == Status::Running
    }

    /// Runs until the machine stops.
    pub fn run(&mut self) -> Result<(), SimError> {
        while self.is_running() {
            if self.steps >= self.fuel {
                return Err(SimError::FuelExhausted(self.steps));
            }
            self.step();
        }
        Ok(())
    }

    fn event(&mut self, kind: EventKind, pc: u64, detail: String) {
        self.trace.push(TraceEvent { step: self.steps, kind, pc, detail });
    }

    fn stop(&mut self, status: Status) {
        let pc = self.pc;
        match &status {
            Status::Exited(code) => self.event(EventKind::Exit, pc, format!("code={code}")),
            Status::Faulted(f) => self.event(EventKind::Fault, f.pc, f.to_string()),
            Status::Running => {}
        }
        self.status = status;
    }

    /// Executes one instruction.
    pub fn step(&mut self) {
        if !self.is_running() {
            return;
        }
        if self.pc == EXIT_SENTINEL {
            let code = self.regs[0];
            self.stop(Status::Exited(code));
            return;
        }
        let pc = self.pc;
        if let Err(kind) = self.resolve(pc, 4, AccessKind::InstrFetch, AccessVia::Regular) {
            self.stop(Status::Faulted(Fault { pc, kind }));
            return;
        }
        let Some(loc) = self.image.location(pc) else {
            self.stop(Status::Faulted(Fault { pc, kind: FaultKind::ForeignCode }));
            return;
        };
        let prog = Arc::clone(&self.program);
        let ins = &prog.functions[loc.func].blocks[loc.block].instrs[loc.index];
        self.steps += 1;
        match self.exec(ins) {
            Ok(None) => self.pc = pc + 4,
            Ok(Some(next)) => self.pc = next,
            Err(kind) => self.stop(Status::Faulted(Fault { pc, kind })),
        }
    }

    /// The next instruction starts an instrumented call or return.
    pub fn at_event(&self) -> Option<Event> {
        self.events.get(&self.pc).copied()
    }

    pub fn last_transfer_indirect(&self) -> bool {
        self.last_indirect
    }

    pub fn live_returns(&self) -> &[u64] {
        &self.live_returns
    }

    // ---- registers ----

    pub fn read(&self, r: Reg) -> u64 {
        match r {
            Reg::X(n) => self.regs[n as usize],
            Reg::W(n) => self.regs[n as usize] & 0xffff_ffff,
            Reg::Sp => self.sp,
            Reg::Wsp => self.sp & 0xffff_ffff,
            Reg::Xzr | Reg::Wzr => 0,
        }
    }

    pub fn write(&mut self, r: Reg, v: u64) {
        match r {
            Reg::X(n) => self.regs[n as usize] = v,
            Reg::W(n) => self.regs[n as usize] = v & 0xffff_ffff,
            Reg::Sp => self.sp = v,
            Reg::Wsp => self.sp = v & 0xffff_ffff,
            Reg::Xzr | Reg::Wzr => {}
        }
    }

    // ---- memory ----

    fn region_index(&self, addr: u64) -> Option<usize> {
        self.layout
            .regions
            .iter()
            .position(|r| r.owner.visible_to(self.task) && r.span.is_some_and(|s| s.contains(addr)))
    }

    /// Permission-checks an access of `len` bytes; returns region and offset.
    fn resolve(&self, addr: u64, len: u64, kind: AccessKind, via: AccessVia) -> Result<(usize, usize), FaultKind> {
        let fault = |a: u64, fault| FaultKind::Access { addr: a, kind, via, fault };
        let idx = self.region_index(addr).ok_or(fault(addr, AccessFault::Unmapped))?;
        let region = &self.layout.regions[idx];
        let req = AccessRequest { kind, privileged: self.task.privileged(), via, half: Half::of_address(addr) };
        region_verdict(region, &self.sec, &req).map_err(|f| fault(addr, f))?;
        let span = region.span.unwrap();
        let last = addr.wrapping_add(len - 1);
        if !span.contains(last) {
            let f = match self.region_index(last).map(|i| self.layout.regions[i].role) {
                Some(RegionRole::Guard) => AccessFault::Guard,
                _ => AccessFault::Unmapped,
            };
            return Err(fault(last, f));
        }
        Ok((idx, (addr - span.base) as usize))
    }

    pub fn load(&self, addr: u64, len: u64, via: AccessVia) -> Result<u64, FaultKind> {
        let (idx, off) = self.resolve(addr, len, AccessKind::Read, via)?;
        let m = self.mem[idx].as_ref().expect("mapped region has backing");
        let mut buf = [0u8; 8];
        buf[..len as usize].copy_from_slice(&m[off..off + len as usize]);
        Ok(u64::from_le_bytes(buf))
    }

    pub fn store(&mut self, addr: u64, len: u64, value: u64, via: AccessVia) -> Result<(), FaultKind> {
        self.store_bytes(addr, &value.to_le_bytes()[..len as usize], via)
    }

    pub fn store_bytes(&mut self, addr: u64, bytes: &[u8], via: AccessVia) -> Result<(), FaultKind> {
        if bytes.is_empty() {
            return Ok(());
        }
        let (idx, off) = self.resolve(addr, bytes.len() as u64, AccessKind::Write, via)?;
        let m = self.mem[idx].as_mut().expect("mapped region has backing");
        m[off..off + bytes.len()].copy_from_slice(bytes);
        Ok(())
    }

    /// Reads memory without permission checks (for oracles and reports).
    pub fn peek(&self, addr: u64, len: usize) -> Option<Vec<u8>> {
        let idx = self.region_index(addr)?;
        let span = self.layout.regions[idx].span?;
        let off = (addr - span.base) as usize;
        self.mem[idx].as_ref()?.get(off..off + len).map(<[u8]>::to_vec)
    }

    pub fn peek_u64(&self, addr: u64) -> Option<u64> {
        self.peek(addr, 8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn region_bytes(&self, name: &str) -> Option<&[u8]> {
        let idx = self.layout.regions.iter().position(|r| r.name == name)?;
        self.mem[idx].as_deref()
    }

    pub fn observe(&self) -> Observation {
        let owner = self.task.owner();
        let data = self
            .layout
            .regions
            .iter()
            .zip(&self.mem)
            .filter(|(r, _)| r.owner == owner && r.role == RegionRole::TaskData && !r.name.ends_with(".stack"))
            .filter_map(|(r, m)| Some((r.name.clone(), m.clone()?)))
            .collect();
        Observation { status: self.status.clone(), x0: self.regs[0], output: self.output.clone(), data }
    }

    // ---- execution ----

    fn label(&self, l: &str) -> u64 {
        self.image.symbols[l]
    }

    fn operand(&self, op: &Operand, is64: bool) -> u64 {
        match *op {
            Operand::Imm { imm, lsl12 } => (imm as u64) << if lsl12 { 12 } else { 0 },
            Operand::Reg { rm, shift, amount } => shifted(self.read(rm), shift, amount, is64),
        }
    }

    fn address(&mut self, a: &Addr, size: u64) -> (u64, Option<(Reg, u64)>) {
        match *a {
            Addr::Offset { rn, imm } => (self.read(rn).wrapping_add(imm as u64), None),
            Addr::Pre { rn, imm } => {
                let v = self.read(rn).wrapping_add(imm as u64);
                (v, Some((rn, v)))
            }
            Addr::Post { rn, imm } => {
                let v = self.read(rn);
                (v, Some((rn, v.wrapping_add(imm as u64))))
            }
            Addr::RegOffset { rn, rm, scaled } => {
                let off = self.read(rm) << if scaled { size.trailing_zeros() } else { 0 };
                (self.read(rn).wrapping_add(off), None)
            }
        }
    }

    fn call(&mut self, target: u64, indirect: bool) -> Option<u64> {
        let ret = self.pc + 4;
        self.regs[30] = ret;
        self.live_returns.push(ret);
        self.last_indirect = indirect;
        self.event(EventKind::Call, self.pc, format!("target={target:#x}"));
        Some(target)
    }

    fn exec(&mut self, ins: &Instr) -> Result<Option<u64>, FaultKind> {
        use Instr::*;
        let pc = self.pc;
        let mut next = None;
        if !matches!(ins, Blr(_) | Br(..) | Ret(_)) {
            self.last_indirect = false;
        }
        match ins {
            B(l) => next = Some(self.label(l)),
            BCond(c, l) => {
                if c.holds(self.nzcv) {
                    next = Some(self.label(l));
                }
            }
            Cbz { nz, rt, label } => {
                if (self.read(*rt) != 0) == *nz {
                    next = Some(self.label(label));
                }
            }
            Bl(l) => next = self.call(self.label(l), false),
            Blr(r) => next = self.call(self.read(*r), true),
            Br(r, _) => {
                self.last_indirect = true;
                next = Some(self.read(*r));
            }
            Ret(r) => {
                let target = self.read(*r);
                self.last_indirect = true;
                self.live_returns.pop();
                self.event(EventKind::Ret, pc, format!("target={target:#x}"));
                next = Some(target);
            }
            Bti(_) | Nop => {}
            AddSub { sub, flags, rd, rn, op } => {
                let is64 = rd.is64();
                let a = self.read(*rn);
                let b = self.operand(op, is64);
                let (r, nzcv) = if *sub { add_with_carry(a, !b, 1, is64) } else { add_with_carry(a, b, 0, is64) };
                if *flags {
                    self.nzcv = nzcv;
                }
                self.write(*rd, r);
            }
            Logic { op, rd, rn, operand } => {
                let is64 = rd.is64();
                let b = match *operand {
                    LogicOperand::Imm(v) => v,
                    LogicOperand::Reg { rm, shift, amount } => shifted(self.read(rm), shift, amount, is64),
                };
                let a = self.read(*rn);
                let r = match op {
                    LogicOp::And => a & b,
                    LogicOp::Orr => a | b,
                    LogicOp::Eor => a ^ b,
                };
                self.write(*rd, trunc(r, is64));
            }
            Mov { rd, rn } => {
                let v = self.read(*rn);
                self.write(*rd, v);
            }
            MovWide { kind, rd, imm, shift } => {
                let v = (*imm as u64) << shift;
                let r = match kind {
                    WideOp::Z => v,
                    WideOp::N => !v,
                    WideOp::K => (self.read(*rd) & !(0xffff << shift)) | v,
                };
                self.write(*rd, trunc(r, rd.is64()));
            }
            Mul { rd, rn, rm } => {
                let r = self.read(*rn).wrapping_mul(self.read(*rm));
                self.write(*rd, trunc(r, rd.is64()));
            }
            Udiv { rd, rn, rm } => {
                let d = self.read(*rm);
                let r = self.read(*rn).checked_div(d).unwrap_or(0);
                self.write(*rd, r);
            }
            ShiftImm { right, rd, rn, amount } => {
                let s = if *right { Shift::Lsr } else { Shift::Lsl };
                let r = shifted(self.read(*rn), s, *amount, rd.is64());
                self.write(*rd, r);
            }
            Load { size, rt, addr } => {
                let (a, wb) = self.address(addr, size.bytes());
                let v = self.load(a, size.bytes(), AccessVia::Regular)?;
                self.writeback(wb);
                self.write(*rt, v);
            }
            Store { size, rt, addr } => {
                let v = self.read(*rt);
                let (a, wb) = self.address(addr, size.bytes());
                self.store(a, size.bytes(), v, AccessVia::Regular)?;
                self.writeback(wb);
            }
            LoadUnpriv { size, rt, rn, imm } => {
                let a = self.read(*rn).wrapping_add(*imm as u64);
                let v = self.load(a, size.bytes(), AccessVia::Lsu)?;
                self.write(*rt, v);
            }
            StoreUnpriv { size, rt, rn, imm } => {
                let a = self.read(*rn).wrapping_add(*imm as u64);
                let v = self.read(*rt);
                self.store(a, size.bytes(), v, AccessVia::Lsu)?;
                self.event(EventKind::UnprivStore, pc, format!("addr={a:#x} value={v:#x}"));
            }
            LoadPair { rt1, rt2, addr } => {
                let n = if rt1.is64() { 8 } else { 4 };
                let (a, wb) = self.address(addr, n);
                let v1 = self.load(a, n, AccessVia::Regular)?;
                let v2 = self.load(a.wrapping_add(n), n, AccessVia::Regular)?;
                self.writeback(wb);
                self.write(*rt1, v1);
                self.write(*rt2, v2);
            }
            StorePair { rt1, rt2, addr } => {
                let n = if rt1.is64() { 8 } else { 4 };
                let (v1, v2) = (self.read(*rt1), self.read(*rt2));
                let (a, wb) = self.address(addr, n);
                self.store(a, n, v1, AccessVia::Regular)?;
                self.store(a.wrapping_add(n), n, v2, AccessVia::Regular)?;
                self.writeback(wb);
            }
            Adr { rd, label } => {
                let v = self.label(label);
                self.write(*rd, v);
            }
            Svc(_) => match self.regs[8] {
                SYS_EXIT => {
                    let code = self.regs[0];
                    self.stop(Status::Exited(code));
                }
                SYS_WRITE => {
                    let v = self.regs[0];
                    self.output.push(v);
                    self.event(EventKind::Syscall, pc, format!("write {v:#x}"));
                }
                n => return Err(FaultKind::Syscall(n)),
            },
            Brk(n) => return Err(FaultKind::Breakpoint(*n)),
            Eret => return Err(FaultKind::Undefined("eret with no exception to return from".into())),
            Mrs { rt, reg } => {
                if !self.task.privileged() && !self.allow.permits_read(*reg) {
                    return Err(FaultKind::Undefined(format!("mrs {reg} at EL0")));
                }
                let v = self.sysregs.get(&reg.0).copied().unwrap_or(0);
                self.write(*rt, v);
            }
            MsrReg { reg, rt } => {
                if !self.task.privileged() && !self.allow.permits_write(*reg) {
                    return Err(FaultKind::Undefined(format!("msr {reg} at EL0")));
                }
                let v = self.read(*rt);
                self.sysregs.insert(reg.0, v);
            }
            MsrImm { field, imm } => {
                if !self.task.privileged() && !self.allow.permits_pstate(*field) {
                    return Err(FaultKind::Undefined(format!("msr {field} at EL0")));
                }
                match *field {
                    PStateField::PAN => self.sec.pan = imm & 1 == 1,
                    PStateField::UAO => self.sec.uao = imm & 1 == 1,
                    _ => {}
                }
            }
            Word(w) => return Err(FaultKind::Undefined(format!(".word {w:#010x}"))),
        }
        Ok(next)
    }

    fn writeback(&mut self, wb: Option<(Reg, u64)>) {
        if let Some((r, v)) = wb {
            self.write(r, v);
        }
    }
}

fn trunc(v: u64, is64: bool) -> u64 {
    if is64 {
        v
    } else {
        v & 0xffff_ffff
    }
}

fn shifted(v: u64, shift: Shift, amount: u8, is64: bool) -> u64 {
    let a = amount as u32;
    trunc(
        match (shift, is64) {
            (Shift::Lsl, _) => v.wrapping_shl(a),
            (Shift::Lsr, true) => v.wrapping_shr(a),
            (Shift::Lsr, false) => (v as u32).wrapping_shr(a) as u64,
            (Shift::Asr, true) => (v as i64).wrapping_shr(a) as u64,
            (Shift::Asr, false) => (v as i32).wrapping_shr(a) as u32 as u64,
        },
        is64,
    )
}

/// Result and `NZCV` of `a + b + carry` at the given width.
fn add_with_carry(a: u64, b: u64, carry: u64, is64: bool) -> (u64, u8) {
    let (bits, mask) = if is64 { (64, u64::MAX) } else { (32, 0xffff_ffff) };
    let (a, b) = (a & mask, b & mask);
    let wide = a as u128 + b as u128 + carry as u128;
    let r = (wide as u64) & mask;
    let n = (r >> (bits - 1)) & 1 == 1;
    let z = r == 0;
    let c = wide >> bits != 0;
    let sign = 1u64 << (bits - 1);
    let v = (a & sign) == (b & sign) && (r & sign) != (a & sign);
    (r, (n as u8) << 3 | (z as u8) << 2 | (c as u8) << 1 | v as u8)
}

/// Addresses where an instrumented call or return sequence begins.
fn event_starts(p: &Program, image: &Image) -> HashMap<u64, Event> {
    let mut out = HashMap::new();
    for f in &p.functions {
        for b in &f.blocks {
            let base = image.symbols[&b.label];
            for (i, ins) in b.instrs.iter().enumerate() {
                let (event, target) = match ins {
                    Instr::Ret(r) => (Event::Ret, Some(*r)),
                    Instr::Bl(_) => (Event::Call, None),
                    Instr::B(l) if p.is_entry(l) => (Event::Call, None),
                    Instr::Blr(_) | Instr::Br(_, BrKind::Tail) => (Event::Call, required_pad(ins).map(|(r, _)| r)),
                    _ => continue,
                };
                let s = &b.instrs;
                let mut start = i;
                if let Some(r) = target {
                    if start > 0 && s[start - 1].is_mask_of(r) {
                        start -= 1;
                    }
                    if let Some((_, kind)) = required_pad(ins) {
                        if start >= CHECK_LEN {
                            if let Instr::BCond(_, fail) = &s[start - 1] {
                                if s[start - CHECK_LEN..start] == cfi_check(r, kind, fail) {
                                    start -= CHECK_LEN;
                                }
                            }
                        }
                    }
                }
                if !matches!(ins, Instr::Bl(_) | Instr::Blr(_)) && start >= 2 && s[start - 2..start] == pop_pair() {
                    start -= 2;
                }
                out.insert(base + 4 * start as u64, event);
            }
        }
    }
    out
}

/// Assembles and runs `p` to completion.
pub fn run(p: &Program, layout: &MemoryLayout, cfg: &SimConfig) -> Result<Machine, SimError> {
    let mut m = Machine::new(p, layout, cfg)?;
    m.run()?;
    Ok(m)
}
