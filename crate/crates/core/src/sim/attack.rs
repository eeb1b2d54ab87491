//! Scripted attacker with arbitrary read/write and register control,
//! interleaved with execution.
//!
//! ```text
//! resume-until call          # stop where the next call sequence begins
//! write 0xf0fff8 a0...       # raw bytes, as a regular store from the task
//! write64 0xf0fff8 0x400100  # one little-endian 64-bit value
//! read 0x800000 16
//! setreg x5 0xffff000008000000
//! resume-until exit
//! ```
//!
//! `resume-until ret` and `resume-until call` stop at the first
//! instruction of the next return or call sequence, instrumentation
//! included, after executing at least one instruction. `fault` and `exit`
//! run until the machine stops. The script ends with an implicit resume to
//! completion.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use super::{EventKind, Fault, FaultKind, Machine, SimConfig, SimError, Status, TraceEvent};
use crate::asm::Program;
use crate::perm_model::{AccessKind, AccessVia};
use crate::policy::MemoryLayout;
use crate::rewriter::TRAP_BRK;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Event {
    Ret,
    Call,
    Fault,
    Exit,
}

impl FromStr for Event {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ret" => Ok(Event::Ret),
            "call" => Ok(Event::Call),
            "fault" => Ok(Event::Fault),
            "exit" => Ok(Event::Exit),
            _ => Err(format!("unknown event `{s}`")),
        }
    }
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Event::Ret => "ret",
            Event::Call => "call",
            Event::Fault => "fault",
            Event::Exit => "exit",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AttackStep {
    Write { addr: u64, bytes: Vec<u8> },
    Read { addr: u64, len: u64 },
    SetReg { reg: u8, value: u64 },
    ResumeUntil(Event),
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AttackScript {
    pub steps: Vec<AttackStep>,
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
#[error("attack script line {line}: {message}")]
pub struct ScriptError {
    pub line: usize,
    pub message: String,
}

fn hex(s: &str) -> Result<u64, String> {
    let body = s.strip_prefix("0x").unwrap_or(s);
    u64::from_str_radix(body, 16).map_err(|_| format!("bad hex number `{s}`"))
}

fn hex_bytes(s: &str) -> Result<Vec<u8>, String> {
    let body = s.strip_prefix("0x").unwrap_or(s);
    if body.is_empty() || !body.len().is_multiple_of(2) {
        return Err(format!("bad byte string `{s}`"));
    }
    (0..body.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&body[i..i + 2], 16).map_err(|_| format!("bad byte string `{s}`")))
        .collect()
}

fn parse_step(words: &[&str]) -> Result<AttackStep, String> {
    let arity = |n: usize| {
        if words.len() == n + 1 {
            Ok(())
        } else {
            Err(format!("`{}` takes {n} operand(s)", words[0]))
        }
    };
    match words[0] {
        "write" => {
            arity(2)?;
            Ok(AttackStep::Write { addr: hex(words[1])?, bytes: hex_bytes(words[2])? })
        }
        "write64" => {
            arity(2)?;
            Ok(AttackStep::Write { addr: hex(words[1])?, bytes: hex(words[2])?.to_le_bytes().to_vec() })
        }
        "read" => {
            arity(2)?;
            let len = words[2].parse().map_err(|_| format!("bad length `{}`", words[2]))?;
            Ok(AttackStep::Read { addr: hex(words[1])?, len })
        }
        "setreg" => {
            arity(2)?;
            let reg = words[1]
                .strip_prefix('x')
                .and_then(|n| n.parse::<u8>().ok())
                .filter(|n| *n <= 30)
                .ok_or_else(|| format!("bad register `{}`", words[1]))?;
            Ok(AttackStep::SetReg { reg, value: hex(words[2])? })
        }
        "resume-until" => {
            arity(1)?;
            Ok(AttackStep::ResumeUntil(words[1].parse()?))
        }
        w => Err(format!("unknown step `{w}`")),
    }
}

impl FromStr for AttackScript {
    type Err = ScriptError;
    fn from_str(text: &str) -> Result<Self, ScriptError> {
        let mut steps = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let words: Vec<&str> = line.split_whitespace().collect();
            steps.push(parse_step(&words).map_err(|message| ScriptError { line: i + 1, message })?);
        }
        Ok(AttackScript { steps })
    }
}

impl fmt::Display for AttackScript {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.steps {
            match s {
                AttackStep::Write { addr, bytes } => {
                    write!(f, "write {addr:#x} ")?;
                    for b in bytes {
                        write!(f, "{b:02x}")?;
                    }
                    writeln!(f)?;
                }
                AttackStep::Read { addr, len } => writeln!(f, "read {addr:#x} {len}")?,
                AttackStep::SetReg { reg, value } => writeln!(f, "setreg x{reg} {value:#x}")?,
                AttackStep::ResumeUntil(e) => writeln!(f, "resume-until {e}")?,
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AttackResult {
    Neutralized(String),
    /// Control reached an attacker-supplied address and could execute there.
    Hijacked(u64),
    Faulted(Fault),
}

impl fmt::Display for AttackResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttackResult::Neutralized(r) => write!(f, "neutralized: {r}"),
            AttackResult::Hijacked(pc) => write!(f, "hijacked: pc {pc:#x}"),
            AttackResult::Faulted(fault) => write!(f, "faulted: {fault}"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Outcome {
    pub result: AttackResult,
    pub trace: Vec<TraceEvent>,
    pub machine: Machine,
}

struct Attacker {
    /// Values the attacker planted in memory or registers.
    values: BTreeSet<u64>,
    /// A write replaced a return address of a call in progress.
    hit_return: bool,
}

impl Attacker {
    fn plant(&mut self, addr: u64, bytes: &[u8]) {
        let first = addr & !7;
        let mut slot = first;
        while slot < addr + bytes.len() as u64 {
            let mut word = [0u8; 8];
            for (k, b) in word.iter_mut().enumerate() {
                let a = slot + k as u64;
                if a >= addr && a < addr + bytes.len() as u64 {
                    *b = bytes[(a - addr) as usize];
                }
            }
            self.values.insert(u64::from_le_bytes(word));
            slot += 8;
        }
        if bytes.len() == 8 {
            self.values.insert(u64::from_le_bytes(bytes.try_into().unwrap()));
        }
    }

    fn classify(&self, m: &Machine) -> AttackResult {
        match &m.status {
            Status::Faulted(Fault { kind: FaultKind::Breakpoint(TRAP_BRK), .. }) => {
                AttackResult::Neutralized("CFI trap".into())
            }
            Status::Faulted(f) => AttackResult::Faulted(f.clone()),
            _ if self.hit_return => AttackResult::Neutralized("return uses shadow copy".into()),
            _ => AttackResult::Neutralized("no control-flow effect".into()),
        }
    }

    /// Runs until `until`, or returns the final result if the run ends.
    fn resume(&self, m: &mut Machine, until: Event) -> Result<Option<AttackResult>, SimError> {
        let mut first = true;
        loop {
            if !m.is_running() {
                return Ok(Some(self.classify(m)));
            }
            if m.last_transfer_indirect() && self.values.contains(&m.pc) {
                let fetch = m.resolve(m.pc, 4, AccessKind::InstrFetch, AccessVia::Regular);
                if fetch.is_ok() {
                    let pc = m.pc;
                    m.event(EventKind::Attack, pc, "control reached a planted address".into());
                    return Ok(Some(AttackResult::Hijacked(pc)));
                }
            }
            if !first && m.at_event() == Some(until) {
                return Ok(None);
            }
            first = false;
            if m.steps >= m.fuel {
                return Err(SimError::FuelExhausted(m.steps));
            }
            m.step();
        }
    }
}

/// Runs `p` under `script`. The program must verify unless the config
/// allows otherwise.
pub fn run_attack(
    p: &Program,
    layout: &MemoryLayout,
    cfg: &SimConfig,
    script: &AttackScript,
) -> Result<Outcome, SimError> {
    let mut m = Machine::new(p, layout, cfg)?;
    let mut atk = Attacker { values: BTreeSet::new(), hit_return: false };
    let finish = |m: Machine, result| Ok(Outcome { result, trace: m.trace.clone(), machine: m });
    for step in &script.steps {
        let pc = m.pc;
        match step {
            AttackStep::Write { addr, bytes } => {
                atk.plant(*addr, bytes);
                let live = m.live_returns().to_vec();
                let mut slot = addr & !7;
                while slot < addr + bytes.len() as u64 {
                    if m.peek_u64(slot).is_some_and(|v| live.contains(&v)) {
                        atk.hit_return = true;
                    }
                    slot += 8;
                }
                m.event(EventKind::Attack, pc, format!("write {addr:#x} {} bytes", bytes.len()));
                if let Err(kind) = m.store_bytes(*addr, bytes, AccessVia::Regular) {
                    let fault = Fault { pc, kind };
                    m.stop(Status::Faulted(fault.clone()));
                    return finish(m, AttackResult::Faulted(fault));
                }
            }
            AttackStep::Read { addr, len } => {
                let mut out = Vec::new();
                for a in *addr..addr + len {
                    match m.load(a, 1, AccessVia::Regular) {
                        Ok(v) => out.push(format!("{v:02x}")),
                        Err(kind) => {
                            let fault = Fault { pc, kind };
                            m.stop(Status::Faulted(fault.clone()));
                            return finish(m, AttackResult::Faulted(fault));
                        }
                    }
                }
                m.event(EventKind::Attack, pc, format!("read {addr:#x} {}", out.concat()));
            }
            AttackStep::SetReg { reg, value } => {
                atk.values.insert(*value);
                m.regs[*reg as usize] = *value;
                m.event(EventKind::Attack, pc, format!("setreg x{reg} {value:#x}"));
            }
            AttackStep::ResumeUntil(e) => {
                if let Some(result) = atk.resume(&mut m, *e)? {
                    return finish(m, result);
                }
            }
        }
    }
    let result = atk.resume(&mut m, Event::Exit)?.expect("resume to exit ends the run");
    finish(m, result)
}
