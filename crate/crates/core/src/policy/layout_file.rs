//! Line-oriented layout files.
//!
//! ```text
//! shadow zone=0x10000000 size=0x10000000 stack=0x10000 guard=0x1000 scheme=compact
//! state elevated el=el1t pan=1 uao=0 hpd0=0 hpd1=1 e0pd0=0 e0pd1=0
//! region kernel.text kernel-code upper ap1=1 ap2=1 uxn=1 pxn=0 tables=[aptable0,aptable0] kernel_tag=1 owner=kernel base=0xffff000008000000 size=0x10000 pinned=1
//! region elevated.ss0.guard-lo guard lower unmapped owner=elevated base=0x10000000 size=0x1000 pinned=1 thread=0
//! ```
//!
//! `tables=[...]` lists one entry per table level, top first; each entry is a
//! `+`-joined set of `aptable0`, `aptable1`, `uxntable`, `pxntable`, or `-`
//! for a level with no bits set. `owner` defaults to `kernel` for kernel
//! roles and `elevated` otherwise.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use super::{MemoryLayout, Owner, Region, RegionRole, ShadowConfig, Span, TaskKind};
use crate::perm_model::{CpuSecState, ExceptionLevel, Half, LeafAttrs, TableAttrs, WalkPath};

#[derive(Debug, Error, PartialEq, Eq)]
#[error("line {line}: {message}")]
pub struct LayoutParseError {
    pub line: usize,
    pub message: String,
}

fn flag(b: bool) -> u8 {
    b as u8
}

fn write_tables(f: &mut fmt::Formatter<'_>, tables: &[TableAttrs]) -> fmt::Result {
    f.write_str("tables=[")?;
    for (i, t) in tables.iter().enumerate() {
        if i > 0 {
            f.write_str(",")?;
        }
        let mut bits = Vec::new();
        if t.aptable0 {
            bits.push("aptable0");
        }
        if t.aptable1 {
            bits.push("aptable1");
        }
        if t.uxntable {
            bits.push("uxntable");
        }
        if t.pxntable {
            bits.push("pxntable");
        }
        if bits.is_empty() {
            f.write_str("-")?;
        } else {
            f.write_str(&bits.join("+"))?;
        }
    }
    f.write_str("]")
}

fn write_state(f: &mut fmt::Formatter<'_>, task: TaskKind, s: &CpuSecState) -> fmt::Result {
    let el = match s.el {
        ExceptionLevel::El0 => "el0",
        ExceptionLevel::El1t => "el1t",
        ExceptionLevel::El1h => "el1h",
    };
    writeln!(
        f,
        "state {task} el={el} pan={} uao={} hpd0={} hpd1={} e0pd0={} e0pd1={}",
        flag(s.pan),
        flag(s.uao),
        flag(s.hpd0),
        flag(s.hpd1),
        flag(s.e0pd0),
        flag(s.e0pd1)
    )
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let half = match self.half {
            Half::Lower => "lower",
            Half::Upper => "upper",
        };
        write!(f, "region {} {} {}", self.name, self.role, half)?;
        match &self.path {
            None => f.write_str(" unmapped")?,
            Some(p) => {
                let l = p.leaf;
                write!(f, " ap1={} ap2={} uxn={} pxn={} ", flag(l.ap1), flag(l.ap2), flag(l.uxn), flag(l.pxn))?;
                write_tables(f, &p.tables)?;
                write!(f, " kernel_tag={}", flag(l.kernel_tag))?;
            }
        }
        write!(f, " owner={}", self.owner)?;
        if let Some(s) = self.span {
            write!(f, " base={:#x} size={:#x}", s.base, s.size)?;
        }
        write!(f, " pinned={}", flag(self.pinned))?;
        if let Some(t) = self.thread {
            write!(f, " thread={t}")?;
        }
        Ok(())
    }
}

impl fmt::Display for MemoryLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = &self.shadow;
        writeln!(
            f,
            "shadow zone={:#x} size={:#x} stack={:#x} guard={:#x} scheme={}",
            s.zone.base, s.zone.size, s.stack_size, s.guard_size, s.scheme
        )?;
        if let Some(st) = &self.elevated_state {
            write_state(f, TaskKind::Elevated, st)?;
        }
        if let Some(st) = &self.legacy_state {
            write_state(f, TaskKind::Legacy, st)?;
        }
        for r in &self.regions {
            writeln!(f, "{r}")?;
        }
        Ok(())
    }
}

fn parse_num(s: &str) -> Result<u64, String> {
    let r = match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(&hex.replace('_', ""), 16),
        None => s.replace('_', "").parse::<u64>(),
    };
    r.map_err(|_| format!("bad number `{s}`"))
}

fn parse_bool(s: &str) -> Result<bool, String> {
    match s {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(format!("expected 0 or 1, got `{s}`")),
    }
}

fn parse_tables(s: &str) -> Result<Vec<TableAttrs>, String> {
    let inner = s
        .strip_prefix('[')
        .and_then(|x| x.strip_suffix(']'))
        .ok_or_else(|| format!("expected `[...]`, got `{s}`"))?;
    if inner.is_empty() {
        return Ok(Vec::new());
    }
    inner
        .split(',')
        .map(|level| {
            let mut t = TableAttrs::NONE;
            if level == "-" {
                return Ok(t);
            }
            for bit in level.split('+') {
                match bit {
                    "aptable0" => t.aptable0 = true,
                    "aptable1" => t.aptable1 = true,
                    "uxntable" => t.uxntable = true,
                    "pxntable" => t.pxntable = true,
                    _ => return Err(format!("unknown table attribute `{bit}`")),
                }
            }
            Ok(t)
        })
        .collect()
}

/// Splits `key=value` tokens, rejecting duplicates.
fn kv_pairs<'a>(toks: &[&'a str]) -> Result<Vec<(&'a str, &'a str)>, String> {
    let mut out: Vec<(&str, &str)> = Vec::new();
    for t in toks {
        let (k, v) = t.split_once('=').ok_or_else(|| format!("expected key=value, got `{t}`"))?;
        if out.iter().any(|(seen, _)| *seen == k) {
            return Err(format!("duplicate key `{k}`"));
        }
        out.push((k, v));
    }
    Ok(out)
}

fn parse_state(toks: &[&str]) -> Result<(TaskKind, CpuSecState), String> {
    let (task, rest) = toks.split_first().ok_or("missing task kind")?;
    let task: TaskKind = task.parse()?;
    let mut st = CpuSecState::new(ExceptionLevel::El0);
    for (k, v) in kv_pairs(rest)? {
        match k {
            "el" => {
                st.el = match v {
                    "el0" => ExceptionLevel::El0,
                    "el1t" => ExceptionLevel::El1t,
                    "el1h" => ExceptionLevel::El1h,
                    _ => return Err(format!("unknown exception level `{v}`")),
                }
            }
            "pan" => st.pan = parse_bool(v)?,
            "uao" => st.uao = parse_bool(v)?,
            "hpd0" => st.hpd0 = parse_bool(v)?,
            "hpd1" => st.hpd1 = parse_bool(v)?,
            "e0pd0" => st.e0pd0 = parse_bool(v)?,
            "e0pd1" => st.e0pd1 = parse_bool(v)?,
            _ => return Err(format!("unknown state key `{k}`")),
        }
    }
    Ok((task, st))
}

fn parse_shadow(toks: &[&str]) -> Result<ShadowConfig, String> {
    let mut cfg = ShadowConfig::default();
    for (k, v) in kv_pairs(toks)? {
        match k {
            "zone" => cfg.zone.base = parse_num(v)?,
            "size" => cfg.zone.size = parse_num(v)?,
            "stack" => cfg.stack_size = parse_num(v)?,
            "guard" => cfg.guard_size = parse_num(v)?,
            "scheme" => cfg.scheme = v.parse()?,
            _ => return Err(format!("unknown shadow key `{k}`")),
        }
    }
    Ok(cfg)
}

fn parse_region(toks: &[&str]) -> Result<Region, String> {
    let [name, role, half, rest @ ..] = toks else {
        return Err("expected `region <name> <role> <half> ...`".into());
    };
    let role: RegionRole = role.parse()?;
    let half = match *half {
        "lower" => Half::Lower,
        "upper" => Half::Upper,
        _ => return Err(format!("unknown half `{half}`")),
    };
    let (unmapped, rest) = match rest.split_first() {
        Some((&"unmapped", r)) => (true, r),
        _ => (false, rest),
    };
    let mut leaf = LeafAttrs::default();
    let mut tables = Vec::new();
    let mut seen_attr = false;
    let mut owner = if role.is_kernel() { Owner::Kernel } else { Owner::Elevated };
    let (mut base, mut size) = (None, None);
    let mut pinned = false;
    let mut thread = None;
    for (k, v) in kv_pairs(rest)? {
        let attr = matches!(k, "ap1" | "ap2" | "uxn" | "pxn" | "tables" | "kernel_tag");
        if attr && unmapped {
            return Err(format!("`{k}` given for an unmapped region"));
        }
        seen_attr |= attr;
        match k {
            "ap1" => leaf.ap1 = parse_bool(v)?,
            "ap2" => leaf.ap2 = parse_bool(v)?,
            "uxn" => leaf.uxn = parse_bool(v)?,
            "pxn" => leaf.pxn = parse_bool(v)?,
            "kernel_tag" => leaf.kernel_tag = parse_bool(v)?,
            "tables" => tables = parse_tables(v)?,
            "owner" => owner = v.parse()?,
            "base" => base = Some(parse_num(v)?),
            "size" => size = Some(parse_num(v)?),
            "pinned" => pinned = parse_bool(v)?,
            "thread" => thread = Some(v.parse::<u32>().map_err(|_| format!("bad thread id `{v}`"))?),
            _ => return Err(format!("unknown region key `{k}`")),
        }
    }
    let span = match (base, size) {
        (Some(b), Some(s)) => Some(Span::new(b, s)),
        (None, None) => None,
        _ => return Err("`base` and `size` must be given together".into()),
    };
    // A mapped region without any attribute keys is kept attribute-less so the
    // auditor can report it.
    let path = (!unmapped && seen_attr).then_some(WalkPath { tables, leaf });
    Ok(Region { name: name.to_string(), role, owner, half, path, span, pinned, thread })
}

impl FromStr for MemoryLayout {
    type Err = LayoutParseError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let mut out = MemoryLayout::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| LayoutParseError { line: idx + 1, message };
            let toks: Vec<&str> = line.split_whitespace().collect();
            match toks[0] {
                "region" => out.regions.push(parse_region(&toks[1..]).map_err(err)?),
                "shadow" => out.shadow = parse_shadow(&toks[1..]).map_err(err)?,
                "state" => match parse_state(&toks[1..]).map_err(err)? {
                    (TaskKind::Elevated, s) => out.elevated_state = Some(s),
                    (TaskKind::Legacy, s) => out.legacy_state = Some(s),
                },
                other => return Err(err(format!("unknown directive `{other}`"))),
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{configure_system, LayoutParams};

    #[test]
    fn round_trip_default_system() {
        let (mut layout, states) = configure_system(&LayoutParams::default()).unwrap();
        layout.legacy_state = Some(states.legacy);
        let text = layout.to_string();
        let back: MemoryLayout = text.parse().unwrap();
        assert_eq!(back, layout);
        assert!(text.contains("tables=[aptable0,aptable0]"));
    }

    #[test]
    fn attribute_less_region_parses_without_path() {
        let l: MemoryLayout = "region foo task-data lower base=0x1000 size=0x1000".parse().unwrap();
        assert!(l.regions[0].path.is_none());
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = "# x\nregion a task-data lower ap1=2".parse::<MemoryLayout>().unwrap_err();
        assert_eq!(e.line, 2);
        let e = "bogus".parse::<MemoryLayout>().unwrap_err();
        assert_eq!(e.message, "unknown directive `bogus`");
        assert!("region a guard lower unmapped ap1=1".parse::<MemoryLayout>().is_err());
    }
}
