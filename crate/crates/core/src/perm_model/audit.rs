//! Exhaustive enumeration of every (task, region, access, via) combination
//! over a layout, flagging the ones that break isolation.

use std::fmt;
use std::fmt::Write as _;

use thiserror::Error;

use super::{AccessKind, AccessRequest, AccessVia};
use crate::policy::{region_verdict, AccessFault, IsolationMode, MemoryLayout, Owner, Region, RegionRole, TaskKind, TaskStates};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AuditError {
    #[error("malformed layout: {0}")]
    MalformedLayout(String),
}

/// How one enumerated access is judged.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellClass {
    Denied,
    Allowed,
    /// Architecturally allowed; closed off by software (vetting, masking, CFI).
    Mitigated(&'static str),
    Violation(&'static str),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuditCell {
    pub task: TaskKind,
    pub region: String,
    pub role: RegionRole,
    pub kind: AccessKind,
    pub via: AccessVia,
    pub result: Result<(), AccessFault>,
    pub class: CellClass,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Finding {
    pub task: TaskKind,
    pub region: String,
    pub kind: AccessKind,
    pub via: AccessVia,
    pub reason: &'static str,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}: {}", self.task, self.region, column_name(self.kind, self.via), self.reason)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuditReport {
    pub mode: IsolationMode,
    pub cells: Vec<AuditCell>,
    pub findings: Vec<Finding>,
}

impl AuditReport {
    /// No findings: isolation holds for this layout.
    pub fn is_clean(&self) -> bool {
        self.findings.is_empty()
    }

    /// Aligned verdict matrix followed by the findings.
    pub fn render(&self) -> String {
        let mut rows: Vec<(String, String, Vec<String>)> = Vec::new();
        for c in &self.cells {
            let col = COLUMNS.iter().position(|&(k, v)| k == c.kind && v == c.via).unwrap();
            let label = (c.task.to_string(), c.region.clone());
            if rows.last().is_none_or(|r| (r.0.as_str(), r.1.as_str()) != (label.0.as_str(), label.1.as_str())) {
                rows.push((label.0, label.1, vec!["-".to_string(); COLUMNS.len()]));
            }
            rows.last_mut().unwrap().2[col] = cell_text(c);
        }
        let w_task = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(4);
        let w_region = rows.iter().map(|r| r.1.len()).max().unwrap_or(0).max(6);
        let w_cell = rows
            .iter()
            .flat_map(|r| r.2.iter().map(String::len))
            .chain(COLUMNS.iter().map(|&(k, v)| column_name(k, v).len()))
            .max()
            .unwrap_or(0);

        let mut out = String::new();
        let _ = writeln!(out, "mode: {}", self.mode);
        let _ = write!(out, "{:<w_task$}  {:<w_region$}", "task", "region");
        for &(k, v) in COLUMNS {
            let _ = write!(out, "  {:<w_cell$}", column_name(k, v));
        }
        out.push('\n');
        for (task, region, cells) in &rows {
            let mut line = format!("{task:<w_task$}  {region:<w_region$}");
            for c in cells {
                let _ = write!(line, "  {c:<w_cell$}");
            }
            out.push_str(line.trim_end());
            out.push('\n');
        }
        let mitigated = self.cells.iter().filter(|c| matches!(c.class, CellClass::Mitigated(_))).count();
        let _ = writeln!(out, "legend: allow* = allowed by hardware, closed by vetting/masking/CFI; ! = violation");
        let _ = writeln!(out, "cells: {} checked, {} software-mitigated, {} violations", self.cells.len(), mitigated, self.findings.len());
        for f in &self.findings {
            let _ = writeln!(out, "VIOLATION {f}");
        }
        out
    }
}

const COLUMNS: &[(AccessKind, AccessVia)] = &[
    (AccessKind::Read, AccessVia::Regular),
    (AccessKind::Write, AccessVia::Regular),
    (AccessKind::Read, AccessVia::Lsu),
    (AccessKind::Write, AccessVia::Lsu),
    (AccessKind::InstrFetch, AccessVia::Regular),
];

fn column_name(kind: AccessKind, via: AccessVia) -> &'static str {
    match (kind, via) {
        (AccessKind::Read, AccessVia::Regular) => "read",
        (AccessKind::Write, AccessVia::Regular) => "write",
        (AccessKind::Read, AccessVia::Lsu) => "ldtr",
        (AccessKind::Write, AccessVia::Lsu) => "sttr",
        (AccessKind::InstrFetch, _) => "fetch",
    }
}

fn cell_text(c: &AuditCell) -> String {
    let base = match c.result {
        Ok(()) => "allow".to_string(),
        Err(AccessFault::Permission(r)) => r.to_string(),
        Err(e) => e.to_string(),
    };
    match c.class {
        CellClass::Mitigated(_) => format!("{base}*"),
        CellClass::Violation(_) => format!("{base}!"),
        _ => base,
    }
}

fn classify(task: TaskKind, region: &Region, kind: AccessKind, via: AccessVia, allowed: bool) -> CellClass {
    use AccessKind::*;
    use AccessVia::*;
    use CellClass::*;
    let fetch = kind == InstrFetch;
    let plain = if allowed { Allowed } else { Denied };

    if region.role.is_kernel() {
        if !allowed {
            return Denied;
        }
        return match (task, via, fetch) {
            (TaskKind::Legacy, _, true) => Violation("legacy task executes kernel memory"),
            (TaskKind::Legacy, _, false) => Violation("legacy task accesses kernel memory"),
            (TaskKind::Elevated, _, true) => Mitigated("kernel-half targets masked off and CFI-checked"),
            (TaskKind::Elevated, Regular, false) => Violation("elevated regular access reaches kernel memory"),
            (TaskKind::Elevated, Lsu, false) => Mitigated("only vetted LSU instructions exist"),
        };
    }

    if task != TaskKind::Elevated {
        return plain;
    }
    match (region.role, kind, via, allowed) {
        (RegionRole::ShadowStack, InstrFetch, _, true) => Violation("shadow stack is executable"),
        (RegionRole::ShadowStack, _, Regular, true) => Violation("regular access reaches the shadow stack"),
        (RegionRole::ShadowStack, Read | Write, Lsu, false) => Violation("LSU cannot use the shadow stack"),
        (RegionRole::TaskCode | RegionRole::TaskData, Read | Write, Lsu, true) => {
            Violation("LSU reaches the regular compartment")
        }
        (RegionRole::TaskCode, InstrFetch, _, false) => Violation("task code is not executable"),
        (RegionRole::TaskData, Read | Write, Regular, false) => Violation("task data is not accessible"),
        (RegionRole::Guard, _, _, true) => Violation("guard is accessible"),
        _ => plain,
    }
}

/// Audits `layout` with the task states of `mode`, or those the layout
/// overrides.
pub fn audit_isolation(layout: &MemoryLayout, mode: IsolationMode) -> Result<AuditReport, AuditError> {
    audit_with_states(layout, mode, &layout.states(mode))
}

pub fn audit_with_states(
    layout: &MemoryLayout,
    mode: IsolationMode,
    states: &TaskStates,
) -> Result<AuditReport, AuditError> {
    layout.validate().map_err(AuditError::MalformedLayout)?;
    let tasks: Vec<TaskKind> = [TaskKind::Elevated, TaskKind::Legacy]
        .into_iter()
        .filter(|t| layout.regions.iter().any(|r| r.owner == t.owner()))
        .collect();
    if tasks.is_empty() {
        return Err(AuditError::MalformedLayout("no task regions".into()));
    }
    if !layout.regions.iter().any(|r| r.owner == Owner::Kernel) {
        return Err(AuditError::MalformedLayout("no kernel regions".into()));
    }

    let mut cells = Vec::new();
    let mut findings = Vec::new();
    for &task in &tasks {
        let state = states.get(task);
        for region in layout.regions.iter().filter(|r| r.owner.visible_to(task)) {
            for &(kind, via) in COLUMNS {
                let req = AccessRequest { kind, privileged: task.privileged(), via, half: region.half };
                let result = region_verdict(region, &state, &req);
                let class = classify(task, region, kind, via, result.is_ok());
                if let CellClass::Violation(reason) = class {
                    findings.push(Finding { task, region: region.name.clone(), kind, via, reason });
                }
                cells.push(AuditCell { task, region: region.name.clone(), role: region.role, kind, via, result, class });
            }
        }
    }
    Ok(AuditReport { mode, cells, findings })
}
