//! Memory layouts and CPU states for elevated tasks, legacy tasks and the
//! kernel, plus shadow-stack allocation and the launch decision.

mod layout_file;

pub use layout_file::LayoutParseError;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::decoder::Allowlist;
use crate::perm_model::{
    check_access, AccessKind, AccessRequest, AccessVia, CpuSecState, ExceptionLevel, FaultReason,
    Half, LeafAttrs, TableAttrs, Verdict, WalkPath,
};
use crate::scanner::{self, ScanVerdict};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskKind {
    Legacy,
    Elevated,
}

impl TaskKind {
    /// Elevated tasks run in the privileged thread mode; legacy tasks at EL0.
    pub fn privileged(self) -> bool {
        self == TaskKind::Elevated
    }

    pub fn owner(self) -> Owner {
        match self {
            TaskKind::Legacy => Owner::Legacy,
            TaskKind::Elevated => Owner::Elevated,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Legacy => "legacy",
            TaskKind::Elevated => "elevated",
        })
    }
}

impl FromStr for TaskKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "legacy" => Ok(TaskKind::Legacy),
            "elevated" => Ok(TaskKind::Elevated),
            _ => Err(format!("unknown task kind `{s}`")),
        }
    }
}

/// How legacy tasks are kept away from kernel memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum IsolationMode {
    Hpds,
    E0pd,
}

impl fmt::Display for IsolationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IsolationMode::Hpds => "hpds",
            IsolationMode::E0pd => "e0pd",
        })
    }
}

impl FromStr for IsolationMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "hpds" => Ok(IsolationMode::Hpds),
            "e0pd" => Ok(IsolationMode::E0pd),
            _ => Err(format!("unknown isolation mode `{s}` (expected hpds or e0pd)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RegionRole {
    TaskCode,
    TaskData,
    ShadowStack,
    Guard,
    KernelCode,
    KernelData,
}

impl RegionRole {
    pub const ALL: [RegionRole; 6] = [
        RegionRole::TaskCode,
        RegionRole::TaskData,
        RegionRole::ShadowStack,
        RegionRole::Guard,
        RegionRole::KernelCode,
        RegionRole::KernelData,
    ];

    pub fn token(self) -> &'static str {
        match self {
            RegionRole::TaskCode => "task-code",
            RegionRole::TaskData => "task-data",
            RegionRole::ShadowStack => "shadow-stack",
            RegionRole::Guard => "guard",
            RegionRole::KernelCode => "kernel-code",
            RegionRole::KernelData => "kernel-data",
        }
    }

    pub fn is_kernel(self) -> bool {
        matches!(self, RegionRole::KernelCode | RegionRole::KernelData)
    }
}

impl fmt::Display for RegionRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for RegionRole {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RegionRole::ALL
            .into_iter()
            .find(|r| r.token() == s)
            .ok_or_else(|| format!("unknown region role `{s}`"))
    }
}

/// Which address space a region belongs to. Kernel regions are shared.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Owner {
    Kernel,
    Elevated,
    Legacy,
}

impl Owner {
    pub fn visible_to(self, task: TaskKind) -> bool {
        self == Owner::Kernel || self == task.owner()
    }
}

impl fmt::Display for Owner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Owner::Kernel => "kernel",
            Owner::Elevated => "elevated",
            Owner::Legacy => "legacy",
        })
    }
}

impl FromStr for Owner {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "kernel" => Ok(Owner::Kernel),
            "elevated" => Ok(Owner::Elevated),
            "legacy" => Ok(Owner::Legacy),
            _ => Err(format!("unknown owner `{s}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Span {
    pub base: u64,
    pub size: u64,
}

impl Span {
    pub fn new(base: u64, size: u64) -> Self {
        Span { base, size }
    }

    pub fn end(&self) -> u64 {
        self.base.wrapping_add(self.size)
    }

    pub fn contains(&self, addr: u64) -> bool {
        addr >= self.base && addr - self.base < self.size
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.base < other.end() && other.base < self.end()
    }
}

/// A named, attributed range of one task's (or the kernel's) address space.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Region {
    pub name: String,
    pub role: RegionRole,
    pub owner: Owner,
    pub half: Half,
    /// `None` for unmapped ranges (guards).
    pub path: Option<WalkPath>,
    pub span: Option<Span>,
    /// Rejects unmap/remap/protect requests.
    pub pinned: bool,
    pub thread: Option<u32>,
}

impl Region {
    fn mapped(name: &str, role: RegionRole, owner: Owner, span: Span, path: WalkPath) -> Region {
        Region {
            name: name.to_string(),
            role,
            owner,
            half: Half::of_address(span.base),
            path: Some(path),
            span: Some(span),
            pinned: false,
            thread: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShadowScheme {
    /// Stack of return addresses only, indexed by X28.
    Compact,
    /// Mirrors the regular stack's size.
    Parallel,
}

impl fmt::Display for ShadowScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShadowScheme::Compact => "compact",
            ShadowScheme::Parallel => "parallel",
        })
    }
}

impl FromStr for ShadowScheme {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "compact" => Ok(ShadowScheme::Compact),
            "parallel" => Ok(ShadowScheme::Parallel),
            _ => Err(format!("unknown shadow-stack scheme `{s}`")),
        }
    }
}

/// Where and how large shadow stacks are. Stacks grow upward from the base of
/// their span.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShadowConfig {
    pub zone: Span,
    pub stack_size: u64,
    pub guard_size: u64,
    pub scheme: ShadowScheme,
}

impl Default for ShadowConfig {
    fn default() -> Self {
        ShadowConfig {
            zone: Span::new(0x1000_0000, 0x1000_0000),
            stack_size: 0x1_0000,
            guard_size: 0x1000,
            scheme: ShadowScheme::Compact,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TaskStates {
    pub elevated: CpuSecState,
    pub legacy: CpuSecState,
}

impl TaskStates {
    pub fn for_mode(mode: IsolationMode) -> Self {
        TaskStates { elevated: elevated_state(mode), legacy: legacy_state(mode) }
    }

    pub fn get(&self, task: TaskKind) -> CpuSecState {
        match task {
            TaskKind::Elevated => self.elevated,
            TaskKind::Legacy => self.legacy,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct MemoryLayout {
    pub regions: Vec<Region>,
    pub shadow: ShadowConfig,
    /// CPU states that replace the mode defaults when auditing.
    pub elevated_state: Option<CpuSecState>,
    pub legacy_state: Option<CpuSecState>,
}

/// Why a modeled access did not happen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AccessFault {
    Unmapped,
    Guard,
    Permission(FaultReason),
}

impl fmt::Display for AccessFault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AccessFault::Unmapped => f.write_str("Unmapped"),
            AccessFault::Guard => f.write_str("GuardFault"),
            AccessFault::Permission(r) => r.fmt(f),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("bad layout parameters: {0}")]
    BadParams(String),
    #[error("region `{0}` has no table levels to carry APTable[0]")]
    HugePageConflict(String),
    #[error("no room for another shadow stack in the shadow zone")]
    AddressExhausted,
    #[error("region `{0}` cannot be unmapped, remapped or re-protected")]
    Immutable(String),
    #[error("no region named `{0}`")]
    UnknownRegion(String),
    #[error("thread {0} already has a shadow stack")]
    DuplicateThread(u32),
}

/// Requested change to an existing region.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegionChange {
    Protect(LeafAttrs),
    Unmap,
    Remap(u64),
}

impl MemoryLayout {
    pub fn region(&self, name: &str) -> Option<&Region> {
        self.regions.iter().find(|r| r.name == name)
    }

    pub fn regions_of(&self, role: RegionRole) -> impl Iterator<Item = &Region> {
        self.regions.iter().filter(move |r| r.role == role)
    }

    /// First region visible to `task` that covers `addr`.
    pub fn region_at(&self, task: TaskKind, addr: u64) -> Option<&Region> {
        self.regions
            .iter()
            .find(|r| r.owner.visible_to(task) && r.span.is_some_and(|s| s.contains(addr)))
    }

    pub fn states(&self, mode: IsolationMode) -> TaskStates {
        let d = TaskStates::for_mode(mode);
        TaskStates {
            elevated: self.elevated_state.unwrap_or(d.elevated),
            legacy: self.legacy_state.unwrap_or(d.legacy),
        }
    }

    /// Resolves an access by `task` running in `state` to `addr`.
    pub fn check(
        &self,
        task: TaskKind,
        state: &CpuSecState,
        addr: u64,
        kind: AccessKind,
        via: AccessVia,
    ) -> Result<&Region, AccessFault> {
        let region = self.region_at(task, addr).ok_or(AccessFault::Unmapped)?;
        let req = AccessRequest { kind, privileged: task.privileged(), via, half: Half::of_address(addr) };
        match region_verdict(region, state, &req) {
            Ok(()) => Ok(region),
            Err(f) => Err(f),
        }
    }

    /// Structural checks: unique names and two adjacent guards per shadow stack.
    pub fn validate(&self) -> Result<(), String> {
        let mut seen = std::collections::HashSet::new();
        for r in &self.regions {
            if !seen.insert(r.name.as_str()) {
                return Err(format!("duplicate region name `{}`", r.name));
            }
            if r.path.is_none() && r.role != RegionRole::Guard {
                return Err(format!("region `{}` has no attributes", r.name));
            }
        }
        for ss in self.regions_of(RegionRole::ShadowStack) {
            let Some(span) = ss.span else {
                return Err(format!("shadow stack `{}` has no span", ss.name));
            };
            let guard_at = |pred: &dyn Fn(&Span) -> bool| {
                self.regions_of(RegionRole::Guard)
                    .filter(|g| g.owner == ss.owner && g.span.as_ref().is_some_and(pred))
                    .count()
            };
            let below = guard_at(&|g: &Span| g.end() == span.base);
            let above = guard_at(&|g: &Span| g.base == span.end());
            if below != 1 || above != 1 {
                return Err(format!("shadow stack `{}` is not enclosed by exactly two guards", ss.name));
            }
        }
        Ok(())
    }

    pub fn shadow_stack(&self, thread: u32) -> Option<&Region> {
        self.regions_of(RegionRole::ShadowStack).find(|r| r.thread == Some(thread))
    }

    /// Applies an unmap/remap/protect request from the task.
    pub fn request_change(&self, name: &str, change: RegionChange) -> Result<MemoryLayout, PolicyError> {
        let idx = self
            .regions
            .iter()
            .position(|r| r.name == name)
            .ok_or_else(|| PolicyError::UnknownRegion(name.to_string()))?;
        if self.regions[idx].pinned {
            return Err(PolicyError::Immutable(name.to_string()));
        }
        let mut out = self.clone();
        match change {
            RegionChange::Unmap => {
                out.regions.remove(idx);
            }
            RegionChange::Remap(base) => {
                let r = &mut out.regions[idx];
                if let Some(s) = r.span.as_mut() {
                    s.base = base;
                }
                r.half = Half::of_address(base);
            }
            RegionChange::Protect(leaf) => {
                if let Some(p) = out.regions[idx].path.as_mut() {
                    p.leaf = leaf;
                }
            }
        }
        Ok(out)
    }
}

/// Decides one access against one region. Guards fault for every access.
pub fn region_verdict(region: &Region, state: &CpuSecState, req: &AccessRequest) -> Result<(), AccessFault> {
    if region.role == RegionRole::Guard {
        return Err(AccessFault::Guard);
    }
    let Some(path) = &region.path else {
        return Err(AccessFault::Unmapped);
    };
    match check_access(state, path, req) {
        Verdict::Allow => Ok(()),
        Verdict::Fault(r) => Err(AccessFault::Permission(r)),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayoutParams {
    pub mode: IsolationMode,
    pub code: Span,
    pub data: Span,
    pub stack: Span,
    pub kernel_code: Span,
    pub kernel_data: Span,
    /// Number of table descriptors above kernel leaves. Zero models the
    /// largest block mappings.
    pub kernel_table_levels: usize,
    pub shadow: ShadowConfig,
}

impl Default for LayoutParams {
    fn default() -> Self {
        LayoutParams {
            mode: IsolationMode::Hpds,
            code: Span::new(0x40_0000, 0x1_0000),
            data: Span::new(0x80_0000, 0x1_0000),
            stack: Span::new(0xF0_0000, 0x1_0000),
            kernel_code: Span::new(0xFFFF_0000_0800_0000, 0x1_0000),
            kernel_data: Span::new(0xFFFF_0000_0900_0000, 0x1_0000),
            kernel_table_levels: 2,
            shadow: ShadowConfig::default(),
        }
    }
}

impl LayoutParams {
    fn check(&self) -> Result<(), PolicyError> {
        let bad = |m: &str| Err(PolicyError::BadParams(m.to_string()));
        if self.shadow.stack_size == 0 {
            return bad("shadow stack size is zero");
        }
        if !self.shadow.stack_size.is_multiple_of(8) {
            return bad("shadow stack size is not a multiple of 8");
        }
        if self.shadow.guard_size == 0 {
            return bad("guard size is zero");
        }
        for (n, s) in [("code", self.code), ("data", self.data), ("stack", self.stack)] {
            if s.size == 0 {
                return bad(&format!("{n} size is zero"));
            }
            if Half::of_address(s.base) != Half::Lower || Half::of_address(s.end() - 1) != Half::Lower {
                return bad(&format!("{n} span is not in the lower half"));
            }
        }
        for (n, s) in [("kernel code", self.kernel_code), ("kernel data", self.kernel_data)] {
            if s.size == 0 || Half::of_address(s.base) != Half::Upper {
                return bad(&format!("{n} span must be non-empty and in the upper half"));
            }
        }
        let spans = [self.code, self.data, self.stack, self.shadow.zone];
        for (i, a) in spans.iter().enumerate() {
            for b in &spans[i + 1..] {
                if a.overlaps(b) {
                    return bad("task spans overlap");
                }
            }
        }
        Ok(())
    }
}

fn leaf(ap1: bool, ap2: bool, uxn: bool, pxn: bool) -> LeafAttrs {
    LeafAttrs { ap1, ap2, uxn, pxn, kernel_tag: false }
}

fn user_path(l: LeafAttrs) -> WalkPath {
    WalkPath { tables: vec![TableAttrs::NONE; 2], leaf: l }
}

fn kernel_regions(params: &LayoutParams, mode: IsolationMode) -> Vec<Region> {
    let table = match mode {
        IsolationMode::Hpds => TableAttrs::UNPRIV_BLOCKED,
        IsolationMode::E0pd => TableAttrs::NONE,
    };
    let tables = vec![table; params.kernel_table_levels];
    let code = LeafAttrs { kernel_tag: true, ..leaf(true, true, true, false) };
    let data = LeafAttrs { kernel_tag: true, ..leaf(true, false, true, true) };
    let mut out = vec![
        Region::mapped(
            "kernel.text",
            RegionRole::KernelCode,
            Owner::Kernel,
            params.kernel_code,
            WalkPath { tables: tables.clone(), leaf: code },
        ),
        Region::mapped(
            "kernel.data",
            RegionRole::KernelData,
            Owner::Kernel,
            params.kernel_data,
            WalkPath { tables, leaf: data },
        ),
    ];
    for r in &mut out {
        r.pinned = true;
    }
    out
}

/// CPU state while an elevated task runs.
pub fn elevated_state(mode: IsolationMode) -> CpuSecState {
    CpuSecState {
        pan: true,
        uao: false,
        hpd1: mode == IsolationMode::Hpds,
        ..CpuSecState::new(ExceptionLevel::El1t)
    }
}

/// CPU state while a legacy task runs.
pub fn legacy_state(mode: IsolationMode) -> CpuSecState {
    CpuSecState {
        pan: true,
        e0pd1: mode == IsolationMode::E0pd,
        ..CpuSecState::new(ExceptionLevel::El0)
    }
}

/// Kernel plus one elevated task with a shadow stack for thread 0.
pub fn configure_elevated(params: &LayoutParams) -> Result<(MemoryLayout, CpuSecState), PolicyError> {
    params.check()?;
    let own = Owner::Elevated;
    let mut regions = vec![
        Region::mapped("elevated.text", RegionRole::TaskCode, own, params.code, user_path(leaf(false, true, true, false))),
        Region::mapped("elevated.data", RegionRole::TaskData, own, params.data, user_path(leaf(false, false, true, true))),
        Region::mapped("elevated.stack", RegionRole::TaskData, own, params.stack, user_path(leaf(false, false, true, true))),
    ];
    regions.extend(kernel_regions(params, params.mode));
    let layout = MemoryLayout { regions, shadow: params.shadow, elevated_state: None, legacy_state: None };
    let layout = allocate_shadow_stack(&layout, 0)?;
    Ok((layout, elevated_state(params.mode)))
}

/// Kernel plus one legacy task.
pub fn configure_legacy(
    params: &LayoutParams,
    mode: IsolationMode,
) -> Result<(MemoryLayout, CpuSecState), PolicyError> {
    params.check()?;
    let kernel = kernel_regions(params, mode);
    if mode == IsolationMode::Hpds {
        if let Some(r) = kernel.iter().find(|r| r.path.as_ref().is_some_and(|p| p.tables.is_empty())) {
            return Err(PolicyError::HugePageConflict(r.name.clone()));
        }
    }
    let own = Owner::Legacy;
    let mut regions = vec![
        Region::mapped("legacy.text", RegionRole::TaskCode, own, params.code, user_path(leaf(true, true, false, true))),
        Region::mapped("legacy.data", RegionRole::TaskData, own, params.data, user_path(leaf(true, false, true, true))),
        Region::mapped("legacy.stack", RegionRole::TaskData, own, params.stack, user_path(leaf(true, false, true, true))),
    ];
    regions.extend(kernel);
    Ok((MemoryLayout { regions, shadow: params.shadow, elevated_state: None, legacy_state: None }, legacy_state(mode)))
}

/// Both task kinds side by side with the shared kernel regions, for auditing.
pub fn configure_system(params: &LayoutParams) -> Result<(MemoryLayout, TaskStates), PolicyError> {
    let (mut layout, _) = configure_elevated(params)?;
    let (legacy, _) = configure_legacy(params, params.mode)?;
    layout
        .regions
        .extend(legacy.regions.into_iter().filter(|r| r.owner == Owner::Legacy));
    Ok((layout, TaskStates::for_mode(params.mode)))
}

/// Adds a pinned shadow stack for `thread`, enclosed by two guards, at the
/// next free address of the shadow zone.
pub fn allocate_shadow_stack(layout: &MemoryLayout, thread: u32) -> Result<MemoryLayout, PolicyError> {
    let cfg = layout.shadow;
    if layout.shadow_stack(thread).is_some() {
        return Err(PolicyError::DuplicateThread(thread));
    }
    let size = match cfg.scheme {
        ShadowScheme::Compact => cfg.stack_size,
        ShadowScheme::Parallel => layout
            .region("elevated.stack")
            .and_then(|r| r.span)
            .map_or(cfg.stack_size, |s| s.size),
    };
    let cursor = layout
        .regions
        .iter()
        .filter(|r| r.owner == Owner::Elevated)
        .filter_map(|r| r.span)
        .filter(|s| cfg.zone.contains(s.base))
        .map(|s| s.end())
        .max()
        .unwrap_or(cfg.zone.base);
    let need = cfg.guard_size * 2 + size;
    if cursor.checked_add(need).is_none_or(|end| end > cfg.zone.end()) {
        return Err(PolicyError::AddressExhausted);
    }
    let guard = |name: String, base: u64| Region {
        name,
        role: RegionRole::Guard,
        owner: Owner::Elevated,
        half: Half::Lower,
        path: None,
        span: Some(Span::new(base, cfg.guard_size)),
        pinned: true,
        thread: Some(thread),
    };
    let ss_base = cursor + cfg.guard_size;
    let mut out = layout.clone();
    out.regions.push(guard(format!("elevated.ss{thread}.guard-lo"), cursor));
    out.regions.push(Region {
        name: format!("elevated.ss{thread}"),
        role: RegionRole::ShadowStack,
        owner: Owner::Elevated,
        half: Half::Lower,
        path: Some(user_path(leaf(true, false, true, true))),
        span: Some(Span::new(ss_base, size)),
        pinned: true,
        thread: Some(thread),
    });
    out.regions.push(guard(format!("elevated.ss{thread}.guard-hi"), ss_base + size));
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LaunchRequest {
    pub env: BTreeMap<String, String>,
    pub binary_pages: Vec<Vec<u8>>,
}

pub fn decide_task_kind(req: &LaunchRequest) -> TaskKind {
    match req.env.get("INVERSOS") {
        Some(v) if v == "1" => TaskKind::Elevated,
        _ => TaskKind::Legacy,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum LaunchError {
    #[error("page {page}: length is not a multiple of 4")]
    UnalignedPage { page: usize },
    #[error("page {page} contains {} forbidden instruction(s)", verdict.violations.len())]
    Denied { page: usize, verdict: ScanVerdict },
}

/// Decides the task kind and, for elevated tasks, scans every code page.
pub fn launch(req: &LaunchRequest, allow: &Allowlist) -> Result<TaskKind, LaunchError> {
    let kind = decide_task_kind(req);
    if kind == TaskKind::Legacy {
        return Ok(kind);
    }
    let verdicts = scanner::scan_task(&req.binary_pages, allow)
        .map_err(|e| LaunchError::UnalignedPage { page: e.page })?;
    if let Some((page, v)) = verdicts.into_iter().enumerate().find(|(_, v)| !v.allowed) {
        return Err(LaunchError::Denied { page, verdict: v });
    }
    Ok(kind)
}
