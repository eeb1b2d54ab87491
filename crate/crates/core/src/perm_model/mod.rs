//! Architectural model of AArch64 stage-1 access permission checks, limited
//! to the bits privilege inversion depends on: `AP[2:1]`, `UXN`/`PXN`, the
//! hierarchical `APTable`/`UXNTable`/`PXNTable` bits, and the `PAN`, `UAO`,
//! `TCR_EL1.HPD{0,1}` and `TCR_EL1.E0PD{0,1}` controls.
//!
//! There is no address translation here. A [`WalkPath`] is the list of
//! attributes a walk would have collected for one page.

mod audit;

pub use audit::{audit_isolation, audit_with_states, AuditError, AuditReport, CellClass, AuditCell, Finding};

use std::fmt;

/// Last-level descriptor attributes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct LeafAttrs {
    /// Unprivileged data access enabled when set.
    pub ap1: bool,
    /// Writes disabled when set.
    pub ap2: bool,
    pub uxn: bool,
    pub pxn: bool,
    /// Software bit 63 marking kernel memory. Ignored by the MMU.
    pub kernel_tag: bool,
}

/// Hierarchical attributes of one top- or mid-level table descriptor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct TableAttrs {
    /// Disallows unprivileged data access when set.
    pub aptable0: bool,
    /// Disallows writes when set.
    pub aptable1: bool,
    pub uxntable: bool,
    pub pxntable: bool,
}

impl TableAttrs {
    pub const NONE: TableAttrs =
        TableAttrs { aptable0: false, aptable1: false, uxntable: false, pxntable: false };

    pub const UNPRIV_BLOCKED: TableAttrs =
        TableAttrs { aptable0: true, aptable1: false, uxntable: false, pxntable: false };

    pub fn is_clear(&self) -> bool {
        *self == TableAttrs::NONE
    }
}

/// Attributes encountered on the way to one page. `tables` may be empty for
/// the largest block mappings, which have no table descriptors above them.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct WalkPath {
    pub tables: Vec<TableAttrs>,
    pub leaf: LeafAttrs,
}

impl WalkPath {
    pub fn leaf(leaf: LeafAttrs) -> Self {
        WalkPath { tables: Vec::new(), leaf }
    }
}

/// Leaf attributes after hierarchical restrictions were folded in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct EffectiveAttrs {
    pub ap1: bool,
    pub ap2: bool,
    pub uxn: bool,
    pub pxn: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ExceptionLevel {
    El0,
    /// EL1 on `SP_EL0`: where elevated tasks run.
    El1t,
    /// EL1 on `SP_EL1`: where the kernel runs.
    El1h,
}

impl ExceptionLevel {
    pub fn is_privileged(self) -> bool {
        !matches!(self, ExceptionLevel::El0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CpuSecState {
    pub el: ExceptionLevel,
    pub pan: bool,
    pub uao: bool,
    pub hpd0: bool,
    pub hpd1: bool,
    pub e0pd0: bool,
    pub e0pd1: bool,
}

impl CpuSecState {
    pub fn new(el: ExceptionLevel) -> Self {
        CpuSecState { el, pan: false, uao: false, hpd0: false, hpd1: false, e0pd0: false, e0pd1: false }
    }

    pub fn hpd(&self, half: Half) -> bool {
        match half {
            Half::Lower => self.hpd0,
            Half::Upper => self.hpd1,
        }
    }

    pub fn e0pd(&self, half: Half) -> bool {
        match half {
            Half::Lower => self.e0pd0,
            Half::Upper => self.e0pd1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AccessKind {
    Read,
    Write,
    InstrFetch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AccessVia {
    Regular,
    /// `LDTR*`/`STTR*`.
    Lsu,
}

/// Which translation table base register covers the address.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Half {
    /// `TTBR0_EL1`
    Lower,
    /// `TTBR1_EL1`
    Upper,
}

impl Half {
    pub fn of_address(addr: u64) -> Half {
        if addr >> 63 == 1 {
            Half::Upper
        } else {
            Half::Lower
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AccessRequest {
    pub kind: AccessKind,
    /// Privilege of the executing context. Has no effect at EL0.
    pub privileged: bool,
    pub via: AccessVia,
    pub half: Half,
}

impl AccessRequest {
    pub fn new(kind: AccessKind, privileged: bool, via: AccessVia, half: Half) -> Self {
        debug_assert!(!(kind == AccessKind::InstrFetch && via == AccessVia::Lsu));
        AccessRequest { kind, privileged, via, half }
    }

    pub fn fetch(privileged: bool, half: Half) -> Self {
        AccessRequest { kind: AccessKind::InstrFetch, privileged, via: AccessVia::Regular, half }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FaultReason {
    E0pdFault,
    PanFault,
    UnprivDataFault,
    WriteFault,
    UxnFault,
    PxnFault,
}

impl fmt::Display for FaultReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FaultReason::E0pdFault => "E0pdFault",
            FaultReason::PanFault => "PanFault",
            FaultReason::UnprivDataFault => "UnprivDataFault",
            FaultReason::WriteFault => "WriteFault",
            FaultReason::UxnFault => "UxnFault",
            FaultReason::PxnFault => "PxnFault",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Verdict {
    Allow,
    Fault(FaultReason),
}

impl Verdict {
    pub fn is_allow(self) -> bool {
        self == Verdict::Allow
    }

    pub fn fault(self) -> Option<FaultReason> {
        match self {
            Verdict::Allow => None,
            Verdict::Fault(r) => Some(r),
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Allow => f.write_str("allow"),
            Verdict::Fault(r) => r.fmt(f),
        }
    }
}

/// Folds the table attributes into the leaf. With `hpd_enabled` the table
/// bits are ignored and the leaf is returned as is.
pub fn effective_attrs(path: &WalkPath, hpd_enabled: bool) -> EffectiveAttrs {
    let leaf = path.leaf;
    let mut eff = EffectiveAttrs { ap1: leaf.ap1, ap2: leaf.ap2, uxn: leaf.uxn, pxn: leaf.pxn };
    if hpd_enabled {
        return eff;
    }
    for t in &path.tables {
        eff.ap1 &= !t.aptable0;
        eff.ap2 |= t.aptable1;
        eff.uxn |= t.uxntable;
        eff.pxn |= t.pxntable;
    }
    eff
}

/// Decides one access.
///
/// Order: E0PD, then the hierarchy merge, then execute permissions for
/// fetches or data permissions for loads and stores. `PAN` applies to every
/// data access that is checked with privileged permissions, which includes
/// `LDTR`/`STTR` while `UAO` is set.
pub fn check_access(state: &CpuSecState, path: &WalkPath, req: &AccessRequest) -> Verdict {
    let privileged = req.privileged && state.el.is_privileged();

    if !privileged && state.e0pd(req.half) {
        return Verdict::Fault(FaultReason::E0pdFault);
    }

    let eff = effective_attrs(path, state.hpd(req.half));

    if req.kind == AccessKind::InstrFetch {
        return match (privileged, eff.uxn, eff.pxn) {
            (false, true, _) => Verdict::Fault(FaultReason::UxnFault),
            (true, _, true) => Verdict::Fault(FaultReason::PxnFault),
            _ => Verdict::Allow,
        };
    }

    let as_unprivileged = !privileged || (req.via == AccessVia::Lsu && !state.uao);
    if as_unprivileged {
        if !eff.ap1 {
            return Verdict::Fault(FaultReason::UnprivDataFault);
        }
    } else if state.pan && eff.ap1 {
        return Verdict::Fault(FaultReason::PanFault);
    }

    if req.kind == AccessKind::Write && eff.ap2 {
        return Verdict::Fault(FaultReason::WriteFault);
    }
    Verdict::Allow
}

#[cfg(test)]
mod tests {
    use super::*;

    fn elevated() -> CpuSecState {
        CpuSecState { pan: true, ..CpuSecState::new(ExceptionLevel::El1t) }
    }

    fn leaf(ap1: bool, ap2: bool) -> WalkPath {
        WalkPath::leaf(LeafAttrs { ap1, ap2, uxn: true, pxn: true, kernel_tag: false })
    }

    #[test]
    fn effective_attrs_examples() {
        let path = WalkPath {
            tables: vec![TableAttrs::UNPRIV_BLOCKED],
            leaf: LeafAttrs { ap1: true, ..Default::default() },
        };
        assert!(effective_attrs(&path, true).ap1);
        assert!(!effective_attrs(&path, false).ap1);

        let l = LeafAttrs { ap1: true, ap2: false, uxn: true, pxn: false, kernel_tag: true };
        let eff = effective_attrs(&WalkPath::leaf(l), false);
        assert_eq!(eff, EffectiveAttrs { ap1: true, ap2: false, uxn: true, pxn: false });
    }

    #[test]
    fn check_access_examples() {
        let req = |kind, via| AccessRequest::new(kind, true, via, Half::Lower);
        assert_eq!(
            check_access(&elevated(), &leaf(true, false), &req(AccessKind::Write, AccessVia::Regular)),
            Verdict::Fault(FaultReason::PanFault)
        );
        assert_eq!(
            check_access(&elevated(), &leaf(true, false), &req(AccessKind::Write, AccessVia::Lsu)),
            Verdict::Allow
        );
        assert_eq!(
            check_access(&elevated(), &leaf(false, false), &req(AccessKind::Read, AccessVia::Lsu)),
            Verdict::Fault(FaultReason::UnprivDataFault)
        );
    }

    #[test]
    fn uao_makes_lsu_behave_like_regular() {
        let st = CpuSecState { uao: true, ..elevated() };
        let req = AccessRequest::new(AccessKind::Write, true, AccessVia::Lsu, Half::Lower);
        assert_eq!(check_access(&st, &leaf(true, false), &req), Verdict::Fault(FaultReason::PanFault));
        assert_eq!(check_access(&st, &leaf(false, false), &req), Verdict::Allow);
    }

    #[test]
    fn el0_ignores_requested_privilege() {
        let st = CpuSecState::new(ExceptionLevel::El0);
        let req = AccessRequest::new(AccessKind::Read, true, AccessVia::Regular, Half::Lower);
        assert_eq!(check_access(&st, &leaf(false, false), &req), Verdict::Fault(FaultReason::UnprivDataFault));
    }

    #[test]
    fn e0pd_blocks_only_its_half() {
        let st = CpuSecState { e0pd1: true, ..CpuSecState::new(ExceptionLevel::El0) };
        let up = AccessRequest::new(AccessKind::Read, false, AccessVia::Regular, Half::Upper);
        let low = AccessRequest { half: Half::Lower, ..up };
        assert_eq!(check_access(&st, &leaf(true, false), &up), Verdict::Fault(FaultReason::E0pdFault));
        assert_eq!(check_access(&st, &leaf(true, false), &low), Verdict::Allow);
    }

    #[test]
    fn fetch_permissions() {
        let code = WalkPath::leaf(LeafAttrs { ap1: false, ap2: true, uxn: true, pxn: false, kernel_tag: false });
        assert_eq!(check_access(&elevated(), &code, &AccessRequest::fetch(true, Half::Lower)), Verdict::Allow);
        let el0 = CpuSecState::new(ExceptionLevel::El0);
        assert_eq!(
            check_access(&el0, &code, &AccessRequest::fetch(false, Half::Lower)),
            Verdict::Fault(FaultReason::UxnFault)
        );
    }
}
