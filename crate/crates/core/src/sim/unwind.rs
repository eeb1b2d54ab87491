//! `longjmp` support for the compact shadow stack: walk x28 down one slot
//! at a time until the slot below it holds the target return address. The
//! saved x28 from `setjmp` is never written back directly.

use thiserror::Error;

use super::{EventKind, FaultKind, Machine};
use crate::perm_model::AccessVia;
use crate::policy::{AccessFault, TaskKind};
use crate::rewriter::SLOT;

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum UnwindError {
    #[error("longjmp unwinding needs an elevated task")]
    NotElevated,
    #[error("saved x28 {0:#x} is outside the shadow stack")]
    SavedOutsideSpan(u64),
    #[error("shadow stack underflow at {at:#x}")]
    Underflow { at: u64 },
    #[error("shadow stack read at {at:#x} failed: {fault}")]
    Access { at: u64, fault: AccessFault },
}

/// Positions x28 just above the newest slot holding `target_ra` and
/// returns the new value.
pub fn longjmp_unwind(m: &mut Machine, target_ra: u64, saved_x28: u64) -> Result<u64, UnwindError> {
    if m.task != TaskKind::Elevated {
        return Err(UnwindError::NotElevated);
    }
    let span = m.layout.shadow_stack(m.thread).and_then(|r| r.span).ok_or(UnwindError::SavedOutsideSpan(saved_x28))?;
    if saved_x28 < span.base || saved_x28 > span.end() {
        return Err(UnwindError::SavedOutsideSpan(saved_x28));
    }
    let mut cur = m.regs[28];
    loop {
        let slot = cur.wrapping_sub(SLOT);
        match m.load(slot, SLOT, AccessVia::Lsu) {
            Ok(v) if v == target_ra => {
                m.regs[28] = cur;
                let pc = m.pc;
                m.event(EventKind::Unwind, pc, format!("x28={cur:#x}"));
                return Ok(cur);
            }
            Ok(_) => cur = slot,
            Err(FaultKind::Access { fault: AccessFault::Guard, .. }) => return Err(UnwindError::Underflow { at: slot }),
            Err(FaultKind::Access { fault, .. }) => return Err(UnwindError::Access { at: slot, fault }),
            Err(_) => unreachable!("loads only fail with access faults"),
        }
    }
}
