//! Permission rules restated one sentence at a time, independent of
//! check_access.

use privinv::perm_model::{
    check_access, AccessKind, AccessRequest, AccessVia, CpuSecState, ExceptionLevel, FaultReason, Half, LeafAttrs,
    TableAttrs, Verdict, WalkPath,
};

/// Each sentence of the permission rules as a separate denial, then the
/// first one in priority order wins.
pub fn oracle(s: &CpuSecState, path: &WalkPath, r: &AccessRequest) -> Verdict {
    let priv_mode = s.el != ExceptionLevel::El0 && r.privileged;
    let (hpd, e0pd) = match r.half {
        Half::Lower => (s.hpd0, s.e0pd0),
        Half::Upper => (s.hpd1, s.e0pd1),
    };
    let fetch = r.kind == AccessKind::InstrFetch;
    let write = r.kind == AccessKind::Write;
    // LSU instructions check unprivileged permissions even in privileged
    // mode, unless UAO makes them act as regular loads and stores.
    let lsu_as_unpriv = r.via == AccessVia::Lsu && !(priv_mode && s.uao);
    let checked_unpriv = !priv_mode || lsu_as_unpriv;

    let any_table = |f: fn(&TableAttrs) -> bool| !hpd && path.tables.iter().any(f);
    let l = path.leaf;
    let unpriv_exec_off = l.uxn || any_table(|t| t.uxntable);
    let priv_exec_off = l.pxn || any_table(|t| t.pxntable);
    let unpriv_data_off = !l.ap1 || any_table(|t| t.aptable0);
    let write_off = l.ap2 || any_table(|t| t.aptable1);

    let mut denials = Vec::new();
    if !priv_mode && e0pd {
        denials.push(FaultReason::E0pdFault);
    }
    if fetch && !priv_mode && unpriv_exec_off {
        denials.push(FaultReason::UxnFault);
    }
    if fetch && priv_mode && priv_exec_off {
        denials.push(FaultReason::PxnFault);
    }
    if !fetch && checked_unpriv && unpriv_data_off {
        denials.push(FaultReason::UnprivDataFault);
    }
    // PAN: privileged loads and stores other than LSU to memory that is
    // accessible in unprivileged mode.
    if !fetch && s.pan && priv_mode && !lsu_as_unpriv && !unpriv_data_off {
        denials.push(FaultReason::PanFault);
    }
    if write && write_off {
        denials.push(FaultReason::WriteFault);
    }
    denials.first().map_or(Verdict::Allow, |&f| Verdict::Fault(f))
}

fn bits4(n: u32) -> [bool; 4] {
    [n & 1 != 0, n & 2 != 0, n & 4 != 0, n & 8 != 0]
}

pub const REQS: [(AccessKind, AccessVia); 5] = [
    (AccessKind::Read, AccessVia::Regular),
    (AccessKind::Write, AccessVia::Regular),
    (AccessKind::Read, AccessVia::Lsu),
    (AccessKind::Write, AccessVia::Lsu),
    (AccessKind::InstrFetch, AccessVia::Regular),
];

/// Every combination for one half: 2 contexts x 16 states x 5 requests x
/// 16 leaves x 16 tables = 40960 cases. Returns (cases, mismatches).
pub fn enumerate(half: Half) -> (usize, Vec<String>) {
    let mut cases = 0;
    let mut bad = Vec::new();
    for (el, privileged) in [(ExceptionLevel::El0, false), (ExceptionLevel::El1t, true)] {
        for st in 0..16 {
            let [pan, uao, hpd, e0pd] = bits4(st);
            let mut s = CpuSecState { pan, uao, ..CpuSecState::new(el) };
            match half {
                Half::Lower => (s.hpd0, s.e0pd0) = (hpd, e0pd),
                Half::Upper => (s.hpd1, s.e0pd1) = (hpd, e0pd),
            }
            for (kind, via) in REQS {
                let req = AccessRequest { kind, privileged, via, half };
                for lb in 0..16 {
                    let [ap1, ap2, uxn, pxn] = bits4(lb);
                    let leaf = LeafAttrs { ap1, ap2, uxn, pxn, kernel_tag: false };
                    for tb in 0..16 {
                        let [aptable0, aptable1, uxntable, pxntable] = bits4(tb);
                        let path = WalkPath { tables: vec![TableAttrs { aptable0, aptable1, uxntable, pxntable }], leaf };
                        cases += 1;
                        let (got, want) = (check_access(&s, &path, &req), oracle(&s, &path, &req));
                        if got != want {
                            bad.push(format!("{s:?} {path:?} {req:?}: got {got}, oracle {want}"));
                        }
                    }
                }
            }
        }
    }
    (cases, bad)
}

