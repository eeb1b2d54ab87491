//! check_access against a rule-by-rule restatement of the architecture
//! text, plus property tests.

mod common;

use proptest::prelude::*;

use privinv::perm_model::{
    check_access, AccessKind, AccessRequest, AccessVia, CpuSecState, ExceptionLevel, FaultReason, Half, LeafAttrs,
    TableAttrs, Verdict, WalkPath,
};

use common::oracle::{enumerate, oracle, REQS};

#[test]
fn oracle_agrees_exhaustively_lower_half() {
    let (n, bad) = enumerate(Half::Lower);
    assert_eq!(n, 40960);
    assert!(n <= 1 << 16);
    assert!(bad.is_empty(), "{} mismatches, first: {}", bad.len(), bad[0]);
}

#[test]
fn oracle_agrees_exhaustively_upper_half() {
    let (n, bad) = enumerate(Half::Upper);
    assert!(bad.is_empty(), "{} mismatches of {n}, first: {}", bad.len(), bad[0]);
}

#[test]
fn elevated_examples() {
    let s = CpuSecState { pan: true, ..CpuSecState::new(ExceptionLevel::El1t) };
    let user = WalkPath::leaf(LeafAttrs { ap1: true, ..Default::default() });
    let private = WalkPath::leaf(LeafAttrs::default());
    let w = |via| AccessRequest::new(AccessKind::Write, true, via, Half::Lower);
    assert_eq!(check_access(&s, &user, &w(AccessVia::Regular)), Verdict::Fault(FaultReason::PanFault));
    assert_eq!(check_access(&s, &user, &w(AccessVia::Lsu)), Verdict::Allow);
    let r = AccessRequest::new(AccessKind::Read, true, AccessVia::Lsu, Half::Lower);
    assert_eq!(check_access(&s, &private, &r), Verdict::Fault(FaultReason::UnprivDataFault));
}

fn arb_state() -> impl Strategy<Value = CpuSecState> {
    (prop_oneof![Just(ExceptionLevel::El0), Just(ExceptionLevel::El1t), Just(ExceptionLevel::El1h)], any::<[bool; 6]>())
        .prop_map(|(el, b)| CpuSecState { el, pan: b[0], uao: b[1], hpd0: b[2], hpd1: b[3], e0pd0: b[4], e0pd1: b[5] })
}

fn arb_leaf() -> impl Strategy<Value = LeafAttrs> {
    any::<[bool; 5]>().prop_map(|b| LeafAttrs { ap1: b[0], ap2: b[1], uxn: b[2], pxn: b[3], kernel_tag: b[4] })
}

fn arb_table() -> impl Strategy<Value = TableAttrs> {
    any::<[bool; 4]>().prop_map(|b| TableAttrs { aptable0: b[0], aptable1: b[1], uxntable: b[2], pxntable: b[3] })
}

fn arb_path() -> impl Strategy<Value = WalkPath> {
    (prop::collection::vec(arb_table(), 0..4), arb_leaf()).prop_map(|(tables, leaf)| WalkPath { tables, leaf })
}

fn arb_req() -> impl Strategy<Value = AccessRequest> {
    (0..REQS.len(), any::<bool>(), any::<bool>()).prop_map(|(i, privileged, upper)| {
        let (kind, via) = REQS[i];
        AccessRequest { kind, privileged, via, half: if upper { Half::Upper } else { Half::Lower } }
    })
}

/// Sets one restrictive bit, chosen by `which`.
fn restrict(s: &mut CpuSecState, p: &mut WalkPath, req: &AccessRequest, which: usize) {
    match which {
        0 => p.leaf.ap2 = true,
        1 => p.leaf.uxn = true,
        2 => p.leaf.pxn = true,
        3..=6 => {
            if p.tables.is_empty() {
                p.tables.push(TableAttrs::NONE);
            }
            let t = &mut p.tables[0];
            match which {
                3 => t.aptable0 = true,
                4 => t.aptable1 = true,
                5 => t.uxntable = true,
                _ => t.pxntable = true,
            }
        }
        _ => match req.half {
            Half::Lower => s.e0pd0 = true,
            Half::Upper => s.e0pd1 = true,
        },
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn restrictive_bits_never_grant(mut s in arb_state(), mut p in arb_path(), req in arb_req(), which in 0usize..8) {
        if check_access(&s, &p, &req).is_allow() {
            return Ok(());
        }
        // aptable0 can lift a PAN fault by hiding the page from
        // unprivileged mode, so it is only monotone for unprivileged checks.
        let priv_regular = req.privileged && s.el.is_privileged() && (req.via == AccessVia::Regular || s.uao);
        prop_assume!(!(which == 3 && priv_regular && s.pan));
        restrict(&mut s, &mut p, &req, which);
        prop_assert!(!check_access(&s, &p, &req).is_allow());
    }

    #[test]
    fn hpd_ignores_table_bits(s in arb_state(), p in arb_path(), req in arb_req()) {
        let mut s = s;
        match req.half {
            Half::Lower => s.hpd0 = true,
            Half::Upper => s.hpd1 = true,
        }
        let bare = WalkPath { tables: vec![TableAttrs::NONE; p.tables.len()], leaf: p.leaf };
        prop_assert_eq!(check_access(&s, &p, &req), check_access(&s, &bare, &req));
    }

    #[test]
    fn kernel_tag_is_ignored(s in arb_state(), p in arb_path(), req in arb_req()) {
        let mut flipped = p.clone();
        flipped.leaf.kernel_tag = !p.leaf.kernel_tag;
        prop_assert_eq!(check_access(&s, &p, &req), check_access(&s, &flipped, &req));
    }

    #[test]
    fn oracle_agrees_on_deeper_walks(s in arb_state(), p in arb_path(), req in arb_req()) {
        prop_assert_eq!(check_access(&s, &p, &req), oracle(&s, &p, &req));
    }
}
