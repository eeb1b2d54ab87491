//! Decoder output against words produced by a reference assembler.

use std::collections::BTreeSet;

use privinv::decoder::{decode, is_forbidden, Allowlist, InstrClass, InstrWord};

const FIXTURES: &str = include_str!("../fixtures/decode_fixtures.txt");

fn fixtures() -> Vec<(u32, String, String)> {
    FIXTURES
        .lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|l| {
            let (body, asm) = l.split_once("  # ").expect("fixture line has an asm comment");
            let (hex, class) = body.split_once(' ').unwrap();
            (u32::from_str_radix(hex, 16).unwrap(), class.trim().to_string(), asm.to_string())
        })
        .collect()
}

fn tag(c: &InstrClass) -> String {
    let s = format!("{c:?}");
    s.split(['(', ' ', '{']).next().unwrap().to_string()
}

#[test]
fn every_fixture_matches() {
    let fx = fixtures();
    assert!(fx.len() >= 60);
    let bad: Vec<String> = fx
        .iter()
        .filter_map(|(w, want, asm)| {
            let got = decode(InstrWord(*w)).to_string();
            (got != *want).then(|| format!("{w:08x} `{asm}`: want `{want}`, got `{got}`"))
        })
        .collect();
    assert!(bad.is_empty(), "{}", bad.join("\n"));
}

#[test]
fn fixtures_span_every_class() {
    let seen: BTreeSet<String> = fixtures().iter().map(|(w, ..)| tag(&decode(InstrWord(*w)))).collect();
    let all = [
        "LsuLoad", "LsuStore", "Mrs", "Msr", "CacheOp", "Tlbi", "Hvc", "Smc", "Svc", "At", "Eret",
        "PredRestrict", "MteTagMultiple", "Brb", "SysOther", "BtiLabel", "Ret", "Br", "Blr", "Bl", "B",
        "BCond", "AndMaskTopBit", "RegularLoad", "RegularStore", "Other",
    ];
    for t in all {
        assert!(seen.contains(t), "no fixture decodes to {t}");
    }
}

#[test]
fn every_privileged_category_has_a_forbidden_fixture() {
    let allow = Allowlist::default();
    let forbidden: BTreeSet<String> = fixtures()
        .iter()
        .map(|(w, ..)| decode(InstrWord(*w)))
        .filter(|c| is_forbidden(c, &allow))
        .map(|c| tag(&c))
        .collect();
    for t in ["Mrs", "Msr", "CacheOp", "Tlbi", "Hvc", "Smc", "At", "Eret", "PredRestrict", "MteTagMultiple", "Brb", "SysOther"] {
        assert!(forbidden.contains(t), "no forbidden fixture for {t}");
    }
}
