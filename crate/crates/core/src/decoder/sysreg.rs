//! System register, PSTATE field and cache-maintenance operand naming.

use std::fmt;
use std::str::FromStr;

/// Packed `op0:op1:CRn:CRm:op2` system register selector, i.e. bits [20:5]
/// of an MRS/MSR (register) encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SysRegId(pub u16);

impl SysRegId {
    pub const fn new(op0: u8, op1: u8, crn: u8, crm: u8, op2: u8) -> Self {
        SysRegId(
            ((op0 as u16 & 3) << 14)
                | ((op1 as u16 & 7) << 11)
                | ((crn as u16 & 15) << 7)
                | ((crm as u16 & 15) << 3)
                | (op2 as u16 & 7),
        )
    }

    pub fn op0(self) -> u8 {
        (self.0 >> 14) as u8 & 3
    }
    pub fn op1(self) -> u8 {
        (self.0 >> 11) as u8 & 7
    }
    pub fn crn(self) -> u8 {
        (self.0 >> 7) as u8 & 15
    }
    pub fn crm(self) -> u8 {
        (self.0 >> 3) as u8 & 15
    }
    pub fn op2(self) -> u8 {
        self.0 as u8 & 7
    }

    pub fn name(self) -> Option<&'static str> {
        SYSREGS.iter().find(|(_, id)| *id == self).map(|(n, _)| *n)
    }

    pub fn from_name(name: &str) -> Option<Self> {
        let upper = name.to_ascii_uppercase();
        if let Some((_, id)) = SYSREGS.iter().find(|(n, _)| *n == upper) {
            return Some(*id);
        }
        parse_generic(&upper, 'S').and_then(|f| {
            (f[0] >= 2).then(|| SysRegId::new(f[0], f[1], f[2], f[3], f[4]))
        })
    }
}

impl fmt::Display for SysRegId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.name() {
            Some(n) => f.write_str(n),
            None => write!(
                f,
                "S{}_{}_C{}_C{}_{}",
                self.op0(),
                self.op1(),
                self.crn(),
                self.crm(),
                self.op2()
            ),
        }
    }
}

/// `S<op0>_<op1>_C<n>_C<m>_<op2>` (sysregs) or `S1_<op1>_C<n>_C<m>_<op2>` (sys ops).
fn parse_generic(s: &str, lead: char) -> Option<[u8; 5]> {
    let rest = s.strip_prefix(lead)?;
    let parts: Vec<&str> = rest.split('_').collect();
    if parts.len() != 5 {
        return None;
    }
    let num = |p: &str, c: bool| -> Option<u8> {
        let p = if c { p.strip_prefix('C')? } else { p };
        p.parse::<u8>().ok()
    };
    let v = [
        num(parts[0], false)?,
        num(parts[1], false)?,
        num(parts[2], true)?,
        num(parts[3], true)?,
        num(parts[4], false)?,
    ];
    (v[0] <= 3 && v[1] <= 7 && v[2] <= 15 && v[3] <= 15 && v[4] <= 7).then_some(v)
}

const SYSREGS: &[(&str, SysRegId)] = &[
    // EL0-accessible
    ("TPIDR_EL0", SysRegId::new(3, 3, 13, 0, 2)),
    ("TPIDRRO_EL0", SysRegId::new(3, 3, 13, 0, 3)),
    ("NZCV", SysRegId::new(3, 3, 4, 2, 0)),
    ("DAIF", SysRegId::new(3, 3, 4, 2, 1)),
    ("DIT", SysRegId::new(3, 3, 4, 2, 5)),
    ("SSBS", SysRegId::new(3, 3, 4, 2, 6)),
    ("TCO", SysRegId::new(3, 3, 4, 2, 7)),
    ("FPCR", SysRegId::new(3, 3, 4, 4, 0)),
    ("FPSR", SysRegId::new(3, 3, 4, 4, 1)),
    ("CTR_EL0", SysRegId::new(3, 3, 0, 0, 1)),
    ("DCZID_EL0", SysRegId::new(3, 3, 0, 0, 7)),
    ("CNTFRQ_EL0", SysRegId::new(3, 3, 14, 0, 0)),
    ("CNTPCT_EL0", SysRegId::new(3, 3, 14, 0, 1)),
    ("CNTVCT_EL0", SysRegId::new(3, 3, 14, 0, 2)),
    // EL1
    ("MIDR_EL1", SysRegId::new(3, 0, 0, 0, 0)),
    ("SCTLR_EL1", SysRegId::new(3, 0, 1, 0, 0)),
    ("TTBR0_EL1", SysRegId::new(3, 0, 2, 0, 0)),
    ("TTBR1_EL1", SysRegId::new(3, 0, 2, 0, 1)),
    ("TCR_EL1", SysRegId::new(3, 0, 2, 0, 2)),
    ("SPSR_EL1", SysRegId::new(3, 0, 4, 0, 0)),
    ("ELR_EL1", SysRegId::new(3, 0, 4, 0, 1)),
    ("SP_EL0", SysRegId::new(3, 0, 4, 1, 0)),
    ("SPSEL", SysRegId::new(3, 0, 4, 2, 0)),
    ("CURRENTEL", SysRegId::new(3, 0, 4, 2, 2)),
    ("PAN", SysRegId::new(3, 0, 4, 2, 3)),
    ("UAO", SysRegId::new(3, 0, 4, 2, 4)),
    ("ESR_EL1", SysRegId::new(3, 0, 5, 2, 0)),
    ("FAR_EL1", SysRegId::new(3, 0, 6, 0, 0)),
    ("MAIR_EL1", SysRegId::new(3, 0, 10, 2, 0)),
    ("VBAR_EL1", SysRegId::new(3, 0, 12, 0, 0)),
    ("TPIDR_EL1", SysRegId::new(3, 0, 13, 0, 4)),
    ("MDSCR_EL1", SysRegId::new(2, 0, 0, 2, 2)),
];

/// Target of `MSR <pstatefield>, #imm`, identified by its `op1:op2` pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PStateField {
    pub op1: u8,
    pub op2: u8,
}

const PSTATE_FIELDS: &[(&str, u8, u8)] = &[
    ("UAO", 0, 3),
    ("PAN", 0, 4),
    ("SPSEL", 0, 5),
    ("SSBS", 3, 1),
    ("DIT", 3, 2),
    ("TCO", 3, 4),
    ("DAIFSET", 3, 6),
    ("DAIFCLR", 3, 7),
];

impl PStateField {
    pub const PAN: PStateField = PStateField { op1: 0, op2: 4 };
    pub const UAO: PStateField = PStateField { op1: 0, op2: 3 };

    pub fn name(self) -> Option<&'static str> {
        PSTATE_FIELDS
            .iter()
            .find(|(_, a, b)| *a == self.op1 && *b == self.op2)
            .map(|(n, _, _)| *n)
    }

    /// Accepts `PAN` or `PSTATE.PAN`.
    pub fn from_name(name: &str) -> Option<Self> {
        let upper = name.to_ascii_uppercase();
        let bare = upper.strip_prefix("PSTATE.").unwrap_or(&upper);
        PSTATE_FIELDS
            .iter()
            .find(|(n, _, _)| *n == bare)
            .map(|&(_, op1, op2)| PStateField { op1, op2 })
    }
}

impl fmt::Display for PStateField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.name() {
            Some(n) => write!(f, "PSTATE.{n}"),
            None => write!(f, "PSTATE.{}_{}", self.op1, self.op2),
        }
    }
}

/// `SYS #op1, C7, Cm, #op2` cache-maintenance selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CacheOpId {
    pub op1: u8,
    pub crm: u8,
    pub op2: u8,
}

const CACHE_OPS: &[(&str, u8, u8, u8)] = &[
    ("IC_IALLUIS", 0, 1, 0),
    ("IC_IALLU", 0, 5, 0),
    ("IC_IVAU", 3, 5, 1),
    ("DC_IVAC", 0, 6, 1),
    ("DC_ISW", 0, 6, 2),
    ("DC_CSW", 0, 10, 2),
    ("DC_CISW", 0, 14, 2),
    ("DC_ZVA", 3, 4, 1),
    ("DC_GVA", 3, 4, 3),
    ("DC_GZVA", 3, 4, 4),
    ("DC_CVAC", 3, 10, 1),
    ("DC_CVAU", 3, 11, 1),
    ("DC_CVAP", 3, 12, 1),
    ("DC_CVADP", 3, 13, 1),
    ("DC_CIVAC", 3, 14, 1),
];

impl CacheOpId {
    pub fn name(self) -> Option<&'static str> {
        CACHE_OPS
            .iter()
            .find(|(_, a, b, c)| *a == self.op1 && *b == self.crm && *c == self.op2)
            .map(|(n, ..)| *n)
    }

    pub fn from_name(name: &str) -> Option<Self> {
        let upper = name.to_ascii_uppercase().replace([' ', '.'], "_");
        if let Some(&(_, op1, crm, op2)) = CACHE_OPS.iter().find(|(n, ..)| *n == upper) {
            return Some(CacheOpId { op1, crm, op2 });
        }
        parse_generic(&upper, 'S').and_then(|f| {
            (f[0] == 1 && f[2] == 7).then_some(CacheOpId { op1: f[1], crm: f[3], op2: f[4] })
        })
    }
}

impl fmt::Display for CacheOpId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.name() {
            Some(n) => f.write_str(n),
            None => write!(f, "S1_{}_C7_C{}_{}", self.op1, self.crm, self.op2),
        }
    }
}

/// Either form of MSR destination.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MsrTarget {
    Reg(SysRegId),
    PState(PStateField),
}

impl fmt::Display for MsrTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MsrTarget::Reg(r) => r.fmt(f),
            MsrTarget::PState(p) => p.fmt(f),
        }
    }
}

impl FromStr for SysRegId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SysRegId::from_name(s).ok_or_else(|| format!("unknown system register `{s}`"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for (name, id) in SYSREGS {
            assert_eq!(SysRegId::from_name(name), Some(*id));
            assert_eq!(id.to_string(), *name);
        }
        let anon = SysRegId::new(3, 1, 15, 2, 0);
        assert_eq!(anon.to_string(), "S3_1_C15_C2_0");
        assert_eq!(SysRegId::from_name("s3_1_c15_c2_0"), Some(anon));
    }

    #[test]
    fn pstate_and_cacheop_names() {
        assert_eq!(PStateField::from_name("pan"), Some(PStateField::PAN));
        assert_eq!(PStateField::from_name("PSTATE.UAO"), Some(PStateField::UAO));
        assert_eq!(PStateField::PAN.to_string(), "PSTATE.PAN");
        let zva = CacheOpId::from_name("dc zva").unwrap();
        assert_eq!(zva.to_string(), "DC_ZVA");
        assert_eq!(CacheOpId::from_name("S1_0_C7_C9_0").unwrap().to_string(), "S1_0_C7_C9_0");
    }

    #[test]
    fn unique_tables() {
        let mut ids: Vec<_> = SYSREGS.iter().map(|(_, id)| id.0).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), SYSREGS.len());
    }
}
