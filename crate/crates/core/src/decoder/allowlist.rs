use std::collections::HashSet;
use std::str::FromStr;

use thiserror::Error;

use super::{CacheOpId, PStateField, SysRegId};

const DEFAULT_ALLOWLIST: &str = include_str!("../../config/default_allowlist.txt");

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AllowlistError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Operands of `MRS`/`MSR`/`DC`/`IC` that stay legal in elevated code.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Allowlist {
    read: HashSet<SysRegId>,
    write: HashSet<SysRegId>,
    pstate: HashSet<PStateField>,
    cacheops: HashSet<CacheOpId>,
}

impl Allowlist {
    /// Allows nothing: every privileged category is forbidden outright.
    pub fn empty() -> Self {
        Allowlist {
            read: HashSet::new(),
            write: HashSet::new(),
            pstate: HashSet::new(),
            cacheops: HashSet::new(),
        }
    }

    /// The EL0-accessible set shipped in `config/default_allowlist.txt`.
    pub fn el0_default() -> Self {
        DEFAULT_ALLOWLIST.parse().expect("bundled allowlist parses")
    }

    pub fn permits_read(&self, reg: SysRegId) -> bool {
        self.read.contains(&reg)
    }

    pub fn permits_write(&self, reg: SysRegId) -> bool {
        self.write.contains(&reg)
    }

    pub fn permits_pstate(&self, field: PStateField) -> bool {
        self.pstate.contains(&field)
    }

    pub fn permits_cacheop(&self, op: CacheOpId) -> bool {
        self.cacheops.contains(&op)
    }

    pub fn len(&self) -> usize {
        self.read.len() + self.write.len() + self.pstate.len() + self.cacheops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Default for Allowlist {
    fn default() -> Self {
        Allowlist::el0_default()
    }
}

impl FromStr for Allowlist {
    type Err = AllowlistError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let mut out = Allowlist::empty();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| AllowlistError::Parse { line: idx + 1, message };
            let toks: Vec<&str> = line.split_whitespace().collect();
            match toks.as_slice() {
                ["sysreg", name, rest @ ..] => {
                    let read_only = match rest {
                        [] => false,
                        ["ro"] => true,
                        _ => return Err(err(format!("unexpected tokens after `{name}`"))),
                    };
                    if name.to_ascii_uppercase().starts_with("PSTATE.") {
                        let field = PStateField::from_name(name)
                            .ok_or_else(|| err(format!("unknown PSTATE field `{name}`")))?;
                        out.pstate.insert(field);
                    } else {
                        let reg = SysRegId::from_name(name)
                            .ok_or_else(|| err(format!("unknown system register `{name}`")))?;
                        out.read.insert(reg);
                        if !read_only {
                            out.write.insert(reg);
                        }
                    }
                }
                ["cacheop", name] => {
                    let op = CacheOpId::from_name(name)
                        .ok_or_else(|| err(format!("unknown cache operation `{name}`")))?;
                    out.cacheops.insert(op);
                }
                _ => return Err(err(format!("expected `sysreg <NAME> [ro]` or `cacheop <NAME>`, got `{line}`"))),
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_parses() {
        let a = Allowlist::el0_default();
        let tpidr = SysRegId::from_name("TPIDR_EL0").unwrap();
        let ctr = SysRegId::from_name("CTR_EL0").unwrap();
        assert!(a.permits_read(tpidr) && a.permits_write(tpidr));
        assert!(a.permits_read(ctr) && !a.permits_write(ctr));
        assert!(a.permits_cacheop(CacheOpId::from_name("DC_ZVA").unwrap()));
        assert!(!a.permits_cacheop(CacheOpId::from_name("IC_IALLU").unwrap()));
        assert!(!a.permits_pstate(PStateField::PAN));
    }

    #[test]
    fn rejects_garbage() {
        let e = "sysreg\n".parse::<Allowlist>().unwrap_err();
        assert_eq!(e, AllowlistError::Parse { line: 1, message: "expected `sysreg <NAME> [ro]` or `cacheop <NAME>`, got `sysreg`".into() });
        assert!("sysreg NOT_A_REG".parse::<Allowlist>().is_err());
        assert!("cacheop DC_ZVA extra".parse::<Allowlist>().is_err());
    }
}
