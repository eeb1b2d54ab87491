use privinv::perm_model::{audit_with_states, AuditReport, TableAttrs};
use privinv::policy::{configure_system, IsolationMode, LayoutParams, MemoryLayout, Region, RegionRole, TaskStates};

pub fn system(mode: IsolationMode) -> (MemoryLayout, TaskStates) {
    configure_system(&LayoutParams { mode, ..Default::default() }).unwrap()
}

fn region_mut<'a>(l: &'a mut MemoryLayout, role: RegionRole, name_prefix: &str) -> &'a mut Region {
    l.regions.iter_mut().find(|r| r.role == role && r.name.starts_with(name_prefix)).unwrap()
}

/// Each entry removes exactly one protection bit from the default system.
pub fn weakened() -> Vec<(&'static str, AuditReport)> {
    let mut out = Vec::new();

    let (mut l, s) = system(IsolationMode::Hpds);
    for r in l.regions.iter_mut().filter(|r| r.role.is_kernel()) {
        let p = r.path.as_mut().unwrap();
        p.tables = vec![TableAttrs::NONE; p.tables.len()];
    }
    out.push(("kernel APTable[0] cleared (HPDS)", audit_with_states(&l, IsolationMode::Hpds, &s).unwrap()));

    let (l, mut s) = system(IsolationMode::E0pd);
    s.legacy.e0pd1 = false;
    out.push(("legacy E0PD1 off", audit_with_states(&l, IsolationMode::E0pd, &s).unwrap()));

    let (l, mut s) = system(IsolationMode::Hpds);
    s.elevated.pan = false;
    out.push(("elevated PAN off", audit_with_states(&l, IsolationMode::Hpds, &s).unwrap()));

    let (mut l, s) = system(IsolationMode::Hpds);
    region_mut(&mut l, RegionRole::ShadowStack, "elevated").path.as_mut().unwrap().leaf.ap1 = false;
    out.push(("shadow stack AP[1] cleared", audit_with_states(&l, IsolationMode::Hpds, &s).unwrap()));

    let (mut l, s) = system(IsolationMode::Hpds);
    region_mut(&mut l, RegionRole::TaskData, "elevated.data").path.as_mut().unwrap().leaf.ap1 = true;
    out.push(("elevated data AP[1] set", audit_with_states(&l, IsolationMode::Hpds, &s).unwrap()));

    let (mut l, s) = system(IsolationMode::E0pd);
    region_mut(&mut l, RegionRole::ShadowStack, "elevated").path.as_mut().unwrap().leaf.pxn = false;
    out.push(("shadow stack PXN cleared", audit_with_states(&l, IsolationMode::E0pd, &s).unwrap()));

    let (mut l, s) = system(IsolationMode::Hpds);
    region_mut(&mut l, RegionRole::KernelCode, "kernel").path.as_mut().unwrap().leaf.uxn = false;
    out.push(("kernel text UXN cleared", audit_with_states(&l, IsolationMode::Hpds, &s).unwrap()));

    out
}

