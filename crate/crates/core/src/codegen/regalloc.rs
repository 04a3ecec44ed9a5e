//! Deterministic linear-scan allocation with spill-everywhere rewriting.

use std::collections::{BTreeMap, HashMap};

use super::lir::{implicit_roles, live_after, uses_defs, visit_regs};
use super::{CodegenError, FrameSlot, Home, MOp, MachineFunction, MachineInstr, Mem, Reg};
use crate::abi::Role;

/// Integer allocation order: scratch first, callee-saved last.
pub fn gpr_preference() -> Vec<Role> {
    let mut v: Vec<Role> = (0..5).map(Role::Tmp).collect();
    v.extend((0..6).map(Role::Arg));
    v.extend([Role::Ret0, Role::Cs0, Role::Cs1]);
    v
}

fn fpr_preference() -> Vec<Role> {
    (8..16).chain(0..8).map(Role::F).collect()
}

#[derive(Debug, Clone, Copy)]
struct Interval {
    vreg: u32,
    start: usize,
    end: usize,
}

fn intervals(instrs: &[MachineInstr], nvregs: usize) -> Vec<Interval> {
    let live = live_after(instrs);
    let mut span: Vec<Option<(usize, usize)>> = vec![None; nvregs];
    let mut touch = |v: u32, i: usize| {
        let s = &mut span[v as usize];
        *s = Some(match *s {
            None => (i, i),
            Some((a, b)) => (a.min(i), b.max(i)),
        });
    };
    for (i, ins) in instrs.iter().enumerate() {
        let (u, d) = uses_defs(&ins.op);
        for r in u.into_iter().chain(d) {
            if let Reg::V(v) = r {
                touch(v, i);
            }
        }
        for &v in &live[i] {
            touch(v, i);
            if i + 1 < instrs.len() {
                touch(v, i + 1);
            }
        }
    }
    let mut out: Vec<Interval> = span
        .iter()
        .enumerate()
        .filter_map(|(v, s)| s.map(|(start, end)| Interval { vreg: v as u32, start, end }))
        .collect();
    out.sort_by_key(|iv| (iv.start, iv.vreg));
    out
}

/// Ranges during which each physical role carries a fixed value.
fn fixed_ranges(instrs: &[MachineInstr]) -> HashMap<Role, Vec<(usize, usize)>> {
    let mut ranges: HashMap<Role, Vec<(usize, usize)>> = HashMap::new();
    let mut open: HashMap<Role, usize> = HashMap::new();
    for (i, ins) in instrs.iter().enumerate() {
        let (u, d) = uses_defs(&ins.op);
        let (iu, id) = implicit_roles(&ins.op);
        let uses = u.into_iter().filter_map(Reg::role).chain(iu);
        let defs = d.into_iter().filter_map(Reg::role).chain(id);
        for r in uses {
            let list = ranges.entry(r).or_default();
            match open.get(&r) {
                Some(&k) => list[k].1 = i,
                None => {
                    list.push((0, i));
                    open.insert(r, list.len() - 1);
                }
            }
        }
        for r in defs {
            let list = ranges.entry(r).or_default();
            list.push((i, i));
            open.insert(r, list.len() - 1);
        }
        if matches!(ins.op, MOp::Label { .. }) {
            open.clear();
        }
    }
    ranges
}

fn overlaps(ranges: Option<&Vec<(usize, usize)>>, s: usize, e: usize) -> bool {
    ranges.is_some_and(|rs| rs.iter().any(|&(a, b)| s <= b && a <= e))
}

enum Scan {
    Done(HashMap<u32, Role>),
    Spill(Vec<u32>),
}

fn scan(mf: &MachineFunction) -> Result<Scan, CodegenError> {
    let ivs = intervals(&mf.instrs, mf.vreg_float.len());
    let fixed = fixed_ranges(&mf.instrs);
    let (gpr, fpr) = (gpr_preference(), fpr_preference());
    let mut active: Vec<(usize, Role, u32)> = Vec::new();
    let mut assign: HashMap<u32, Role> = HashMap::new();
    let mut spilled: Vec<u32> = Vec::new();
    let ends: HashMap<u32, usize> = ivs.iter().map(|iv| (iv.vreg, iv.end)).collect();
    for iv in &ivs {
        active.retain(|&(end, _, _)| end >= iv.start);
        let temp = mf.vreg_temp[iv.vreg as usize];
        let prefs = if mf.vreg_float[iv.vreg as usize] { &fpr } else { &gpr };
        let usable = |r: &Role, allow_cs: bool| {
            (allow_cs || !matches!(r, Role::Cs0 | Role::Cs1)) && !overlaps(fixed.get(r), iv.start, iv.end)
        };
        let free = prefs.iter().find(|r| usable(r, !temp) && !active.iter().any(|a| a.1 == **r));
        if let Some(&r) = free {
            assign.insert(iv.vreg, r);
            active.push((iv.end, r, iv.vreg));
            continue;
        }
        if !temp {
            spilled.push(iv.vreg);
            continue;
        }
        let victim = (0..2).find_map(|pass| {
            active
                .iter()
                .enumerate()
                .filter(|(_, a)| !mf.vreg_temp[a.2 as usize] && usable(&a.1, pass == 1))
                .max_by_key(|(_, a)| (a.0, a.2))
                .map(|(k, _)| k)
        });
        let Some(k) = victim else {
            return Err(CodegenError::AllocatorOverflow(mf.name.clone()));
        };
        let (_, r, v) = active.remove(k);
        debug_assert!(ends.contains_key(&v));
        assign.remove(&v);
        spilled.push(v);
        assign.insert(iv.vreg, r);
        active.push((iv.end, r, iv.vreg));
    }
    Ok(if spilled.is_empty() { Scan::Done(assign) } else { Scan::Spill(spilled) })
}

fn rewrite_spills(mf: &mut MachineFunction, slots: &BTreeMap<u32, u32>, spilled: &[u32]) {
    let old = std::mem::take(&mut mf.instrs);
    let mut out = Vec::with_capacity(old.len());
    for mut ins in old {
        let (u, d) = uses_defs(&ins.op);
        let mut temps: Vec<(u32, Reg, bool, bool)> = Vec::new();
        for &v in spilled {
            let (used, defd) = (u.contains(&Reg::V(v)), d.contains(&Reg::V(v)));
            if used || defd {
                let t = mf.new_vreg(mf.vreg_float[v as usize], true);
                temps.push((v, t, used, defd));
            }
        }
        visit_regs(&mut ins.op, &mut |r, _| {
            if let Some(t) = temps.iter().find(|t| Reg::V(t.0) == *r) {
                *r = t.1;
            }
        });
        for t in &temps {
            if t.2 {
                let mem = Mem::frame(FrameSlot::Spill(slots[&t.0]));
                out.push(MachineInstr::new(MOp::Load { dst: t.1, mem }));
            }
        }
        out.push(ins);
        for t in &temps {
            if t.3 {
                let mem = Mem::frame(FrameSlot::Spill(slots[&t.0]));
                out.push(MachineInstr::new(MOp::Store { src: t.1, mem }));
            }
        }
    }
    mf.instrs = out;
}

pub fn allocate_registers(mf: &mut MachineFunction) -> Result<(), CodegenError> {
    let mut slots: BTreeMap<u32, u32> = BTreeMap::new();
    let assign = loop {
        match scan(mf)? {
            Scan::Done(a) => break a,
            Scan::Spill(vs) => {
                for v in &vs {
                    let n = slots.len() as u32;
                    slots.entry(*v).or_insert(n);
                }
                rewrite_spills(mf, &slots, &vs);
                if mf.vreg_float.len() > 1 << 20 {
                    return Err(CodegenError::AllocatorOverflow(mf.name.clone()));
                }
            }
        }
    };
    mf.spill_slots = slots.len() as u32;
    let home = |h: &mut Home| {
        if let Home::VReg(v) = *h {
            *h = match (slots.get(&v), assign.get(&v)) {
                (Some(s), _) => Home::Spill(*s),
                (None, Some(r)) => Home::Reg(*r),
                (None, None) => Home::Recomputed,
            };
        }
    };
    for (_, h) in &mut mf.values {
        home(h);
    }
    for cs in &mut mf.callsites {
        for (_, h) in &mut cs.live {
            home(h);
        }
    }
    for ins in &mut mf.instrs {
        visit_regs(&mut ins.op, &mut |r, _| {
            if let Reg::V(v) = *r {
                *r = Reg::P(assign[&v]);
            }
        });
    }
    mf.instrs.retain(|i| !matches!(i.op, MOp::Mov { dst, src } if dst == src));
    let mut saved = Vec::new();
    for cs in [Role::Cs0, Role::Cs1] {
        if assign.values().any(|r| *r == cs) {
            saved.push(cs);
        }
    }
    mf.saved = saved;
    Ok(())
}
