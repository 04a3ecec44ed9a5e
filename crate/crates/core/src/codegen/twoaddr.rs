//! Two-address conversion: `c = a op b` becomes `a = a op b` when `a` dies,
//! otherwise `c = a; c = c op b`. An add of a legal immediate to a live
//! register stays three-address (X64 `lea`).

use std::collections::HashMap;

use super::isel::immediate_ok;
use super::lir::live_after;
use super::{AluOp, Home, MOp, MachineFunction, MachineInstr, Reg, Rules, Src};

/// Converts FP ops always and integer ops when `int_ops` is set.
pub fn convert_two_address(mf: &mut MachineFunction, rules: &Rules, int_ops: bool) {
    let live = live_after(&mf.instrs);
    let mut renames: HashMap<u32, u32> = HashMap::new();
    let mut out: Vec<MachineInstr> = Vec::with_capacity(mf.instrs.len());
    let old = std::mem::take(&mut mf.instrs);
    for (i, ins) in old.into_iter().enumerate() {
        let (dst, lhs, rhs_reg, is_float) = match &ins.op {
            MOp::Alu { dst, lhs, rhs, .. } if int_ops => {
                (*dst, *lhs, if let Src::Reg(r) = rhs { Some(*r) } else { None }, false)
            }
            MOp::FAlu { dst, lhs, rhs, .. } => (*dst, *lhs, Some(*rhs), true),
            _ => {
                out.push(ins);
                continue;
            }
        };
        if dst == lhs {
            out.push(ins);
            continue;
        }
        let lhs_dies = match lhs {
            Reg::V(a) => !live[i].contains(&a) && Some(lhs) != rhs_reg,
            Reg::P(_) => false,
        };
        if let (true, Reg::V(a), Reg::V(c)) = (lhs_dies, lhs, dst) {
            renames.insert(c, a);
            let mut root = a;
            while let Some(&n) = renames.get(&root) {
                root = n;
            }
            let merged = mf.vreg_temp[c as usize] && mf.vreg_temp[root as usize];
            mf.vreg_temp[root as usize] = merged;
            let mut ins = ins;
            set_dst(&mut ins.op, lhs);
            out.push(ins);
            continue;
        }
        if let MOp::Alu { op: AluOp::Add, rhs: Src::Imm(v), .. } = ins.op {
            if !is_float && immediate_ok(mf.target, rules, v as u64) {
                out.push(ins);
                continue;
            }
        }
        if Some(dst) == rhs_reg {
            // c = a op c cannot be made two-address by copying; use a fresh temp.
            let t = mf.new_vreg(is_float, true);
            out.push(MachineInstr::new(MOp::Mov { dst: t, src: lhs }));
            let mut ins = ins;
            set_dst(&mut ins.op, t);
            set_lhs(&mut ins.op, t);
            out.push(ins);
            out.push(MachineInstr::new(MOp::Mov { dst, src: t }));
            continue;
        }
        out.push(MachineInstr { op: MOp::Mov { dst, src: lhs }, size: 0, remat: ins.remat });
        let mut ins = ins;
        set_lhs(&mut ins.op, dst);
        out.push(ins);
    }
    let resolve = |mut v: u32| {
        while let Some(&n) = renames.get(&v) {
            v = n;
        }
        v
    };
    for ins in &mut out {
        super::lir::visit_regs(&mut ins.op, &mut |r, _| {
            if let Reg::V(v) = r {
                *r = Reg::V(resolve(*v));
            }
        });
    }
    for (_, h) in &mut mf.values {
        if let Home::VReg(v) = h {
            *v = resolve(*v);
        }
    }
    for cs in &mut mf.callsites {
        for (_, h) in &mut cs.live {
            if let Home::VReg(v) = h {
                *v = resolve(*v);
            }
        }
    }
    mf.instrs = out;
}

fn set_dst(op: &mut MOp, r: Reg) {
    match op {
        MOp::Alu { dst, .. } | MOp::FAlu { dst, .. } => *dst = r,
        _ => unreachable!(),
    }
}

fn set_lhs(op: &mut MOp, r: Reg) {
    match op {
        MOp::Alu { lhs, .. } | MOp::FAlu { lhs, .. } => *lhs = r,
        _ => unreachable!(),
    }
}
