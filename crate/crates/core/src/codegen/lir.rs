//! Operand access and liveness over machine instruction lists.

use std::collections::BTreeSet;

use super::{Base, MOp, MachineInstr, Mem, Reg, Src};
use crate::abi::{all_roles, Role};

/// Calls the visitor for every register operand; the flag is true for definitions.
/// Two-step constant builds and two-address ops read their destination.
pub fn visit_regs(op: &mut MOp, f: &mut dyn FnMut(&mut Reg, bool)) {
    fn mem(m: &mut Mem, f: &mut dyn FnMut(&mut Reg, bool)) {
        if let Base::Reg(r) = &mut m.base {
            f(r, false);
        }
        if let Some(i) = &mut m.index {
            f(i, false);
        }
    }
    match op {
        MOp::Mov { dst, src } | MOp::FMovFromGpr { dst, src } => {
            f(src, false);
            f(dst, true);
        }
        MOp::MovImm { dst, first, .. } => {
            if !*first {
                f(dst, false);
            }
            f(dst, true);
        }
        MOp::Alu { dst, lhs, rhs, .. } => {
            f(lhs, false);
            if let Src::Reg(r) = rhs {
                f(r, false);
            }
            f(dst, true);
        }
        MOp::FAlu { dst, lhs, rhs, .. } => {
            f(lhs, false);
            f(rhs, false);
            f(dst, true);
        }
        MOp::Load { dst, mem: m } => {
            mem(m, f);
            f(dst, true);
        }
        MOp::Store { src, mem: m } => {
            f(src, false);
            mem(m, f);
        }
        MOp::FrameAddr { dst, .. } | MOp::GlobalAddr { dst, .. } | MOp::SetCond { dst, .. } => f(dst, true),
        MOp::Cmp { lhs, rhs } => {
            f(lhs, false);
            if let Src::Reg(r) = rhs {
                f(r, false);
            }
        }
        MOp::FCmp { lhs, rhs } => {
            f(lhs, false);
            f(rhs, false);
        }
        MOp::Emit { src } => f(src, false),
        _ => {}
    }
}

pub fn uses_defs(op: &MOp) -> (Vec<Reg>, Vec<Reg>) {
    let mut u = Vec::new();
    let mut d = Vec::new();
    let mut op = op.clone();
    visit_regs(&mut op, &mut |r, def| if def { d.push(*r) } else { u.push(*r) });
    (u, d)
}

/// Roles read and written implicitly by calls and returns.
pub fn implicit_roles(op: &MOp) -> (Vec<Role>, Vec<Role>) {
    match op {
        MOp::Call { int_args, fp_args, .. } => {
            let mut u: Vec<Role> = (0..*int_args).map(Role::Arg).collect();
            u.extend((0..*fp_args).map(Role::F));
            let d = all_roles().into_iter().filter(|r| r.is_caller_saved() && *r != Role::Ret1).collect();
            (u, d)
        }
        MOp::Ret { float } => (vec![if *float { Role::F(0) } else { Role::Ret0 }], vec![]),
        _ => (vec![], vec![]),
    }
}

/// Successor instruction indices of instruction `i`.
pub fn successors(instrs: &[MachineInstr], labels: &[usize], i: usize) -> Vec<usize> {
    let fall = if i + 1 < instrs.len() { vec![i + 1] } else { vec![] };
    match &instrs[i].op {
        MOp::Jmp { block } => vec![labels[*block as usize]],
        MOp::JCond { block, .. } => {
            let mut s = fall;
            s.push(labels[*block as usize]);
            s
        }
        MOp::Ret { .. } => vec![],
        _ => fall,
    }
}

/// Instruction index of each block label.
pub fn label_positions(instrs: &[MachineInstr]) -> Vec<usize> {
    let mut v = Vec::new();
    for (i, ins) in instrs.iter().enumerate() {
        if let MOp::Label { block, .. } = ins.op {
            let b = block as usize;
            if v.len() <= b {
                v.resize(b + 1, usize::MAX);
            }
            v[b] = i;
        }
    }
    v
}

/// Virtual registers live after each instruction.
pub fn live_after(instrs: &[MachineInstr]) -> Vec<BTreeSet<u32>> {
    let labels = label_positions(instrs);
    let n = instrs.len();
    let succ: Vec<Vec<usize>> = (0..n).map(|i| successors(instrs, &labels, i)).collect();
    let ud: Vec<(Vec<u32>, Vec<u32>)> = instrs
        .iter()
        .map(|ins| {
            let (u, d) = uses_defs(&ins.op);
            let vs = |x: Vec<Reg>| x.into_iter().filter_map(|r| if let Reg::V(v) = r { Some(v) } else { None }).collect();
            (vs(u), vs(d))
        })
        .collect();
    let mut live_in: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); n];
    let mut out: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); n];
    loop {
        let mut changed = false;
        for i in (0..n).rev() {
            let o: BTreeSet<u32> = succ[i].iter().flat_map(|&s| live_in[s].iter().copied()).collect();
            let mut li = o.clone();
            for d in &ud[i].1 {
                li.remove(d);
            }
            li.extend(ud[i].0.iter().copied());
            if o != out[i] || li != live_in[i] {
                out[i] = o;
                live_in[i] = li;
                changed = true;
            }
        }
        if !changed {
            return out;
        }
    }
}
