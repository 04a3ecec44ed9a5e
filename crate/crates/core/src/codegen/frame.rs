//! Frame layout and finalization: symbolic frame slots become FP-relative
//! operands, prologue and epilogue are inserted.
//!
//! Offsets are relative to the frame base, the address of the return-address
//! slot. FP points 8 bytes below it on both targets.

use serde::{Deserialize, Serialize};

use super::imm::{legal_arith_immediate, legal_displacement, move_chunks};
use super::lir::uses_defs;
use super::{AluOp, Base, FrameSlot, MOp, MachineFunction, MachineInstr, Mem, Reg, Src};
use crate::abi::{Role, TargetId};
use crate::ir::IrFunction;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameLayout {
    /// Bytes from the frame base + 8 down to SP after the prologue.
    pub size: u32,
    /// Saved registers (FP first) with their offsets from the frame base.
    pub saved: Vec<(Role, i64)>,
    pub emergency: i64,
    pub locals: Vec<i64>,
    pub spills: Vec<i64>,
    pub outgoing: u32,
}

impl FrameLayout {
    pub fn slot_offset(&self, slot: FrameSlot) -> i64 {
        match slot {
            FrameSlot::Local(i) => self.locals[i as usize],
            FrameSlot::Spill(i) => self.spills[i as usize],
            FrameSlot::Emergency => self.emergency,
            FrameSlot::IncomingArg(i) => 8 * (i as i64 + 1),
            FrameSlot::ReturnAddress => 0,
        }
    }
}

/// Natural alignment of a local of `size` bytes, at least 4.
pub fn local_alignment(size: u32) -> i64 {
    let natural = if size >= 8 { 8 } else { size.max(1).next_power_of_two() };
    natural.max(4) as i64
}

fn align_down(v: i64, a: i64) -> i64 {
    v.div_euclid(a) * a
}

pub fn compute_layout(f: &IrFunction, saved_cs: &[Role], spill_slots: u32, outgoing: u32) -> FrameLayout {
    let mut saved = vec![(Role::Fp, -8)];
    let mut cur = -8i64;
    for r in saved_cs {
        cur -= 8;
        saved.push((*r, cur));
    }
    cur -= 8;
    let emergency = cur;
    let mut locals = Vec::new();
    for l in &f.locals {
        cur = align_down(cur - l.size as i64, local_alignment(l.size));
        locals.push(cur);
    }
    cur = align_down(cur, 8);
    let mut spills = Vec::new();
    for _ in 0..spill_slots {
        cur -= 8;
        spills.push(cur);
    }
    let used = 8 - cur + outgoing as i64;
    let size = ((used + 15) / 16 * 16) as u32;
    FrameLayout { size, saved, emergency, locals, spills, outgoing }
}

fn fp_disp(layout: &FrameLayout, slot: FrameSlot, extra: i64) -> i64 {
    layout.slot_offset(slot) + 8 + extra
}

fn mem_at(reg: Role, disp: i64) -> Mem {
    Mem { base: Base::Reg(Reg::P(reg)), index: None, disp }
}

fn materialize(out: &mut Vec<MachineInstr>, dst: Reg, v: u64) {
    for (k, c) in move_chunks(v).into_iter().enumerate() {
        out.push(MachineInstr::new(MOp::MovImm { dst, imm: v, chunk: c, first: k == 0 }));
    }
}

fn sp_adjust(out: &mut Vec<MachineInstr>, op: AluOp, amount: i64) {
    if amount == 0 {
        return;
    }
    let sp = Reg::P(Role::Sp);
    if legal_arith_immediate(amount as u64) {
        out.push(MachineInstr::new(MOp::Alu { op, dst: sp, lhs: sp, rhs: Src::Imm(amount) }));
    } else {
        let t = Reg::P(Role::Tmp(4));
        materialize(out, t, amount as u64);
        out.push(MachineInstr::new(MOp::Alu { op, dst: sp, lhs: sp, rhs: Src::Reg(t) }));
    }
}

fn prologue(out: &mut Vec<MachineInstr>, target: TargetId, layout: &FrameLayout) {
    match target {
        TargetId::X64 => out.push(MachineInstr::new(MOp::Push { reg: Role::Fp })),
        TargetId::A64 => out.push(MachineInstr::new(MOp::PushFrameRecord)),
    }
    out.push(MachineInstr::new(MOp::Mov { dst: Reg::P(Role::Fp), src: Reg::P(Role::Sp) }));
    sp_adjust(out, AluOp::Sub, layout.size as i64 - 16);
    for &(r, off) in &layout.saved[1..] {
        out.push(MachineInstr::new(MOp::Store { src: Reg::P(r), mem: mem_at(Role::Fp, off + 8) }));
    }
}

fn epilogue(out: &mut Vec<MachineInstr>, target: TargetId, layout: &FrameLayout) {
    for &(r, off) in &layout.saved[1..] {
        out.push(MachineInstr::new(MOp::Load { dst: Reg::P(r), mem: mem_at(Role::Fp, off + 8) }));
    }
    out.push(MachineInstr::new(MOp::Mov { dst: Reg::P(Role::Sp), src: Reg::P(Role::Fp) }));
    match target {
        TargetId::X64 => out.push(MachineInstr::new(MOp::Pop { reg: Role::Fp })),
        TargetId::A64 => out.push(MachineInstr::new(MOp::PopFrameRecord)),
    }
}

fn scratch_for(op: &MOp) -> Role {
    let (u, d) = uses_defs(op);
    let busy: Vec<Role> = u.into_iter().chain(d).filter_map(Reg::role).collect();
    [Role::Tmp(4), Role::Tmp(3), Role::Tmp(2)].into_iter().find(|r| !busy.contains(r)).unwrap()
}

/// Rewrites a memory access whose frame displacement is out of range by
/// borrowing a scratch register through the emergency slot.
fn far_access(out: &mut Vec<MachineInstr>, layout: &FrameLayout, mut ins: MachineInstr, disp: i64) {
    let scr = scratch_for(&ins.op);
    let emerg = mem_at(Role::Fp, fp_disp(layout, FrameSlot::Emergency, 0));
    out.push(MachineInstr::new(MOp::Store { src: Reg::P(scr), mem: emerg }));
    materialize(out, Reg::P(scr), disp as u64);
    out.push(MachineInstr::new(MOp::Alu {
        op: AluOp::Add,
        dst: Reg::P(scr),
        lhs: Reg::P(scr),
        rhs: Src::Reg(Reg::P(Role::Fp)),
    }));
    match &mut ins.op {
        MOp::Load { mem, .. } | MOp::Store { mem, .. } => *mem = mem_at(scr, 0),
        _ => unreachable!(),
    }
    out.push(ins);
    out.push(MachineInstr::new(MOp::Load { dst: Reg::P(scr), mem: emerg }));
}

/// Computes the frame layout and finalizes the function body.
pub fn build_frame_layout(mf: &mut MachineFunction, f: &IrFunction) -> FrameLayout {
    let layout = compute_layout(f, &mf.saved, mf.spill_slots, mf.outgoing);
    let old = std::mem::take(&mut mf.instrs);
    let mut out = Vec::with_capacity(old.len() + 16);
    for (i, mut ins) in old.into_iter().enumerate() {
        match &mut ins.op {
            MOp::Load { mem, .. } | MOp::Store { mem, .. } => {
                if let Base::Frame(slot) = mem.base {
                    let disp = fp_disp(&layout, slot, mem.disp);
                    if legal_displacement(disp) {
                        *mem = mem_at(Role::Fp, disp);
                    } else {
                        far_access(&mut out, &layout, ins, disp);
                        continue;
                    }
                }
            }
            MOp::FrameAddr { dst, slot } => {
                let (dst, disp) = (*dst, fp_disp(&layout, *slot, 0));
                let fp = Reg::P(Role::Fp);
                let remat = ins.remat;
                let mut seq = Vec::new();
                if legal_arith_immediate(disp.unsigned_abs()) {
                    let op = if disp < 0 { AluOp::Sub } else { AluOp::Add };
                    seq.push(MachineInstr::new(MOp::Alu { op, dst, lhs: fp, rhs: Src::Imm(disp.abs()) }));
                } else {
                    materialize(&mut seq, dst, disp as u64);
                    seq.push(MachineInstr::new(MOp::Alu { op: AluOp::Add, dst, lhs: dst, rhs: Src::Reg(fp) }));
                }
                for mut s in seq {
                    s.remat = remat;
                    out.push(s);
                }
                continue;
            }
            MOp::Ret { .. } => epilogue(&mut out, mf.target, &layout),
            _ => {}
        }
        let is_call = matches!(ins.op, MOp::Call { .. });
        out.push(ins);
        if i == 0 {
            prologue(&mut out, mf.target, &layout);
        }
        if is_call && mf.target == TargetId::A64 {
            out.push(MachineInstr::new(MOp::Load { dst: Reg::P(Role::Lr), mem: mem_at(Role::Fp, 8) }));
        }
    }
    mf.instrs = out;
    layout
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_program;

    #[test]
    fn leaf_frame_without_locals_is_32_bytes() {
        let p = parse_program("func main() { ret 0 }").unwrap();
        let l = compute_layout(&p.functions[0], &[], 0, 0);
        assert_eq!(l.size, 32);
        assert_eq!(l.emergency, -16);
    }

    #[test]
    fn locals_follow_emergency_slot() {
        let p = parse_program("func main() {\n local a: i64\n local b: i64 12\n ret 0\n}").unwrap();
        let l = compute_layout(&p.functions[0], &[Role::Cs0], 1, 8);
        assert_eq!(l.saved, vec![(Role::Fp, -8), (Role::Cs0, -16)]);
        assert_eq!(l.emergency, -24);
        assert_eq!(l.locals, vec![-32, -48]);
        assert_eq!(l.spills, vec![-56]);
        // 8 (RA) + 56 + 8 outgoing = 72 -> 80
        assert_eq!(l.size, 80);
    }

    #[test]
    fn alignment_rule() {
        assert_eq!(local_alignment(1), 4);
        assert_eq!(local_alignment(2), 4);
        assert_eq!(local_alignment(6), 8);
        assert_eq!(local_alignment(64), 8);
    }
}
