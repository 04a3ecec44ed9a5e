//! Address-space layout: instruction sizes, symbol placement, callsite
//! alignment and linking into executable images.

mod align;
mod container;
mod fixpoint;
mod link;

use crate::abi::{RegClass, TargetId};
use crate::codegen::{Base, MOp, Mem, Reg, Src};
use crate::ir::GlobalDef;

pub use align::{align_callsites, apply_jump_over, pad_split, place, PaddingPlan};
pub use container::{json_section, read_image, write_image, Container, ContainerError};
pub use fixpoint::{layout_program, FixpointReport, MAX_ITERATIONS};
pub use link::{assign_symbols, hex, link, Image, LinkError, SiteInfo, Symbol, EXIT_ADDR};

pub const CODE_BASE: u64 = 0x1000;
/// Function start addresses are multiples of this on both targets.
pub const SYMBOL_GRANULE: u64 = 64;
pub const DATA_BASE: u64 = 0x10_0000;
pub const STACK_BASE: u64 = 0x8000_0000_0000;
pub const STACK_LIMIT: u64 = 1 << 20;
/// Loop headers are aligned to this when block alignment is on.
pub const BLOCK_ALIGN: u64 = 16;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataLayout {
    pub base: u64,
    /// Offset of each global from `base`, in declaration order.
    pub offsets: Vec<u64>,
    pub size: u64,
}

/// Globals are placed in declaration order, each 8-byte aligned.
pub fn data_layout(globals: &[GlobalDef]) -> DataLayout {
    let mut offsets = Vec::with_capacity(globals.len());
    let mut cur = 0u64;
    for g in globals {
        offsets.push(cur);
        cur += (g.init.len() as u64).max(8).div_ceil(8) * 8;
    }
    DataLayout { base: DATA_BASE, offsets, size: cur }
}

fn is_fpr(r: &Reg) -> bool {
    matches!(r, Reg::P(role) if role.class() == RegClass::Fpr)
}

fn fits_i8(v: i64) -> bool {
    (-128..=127).contains(&v)
}

fn x64_mem(m: &Mem, fpr: bool) -> u32 {
    let short = fits_i8(m.disp);
    let base = match (m.index.is_some(), short) {
        (true, true) => 5,
        (true, false) => 8,
        (false, true) => 4,
        (false, false) => 7,
    };
    debug_assert!(matches!(m.base, Base::Reg(_)));
    base + fpr as u32
}

/// Encoded size in bytes of one machine instruction.
pub fn instr_size(target: TargetId, op: &MOp) -> u32 {
    match op {
        MOp::Label { .. } => return 0,
        MOp::Nop { bytes } => return *bytes,
        _ => {}
    }
    if target == TargetId::A64 {
        return 4;
    }
    match op {
        MOp::Label { .. } | MOp::Nop { .. } => unreachable!(),
        MOp::Mov { dst, .. } => {
            if is_fpr(dst) {
                4
            } else {
                3
            }
        }
        MOp::MovImm { imm, .. } => {
            if *imm == 0 {
                3
            } else {
                10
            }
        }
        MOp::FMovFromGpr { .. } => 5,
        MOp::Alu { dst, lhs, rhs, .. } => match (dst == lhs, rhs) {
            (true, Src::Reg(_)) => 3,
            (true, Src::Imm(_)) => 7,
            (false, Src::Imm(v)) => {
                if fits_i8(*v) {
                    4
                } else {
                    7
                }
            }
            (false, Src::Reg(_)) => 4,
        },
        MOp::FAlu { .. } => 4,
        MOp::Load { dst, mem } => x64_mem(mem, is_fpr(dst)),
        MOp::Store { src, mem } => x64_mem(mem, is_fpr(src)),
        MOp::FrameAddr { .. } => 7,
        MOp::GlobalAddr { .. } => 7,
        MOp::Cmp { rhs: Src::Reg(_), .. } => 3,
        MOp::Cmp { rhs: Src::Imm(_), .. } => 7,
        MOp::FCmp { .. } => 4,
        MOp::SetCond { .. } => 7,
        MOp::Jmp { .. } | MOp::JumpOver { .. } => 5,
        MOp::JCond { .. } => 6,
        MOp::Call { .. } => 5,
        MOp::Ret { .. } => 1,
        MOp::Emit { .. } => 2,
        MOp::Push { .. } | MOp::Pop { .. } => 1,
        MOp::PushFrameRecord | MOp::PopFrameRecord => 4,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::abi::Role;
    use crate::codegen::AluOp;

    #[test]
    fn x64_sizes() {
        let r = |x| Reg::P(x);
        let call = MOp::Call { callee: "f".into(), site: 0, int_args: 0, fp_args: 0 };
        assert_eq!(instr_size(TargetId::X64, &call), 5);
        assert_eq!(instr_size(TargetId::A64, &call), 4);
        let lea = MOp::Alu { op: AluOp::Add, dst: r(Role::Tmp(0)), lhs: r(Role::Fp), rhs: Src::Imm(-16) };
        assert_eq!(instr_size(TargetId::X64, &lea), 4);
        let ld = MOp::Load { dst: r(Role::Tmp(0)), mem: Mem::reg(r(Role::Fp)) };
        assert_eq!(instr_size(TargetId::X64, &ld), 4);
        assert_eq!(instr_size(TargetId::X64, &MOp::Nop { bytes: 3 }), 3);
    }

    #[test]
    fn globals_are_8_aligned() {
        let g = |n: &str, len| GlobalDef { name: n.into(), ty: crate::ir::IrType::I64, init: vec![0; len] };
        let l = data_layout(&[g("a", 8), g("b", 16), g("c", 8)]);
        assert_eq!(l.offsets, vec![0, 8, 24]);
        assert_eq!(l.size, 32);
    }
}
