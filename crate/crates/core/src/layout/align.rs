//! Callsite padding so that both targets place the instruction after each
//! call at the same function-relative offset.

use serde::{Deserialize, Serialize};

use crate::abi::TargetId;
use crate::codegen::{MOp, MachineInstr};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaddingPlan {
    pub site: u32,
    /// Bytes directly before the call.
    pub pad_x64: u32,
    pub pad_a64: u32,
    /// X64 bytes at the start of the stretch leading to the call (right after
    /// the previous call, or at function entry).
    pub lead_x64: u32,
}

impl PaddingPlan {
    pub fn pad(&self, t: TargetId) -> u32 {
        match t {
            TargetId::X64 => self.pad_x64,
            TargetId::A64 => self.pad_a64,
        }
    }

    pub fn jumps(&self, t: TargetId) -> bool {
        self.pad(t) > t.jump_size()
    }
}

/// Minimal padding making `dx + pad_x == da + pad_a`, with the A64 pad a
/// multiple of 4. Only when X64 is ahead by a non-multiple of 4 do both sides
/// receive padding.
pub fn pad_split(dx: u64, da: u64) -> (u32, u32) {
    if dx >= da {
        let diff = dx - da;
        let pa = diff.div_ceil(4) * 4;
        ((pa - diff) as u32, pa as u32)
    } else {
        ((da - dx) as u32, 0)
    }
}

/// Padding instructions for `pad` bytes. Padding longer than an unconditional
/// jump is skipped by one.
pub fn apply_jump_over(target: TargetId, pad: u32) -> Vec<MachineInstr> {
    let mut out = Vec::new();
    let mut rest = pad;
    if pad > target.jump_size() {
        let skip = pad - target.jump_size();
        out.push(MachineInstr { op: MOp::JumpOver { skip }, size: target.jump_size(), remat: false });
        rest = skip;
    }
    out.extend(nops(target, rest));
    out
}

pub(crate) fn nops(target: TargetId, mut bytes: u32) -> Vec<MachineInstr> {
    let unit = match target {
        TargetId::X64 => 1,
        TargetId::A64 => 4,
    };
    let mut out = Vec::new();
    while bytes > 0 {
        let n = bytes.min(unit);
        out.push(MachineInstr { op: MOp::Nop { bytes: n }, size: n, remat: false });
        bytes -= n;
    }
    out
}

/// Splits the padding for one call into (lead_x64, pad_x64, pad_a64). When
/// both sides need bytes, the X64 share moves to the lead so the call itself
/// is padded on one side only.
pub fn place(dx: u64, da: u64) -> (u32, u32, u32) {
    match pad_split(dx, da) {
        (px, pa) if px > 0 && pa > 0 => (px, 0, pa),
        (px, pa) => (0, px, pa),
    }
}

/// Pads every callsite of `calls` in order. `dx`/`da` are the unpadded
/// next-instruction offsets of each call.
pub fn align_callsites(sites: &[(u32, u64, u64)]) -> Vec<PaddingPlan> {
    let mut shift_x = 0u64;
    let mut shift_a = 0u64;
    sites
        .iter()
        .map(|&(site, dx, da)| {
            let (lead, px, pa) = place(dx + shift_x, da + shift_a);
            shift_x += (lead + px) as u64;
            shift_a += pa as u64;
            PaddingPlan { site, pad_x64: px, pad_a64: pa, lead_x64: lead }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Smallest (px, pa) with pa % 4 == 0 and dx + px == da + pa, by search.
    fn brute(dx: u64, da: u64) -> (u32, u32) {
        let mut best: Option<(u32, u32)> = None;
        for px in 0..64u32 {
            for pa in (0..64u32).step_by(4) {
                if dx + px as u64 == da + pa as u64 {
                    let better = match best {
                        None => true,
                        Some((bx, ba)) => px + pa < bx + ba,
                    };
                    if better {
                        best = Some((px, pa));
                    }
                }
            }
        }
        best.unwrap()
    }

    #[test]
    fn split_matches_search() {
        for da in (0..200u64).step_by(4) {
            for dx in da.saturating_sub(40)..da + 40 {
                assert_eq!(pad_split(dx, da), brute(dx, da), "dx={dx} da={da}");
            }
        }
    }

    #[test]
    fn split_examples() {
        assert_eq!(pad_split(10, 4), (2, 8));
        assert_eq!(pad_split(4, 21 - 1), (16, 0));
        assert_eq!(pad_split(8, 8), (0, 0));
    }

    #[test]
    fn residue_moves_to_lead() {
        assert_eq!(place(10, 4), (2, 0, 8));
        assert_eq!(place(4, 8), (0, 4, 0));
        let plans = align_callsites(&[(1, 0x104, 0x107), (2, 0x20a, 0x208)]);
        assert_eq!(plans[0], PaddingPlan { site: 1, pad_x64: 3, pad_a64: 0, lead_x64: 0 });
        // second call: dx = 0x20d, da = 0x208 -> A64 +8, X64 lead +3
        assert_eq!(plans[1], PaddingPlan { site: 2, pad_x64: 0, pad_a64: 8, lead_x64: 3 });
    }

    #[test]
    fn long_padding_is_jumped_over() {
        let v = apply_jump_over(TargetId::X64, 17);
        assert_eq!(v[0].op, MOp::JumpOver { skip: 12 });
        assert_eq!(v.len(), 13);
        assert!(v[1..].iter().all(|i| i.size == 1));
        let v = apply_jump_over(TargetId::X64, 5);
        assert!(v.iter().all(|i| matches!(i.op, MOp::Nop { .. })));
        let v = apply_jump_over(TargetId::A64, 12);
        assert_eq!(v[0].op, MOp::JumpOver { skip: 8 });
        assert_eq!(v.len(), 3);
    }
}
