//! Immediate legality shared by both targets.

/// Data-processing immediate: 12 bits, optionally shifted left by 12.
pub fn legal_arith_immediate(v: u64) -> bool {
    v < (1 << 12) || (v % (1 << 12) == 0 && v < (1 << 24))
}

/// Number of move-immediate steps needed to build `v`: one per nonzero 16-bit
/// chunk, and one for zero.
pub fn legal_move_immediate(v: u64) -> u32 {
    move_chunks(v).len() as u32
}

/// Chunk indices (0..4) that a move-immediate sequence writes, low first.
pub fn move_chunks(v: u64) -> Vec<u8> {
    let c: Vec<u8> = (0..4u8).filter(|i| (v >> (16 * *i as u32)) & 0xffff != 0).collect();
    if c.is_empty() {
        vec![0]
    } else {
        c
    }
}

/// X64 native rule when immediates are not unified: sign-extended 32 bits.
pub fn fits_i32(v: u64) -> bool {
    let s = v as i64;
    s >= i32::MIN as i64 && s <= i32::MAX as i64
}

/// Legal signed displacement of a `[base + disp]` operand on either target.
pub fn legal_displacement(d: i64) -> bool {
    (-256..=255).contains(&d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arith_examples() {
        assert!(legal_arith_immediate(0));
        assert!(legal_arith_immediate(4095));
        assert!(!legal_arith_immediate(4097));
        assert!(legal_arith_immediate(4096));
        assert!(legal_arith_immediate(0xfff000));
        assert!(!legal_arith_immediate(0x1000000));
    }

    #[test]
    fn move_examples() {
        assert_eq!(legal_move_immediate(0), 1);
        assert_eq!(legal_move_immediate(0xffff), 1);
        assert_eq!(legal_move_immediate(0x1_0001), 2);
        assert_eq!(legal_move_immediate(0xffff_0000_0000_0000), 1);
        assert_eq!(legal_move_immediate(u64::MAX), 4);
    }

    #[test]
    fn chunks_rebuild_value() {
        for v in [0u64, 1, 0x1234_0000_5678, u64::MAX, 0x8000_0000_0000_0000] {
            let mut acc = 0u64;
            for c in move_chunks(v) {
                acc |= v & (0xffff << (16 * c as u32));
            }
            assert_eq!(acc, v);
        }
    }
}
