//! Unified register model and calling convention shared by both targets.
//!
//! Every register the code generator touches is named by a [`Role`]. Each
//! target maps roles onto its own physical register file; the mapping is the
//! single source of truth for emission, emulation and checkpoint rewriting.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::IrType;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TargetId {
    X64,
    A64,
}

impl TargetId {
    pub const ALL: [TargetId; 2] = [TargetId::X64, TargetId::A64];

    pub fn other(self) -> TargetId {
        match self {
            TargetId::X64 => TargetId::A64,
            TargetId::A64 => TargetId::X64,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TargetId::X64 => "x64",
            TargetId::A64 => "a64",
        }
    }

    pub fn parse(s: &str) -> Option<TargetId> {
        match s.to_ascii_lowercase().as_str() {
            "x64" => Some(TargetId::X64),
            "a64" => Some(TargetId::A64),
            _ => None,
        }
    }

    /// Byte size of the unconditional jump used for jump-over padding.
    pub fn jump_size(self) -> u32 {
        match self {
            TargetId::X64 => 5,
            TargetId::A64 => 4,
        }
    }

    /// Byte size of a direct call.
    pub fn call_size(self) -> u32 {
        match self {
            TargetId::X64 => 5,
            TargetId::A64 => 4,
        }
    }
}

impl fmt::Display for TargetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RegClass {
    Gpr,
    Fpr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SavedBy {
    Callee,
    Caller,
    None,
}

/// Target-neutral register identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    Sp,
    Fp,
    Lr,
    Cs0,
    Cs1,
    Ret0,
    Ret1,
    Arg(u8),
    Tmp(u8),
    F(u8),
    Zero,
}

impl Role {
    pub fn class(self) -> RegClass {
        match self {
            Role::F(_) => RegClass::Fpr,
            _ => RegClass::Gpr,
        }
    }

    pub fn saved_by(self) -> SavedBy {
        match self {
            Role::Sp | Role::Fp | Role::Lr | Role::Cs0 | Role::Cs1 => SavedBy::Callee,
            Role::Zero => SavedBy::None,
            _ => SavedBy::Caller,
        }
    }

    pub fn is_caller_saved(self) -> bool {
        self.saved_by() == SavedBy::Caller
    }

    /// Stable small integer used by the on-disk checkpoint and stackmap forms.
    pub fn id(self) -> u8 {
        match self {
            Role::Sp => 0,
            Role::Fp => 1,
            Role::Lr => 2,
            Role::Cs0 => 3,
            Role::Cs1 => 4,
            Role::Ret0 => 5,
            Role::Ret1 => 6,
            Role::Arg(i) => 7 + i,
            Role::Tmp(i) => 13 + i,
            Role::F(i) => 18 + i,
            Role::Zero => 34,
        }
    }

    pub fn from_id(id: u8) -> Option<Role> {
        Some(match id {
            0 => Role::Sp,
            1 => Role::Fp,
            2 => Role::Lr,
            3 => Role::Cs0,
            4 => Role::Cs1,
            5 => Role::Ret0,
            6 => Role::Ret1,
            7..=12 => Role::Arg(id - 7),
            13..=17 => Role::Tmp(id - 13),
            18..=33 => Role::F(id - 18),
            34 => Role::Zero,
            _ => return None,
        })
    }

    pub fn name(self) -> String {
        match self {
            Role::Sp => "SP".into(),
            Role::Fp => "FP".into(),
            Role::Lr => "LR".into(),
            Role::Cs0 => "CS0".into(),
            Role::Cs1 => "CS1".into(),
            Role::Ret0 => "RET0".into(),
            Role::Ret1 => "RET1".into(),
            Role::Arg(i) => format!("ARG{i}"),
            Role::Tmp(i) => format!("TMP{i}"),
            Role::F(i) => format!("F{i}"),
            Role::Zero => "ZERO".into(),
        }
    }

    pub fn parse(s: &str) -> Option<Role> {
        all_roles().into_iter().find(|r| r.name() == s)
    }

    /// Canonical role for a physical register. RET1 shares its register with
    /// ARG2; the canonical owner is ARG2.
    pub fn canonical(self) -> Role {
        match self {
            Role::Ret1 => Role::Arg(2),
            r => r,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// Every role, in role-id order.
pub fn all_roles() -> Vec<Role> {
    (0..=34).filter_map(Role::from_id).collect()
}

pub fn role_exists_on(role: Role, target: TargetId) -> bool {
    !matches!((role, target), (Role::Lr | Role::Zero, TargetId::X64))
}

const X64_TMP: [&str; 5] = ["r10", "r11", "r12", "r13", "r14"];
const A64_TMP: [&str; 5] = ["r6", "r7", "r16", "r17", "r18"];
const X64_ARG: [&str; 6] = ["rdi", "rsi", "rdx", "rcx", "r8", "r9"];

/// Physical name of a role on a target, or `None` if the role does not exist there.
pub fn physical(role: Role, target: TargetId) -> Option<String> {
    let name = match (target, role) {
        (TargetId::X64, Role::Sp) => "rsp".to_string(),
        (TargetId::A64, Role::Sp) => "SP".to_string(),
        (TargetId::X64, Role::Fp) => "rbp".to_string(),
        (TargetId::A64, Role::Fp) => "r29".to_string(),
        (TargetId::X64, Role::Lr) => return None,
        (TargetId::A64, Role::Lr) => "r30".to_string(),
        (TargetId::X64, Role::Cs0) => "rbx".to_string(),
        (TargetId::A64, Role::Cs0) => "r19".to_string(),
        (TargetId::X64, Role::Cs1) => "r15".to_string(),
        (TargetId::A64, Role::Cs1) => "r20".to_string(),
        (TargetId::X64, Role::Ret0) => "rax".to_string(),
        (TargetId::A64, Role::Ret0) => "r8".to_string(),
        (TargetId::X64, Role::Ret1) => "rdx".to_string(),
        (TargetId::A64, Role::Ret1) => "r2".to_string(),
        (TargetId::X64, Role::Arg(i)) => X64_ARG.get(i as usize)?.to_string(),
        (TargetId::A64, Role::Arg(i)) if i < 6 => format!("r{i}"),
        (TargetId::X64, Role::Tmp(i)) => X64_TMP.get(i as usize)?.to_string(),
        (TargetId::A64, Role::Tmp(i)) => A64_TMP.get(i as usize)?.to_string(),
        (TargetId::X64, Role::F(i)) if i < 16 => format!("xmm{i}"),
        (TargetId::A64, Role::F(i)) if i < 16 => format!("v{i}"),
        (TargetId::X64, Role::Zero) => return None,
        (TargetId::A64, Role::Zero) => "rzr".to_string(),
        _ => return None,
    };
    Some(name)
}

/// Role owning a physical register on a target (canonical role for aliases).
pub fn role_of(name: &str, target: TargetId) -> Option<Role> {
    all_roles()
        .into_iter()
        .filter(|r| *r != Role::Ret1)
        .find(|r| physical(*r, target).as_deref() == Some(name))
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AbiError {
    #[error("register `{name}` is not a {target} register")]
    UnknownRegister { name: String, target: TargetId },
    #[error("register `{name}` on {from} has no counterpart on {to}")]
    NoCounterpart { name: String, from: TargetId, to: TargetId },
}

/// Translate a physical register name between targets through its role.
pub fn map_register(name: &str, from: TargetId, to: TargetId) -> Result<String, AbiError> {
    let role = role_of(name, from).ok_or_else(|| AbiError::UnknownRegister {
        name: name.to_string(),
        target: from,
    })?;
    physical(role, to).ok_or_else(|| AbiError::NoCounterpart {
        name: name.to_string(),
        from,
        to,
    })
}

/// Registers of a class that the allocator may hand out, in physical-file terms.
pub fn allocatable_names(class: RegClass, target: TargetId) -> Vec<String> {
    let roles: Vec<Role> = match class {
        RegClass::Gpr => [Role::Sp, Role::Fp, Role::Cs0, Role::Cs1, Role::Ret0]
            .into_iter()
            .chain((0..6).map(Role::Arg))
            .chain((0..5).map(Role::Tmp))
            .collect(),
        RegClass::Fpr => (0..16).map(Role::F).collect(),
    };
    roles.into_iter().filter_map(|r| physical(r, target)).collect()
}

/// Where an argument lives at the call boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArgLocation {
    Reg(Role),
    /// Byte offset above the return-address slot of the callee frame.
    Stack(i64),
}

pub const INT_ARG_REGS: usize = 6;
pub const FP_ARG_REGS: usize = 8;

/// Classify one argument given the types of the whole argument list.
///
/// Integer/pointer and floating arguments are numbered independently; the
/// ones that overflow their register bank take consecutive 8-byte stack slots
/// in argument order.
pub fn classify_arguments(types: &[IrType]) -> Vec<ArgLocation> {
    let mut ints = 0usize;
    let mut floats = 0usize;
    let mut overflow = 0i64;
    types
        .iter()
        .map(|ty| {
            let reg = match ty {
                IrType::F64 => {
                    floats += 1;
                    (floats <= FP_ARG_REGS).then(|| Role::F((floats - 1) as u8))
                }
                IrType::I64 | IrType::Ptr => {
                    ints += 1;
                    (ints <= INT_ARG_REGS).then(|| Role::Arg((ints - 1) as u8))
                }
            };
            reg.map(ArgLocation::Reg).unwrap_or_else(|| {
                overflow += 1;
                ArgLocation::Stack(8 * overflow)
            })
        })
        .collect()
}

/// Location of the argument at `index` when every argument before it has the same type.
pub fn classify_argument(index: usize, ty: IrType) -> ArgLocation {
    let types = vec![ty; index + 1];
    classify_arguments(&types)[index]
}

/// Register holding a return value of the given type.
pub fn return_register(ty: IrType) -> Role {
    match ty {
        IrType::F64 => Role::F(0),
        _ => Role::Ret0,
    }
}

/// Order in which a callee stores FP and the callee-saved registers below the return address.
pub fn callee_saved_order(_target: TargetId) -> [Role; 3] {
    [Role::Fp, Role::Cs0, Role::Cs1]
}

/// One row of the exported register table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterRow {
    pub role: String,
    pub x64: Option<String>,
    pub a64: Option<String>,
    pub saved_by: SavedBy,
}

pub fn register_table() -> Vec<RegisterRow> {
    all_roles()
        .into_iter()
        .map(|r| RegisterRow {
            role: r.name(),
            x64: physical(r, TargetId::X64),
            a64: physical(r, TargetId::A64),
            saved_by: r.saved_by(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_one_examples() {
        assert_eq!(map_register("rdi", TargetId::X64, TargetId::A64).unwrap(), "r0");
        assert_eq!(map_register("rsp", TargetId::X64, TargetId::A64).unwrap(), "SP");
        assert_eq!(map_register("xmm3", TargetId::X64, TargetId::A64).unwrap(), "v3");
        let x = map_register("r19", TargetId::A64, TargetId::X64).unwrap();
        assert_eq!(x, "rbx");
        assert_eq!(map_register(&x, TargetId::X64, TargetId::A64).unwrap(), "r19");
    }

    #[test]
    fn link_register_has_no_counterpart() {
        let err = map_register("r30", TargetId::A64, TargetId::X64).unwrap_err();
        assert!(matches!(err, AbiError::NoCounterpart { .. }));
        assert!(map_register("r9", TargetId::A64, TargetId::X64).is_err());
    }

    #[test]
    fn bijection_over_shared_roles() {
        for t in TargetId::ALL {
            for class in [RegClass::Gpr, RegClass::Fpr] {
                for name in allocatable_names(class, t) {
                    let there = map_register(&name, t, t.other()).unwrap();
                    assert_eq!(map_register(&there, t.other(), t).unwrap(), name);
                }
            }
        }
    }

    #[test]
    fn sixteen_registers_per_class() {
        for t in TargetId::ALL {
            let g = allocatable_names(RegClass::Gpr, t);
            let f = allocatable_names(RegClass::Fpr, t);
            assert_eq!(g.len(), 16, "{t}");
            assert_eq!(f.len(), 16, "{t}");
            let mut dedup = g.clone();
            dedup.sort();
            dedup.dedup();
            assert_eq!(dedup.len(), 16);
        }
    }

    #[test]
    fn role_saving_classes() {
        for r in [Role::Sp, Role::Fp, Role::Cs0, Role::Cs1] {
            assert_eq!(r.saved_by(), SavedBy::Callee);
        }
        for r in (0..16).map(Role::F).chain((0..5).map(Role::Tmp)).chain([Role::Ret0, Role::Ret1]) {
            assert_eq!(r.saved_by(), SavedBy::Caller);
        }
        assert!(!role_exists_on(Role::Lr, TargetId::X64));
        assert!(!role_exists_on(Role::Zero, TargetId::X64));
        assert!(physical(Role::Lr, TargetId::A64).is_some());
    }

    #[test]
    fn argument_classification() {
        assert_eq!(classify_argument(0, IrType::I64), ArgLocation::Reg(Role::Arg(0)));
        assert_eq!(classify_argument(6, IrType::I64), ArgLocation::Stack(8));
        assert_eq!(classify_argument(2, IrType::F64), ArgLocation::Reg(Role::F(2)));
        assert_eq!(classify_argument(8, IrType::F64), ArgLocation::Stack(8));
        let mixed = classify_arguments(&[IrType::F64, IrType::I64, IrType::Ptr]);
        assert_eq!(
            mixed,
            vec![
                ArgLocation::Reg(Role::F(0)),
                ArgLocation::Reg(Role::Arg(0)),
                ArgLocation::Reg(Role::Arg(1))
            ]
        );
    }

    #[test]
    fn seventh_integer_argument_by_hand() {
        // Caller stores overflow args at [SP+0], [SP+8], ... then the call
        // pushes the return address at SP-8, which becomes the callee frame base.
        let caller_sp: i64 = 0x7fff_ffff_ff00;
        let callee_base = caller_sp - 8;
        let slot_of_arg6 = caller_sp;
        match classify_argument(6, IrType::I64) {
            ArgLocation::Stack(off) => assert_eq!(callee_base + off, slot_of_arg6),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn save_order_matches() {
        assert_eq!(callee_saved_order(TargetId::X64), [Role::Fp, Role::Cs0, Role::Cs1]);
        assert_eq!(callee_saved_order(TargetId::X64), callee_saved_order(TargetId::A64));
    }

    #[test]
    fn role_ids_roundtrip() {
        for r in all_roles() {
            assert_eq!(Role::from_id(r.id()), Some(r));
            assert_eq!(Role::parse(&r.name()), Some(r));
        }
    }
}
