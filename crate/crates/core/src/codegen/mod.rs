//! Lowering from IR to per-target machine functions.
//!
//! Both targets go through the same pipeline: instruction selection into a
//! target-neutral virtual-register form, two-address conversion, linear-scan
//! allocation over [`Role`]s, and frame finalization. As long as every
//! unification rule is on, the stream fed to the allocator is identical for
//! both targets, so allocation, spills and frame layout coincide. Switching a
//! rule off re-enables the target's native behaviour for that category.

mod frame;
pub mod imm;
mod isel;
pub mod lir;
pub mod print;
mod regalloc;
mod twoaddr;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abi::{Role, TargetId};
use crate::ir::{Cond, IrFunction, IrProgram};

pub use frame::{build_frame_layout, FrameLayout};
pub use imm::{legal_arith_immediate, legal_move_immediate, move_chunks};
pub use isel::select_instructions;
pub use regalloc::{allocate_registers, gpr_preference};
pub use twoaddr::convert_two_address;

/// Unification rules. Each flag maps to one ablation switch of the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rules {
    /// Rematerialize local/global address computations on X64 too.
    pub remat: bool,
    /// Pad callsites so return addresses agree.
    pub callsite_align: bool,
    /// X64 uses the A64 immediate legality for data processing.
    pub imm_unify: bool,
    /// X64 never folds `base + index` into a memory operand.
    pub addr_restrict: bool,
    /// A64 integer arithmetic is converted to two-address form like X64.
    pub two_addr: bool,
    /// X64 never keeps the zero constant in a long-lived register.
    pub zero_rule: bool,
    /// Align loop headers to 16 bytes and iterate callsite padding to a fixpoint.
    pub block_align: bool,
}

impl Default for Rules {
    fn default() -> Self {
        Rules {
            remat: true,
            callsite_align: true,
            imm_unify: true,
            addr_restrict: true,
            two_addr: true,
            zero_rule: true,
            block_align: false,
        }
    }
}

impl Rules {
    /// The six ablatable rule categories, by CLI flag name.
    pub const ABLATIONS: [&'static str; 6] =
        ["remat", "callsite-align", "imm-unify", "addr-restrict", "two-addr", "zero-rule"];

    /// Every unification rule off: each target compiled on its own terms.
    pub fn native() -> Rules {
        Rules {
            remat: false,
            callsite_align: false,
            imm_unify: false,
            addr_restrict: false,
            two_addr: false,
            zero_rule: false,
            block_align: false,
        }
    }

    pub fn without(mut self, rule: &str) -> Option<Rules> {
        match rule {
            "remat" => self.remat = false,
            "callsite-align" => self.callsite_align = false,
            "imm-unify" => self.imm_unify = false,
            "addr-restrict" => self.addr_restrict = false,
            "two-addr" => self.two_addr = false,
            "zero-rule" => self.zero_rule = false,
            _ => return None,
        }
        Some(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Reg {
    V(u32),
    P(Role),
}

impl Reg {
    pub fn role(self) -> Option<Role> {
        match self {
            Reg::P(r) => Some(r),
            Reg::V(_) => None,
        }
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Reg::V(v) => write!(f, "v%{v}"),
            Reg::P(r) => write!(f, "{r}"),
        }
    }
}

/// Symbolic frame object, resolved to an FP-relative offset by frame finalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FrameSlot {
    Local(u32),
    Spill(u32),
    Emergency,
    /// Overflow argument `n` (0-based) of the current function.
    IncomingArg(u32),
    ReturnAddress,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Base {
    Reg(Reg),
    Frame(FrameSlot),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mem {
    pub base: Base,
    /// Scaled-index component (scale 1). Only produced when the addressing
    /// restriction is off on X64.
    pub index: Option<Reg>,
    pub disp: i64,
}

impl Mem {
    pub fn reg(r: Reg) -> Mem {
        Mem { base: Base::Reg(r), index: None, disp: 0 }
    }

    pub fn frame(slot: FrameSlot) -> Mem {
        Mem { base: Base::Frame(slot), index: None, disp: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Src {
    Reg(Reg),
    Imm(i64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AluOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FAluOp {
    Add,
    Mul,
}

/// Machine operations shared by both dialects. The dialect decides encoding
/// size and mnemonic; semantics are identical unless noted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MOp {
    /// Start of block `n`; zero bytes.
    Label { block: u32, loop_header: bool },
    Mov { dst: Reg, src: Reg },
    /// One 16-bit chunk of a constant. `first` clears the rest of the register.
    MovImm { dst: Reg, imm: u64, chunk: u8, first: bool },
    /// Reinterpret integer bits as f64.
    FMovFromGpr { dst: Reg, src: Reg },
    Alu { op: AluOp, dst: Reg, lhs: Reg, rhs: Src },
    FAlu { op: FAluOp, dst: Reg, lhs: Reg, rhs: Reg },
    Load { dst: Reg, mem: Mem },
    Store { src: Reg, mem: Mem },
    /// Address of a frame object (`lea` / `add FP`).
    FrameAddr { dst: Reg, slot: FrameSlot },
    /// PC-relative address of a global (`lea rip` / `adrp`).
    GlobalAddr { dst: Reg, symbol: String },
    Cmp { lhs: Reg, rhs: Src },
    FCmp { lhs: Reg, rhs: Reg },
    SetCond { dst: Reg, cond: Cond, float: bool },
    Jmp { block: u32 },
    JCond { cond: Cond, float: bool, block: u32 },
    /// Direct call. `site` numbers callsites within the function.
    Call { callee: String, site: u32, int_args: u8, fp_args: u8 },
    Ret { float: bool },
    Emit { src: Reg },
    // Frame setup and teardown.
    Push { reg: Role },
    Pop { reg: Role },
    /// A64 `stp FP, LR, [SP, #-16]!`.
    PushFrameRecord,
    /// A64 `ldp FP, LR, [SP], #16`.
    PopFrameRecord,
    /// Padding.
    Nop { bytes: u32 },
    /// Jump over `skip` bytes of padding that follow.
    JumpOver { skip: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineInstr {
    pub op: MOp,
    /// Byte size, filled in from the size model of the function's target.
    pub size: u32,
    pub remat: bool,
}

impl MachineInstr {
    pub fn new(op: MOp) -> Self {
        MachineInstr { op, size: 0, remat: false }
    }

    pub fn remat(op: MOp) -> Self {
        MachineInstr { op, size: 0, remat: true }
    }
}

/// Where an IR value lives for the span of a function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Home {
    VReg(u32),
    Reg(Role),
    Spill(u32),
    /// Recomputed at each use (address arithmetic).
    Recomputed,
    /// Recomputed at each use (immediate constant).
    Constant(u64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Callsite {
    pub site: u32,
    pub callee: String,
    /// IR values live across the call, in definition order, with their homes.
    pub live: Vec<(String, Home)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineFunction {
    pub name: String,
    pub target: TargetId,
    pub instrs: Vec<MachineInstr>,
    pub frame: Option<FrameLayout>,
    pub callsites: Vec<Callsite>,
    /// Local name per frame slot index.
    pub locals: Vec<String>,
    /// Register class per virtual register (meaningful before allocation).
    pub vreg_float: Vec<bool>,
    /// Virtual registers created for spill reloads or rematerialization.
    pub vreg_temp: Vec<bool>,
    /// Final homes of IR values.
    pub values: Vec<(String, Home)>,
    pub spill_slots: u32,
    /// Callee-saved roles the body uses, in save order.
    pub saved: Vec<Role>,
    /// Bytes of outgoing overflow arguments at the bottom of the frame.
    pub outgoing: u32,
}

impl MachineFunction {
    pub fn new_vreg(&mut self, float: bool, temp: bool) -> Reg {
        self.vreg_float.push(float);
        self.vreg_temp.push(temp);
        Reg::V(self.vreg_float.len() as u32 - 1)
    }

    pub fn is_float(&self, r: Reg) -> bool {
        match r {
            Reg::V(v) => self.vreg_float[v as usize],
            Reg::P(role) => role.class() == crate::abi::RegClass::Fpr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodegenError {
    #[error("unsupported construct in `{function}`: {what}")]
    Unsupported { function: String, what: String },
    #[error("allocator overflow in `{0}`")]
    AllocatorOverflow(String),
}

/// Full lowering of one function for one target.
pub fn compile_function(
    prog: &IrProgram,
    f: &IrFunction,
    target: TargetId,
    rules: &Rules,
) -> Result<MachineFunction, CodegenError> {
    let mut mf = select_instructions(prog, f, target, rules)?;
    if target == TargetId::X64 || rules.two_addr {
        convert_two_address(&mut mf, rules, true);
    } else {
        convert_two_address(&mut mf, rules, false);
    }
    allocate_registers(&mut mf)?;
    let layout = build_frame_layout(&mut mf, f);
    mf.frame = Some(layout);
    for i in &mut mf.instrs {
        i.size = crate::layout::instr_size(target, &i.op);
    }
    Ok(mf)
}

/// Lower every function of a program, in program order.
pub fn compile_program(prog: &IrProgram, target: TargetId, rules: &Rules) -> Result<Vec<MachineFunction>, CodegenError> {
    prog.functions.iter().map(|f| compile_function(prog, f, target, rules)).collect()
}
