//! Source IR shared by both backends: three-address code over named values,
//! with named stack locals and globals. Loops carry state through locals.

mod parse;
mod print;
mod validate;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use parse::{parse_program, ParseError};
pub use print::print_program;
pub use validate::{validate, DiagKind, Diagnostic};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IrType {
    I64,
    F64,
    Ptr,
}

impl IrType {
    pub fn size(self) -> u32 {
        8
    }

    pub fn is_int(self) -> bool {
        matches!(self, IrType::I64 | IrType::Ptr)
    }

    pub fn name(self) -> &'static str {
        match self {
            IrType::I64 => "i64",
            IrType::F64 => "f64",
            IrType::Ptr => "ptr",
        }
    }

    pub fn parse(s: &str) -> Option<IrType> {
        match s {
            "i64" => Some(IrType::I64),
            "f64" => Some(IrType::F64),
            "ptr" => Some(IrType::Ptr),
            _ => None,
        }
    }
}

impl fmt::Display for IrType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalDef {
    pub name: String,
    pub ty: IrType,
    /// Little-endian initial contents; length is the global's byte size.
    pub init: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Local {
    pub name: String,
    pub ty: IrType,
    pub size: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub ty: IrType,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Operand {
    Value(String),
    Imm(i64),
}

impl Operand {
    pub fn value(&self) -> Option<&str> {
        match self {
            Operand::Value(v) => Some(v),
            Operand::Imm(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FBinOp {
    FAdd,
    FMul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Cond {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl Cond {
    pub const ALL: [Cond; 6] = [Cond::Eq, Cond::Ne, Cond::Lt, Cond::Le, Cond::Gt, Cond::Ge];

    pub fn name(self) -> &'static str {
        match self {
            Cond::Eq => "eq",
            Cond::Ne => "ne",
            Cond::Lt => "lt",
            Cond::Le => "le",
            Cond::Gt => "gt",
            Cond::Ge => "ge",
        }
    }

    pub fn parse(s: &str) -> Option<Cond> {
        Cond::ALL.into_iter().find(|c| c.name() == s)
    }

    pub fn eval_i64(self, a: i64, b: i64) -> bool {
        match self {
            Cond::Eq => a == b,
            Cond::Ne => a != b,
            Cond::Lt => a < b,
            Cond::Le => a <= b,
            Cond::Gt => a > b,
            Cond::Ge => a >= b,
        }
    }

    pub fn eval_f64(self, a: f64, b: f64) -> bool {
        match self {
            Cond::Eq => a == b,
            Cond::Ne => a != b,
            Cond::Lt => a < b,
            Cond::Le => a <= b,
            Cond::Gt => a > b,
            Cond::Ge => a >= b,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Inst {
    /// `bits` holds the i64 value or the IEEE-754 bits of an f64.
    Const { dst: String, ty: IrType, bits: u64 },
    Bin { op: BinOp, dst: String, lhs: Operand, rhs: Operand },
    FBin { op: FBinOp, dst: String, lhs: String, rhs: String },
    Load { dst: String, addr: String },
    Store { value: Operand, addr: String },
    FLoad { dst: String, addr: String },
    FStore { value: String, addr: String },
    AddrOfLocal { dst: String, local: String },
    AddrOfGlobal { dst: String, global: String },
    Call { dst: Option<String>, callee: String, args: Vec<Operand> },
    Cmp { dst: String, cond: Cond, lhs: String, rhs: Operand },
    Emit { value: Operand },
    Br { target: String },
    BrCond { cond: String, then_to: String, else_to: String },
    Ret { value: Option<Operand> },
}

impl Inst {
    pub fn opcode(&self) -> &'static str {
        match self {
            Inst::Const { .. } => "const",
            Inst::Bin { op: BinOp::Add, .. } => "add",
            Inst::Bin { op: BinOp::Sub, .. } => "sub",
            Inst::Bin { op: BinOp::Mul, .. } => "mul",
            Inst::FBin { op: FBinOp::FAdd, .. } => "fadd",
            Inst::FBin { op: FBinOp::FMul, .. } => "fmul",
            Inst::Load { .. } => "load",
            Inst::Store { .. } => "store",
            Inst::FLoad { .. } => "fload",
            Inst::FStore { .. } => "fstore",
            Inst::AddrOfLocal { .. } => "addr-of-local",
            Inst::AddrOfGlobal { .. } => "addr-of-global",
            Inst::Call { .. } => "call",
            Inst::Cmp { .. } => "cmp",
            Inst::Emit { .. } => "emit",
            Inst::Br { .. } => "br",
            Inst::BrCond { .. } => "br-cond",
            Inst::Ret { .. } => "ret",
        }
    }

    pub fn is_terminator(&self) -> bool {
        matches!(self, Inst::Br { .. } | Inst::BrCond { .. } | Inst::Ret { .. })
    }

    pub fn def(&self) -> Option<&str> {
        match self {
            Inst::Const { dst, .. }
            | Inst::Bin { dst, .. }
            | Inst::FBin { dst, .. }
            | Inst::Load { dst, .. }
            | Inst::FLoad { dst, .. }
            | Inst::AddrOfLocal { dst, .. }
            | Inst::AddrOfGlobal { dst, .. }
            | Inst::Cmp { dst, .. } => Some(dst),
            Inst::Call { dst, .. } => dst.as_deref(),
            _ => None,
        }
    }

    /// Value names read by this instruction, in operand order.
    pub fn uses(&self) -> Vec<&str> {
        fn op(o: &Operand) -> Option<&str> {
            o.value()
        }
        match self {
            Inst::Const { .. } | Inst::AddrOfLocal { .. } | Inst::AddrOfGlobal { .. } | Inst::Br { .. } => vec![],
            Inst::Bin { lhs, rhs, .. } => op(lhs).into_iter().chain(op(rhs)).collect(),
            Inst::FBin { lhs, rhs, .. } => vec![lhs, rhs],
            Inst::Load { addr, .. } | Inst::FLoad { addr, .. } => vec![addr],
            Inst::Store { value, addr } => op(value).into_iter().chain([addr.as_str()]).collect(),
            Inst::FStore { value, addr } => vec![value, addr],
            Inst::Call { args, .. } => args.iter().filter_map(op).collect(),
            Inst::Cmp { lhs, rhs, .. } => std::iter::once(lhs.as_str()).chain(op(rhs)).collect(),
            Inst::Emit { value } => op(value).into_iter().collect(),
            Inst::BrCond { cond, .. } => vec![cond],
            Inst::Ret { value } => value.as_ref().and_then(op).into_iter().collect(),
        }
    }

    pub fn successors(&self) -> Vec<&str> {
        match self {
            Inst::Br { target } => vec![target],
            Inst::BrCond { then_to, else_to, .. } => vec![then_to, else_to],
            _ => vec![],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrBlock {
    pub label: String,
    pub insts: Vec<Inst>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrFunction {
    pub name: String,
    pub params: Vec<Param>,
    pub locals: Vec<Local>,
    pub blocks: Vec<IrBlock>,
    pub ret_ty: IrType,
}

impl IrFunction {
    pub fn block_index(&self, label: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.label == label)
    }

    pub fn local(&self, name: &str) -> Option<&Local> {
        self.locals.iter().find(|l| l.name == name)
    }

    /// Predecessor lists by block index.
    pub fn predecessors(&self) -> Vec<Vec<usize>> {
        let mut preds = vec![Vec::new(); self.blocks.len()];
        for (i, b) in self.blocks.iter().enumerate() {
            if let Some(t) = b.insts.last() {
                for s in t.successors() {
                    if let Some(j) = self.block_index(s) {
                        if !preds[j].contains(&i) {
                            preds[j].push(i);
                        }
                    }
                }
            }
        }
        preds
    }

    pub fn successors(&self, block: usize) -> Vec<usize> {
        self.blocks[block]
            .insts
            .last()
            .map(|t| t.successors().into_iter().filter_map(|s| self.block_index(s)).collect())
            .unwrap_or_default()
    }

    /// Indices of blocks that are the target of a back edge in layout order.
    pub fn loop_headers(&self) -> Vec<usize> {
        let mut out: Vec<usize> = (0..self.blocks.len())
            .flat_map(|b| self.successors(b).into_iter().filter(move |&s| s <= b))
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrProgram {
    pub globals: Vec<GlobalDef>,
    pub functions: Vec<IrFunction>,
    pub entry: String,
}

impl IrProgram {
    pub fn function(&self, name: &str) -> Option<&IrFunction> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn global(&self, name: &str) -> Option<&GlobalDef> {
        self.globals.iter().find(|g| g.name == name)
    }

    /// Content hash of the canonical text form.
    pub fn hash(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        Sha256::digest(print_program(self).as_bytes()).into()
    }
}

/// Backward liveness over IR values. Returns, per block, the live-out set.
pub fn live_out_sets(f: &IrFunction) -> Vec<std::collections::BTreeSet<String>> {
    use std::collections::BTreeSet;
    let n = f.blocks.len();
    let mut live_in: Vec<BTreeSet<String>> = vec![BTreeSet::new(); n];
    let mut live_out: Vec<BTreeSet<String>> = vec![BTreeSet::new(); n];
    let succs: Vec<Vec<usize>> = (0..n).map(|b| f.successors(b)).collect();
    loop {
        let mut changed = false;
        for b in (0..n).rev() {
            let out: BTreeSet<String> = succs[b].iter().flat_map(|&s| live_in[s].iter().cloned()).collect();
            let mut live = out.clone();
            for inst in f.blocks[b].insts.iter().rev() {
                if let Some(d) = inst.def() {
                    live.remove(d);
                }
                for u in inst.uses() {
                    live.insert(u.to_string());
                }
            }
            if out != live_out[b] || live != live_in[b] {
                live_out[b] = out;
                live_in[b] = live;
                changed = true;
            }
        }
        if !changed {
            return live_out;
        }
    }
}
