//! IR to virtual-register machine code.

use std::collections::{BTreeSet, HashMap};

use super::imm::{fits_i32, legal_arith_immediate, move_chunks};
use super::{
    AluOp, Callsite, CodegenError, FAluOp, FrameSlot, Home, MOp, MachineFunction, MachineInstr, Mem, Reg, Rules,
    Src,
};
use crate::abi::{classify_arguments, return_register, ArgLocation, Role, TargetId};
use crate::ir::{live_out_sets, BinOp, Cond, FBinOp, Inst, IrFunction, IrProgram, IrType, Operand};

#[derive(Debug, Clone)]
enum Kind {
    Held(u32),
    Const(u64),
    LocalAddr(u32),
    GlobalAddr(String),
    /// `base + index`, folded into the memory operands that use it.
    Folded(u32, u32),
    /// Comparison consumed directly by the following conditional branch.
    Fused,
}

/// Whether `v` may be encoded as an immediate operand / recomputed at each use.
pub(crate) fn immediate_ok(target: TargetId, rules: &Rules, v: u64) -> bool {
    if target == TargetId::X64 && !rules.imm_unify {
        fits_i32(v)
    } else {
        legal_arith_immediate(v)
    }
}

struct Sel<'a> {
    prog: &'a IrProgram,
    f: &'a IrFunction,
    target: TargetId,
    rules: &'a Rules,
    mf: MachineFunction,
    kinds: HashMap<String, Kind>,
    types: HashMap<String, IrType>,
}

pub fn select_instructions(
    prog: &IrProgram,
    f: &IrFunction,
    target: TargetId,
    rules: &Rules,
) -> Result<MachineFunction, CodegenError> {
    let mf = MachineFunction {
        name: f.name.clone(),
        target,
        instrs: Vec::new(),
        frame: None,
        callsites: Vec::new(),
        locals: f.locals.iter().map(|l| l.name.clone()).collect(),
        vreg_float: Vec::new(),
        vreg_temp: Vec::new(),
        values: Vec::new(),
        spill_slots: 0,
        saved: Vec::new(),
        outgoing: 0,
    };
    let mut s = Sel { prog, f, target, rules, mf, kinds: HashMap::new(), types: HashMap::new() };
    s.classify()?;
    s.lower()?;
    let mut values = Vec::new();
    for p in &f.params {
        values.push((p.name.clone(), s.home_of(&p.name)));
    }
    for b in &f.blocks {
        for i in &b.insts {
            if let Some(d) = i.def() {
                if !matches!(s.kinds.get(d), Some(Kind::Fused)) {
                    values.push((d.to_string(), s.home_of(d)));
                }
            }
        }
    }
    s.mf.values = values;
    Ok(s.mf)
}

impl<'a> Sel<'a> {
    fn unsupported(&self, what: impl Into<String>) -> CodegenError {
        CodegenError::Unsupported { function: self.f.name.clone(), what: what.into() }
    }

    fn is_x64(&self) -> bool {
        self.target == TargetId::X64
    }

    fn home_of(&self, name: &str) -> Home {
        match &self.kinds[name] {
            Kind::Held(v) => Home::VReg(*v),
            Kind::Const(c) => Home::Constant(*c),
            Kind::LocalAddr(_) | Kind::GlobalAddr(_) | Kind::Folded(..) | Kind::Fused => Home::Recomputed,
        }
    }

    fn value_type(&self, inst: &Inst) -> IrType {
        match inst {
            Inst::Const { ty, .. } => *ty,
            Inst::FBin { .. } | Inst::FLoad { .. } => IrType::F64,
            Inst::AddrOfLocal { .. } | Inst::AddrOfGlobal { .. } => IrType::Ptr,
            Inst::Call { callee, .. } => self.prog.function(callee).map(|g| g.ret_ty).unwrap_or(IrType::I64),
            _ => IrType::I64,
        }
    }

    fn classify(&mut self) -> Result<(), CodegenError> {
        let f = self.f;
        // Every use site of each value: (is_address_use, inst).
        let mut uses: HashMap<&str, Vec<(bool, &Inst)>> = HashMap::new();
        for b in &f.blocks {
            for i in &b.insts {
                let addr = match i {
                    Inst::Load { addr, .. } | Inst::FLoad { addr, .. } => Some(addr.as_str()),
                    Inst::Store { value, addr } => {
                        if let Operand::Value(v) = value {
                            uses.entry(v.as_str()).or_default().push((false, i));
                        }
                        Some(addr.as_str())
                    }
                    Inst::FStore { value, addr } => {
                        uses.entry(value.as_str()).or_default().push((false, i));
                        Some(addr.as_str())
                    }
                    _ => None,
                };
                if let Some(a) = addr {
                    uses.entry(a).or_default().push((true, i));
                }
                if !matches!(i, Inst::Load { .. } | Inst::FLoad { .. } | Inst::Store { .. } | Inst::FStore { .. }) {
                    for u in i.uses() {
                        uses.entry(u).or_default().push((false, i));
                    }
                }
            }
        }
        for p in &f.params {
            self.types.insert(p.name.clone(), p.ty);
            let v = self.mf.new_vreg(p.ty == IrType::F64, false);
            self.kinds.insert(p.name.clone(), Kind::Held(vreg_id(v)));
        }
        let live_out = live_out_sets(f);
        for (bi, b) in f.blocks.iter().enumerate() {
            for (ii, i) in b.insts.iter().enumerate() {
                let Some(d) = i.def() else { continue };
                let ty = self.value_type(i);
                self.types.insert(d.to_string(), ty);
                let kind = match i {
                    Inst::Const { ty, bits, .. } if *ty != IrType::F64 => {
                        let keep_zero = self.is_x64() && !self.rules.zero_rule && *bits == 0;
                        if !keep_zero && immediate_ok(self.target, self.rules, *bits) {
                            Some(Kind::Const(*bits))
                        } else {
                            None
                        }
                    }
                    Inst::AddrOfLocal { local, .. } if !(self.is_x64() && !self.rules.remat) => {
                        let idx = f.locals.iter().position(|l| &l.name == local).unwrap() as u32;
                        Some(Kind::LocalAddr(idx))
                    }
                    Inst::AddrOfGlobal { global, .. } if !(self.is_x64() && !self.rules.remat) => {
                        Some(Kind::GlobalAddr(global.clone()))
                    }
                    Inst::Bin { op: BinOp::Add, lhs: Operand::Value(a), rhs: Operand::Value(o), .. }
                        if self.is_x64() && !self.rules.addr_restrict =>
                    {
                        let us = uses.get(d).map(|v| v.as_slice()).unwrap_or(&[]);
                        let held = |n: &str| match self.kinds.get(n) {
                            Some(Kind::Held(v)) => Some(*v),
                            _ => None,
                        };
                        match (held(a), held(o)) {
                            (Some(x), Some(y)) if !us.is_empty() && us.iter().all(|(addr, _)| *addr) => {
                                Some(Kind::Folded(x, y))
                            }
                            _ => None,
                        }
                    }
                    Inst::Cmp { .. } => {
                        let last = b.insts.len() - 1;
                        let fused = ii + 1 == last
                            && matches!(&b.insts[last], Inst::BrCond { cond, .. } if cond == d)
                            && uses.get(d).map(|u| u.len()) == Some(1)
                            && !live_out[bi].contains(d);
                        fused.then_some(Kind::Fused)
                    }
                    _ => None,
                };
                let kind = match kind {
                    Some(k) => k,
                    None => {
                        let v = self.mf.new_vreg(ty == IrType::F64, false);
                        Kind::Held(vreg_id(v))
                    }
                };
                self.kinds.insert(d.to_string(), kind);
            }
        }
        Ok(())
    }

    fn push(&mut self, op: MOp) {
        self.mf.instrs.push(MachineInstr::new(op));
    }

    fn push_remat(&mut self, op: MOp) {
        self.mf.instrs.push(MachineInstr::remat(op));
    }

    fn temp(&mut self, float: bool) -> Reg {
        self.mf.new_vreg(float, true)
    }

    fn materialize(&mut self, dst: Reg, v: u64, remat: bool) {
        for (k, c) in move_chunks(v).into_iter().enumerate() {
            let op = MOp::MovImm { dst, imm: v, chunk: c, first: k == 0 };
            if remat {
                self.push_remat(op)
            } else {
                self.push(op)
            }
        }
    }

    fn is_float(&self, name: &str) -> bool {
        self.types.get(name) == Some(&IrType::F64)
    }

    /// Register holding the value `name` at this point.
    fn reg_of(&mut self, name: &str) -> Reg {
        match self.kinds[name].clone() {
            Kind::Held(v) => Reg::V(v),
            Kind::Const(c) => {
                let t = self.temp(false);
                self.materialize(t, c, true);
                t
            }
            Kind::LocalAddr(l) => {
                let t = self.temp(false);
                self.push_remat(MOp::FrameAddr { dst: t, slot: FrameSlot::Local(l) });
                t
            }
            Kind::GlobalAddr(g) => {
                let t = self.temp(false);
                self.push_remat(MOp::GlobalAddr { dst: t, symbol: g });
                t
            }
            Kind::Folded(b, o) => {
                let t = self.temp(false);
                self.push_remat(MOp::Mov { dst: t, src: Reg::V(b) });
                self.push_remat(MOp::Alu { op: AluOp::Add, dst: t, lhs: t, rhs: Src::Reg(Reg::V(o)) });
                t
            }
            Kind::Fused => unreachable!("fused comparison used as a value"),
        }
    }

    fn operand_reg(&mut self, op: &Operand) -> Reg {
        match op {
            Operand::Value(v) => self.reg_of(v),
            Operand::Imm(i) => {
                let t = self.temp(false);
                self.materialize(t, *i as u64, true);
                t
            }
        }
    }

    fn operand_src(&mut self, op: &Operand, allow_imm: bool) -> Src {
        let c = match op {
            Operand::Imm(i) => Some(*i as u64),
            Operand::Value(v) => match &self.kinds[v.as_str()] {
                Kind::Const(c) => Some(*c),
                _ => None,
            },
        };
        match c {
            Some(c) if allow_imm && immediate_ok(self.target, self.rules, c) => Src::Imm(c as i64),
            _ => Src::Reg(self.operand_reg(op)),
        }
    }

    fn mem_of(&mut self, addr: &str) -> Mem {
        match self.kinds[addr].clone() {
            Kind::LocalAddr(l) => Mem::frame(FrameSlot::Local(l)),
            Kind::Folded(b, o) => Mem { base: super::Base::Reg(Reg::V(b)), index: Some(Reg::V(o)), disp: 0 },
            _ => Mem::reg(self.reg_of(addr)),
        }
    }

    fn dst(&self, name: &str) -> Reg {
        match &self.kinds[name] {
            Kind::Held(v) => Reg::V(*v),
            k => panic!("value `{name}` is not held in a register: {k:?}"),
        }
    }

    fn lower(&mut self) -> Result<(), CodegenError> {
        let f = self.f;
        let headers: BTreeSet<usize> = f.loop_headers().into_iter().collect();
        let live_out = live_out_sets(f);
        let label = |l: &str| f.block_index(l).unwrap() as u32;
        let mut site = 0u32;
        for (bi, b) in f.blocks.iter().enumerate() {
            self.push(MOp::Label { block: bi as u32, loop_header: headers.contains(&bi) });
            if bi == 0 {
                self.lower_params();
            }
            // IR values live after each instruction, for callsite records.
            let mut live_after = vec![BTreeSet::new(); b.insts.len()];
            let mut live = live_out[bi].clone();
            for (ii, inst) in b.insts.iter().enumerate().rev() {
                live_after[ii] = live.clone();
                if let Some(d) = inst.def() {
                    live.remove(d);
                }
                for u in inst.uses() {
                    live.insert(u.to_string());
                }
            }
            let next = bi + 1;
            for (ii, inst) in b.insts.iter().enumerate() {
                match inst {
                    Inst::Const { dst, ty, bits } => {
                        if let Kind::Held(v) = self.kinds[dst.as_str()] {
                            if *ty == IrType::F64 {
                                let t = self.temp(false);
                                self.materialize(t, *bits, false);
                                self.push(MOp::FMovFromGpr { dst: Reg::V(v), src: t });
                            } else {
                                self.materialize(Reg::V(v), *bits, false);
                            }
                        }
                    }
                    Inst::Bin { op, dst, lhs, rhs } => {
                        if matches!(self.kinds[dst.as_str()], Kind::Folded(..)) {
                            continue;
                        }
                        let d = self.dst(dst);
                        let op = match op {
                            BinOp::Add => AluOp::Add,
                            BinOp::Sub => AluOp::Sub,
                            BinOp::Mul => AluOp::Mul,
                        };
                        let l = self.operand_reg(lhs);
                        let r = self.operand_src(rhs, op != AluOp::Mul);
                        self.push(MOp::Alu { op, dst: d, lhs: l, rhs: r });
                    }
                    Inst::FBin { op, dst, lhs, rhs } => {
                        let d = self.dst(dst);
                        let l = self.reg_of(lhs);
                        let r = self.reg_of(rhs);
                        let op = match op {
                            FBinOp::FAdd => FAluOp::Add,
                            FBinOp::FMul => FAluOp::Mul,
                        };
                        self.push(MOp::FAlu { op, dst: d, lhs: l, rhs: r });
                    }
                    Inst::Load { dst, addr } | Inst::FLoad { dst, addr } => {
                        let d = self.dst(dst);
                        let mem = self.mem_of(addr);
                        self.push(MOp::Load { dst: d, mem });
                    }
                    Inst::Store { value, addr } => {
                        let v = self.operand_reg(value);
                        let mem = self.mem_of(addr);
                        self.push(MOp::Store { src: v, mem });
                    }
                    Inst::FStore { value, addr } => {
                        let v = self.reg_of(value);
                        let mem = self.mem_of(addr);
                        self.push(MOp::Store { src: v, mem });
                    }
                    Inst::AddrOfLocal { dst, local } => {
                        if let Kind::Held(v) = self.kinds[dst.as_str()] {
                            let l = f.locals.iter().position(|x| &x.name == local).unwrap() as u32;
                            self.push(MOp::FrameAddr { dst: Reg::V(v), slot: FrameSlot::Local(l) });
                        }
                    }
                    Inst::AddrOfGlobal { dst, global } => {
                        if let Kind::Held(v) = self.kinds[dst.as_str()] {
                            self.push(MOp::GlobalAddr { dst: Reg::V(v), symbol: global.clone() });
                        }
                    }
                    Inst::Call { dst, callee, args } => {
                        let live: Vec<String> = self.ordered_live(&live_after[ii], dst.as_deref());
                        self.lower_call(dst.as_deref(), callee, args, site, live)?;
                        site += 1;
                    }
                    Inst::Cmp { dst, cond, lhs, rhs } => {
                        let float = self.is_float(lhs);
                        let l = self.reg_of(lhs);
                        if float {
                            let Operand::Value(r) = rhs else {
                                return Err(self.unsupported("float compare against an immediate"));
                            };
                            let r = self.reg_of(r);
                            self.push(MOp::FCmp { lhs: l, rhs: r });
                        } else {
                            let r = self.operand_src(rhs, true);
                            self.push(MOp::Cmp { lhs: l, rhs: r });
                        }
                        match self.kinds[dst.as_str()] {
                            Kind::Fused => {
                                let Some(Inst::BrCond { then_to, else_to, .. }) = b.insts.last() else { unreachable!() };
                                self.push(MOp::JCond { cond: *cond, float, block: label(then_to) });
                                if label(else_to) as usize != next {
                                    self.push(MOp::Jmp { block: label(else_to) });
                                }
                                break;
                            }
                            _ => {
                                let d = self.dst(dst);
                                self.push(MOp::SetCond { dst: d, cond: *cond, float });
                            }
                        }
                    }
                    Inst::Emit { value } => {
                        let r = self.operand_reg(value);
                        self.push(MOp::Emit { src: r });
                    }
                    Inst::Br { target } => {
                        if label(target) as usize != next {
                            self.push(MOp::Jmp { block: label(target) });
                        }
                    }
                    Inst::BrCond { cond, then_to, else_to } => {
                        let c = self.reg_of(cond);
                        self.push(MOp::Cmp { lhs: c, rhs: Src::Imm(0) });
                        self.push(MOp::JCond { cond: Cond::Ne, float: false, block: label(then_to) });
                        if label(else_to) as usize != next {
                            self.push(MOp::Jmp { block: label(else_to) });
                        }
                    }
                    Inst::Ret { value } => {
                        let float = match value {
                            Some(Operand::Value(v)) => self.is_float(v),
                            _ => false,
                        };
                        let ret = if float { Role::F(0) } else { Role::Ret0 };
                        match value {
                            Some(Operand::Value(v)) => {
                                let r = self.reg_of(v);
                                self.push(MOp::Mov { dst: Reg::P(ret), src: r });
                            }
                            Some(Operand::Imm(i)) => self.materialize(Reg::P(ret), *i as u64, false),
                            None => self.materialize(Reg::P(ret), 0, false),
                        }
                        self.push(MOp::Ret { float });
                    }
                }
            }
        }
        Ok(())
    }

    /// Live-across set in definition order (parameters first).
    fn ordered_live(&self, live_after: &BTreeSet<String>, def: Option<&str>) -> Vec<String> {
        let f = self.f;
        let mut out = Vec::new();
        let mut consider = |n: &str| {
            if Some(n) != def && live_after.contains(n) {
                out.push(n.to_string());
            }
        };
        for p in &f.params {
            consider(&p.name);
        }
        for b in &f.blocks {
            for i in &b.insts {
                if let Some(d) = i.def() {
                    consider(d);
                }
            }
        }
        out
    }

    fn lower_params(&mut self) {
        let f = self.f;
        let tys: Vec<IrType> = f.params.iter().map(|p| p.ty).collect();
        let mut overflow = 0u32;
        for (p, loc) in f.params.iter().zip(classify_arguments(&tys)) {
            let d = self.dst(&p.name);
            match loc {
                ArgLocation::Reg(r) => self.push(MOp::Mov { dst: d, src: Reg::P(r) }),
                ArgLocation::Stack(_) => {
                    self.push(MOp::Load { dst: d, mem: Mem::frame(FrameSlot::IncomingArg(overflow)) });
                    overflow += 1;
                }
            }
        }
    }

    fn lower_call(
        &mut self,
        dst: Option<&str>,
        callee: &str,
        args: &[Operand],
        site: u32,
        live: Vec<String>,
    ) -> Result<(), CodegenError> {
        let tys: Vec<IrType> = args
            .iter()
            .map(|a| match a {
                Operand::Imm(_) => IrType::I64,
                Operand::Value(v) => self.types[v.as_str()],
            })
            .collect();
        let locs = classify_arguments(&tys);
        let mut stack_bytes = 0u32;
        for (a, loc) in args.iter().zip(&locs) {
            if let ArgLocation::Stack(off) = loc {
                let r = self.operand_reg(a);
                let mem = Mem { base: super::Base::Reg(Reg::P(Role::Sp)), index: None, disp: off - 8 };
                self.push(MOp::Store { src: r, mem });
                stack_bytes = stack_bytes.max(*off as u32);
            }
        }
        self.mf.outgoing = self.mf.outgoing.max(stack_bytes);
        let (mut ni, mut nf) = (0u8, 0u8);
        for (a, loc) in args.iter().zip(&locs) {
            let ArgLocation::Reg(role) = loc else { continue };
            if role.class() == crate::abi::RegClass::Fpr {
                nf += 1;
            } else {
                ni += 1;
            }
            let d = Reg::P(*role);
            match a {
                Operand::Imm(i) => self.materialize(d, *i as u64, true),
                Operand::Value(v) => match self.kinds[v.as_str()].clone() {
                    Kind::Held(x) => self.push(MOp::Mov { dst: d, src: Reg::V(x) }),
                    Kind::Const(c) => self.materialize(d, c, true),
                    Kind::LocalAddr(l) => self.push_remat(MOp::FrameAddr { dst: d, slot: FrameSlot::Local(l) }),
                    Kind::GlobalAddr(g) => self.push_remat(MOp::GlobalAddr { dst: d, symbol: g }),
                    _ => {
                        let r = self.reg_of(v);
                        self.push(MOp::Mov { dst: d, src: r });
                    }
                },
            }
        }
        self.push(MOp::Call { callee: callee.to_string(), site, int_args: ni, fp_args: nf });
        if let Some(d) = dst {
            let ret_ty = self.types[d];
            let r = self.dst(d);
            self.push(MOp::Mov { dst: r, src: Reg::P(return_register(ret_ty)) });
        }
        let live = live.into_iter().map(|n| {
            let h = self.home_of(&n);
            (n, h)
        });
        self.mf.callsites.push(Callsite { site, callee: callee.to_string(), live: live.collect() });
        Ok(())
    }
}

fn vreg_id(r: Reg) -> u32 {
    match r {
        Reg::V(v) => v,
        Reg::P(_) => unreachable!(),
    }
}
