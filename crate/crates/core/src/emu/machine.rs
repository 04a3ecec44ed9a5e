//! Execution of linked images.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abi::{physical, Role, TargetId};
use crate::codegen::{AluOp, Base, FAluOp, MOp, Mem, Reg, Src};
use crate::ir::Cond;
use crate::layout::{Image, SiteInfo, EXIT_ADDR, STACK_BASE, STACK_LIMIT};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EmuError {
    #[error("fuel exhausted after {0} instructions")]
    FuelExhausted(u64),
    #[error("memory fault at {addr:#x} (pc {pc:#x})")]
    MemoryFault { addr: u64, pc: u64 },
    #[error("stack overflow (pc {0:#x})")]
    StackOverflow(u64),
    #[error("no instruction at {0:#x}")]
    BadPc(u64),
    #[error("unsupported instruction at {pc:#x}: {what}")]
    Unsupported { pc: u64, what: String },
}

const X64_GPR: [&str; 16] =
    ["rax", "rcx", "rdx", "rbx", "rsp", "rbp", "rsi", "rdi", "r8", "r9", "r10", "r11", "r12", "r13", "r14", "r15"];

/// Physical register file slot of a role: (is_fpr, index).
pub fn reg_slot(target: TargetId, role: Role) -> Option<(bool, usize)> {
    let name = physical(role, target)?;
    match target {
        TargetId::X64 => {
            if let Some(n) = name.strip_prefix("xmm") {
                return Some((true, n.parse().ok()?));
            }
            X64_GPR.iter().position(|g| *g == name).map(|i| (false, i))
        }
        TargetId::A64 => {
            if let Some(n) = name.strip_prefix('v') {
                return Some((true, n.parse().ok()?));
            }
            match name.as_str() {
                "SP" => Some((false, 31)),
                "rzr" => Some((false, 32)),
                _ => Some((false, name.strip_prefix('r')?.parse().ok()?)),
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Flags {
    Int(i64, i64),
    Float(u64, u64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineState {
    pub target: TargetId,
    pub pc: u64,
    /// X64: 16 registers in encoding order. A64: r0..r30, SP, zero.
    pub gpr: Vec<u64>,
    pub fpr: Vec<u64>,
    pub flags: Option<Flags>,
    /// Stack region `[STACK_BASE - STACK_LIMIT, STACK_BASE)`.
    pub stack: Vec<u8>,
    pub data_base: u64,
    pub data: Vec<u8>,
    pub output: Vec<u64>,
    pub halted: bool,
    pub steps: u64,
}

impl MachineState {
    pub fn get(&self, role: Role) -> u64 {
        match reg_slot(self.target, role) {
            Some((true, i)) => self.fpr[i],
            Some((false, i)) => self.gpr[i],
            None => 0,
        }
    }

    pub fn set(&mut self, role: Role, v: u64) {
        match reg_slot(self.target, role) {
            Some((true, i)) => self.fpr[i] = v,
            Some((false, 32)) => {}
            Some((false, i)) => self.gpr[i] = v,
            None => {}
        }
    }

    pub fn sp(&self) -> u64 {
        self.get(Role::Sp)
    }

    pub fn fp(&self) -> u64 {
        self.get(Role::Fp)
    }

    fn region(&self, addr: u64, len: u64) -> Option<(bool, usize)> {
        let lo = STACK_BASE - STACK_LIMIT;
        if addr >= lo && addr.checked_add(len)? <= STACK_BASE {
            return Some((true, (addr - lo) as usize));
        }
        if addr >= self.data_base && addr + len <= self.data_base + self.data.len() as u64 {
            return Some((false, (addr - self.data_base) as usize));
        }
        None
    }

    pub fn read_u64(&self, addr: u64) -> Option<u64> {
        let (stack, off) = self.region(addr, 8)?;
        let m = if stack { &self.stack } else { &self.data };
        Some(u64::from_le_bytes(m[off..off + 8].try_into().unwrap()))
    }

    pub fn write_u64(&mut self, addr: u64, v: u64) -> Option<()> {
        let (stack, off) = self.region(addr, 8)?;
        let m = if stack { &mut self.stack } else { &mut self.data };
        m[off..off + 8].copy_from_slice(&v.to_le_bytes());
        Some(())
    }
}

/// Fresh state ready to run `img` from its entry function.
pub fn load_image(img: &Image) -> MachineState {
    let (ng, nf) = match img.target {
        TargetId::X64 => (16, 16),
        TargetId::A64 => (33, 16),
    };
    let mut s = MachineState {
        target: img.target,
        pc: img.entry,
        gpr: vec![0; ng],
        fpr: vec![0; nf],
        flags: None,
        stack: vec![0; STACK_LIMIT as usize],
        data_base: img.data_base,
        data: img.data.clone(),
        output: Vec::new(),
        halted: false,
        steps: 0,
    };
    // The loader performs the initial call: the entry frame's return
    // address slot sits just below STACK_BASE on both targets.
    match img.target {
        TargetId::X64 => {
            s.set(Role::Sp, STACK_BASE - 8);
            s.write_u64(STACK_BASE - 8, EXIT_ADDR).expect("stack");
        }
        TargetId::A64 => {
            s.set(Role::Sp, STACK_BASE);
            s.set(Role::Lr, EXIT_ADDR);
        }
    }
    s
}

fn eval(cond: Cond, flags: Flags) -> bool {
    match flags {
        Flags::Int(a, b) => cond.eval_i64(a, b),
        Flags::Float(a, b) => cond.eval_f64(f64::from_bits(a), f64::from_bits(b)),
    }
}

fn reg(s: &MachineState, r: Reg) -> u64 {
    match r {
        Reg::P(role) => s.get(role),
        Reg::V(v) => panic!("virtual register v{v} in linked code"),
    }
}

fn set_reg(s: &mut MachineState, r: Reg, v: u64) {
    if let Reg::P(role) = r {
        s.set(role, v)
    }
}

fn addr_of(s: &MachineState, m: &Mem, pc: u64) -> Result<u64, EmuError> {
    let base = match m.base {
        Base::Reg(r) => reg(s, r),
        Base::Frame(_) => return Err(EmuError::Unsupported { pc, what: "unresolved frame slot".into() }),
    };
    let idx = m.index.map(|r| reg(s, r)).unwrap_or(0);
    Ok(base.wrapping_add(idx).wrapping_add(m.disp as u64))
}

fn check_sp(s: &MachineState, pc: u64) -> Result<(), EmuError> {
    if s.sp() < STACK_BASE - STACK_LIMIT || s.sp() > STACK_BASE {
        return Err(EmuError::StackOverflow(pc));
    }
    Ok(())
}

fn push(s: &mut MachineState, v: u64, pc: u64) -> Result<(), EmuError> {
    let sp = s.sp().wrapping_sub(8);
    s.set(Role::Sp, sp);
    check_sp(s, pc)?;
    s.write_u64(sp, v).ok_or(EmuError::MemoryFault { addr: sp, pc })
}

fn pop(s: &mut MachineState, pc: u64) -> Result<u64, EmuError> {
    let sp = s.sp();
    let v = s.read_u64(sp).ok_or(EmuError::MemoryFault { addr: sp, pc })?;
    s.set(Role::Sp, sp + 8);
    Ok(v)
}

/// Callsite about to be executed, if the instruction at PC is a call.
pub fn pending_call<'i>(s: &MachineState, img: &'i Image) -> Option<&'i SiteInfo> {
    let (f, i, ins) = img.fetch(s.pc)?;
    if let MOp::Call { .. } = ins.op {
        let addr = img.instr_addr(f, i);
        img.sites.iter().find(|x| x.call_addr == addr)
    } else {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    Continue,
    Called,
    Returned,
    Halted,
}

/// Executes one instruction.
pub fn step(s: &mut MachineState, img: &Image) -> Result<Step, EmuError> {
    let pc = s.pc;
    let (_, _, ins) = img.fetch(pc).ok_or(EmuError::BadPc(pc))?;
    let next = pc + ins.size as u64;
    s.steps += 1;
    let mut out = Step::Continue;
    let mut new_pc = next;
    let fault = |addr| EmuError::MemoryFault { addr, pc };
    match &ins.op {
        MOp::Label { .. } | MOp::Nop { .. } => {}
        MOp::Mov { dst, src } => set_reg(s, *dst, reg(s, *src)),
        MOp::MovImm { dst, imm, chunk, first } => {
            let mask = 0xffffu64 << (16 * *chunk as u32);
            let part = imm & mask;
            let v = if *first { part } else { (reg(s, *dst) & !mask) | part };
            set_reg(s, *dst, v);
        }
        MOp::FMovFromGpr { dst, src } => set_reg(s, *dst, reg(s, *src)),
        MOp::Alu { op, dst, lhs, rhs } => {
            let a = reg(s, *lhs);
            let b = match rhs {
                Src::Reg(r) => reg(s, *r),
                Src::Imm(i) => *i as u64,
            };
            let v = match op {
                AluOp::Add => a.wrapping_add(b),
                AluOp::Sub => a.wrapping_sub(b),
                AluOp::Mul => a.wrapping_mul(b),
            };
            set_reg(s, *dst, v);
            if *dst == Reg::P(Role::Sp) {
                check_sp(s, pc)?;
            }
        }
        MOp::FAlu { op, dst, lhs, rhs } => {
            let a = f64::from_bits(reg(s, *lhs));
            let b = f64::from_bits(reg(s, *rhs));
            let v = match op {
                FAluOp::Add => a + b,
                FAluOp::Mul => a * b,
            };
            set_reg(s, *dst, v.to_bits());
        }
        MOp::Load { dst, mem } => {
            let a = addr_of(s, mem, pc)?;
            let v = s.read_u64(a).ok_or(fault(a))?;
            set_reg(s, *dst, v);
        }
        MOp::Store { src, mem } => {
            let a = addr_of(s, mem, pc)?;
            let v = reg(s, *src);
            s.write_u64(a, v).ok_or(fault(a))?;
        }
        MOp::GlobalAddr { dst, symbol } => {
            let g = img.globals.iter().find(|g| &g.name == symbol).ok_or(EmuError::Unsupported {
                pc,
                what: format!("unknown global `{symbol}`"),
            })?;
            set_reg(s, *dst, g.addr);
        }
        MOp::FrameAddr { .. } => return Err(EmuError::Unsupported { pc, what: "unresolved frame address".into() }),
        MOp::Cmp { lhs, rhs } => {
            let b = match rhs {
                Src::Reg(r) => reg(s, *r),
                Src::Imm(i) => *i as u64,
            };
            s.flags = Some(Flags::Int(reg(s, *lhs) as i64, b as i64));
        }
        MOp::FCmp { lhs, rhs } => s.flags = Some(Flags::Float(reg(s, *lhs), reg(s, *rhs))),
        MOp::SetCond { dst, cond, .. } => {
            let f = s.flags.ok_or(EmuError::Unsupported { pc, what: "condition without compare".into() })?;
            set_reg(s, *dst, eval(*cond, f) as u64);
        }
        MOp::Jmp { block } => {
            let (f, _, _) = img.fetch(pc).unwrap();
            new_pc = img.label_addr(f, *block);
        }
        MOp::JCond { cond, block, .. } => {
            let fl = s.flags.ok_or(EmuError::Unsupported { pc, what: "branch without compare".into() })?;
            if eval(*cond, fl) {
                let (f, _, _) = img.fetch(pc).unwrap();
                new_pc = img.label_addr(f, *block);
            }
        }
        MOp::JumpOver { skip } => new_pc = next + *skip as u64,
        MOp::Call { callee, .. } => {
            let target = img.symbol(callee).ok_or(EmuError::Unsupported { pc, what: format!("call to `{callee}`") })?;
            match s.target {
                TargetId::X64 => push(s, next, pc)?,
                TargetId::A64 => s.set(Role::Lr, next),
            }
            new_pc = target.addr;
            out = Step::Called;
        }
        MOp::Ret { .. } => {
            new_pc = match s.target {
                TargetId::X64 => pop(s, pc)?,
                TargetId::A64 => s.get(Role::Lr),
            };
            if new_pc == EXIT_ADDR {
                s.halted = true;
                out = Step::Halted;
            } else {
                out = Step::Returned;
            }
        }
        MOp::Emit { src } => s.output.push(reg(s, *src)),
        MOp::Push { reg: r } => {
            let v = s.get(*r);
            push(s, v, pc)?;
        }
        MOp::Pop { reg: r } => {
            let v = pop(s, pc)?;
            s.set(*r, v);
        }
        MOp::PushFrameRecord => {
            let sp = s.sp().wrapping_sub(16);
            s.set(Role::Sp, sp);
            check_sp(s, pc)?;
            let (fp, lr) = (s.fp(), s.get(Role::Lr));
            s.write_u64(sp, fp).ok_or(fault(sp))?;
            s.write_u64(sp + 8, lr).ok_or(fault(sp + 8))?;
        }
        MOp::PopFrameRecord => {
            let sp = s.sp();
            let fp = s.read_u64(sp).ok_or(fault(sp))?;
            let lr = s.read_u64(sp + 8).ok_or(fault(sp + 8))?;
            s.set(Role::Fp, fp);
            s.set(Role::Lr, lr);
            s.set(Role::Sp, sp + 16);
        }
    }
    s.pc = new_pc;
    Ok(out)
}

/// Live frames at the current pre-call point, innermost first, as
/// `(fp, size)` pairs found by walking the saved-FP chain.
pub fn frame_chain(s: &MachineState) -> Vec<(u64, u32)> {
    let mut out = Vec::new();
    let mut fp = s.fp();
    let mut sp = s.sp();
    while fp != 0 && out.len() < 1 << 16 {
        out.push((fp, (fp + 16 - sp) as u32));
        sp = fp + 16;
        match s.read_u64(fp) {
            Some(next) => fp = next,
            None => break,
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallEvent {
    pub site: u32,
    pub sp: u64,
    pub fp: u64,
    /// Sizes of the live frames, innermost first.
    pub frames: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TraceEvent {
    Call(CallEvent),
    Return { to: u64 },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
}

impl Trace {
    pub fn calls(&self) -> impl Iterator<Item = &CallEvent> {
        self.events.iter().filter_map(|e| match e {
            TraceEvent::Call(c) => Some(c),
            _ => None,
        })
    }
}

/// What to do at a user callsite before executing the call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Pause,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RunEnd {
    Halted,
    /// Stopped before executing the call at this site id.
    Paused(u32),
}

/// Runs until halt, fuel exhaustion or until `on_call` asks to pause at a
/// callsite. The instruction at the starting pc is not offered, so a paused
/// run can be resumed.
pub fn run_with(
    s: &mut MachineState,
    img: &Image,
    fuel: u64,
    trace: Option<&mut Trace>,
    mut on_call: impl FnMut(&MachineState, &SiteInfo) -> Control,
) -> Result<RunEnd, EmuError> {
    let mut trace = trace;
    let limit = s.steps + fuel;
    let mut first = true;
    loop {
        if s.halted {
            return Ok(RunEnd::Halted);
        }
        if s.steps >= limit {
            return Err(EmuError::FuelExhausted(fuel));
        }
        if let Some(site) = pending_call(s, img) {
            if !first && on_call(s, site) == Control::Pause {
                return Ok(RunEnd::Paused(site.id));
            }
            if let Some(t) = trace.as_deref_mut() {
                let frames = frame_chain(s).into_iter().map(|(_, z)| z).collect();
                t.events.push(TraceEvent::Call(CallEvent { site: site.id, sp: s.sp(), fp: s.fp(), frames }));
            }
        }
        first = false;
        if step(s, img)? == Step::Returned {
            if let Some(t) = trace.as_deref_mut() {
                t.events.push(TraceEvent::Return { to: s.pc });
            }
        }
    }
}

/// Runs to completion.
pub fn run(img: &Image, fuel: u64) -> Result<MachineState, EmuError> {
    let mut s = load_image(img);
    run_with(&mut s, img, fuel, None, |_, _| Control::Continue)?;
    Ok(s)
}

/// Runs to completion, recording a trace.
pub fn run_traced(img: &Image, fuel: u64) -> Result<(MachineState, Trace), EmuError> {
    let mut s = load_image(img);
    let mut t = Trace::default();
    run_with(&mut s, img, fuel, Some(&mut t), |_, _| Control::Continue)?;
    Ok((s, t))
}
