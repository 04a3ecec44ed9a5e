//! Direct evaluator for [`IrProgram`]s. It shares no code with the backends
//! and serves as the oracle for every emulator output check.

use std::collections::HashMap;

use thiserror::Error;

use crate::ir::{BinOp, FBinOp, Inst, IrProgram, IrType, Operand};
use crate::layout::{data_layout, STACK_BASE, STACK_LIMIT};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RefError {
    #[error("fuel exhausted after {0} instructions")]
    FuelExhausted(u64),
    #[error("memory fault at {addr:#x}")]
    MemoryFault { addr: u64 },
    #[error("stack overflow")]
    StackOverflow,
    #[error("unknown function `{0}`")]
    UnknownFunction(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefOutcome {
    pub output: Vec<u64>,
    pub steps: u64,
    /// Number of call instructions executed.
    pub calls: u64,
    pub max_depth: usize,
}

/// State of the innermost frame when execution paused at a call.
#[derive(Debug, Clone, PartialEq)]
pub struct PausedFrame {
    pub function: String,
    pub depth: usize,
    /// Local name -> first 8 bytes of its storage.
    pub locals: Vec<(String, u64)>,
    pub values: HashMap<String, u64>,
    pub output: Vec<u64>,
}

struct Frame {
    func: usize,
    block: usize,
    ip: usize,
    values: HashMap<String, u64>,
    locals: HashMap<String, u64>,
    saved_sp: u64,
    ret_dst: Option<String>,
}

struct Machine<'p> {
    prog: &'p IrProgram,
    data_base: u64,
    data: Vec<u8>,
    stack: Vec<u8>,
    sp: u64,
    frames: Vec<Frame>,
    output: Vec<u64>,
    steps: u64,
    calls: u64,
    max_depth: usize,
    result: Option<u64>,
}

impl<'p> Machine<'p> {
    fn new(prog: &'p IrProgram) -> Result<Self, RefError> {
        let layout = data_layout(&prog.globals);
        let mut data = vec![0u8; layout.size as usize];
        for (g, off) in prog.globals.iter().zip(&layout.offsets) {
            data[*off as usize..*off as usize + g.init.len()].copy_from_slice(&g.init);
        }
        let mut m = Machine {
            prog,
            data_base: layout.base,
            data,
            stack: vec![0u8; STACK_LIMIT as usize],
            sp: STACK_BASE,
            frames: Vec::new(),
            output: Vec::new(),
            steps: 0,
            calls: 0,
            max_depth: 0,
            result: None,
        };
        let entry = prog
            .functions
            .iter()
            .position(|f| f.name == prog.entry)
            .ok_or_else(|| RefError::UnknownFunction(prog.entry.clone()))?;
        m.push_frame(entry, Vec::new(), None)?;
        Ok(m)
    }

    fn slot(&mut self, addr: u64) -> Result<&mut [u8], RefError> {
        let end = addr.checked_add(8).ok_or(RefError::MemoryFault { addr })?;
        if addr >= self.data_base && end <= self.data_base + self.data.len() as u64 {
            let o = (addr - self.data_base) as usize;
            return Ok(&mut self.data[o..o + 8]);
        }
        let lo = STACK_BASE - STACK_LIMIT;
        if addr >= lo && end <= STACK_BASE {
            let o = (addr - lo) as usize;
            return Ok(&mut self.stack[o..o + 8]);
        }
        Err(RefError::MemoryFault { addr })
    }

    fn load(&mut self, addr: u64) -> Result<u64, RefError> {
        Ok(u64::from_le_bytes(self.slot(addr)?.try_into().unwrap()))
    }

    fn store(&mut self, addr: u64, v: u64) -> Result<(), RefError> {
        self.slot(addr)?.copy_from_slice(&v.to_le_bytes());
        Ok(())
    }

    fn push_frame(&mut self, func: usize, args: Vec<u64>, ret_dst: Option<String>) -> Result<(), RefError> {
        let f = &self.prog.functions[func];
        let saved_sp = self.sp;
        let mut locals = HashMap::new();
        for l in &f.locals {
            let size = (l.size as u64).div_ceil(8) * 8;
            self.sp = self.sp.checked_sub(size).ok_or(RefError::StackOverflow)?;
            if self.sp < STACK_BASE - STACK_LIMIT {
                return Err(RefError::StackOverflow);
            }
            locals.insert(l.name.clone(), self.sp);
        }
        // Fresh locals start zeroed so reads of uninitialised storage are deterministic.
        for l in &f.locals {
            let base = locals[&l.name];
            let size = (l.size as u64).div_ceil(8) * 8;
            let lo = STACK_BASE - STACK_LIMIT;
            let o = (base - lo) as usize;
            self.stack[o..o + size as usize].fill(0);
        }
        let values = f.params.iter().map(|p| p.name.clone()).zip(args).collect();
        self.frames.push(Frame { func, block: 0, ip: 0, values, locals, saved_sp, ret_dst });
        self.max_depth = self.max_depth.max(self.frames.len());
        Ok(())
    }

    fn operand(&self, o: &Operand) -> u64 {
        match o {
            Operand::Imm(i) => *i as u64,
            Operand::Value(v) => self.frames.last().unwrap().values[v],
        }
    }

    fn value(&self, v: &str) -> u64 {
        self.frames.last().unwrap().values[v]
    }

    fn set(&mut self, dst: &str, v: u64) {
        self.frames.last_mut().unwrap().values.insert(dst.to_string(), v);
    }

    /// Execute one IR instruction. Returns false once the entry function returned.
    fn step(&mut self) -> Result<bool, RefError> {
        let fr = self.frames.last().unwrap();
        let func = &self.prog.functions[fr.func];
        let inst = func.blocks[fr.block].insts[fr.ip].clone();
        self.steps += 1;
        self.frames.last_mut().unwrap().ip += 1;
        match &inst {
            Inst::Const { dst, bits, .. } => self.set(dst, *bits),
            Inst::Bin { op, dst, lhs, rhs } => {
                let (a, b) = (self.operand(lhs), self.operand(rhs));
                let r = match op {
                    BinOp::Add => a.wrapping_add(b),
                    BinOp::Sub => a.wrapping_sub(b),
                    BinOp::Mul => a.wrapping_mul(b),
                };
                self.set(dst, r);
            }
            Inst::FBin { op, dst, lhs, rhs } => {
                let (a, b) = (f64::from_bits(self.value(lhs)), f64::from_bits(self.value(rhs)));
                let r = match op {
                    FBinOp::FAdd => a + b,
                    FBinOp::FMul => a * b,
                };
                self.set(dst, r.to_bits());
            }
            Inst::Load { dst, addr } | Inst::FLoad { dst, addr } => {
                let v = self.load(self.value(addr))?;
                self.set(dst, v);
            }
            Inst::Store { value, addr } => self.store(self.value(addr), self.operand(value))?,
            Inst::FStore { value, addr } => self.store(self.value(addr), self.value(value))?,
            Inst::AddrOfLocal { dst, local } => {
                let a = self.frames.last().unwrap().locals[local];
                self.set(dst, a);
            }
            Inst::AddrOfGlobal { dst, global } => {
                let layout = data_layout(&self.prog.globals);
                let idx = self.prog.globals.iter().position(|g| &g.name == global).unwrap();
                self.set(dst, layout.base + layout.offsets[idx]);
            }
            Inst::Call { dst, callee, args } => {
                self.calls += 1;
                let args: Vec<u64> = args.iter().map(|a| self.operand(a)).collect();
                let idx = self
                    .prog
                    .functions
                    .iter()
                    .position(|f| &f.name == callee)
                    .ok_or_else(|| RefError::UnknownFunction(callee.clone()))?;
                self.push_frame(idx, args, dst.clone())?;
            }
            Inst::Cmp { dst, cond, lhs, rhs } => {
                let a = self.value(lhs);
                let is_float = self.value_type(lhs) == IrType::F64;
                let b = self.operand(rhs);
                let r = if is_float {
                    cond.eval_f64(f64::from_bits(a), f64::from_bits(b))
                } else {
                    cond.eval_i64(a as i64, b as i64)
                };
                self.set(dst, r as u64);
            }
            Inst::Emit { value } => {
                let v = self.operand(value);
                self.output.push(v);
            }
            Inst::Br { target } => self.jump(target),
            Inst::BrCond { cond, then_to, else_to } => {
                let t = if self.value(cond) != 0 { then_to } else { else_to };
                self.jump(t);
            }
            Inst::Ret { value } => {
                let v = value.as_ref().map(|o| self.operand(o)).unwrap_or(0);
                let fr = self.frames.pop().unwrap();
                self.sp = fr.saved_sp;
                match self.frames.last_mut() {
                    None => {
                        self.result = Some(v);
                        return Ok(false);
                    }
                    Some(caller) => {
                        if let Some(d) = fr.ret_dst {
                            caller.values.insert(d, v);
                        }
                    }
                }
            }
        }
        Ok(true)
    }

    fn value_type(&self, v: &str) -> IrType {
        let fr = self.frames.last().unwrap();
        let f = &self.prog.functions[fr.func];
        if let Some(p) = f.params.iter().find(|p| p.name == v) {
            return p.ty;
        }
        for b in &f.blocks {
            for i in &b.insts {
                if i.def() == Some(v) {
                    return match i {
                        Inst::Const { ty, .. } => *ty,
                        Inst::FBin { .. } | Inst::FLoad { .. } => IrType::F64,
                        Inst::Call { callee, .. } => self.prog.function(callee).map(|c| c.ret_ty).unwrap_or(IrType::I64),
                        _ => IrType::I64,
                    };
                }
            }
        }
        IrType::I64
    }

    fn jump(&mut self, label: &str) {
        let fr = self.frames.last_mut().unwrap();
        fr.block = self.prog.functions[fr.func].block_index(label).unwrap();
        fr.ip = 0;
    }

    fn next_is_call(&self) -> bool {
        let fr = self.frames.last().unwrap();
        matches!(self.prog.functions[fr.func].blocks[fr.block].insts.get(fr.ip), Some(Inst::Call { .. }))
    }

    fn outcome(&self) -> RefOutcome {
        RefOutcome { output: self.output.clone(), steps: self.steps, calls: self.calls, max_depth: self.max_depth }
    }
}

/// Run the program to completion.
pub fn interpret(p: &IrProgram, fuel: u64) -> Result<RefOutcome, RefError> {
    let mut m = Machine::new(p)?;
    while m.step()? {
        if m.steps >= fuel {
            return Err(RefError::FuelExhausted(m.steps));
        }
    }
    Ok(m.outcome())
}

/// Run until just before the `occurrence`-th (0-based) executed call and
/// report the innermost frame. `None` if the program finishes first.
pub fn pause_at_call(p: &IrProgram, occurrence: u64, fuel: u64) -> Result<Option<PausedFrame>, RefError> {
    let mut m = Machine::new(p)?;
    loop {
        if m.next_is_call() && m.calls == occurrence {
            let fr = m.frames.last().unwrap();
            let f = &p.functions[fr.func];
            let locals = f
                .locals
                .iter()
                .map(|l| (l.name.clone(), fr.locals[&l.name]))
                .collect::<Vec<_>>();
            let mut read = Vec::new();
            for (n, a) in locals {
                read.push((n, m.load(a)?));
            }
            let fr = m.frames.last().unwrap();
            return Ok(Some(PausedFrame {
                function: f.name.clone(),
                depth: m.frames.len(),
                locals: read,
                values: fr.values.clone(),
                output: m.output.clone(),
            }));
        }
        if !m.step()? {
            return Ok(None);
        }
        if m.steps >= fuel {
            return Err(RefError::FuelExhausted(m.steps));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_program;

    #[test]
    fn straight_line() {
        let p = parse_program("func main() {\n%a = const 6\n%b = mul %a, 7\nemit %b\nret 0\n}").unwrap();
        assert_eq!(interpret(&p, 100).unwrap().output, vec![42]);
    }

    #[test]
    fn loop_with_locals_and_calls() {
        let src = r#"
func sq(%x: i64) -> i64 {
  %r = mul %x, %x
  ret %r
}
func main() {
  local i: i64
entry:
  %ia = addr-of-local i
  store 0, %ia
  br head
head:
  %iv = load %ia
  %c = cmp lt %iv, 4
  br-cond %c, body, done
body:
  %s = call sq(%iv)
  emit %s
  %n = add %iv, 1
  store %n, %ia
  br head
done:
  ret 0
}
"#;
        let p = parse_program(src).unwrap();
        let out = interpret(&p, 10_000).unwrap();
        assert_eq!(out.output, vec![0, 1, 4, 9]);
        assert_eq!(out.calls, 4);
        assert_eq!(out.max_depth, 2);
    }

    #[test]
    fn fuel_exhaustion() {
        let p = parse_program("func main() {\nentry:\n br entry\n}").unwrap();
        assert_eq!(interpret(&p, 1000), Err(RefError::FuelExhausted(1000)));
    }

    #[test]
    fn floats_emit_bits() {
        let p = parse_program("func main() {\n%a = const f64 1.5\n%b = fmul %a, %a\nemit %b\nret 0\n}").unwrap();
        assert_eq!(interpret(&p, 100).unwrap().output, vec![2.25f64.to_bits()]);
    }
}
