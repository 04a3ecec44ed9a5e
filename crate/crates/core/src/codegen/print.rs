//! Assembly-like listings of machine functions.

use super::{AluOp, Base, FAluOp, MOp, MachineFunction, Mem, Reg, Src};
use crate::abi::{physical, TargetId};
use crate::ir::Cond;

fn r(t: TargetId, x: Reg) -> String {
    match x {
        Reg::P(role) => physical(role, t).unwrap_or_else(|| role.name().to_string()),
        Reg::V(v) => format!("v%{v}"),
    }
}

fn mem(t: TargetId, m: &Mem) -> String {
    let base = match m.base {
        Base::Reg(b) => r(t, b),
        Base::Frame(s) => format!("{s:?}"),
    };
    let idx = m.index.map(|i| format!(" + {}", r(t, i))).unwrap_or_default();
    let disp = match m.disp {
        0 => String::new(),
        d if d < 0 => format!(" - {}", -d),
        d => format!(" + {d}"),
    };
    match t {
        TargetId::X64 => format!("[{base}{idx}{disp}]"),
        TargetId::A64 => {
            let idx = m.index.map(|i| format!(", {}", r(t, i))).unwrap_or_default();
            format!("[{base}{idx}, #{}]", m.disp)
        }
    }
}

fn cc(c: Cond) -> &'static str {
    match c {
        Cond::Eq => "eq",
        Cond::Ne => "ne",
        Cond::Lt => "lt",
        Cond::Le => "le",
        Cond::Gt => "gt",
        Cond::Ge => "ge",
    }
}

fn src(t: TargetId, s: &Src) -> String {
    match (t, s) {
        (_, Src::Reg(x)) => r(t, *x),
        (TargetId::X64, Src::Imm(i)) => format!("{i}"),
        (TargetId::A64, Src::Imm(i)) => format!("#{i}"),
    }
}

/// One instruction in the target's dialect.
pub fn render(t: TargetId, op: &MOp) -> String {
    let x = t == TargetId::X64;
    match op {
        MOp::Label { block, loop_header } => format!(".L{block}:{}", if *loop_header { "  # loop" } else { "" }),
        MOp::Mov { dst, src: s } => {
            let m = if x && matches!(dst, Reg::P(role) if role.class() == crate::abi::RegClass::Fpr) {
                "movsd"
            } else if matches!(dst, Reg::P(role) if role.class() == crate::abi::RegClass::Fpr) {
                "fmov"
            } else {
                "mov"
            };
            format!("{m} {}, {}", r(t, *dst), r(t, *s))
        }
        MOp::MovImm { dst, imm, chunk, first } => {
            let part = (imm >> (16 * *chunk as u32)) & 0xffff;
            match (x, *imm == 0, *first) {
                (true, true, _) => format!("xor {0}, {0}", r(t, *dst)),
                (true, false, true) => format!("mov {}, {:#x}", r(t, *dst), part << (16 * *chunk as u32)),
                (true, false, false) => format!("or {}, {:#x}", r(t, *dst), part << (16 * *chunk as u32)),
                (false, true, _) => format!("mov {}, rzr", r(t, *dst)),
                (false, false, f) => format!(
                    "{} {}, #{:#x}, lsl #{}",
                    if f { "movz" } else { "movk" },
                    r(t, *dst),
                    part,
                    16 * chunk
                ),
            }
        }
        MOp::FMovFromGpr { dst, src: s } => format!("{} {}, {}", if x { "movq" } else { "fmov" }, r(t, *dst), r(t, *s)),
        MOp::Alu { op, dst, lhs, rhs } => {
            let m = match op {
                AluOp::Add => "add",
                AluOp::Sub => "sub",
                AluOp::Mul => {
                    if x {
                        "imul"
                    } else {
                        "mul"
                    }
                }
            };
            if x && dst == lhs {
                format!("{m} {}, {}", r(t, *dst), src(t, rhs))
            } else if x {
                let (sign, v) = match (op, rhs) {
                    (AluOp::Sub, Src::Imm(i)) => ("-", src(t, &Src::Imm(*i))),
                    _ => ("+", src(t, rhs)),
                };
                format!("lea {}, [{} {sign} {v}]", r(t, *dst), r(t, *lhs))
            } else {
                format!("{m} {}, {}, {}", r(t, *dst), r(t, *lhs), src(t, rhs))
            }
        }
        MOp::FAlu { op, dst, lhs, rhs } => {
            let m = match (op, x) {
                (FAluOp::Add, true) => "addsd",
                (FAluOp::Mul, true) => "mulsd",
                (FAluOp::Add, false) => "fadd",
                (FAluOp::Mul, false) => "fmul",
            };
            if x {
                format!("{m} {}, {}", r(t, *dst), r(t, *rhs))
            } else {
                format!("{m} {}, {}, {}", r(t, *dst), r(t, *lhs), r(t, *rhs))
            }
        }
        MOp::Load { dst, mem: m } => format!("{} {}, {}", if x { "mov" } else { "ldr" }, r(t, *dst), mem(t, m)),
        MOp::Store { src: s, mem: m } => {
            if x {
                format!("mov {}, {}", mem(t, m), r(t, *s))
            } else {
                format!("str {}, {}", r(t, *s), mem(t, m))
            }
        }
        MOp::FrameAddr { dst, slot } => format!("frameaddr {}, {slot:?}", r(t, *dst)),
        MOp::GlobalAddr { dst, symbol } => {
            if x {
                format!("lea {}, [rip + {symbol}]", r(t, *dst))
            } else {
                format!("adr {}, {symbol}", r(t, *dst))
            }
        }
        MOp::Cmp { lhs, rhs } => format!("cmp {}, {}", r(t, *lhs), src(t, rhs)),
        MOp::FCmp { lhs, rhs } => format!("{} {}, {}", if x { "ucomisd" } else { "fcmp" }, r(t, *lhs), r(t, *rhs)),
        MOp::SetCond { dst, cond, .. } => {
            if x {
                format!("set{} {}", cc(*cond), r(t, *dst))
            } else {
                format!("cset {}, {}", r(t, *dst), cc(*cond))
            }
        }
        MOp::Jmp { block } => format!("{} .L{block}", if x { "jmp" } else { "b" }),
        MOp::JCond { cond, block, .. } => {
            if x {
                format!("j{} .L{block}", cc(*cond))
            } else {
                format!("b.{} .L{block}", cc(*cond))
            }
        }
        MOp::Call { callee, .. } => format!("{} {callee}", if x { "call" } else { "bl" }),
        MOp::Ret { .. } => "ret".into(),
        MOp::Emit { src: s } => format!("emit {}", r(t, *s)),
        MOp::Push { reg } => format!("push {}", r(t, Reg::P(*reg))),
        MOp::Pop { reg } => format!("pop {}", r(t, Reg::P(*reg))),
        MOp::PushFrameRecord => "stp r29, r30, [SP, #-16]!".into(),
        MOp::PopFrameRecord => "ldp r29, r30, [SP], #16".into(),
        MOp::Nop { bytes } => {
            if x && *bytes > 1 {
                format!("nop{bytes}")
            } else {
                "nop".into()
            }
        }
        MOp::JumpOver { skip } => format!("{} .+{skip}", if x { "jmp" } else { "b" }),
    }
}

/// Listing with function-relative offsets.
pub fn listing(f: &MachineFunction, base: u64) -> String {
    let mut out = format!("{}:\n", f.name);
    let mut a = base;
    for i in &f.instrs {
        let text = render(f.target, &i.op);
        if matches!(i.op, MOp::Label { .. }) {
            out.push_str(&format!("{text}\n"));
        } else {
            out.push_str(&format!("  {a:#08x}  {:>2}  {text}{}\n", i.size, if i.remat { "  ; remat" } else { "" }));
        }
        a += i.size as u64;
    }
    out
}
