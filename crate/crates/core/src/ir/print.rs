use std::fmt::Write;

use super::*;

fn scalar(ty: IrType, bits: u64) -> String {
    match ty {
        IrType::F64 => {
            let x = f64::from_bits(bits);
            if x.is_finite() {
                format!("{x:?}")
            } else {
                format!("bits {:#x}", bits)
            }
        }
        _ => (bits as i64).to_string(),
    }
}

fn operand(o: &Operand) -> String {
    match o {
        Operand::Value(v) => format!("%{v}"),
        Operand::Imm(i) => i.to_string(),
    }
}

pub fn print_inst(inst: &Inst) -> String {
    match inst {
        Inst::Const { dst, ty, bits } => format!("%{dst} = const {ty} {}", scalar(*ty, *bits)),
        Inst::Bin { dst, lhs, rhs, .. } => format!("%{dst} = {} {}, {}", inst.opcode(), operand(lhs), operand(rhs)),
        Inst::FBin { dst, lhs, rhs, .. } => format!("%{dst} = {} %{lhs}, %{rhs}", inst.opcode()),
        Inst::Load { dst, addr } => format!("%{dst} = load %{addr}"),
        Inst::FLoad { dst, addr } => format!("%{dst} = fload %{addr}"),
        Inst::Store { value, addr } => format!("store {}, %{addr}", operand(value)),
        Inst::FStore { value, addr } => format!("fstore %{value}, %{addr}"),
        Inst::AddrOfLocal { dst, local } => format!("%{dst} = addr-of-local {local}"),
        Inst::AddrOfGlobal { dst, global } => format!("%{dst} = addr-of-global {global}"),
        Inst::Call { dst, callee, args } => {
            let args: Vec<String> = args.iter().map(operand).collect();
            match dst {
                Some(d) => format!("%{d} = call {callee}({})", args.join(", ")),
                None => format!("call {callee}({})", args.join(", ")),
            }
        }
        Inst::Cmp { dst, cond, lhs, rhs } => format!("%{dst} = cmp {} %{lhs}, {}", cond.name(), operand(rhs)),
        Inst::Emit { value } => format!("emit {}", operand(value)),
        Inst::Br { target } => format!("br {target}"),
        Inst::BrCond { cond, then_to, else_to } => format!("br-cond %{cond}, {then_to}, {else_to}"),
        Inst::Ret { value: Some(v) } => format!("ret {}", operand(v)),
        Inst::Ret { value: None } => "ret".to_string(),
    }
}

/// Canonical text form; `parse_program(print_program(p)) == p`.
pub fn print_program(p: &IrProgram) -> String {
    let mut out = String::new();
    if p.entry != "main" {
        let _ = writeln!(out, "entry {}", p.entry);
    }
    for g in &p.globals {
        let elems: Vec<String> = g
            .init
            .chunks(8)
            .map(|c| {
                let mut b = [0u8; 8];
                b[..c.len()].copy_from_slice(c);
                scalar(g.ty, u64::from_le_bytes(b))
            })
            .collect();
        if elems.len() == 1 {
            let _ = writeln!(out, "global {}: {} = {}", g.name, g.ty, elems[0]);
        } else {
            let _ = writeln!(out, "global {}: {}[{}] = {}", g.name, g.ty, elems.len(), elems.join(", "));
        }
    }
    for f in &p.functions {
        let params: Vec<String> = f.params.iter().map(|p| format!("%{}: {}", p.name, p.ty)).collect();
        let _ = writeln!(out, "\nfunc {}({}) -> {} {{", f.name, params.join(", "), f.ret_ty);
        for l in &f.locals {
            if l.size == l.ty.size() {
                let _ = writeln!(out, "  local {}: {}", l.name, l.ty);
            } else {
                let _ = writeln!(out, "  local {}: {} {}", l.name, l.ty, l.size);
            }
        }
        for b in &f.blocks {
            let _ = writeln!(out, "{}:", b.label);
            for i in &b.insts {
                let _ = writeln!(out, "  {}", print_inst(i));
            }
        }
        let _ = writeln!(out, "}}");
    }
    out
}
