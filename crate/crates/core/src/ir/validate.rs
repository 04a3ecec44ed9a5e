use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DiagKind {
    MissingEntry,
    DuplicateSymbol,
    UnresolvedCall,
    EmptyFunction,
    MissingTerminator,
    MisplacedTerminator,
    UnknownLabel,
    UnknownLocal,
    UnknownGlobal,
    UndefinedValue,
    UseBeforeDef,
    TypeMismatch,
    ArityMismatch,
    BadGlobalSize,
}

impl DiagKind {
    pub fn text(self) -> &'static str {
        match self {
            DiagKind::MissingEntry => "missing entry function",
            DiagKind::DuplicateSymbol => "duplicate symbol",
            DiagKind::UnresolvedCall => "unresolved call target",
            DiagKind::EmptyFunction => "function has no blocks",
            DiagKind::MissingTerminator => "missing terminator",
            DiagKind::MisplacedTerminator => "terminator before end of block",
            DiagKind::UnknownLabel => "unknown block label",
            DiagKind::UnknownLocal => "unknown local",
            DiagKind::UnknownGlobal => "unknown global",
            DiagKind::UndefinedValue => "undefined value",
            DiagKind::UseBeforeDef => "use before def",
            DiagKind::TypeMismatch => "type mismatch",
            DiagKind::ArityMismatch => "argument count mismatch",
            DiagKind::BadGlobalSize => "global size is not a multiple of 8",
        }
    }
}

/// One violated invariant, located by function/block/instruction index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub kind: DiagKind,
    pub function: Option<usize>,
    pub block: Option<usize>,
    pub index: Option<usize>,
    pub detail: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.kind.text())?;
        if !self.detail.is_empty() {
            write!(f, ": {}", self.detail)?;
        }
        Ok(())
    }
}

struct Ctx<'a> {
    prog: &'a IrProgram,
    out: Vec<Diagnostic>,
}

impl Ctx<'_> {
    fn push(&mut self, kind: DiagKind, loc: (Option<usize>, Option<usize>, Option<usize>), detail: String) {
        self.out.push(Diagnostic { kind, function: loc.0, block: loc.1, index: loc.2, detail });
    }
}

/// Check every program and function invariant. Empty result means valid.
pub fn validate(p: &IrProgram) -> Vec<Diagnostic> {
    let mut cx = Ctx { prog: p, out: Vec::new() };
    let mut seen = HashSet::new();
    for g in &p.globals {
        if !seen.insert(g.name.as_str()) {
            cx.push(DiagKind::DuplicateSymbol, (None, None, None), format!("global `{}`", g.name));
        }
        if g.init.is_empty() || g.init.len() % 8 != 0 {
            cx.push(DiagKind::BadGlobalSize, (None, None, None), format!("global `{}`", g.name));
        }
    }
    for f in &p.functions {
        if !seen.insert(f.name.as_str()) {
            cx.push(DiagKind::DuplicateSymbol, (None, None, None), format!("function `{}`", f.name));
        }
    }
    if p.function(&p.entry).is_none() {
        cx.push(DiagKind::MissingEntry, (None, None, None), format!("`{}`", p.entry));
    }
    for (fi, f) in p.functions.iter().enumerate() {
        check_function(&mut cx, fi, f);
    }
    cx.out
}

fn check_function(cx: &mut Ctx, fi: usize, f: &IrFunction) {
    let floc = (Some(fi), None, None);
    if f.blocks.is_empty() {
        cx.push(DiagKind::EmptyFunction, floc, format!("`{}`", f.name));
        return;
    }
    let mut labels = HashSet::new();
    for (bi, b) in f.blocks.iter().enumerate() {
        if !labels.insert(b.label.as_str()) {
            cx.push(DiagKind::DuplicateSymbol, (Some(fi), Some(bi), None), format!("label `{}`", b.label));
        }
    }
    let mut locals = HashSet::new();
    for l in &f.locals {
        if !locals.insert(l.name.as_str()) {
            cx.push(DiagKind::DuplicateSymbol, floc, format!("local `{}`", l.name));
        }
    }

    // Value types, from params and every definition.
    let mut types: HashMap<&str, IrType> = HashMap::new();
    for prm in &f.params {
        if types.insert(&prm.name, prm.ty).is_some() {
            cx.push(DiagKind::DuplicateSymbol, floc, format!("value `%{}`", prm.name));
        }
    }
    for (bi, b) in f.blocks.iter().enumerate() {
        for (ii, inst) in b.insts.iter().enumerate() {
            if let Some(d) = inst.def() {
                let ty = result_type(cx.prog, f, inst, &types);
                if types.insert(d, ty).is_some() {
                    cx.push(DiagKind::DuplicateSymbol, (Some(fi), Some(bi), Some(ii)), format!("value `%{d}`"));
                }
            }
        }
    }
    // Result types that depend on operand types (ptr arithmetic) need a second look.
    for b in &f.blocks {
        for inst in &b.insts {
            if let Some(d) = inst.def() {
                let ty = result_type(cx.prog, f, inst, &types);
                types.insert(d, ty);
            }
        }
    }

    for (bi, b) in f.blocks.iter().enumerate() {
        let n = b.insts.len();
        if n == 0 || !b.insts[n - 1].is_terminator() {
            cx.push(DiagKind::MissingTerminator, (Some(fi), Some(bi), n.checked_sub(1)), format!("block `{}`", b.label));
        }
        for (ii, inst) in b.insts.iter().enumerate() {
            let loc = (Some(fi), Some(bi), Some(ii));
            if inst.is_terminator() && ii + 1 != n {
                cx.push(DiagKind::MisplacedTerminator, loc, format!("block `{}`", b.label));
            }
            for s in inst.successors() {
                if f.block_index(s).is_none() {
                    cx.push(DiagKind::UnknownLabel, loc, format!("`{s}`"));
                }
            }
            check_types(cx, f, inst, &types, loc);
        }
    }

    check_defs(cx, fi, f, &types);
}

fn result_type(p: &IrProgram, _f: &IrFunction, inst: &Inst, types: &HashMap<&str, IrType>) -> IrType {
    let ty_of = |o: &Operand| match o {
        Operand::Value(v) => types.get(v.as_str()).copied().unwrap_or(IrType::I64),
        Operand::Imm(_) => IrType::I64,
    };
    match inst {
        Inst::Const { ty, .. } => *ty,
        Inst::Bin { op: BinOp::Add, lhs, rhs, .. } if ty_of(lhs) == IrType::Ptr || ty_of(rhs) == IrType::Ptr => IrType::Ptr,
        Inst::Bin { op: BinOp::Sub, lhs, .. } if ty_of(lhs) == IrType::Ptr => IrType::Ptr,
        Inst::Bin { .. } | Inst::Load { .. } | Inst::Cmp { .. } => IrType::I64,
        Inst::FBin { .. } | Inst::FLoad { .. } => IrType::F64,
        Inst::AddrOfLocal { .. } | Inst::AddrOfGlobal { .. } => IrType::Ptr,
        Inst::Call { callee, .. } => p.function(callee).map(|c| c.ret_ty).unwrap_or(IrType::I64),
        _ => IrType::I64,
    }
}

fn check_types(
    cx: &mut Ctx,
    f: &IrFunction,
    inst: &Inst,
    types: &HashMap<&str, IrType>,
    loc: (Option<usize>, Option<usize>, Option<usize>),
) {
    let mut mismatch = Vec::new();
    let mut want = |o: &Operand, int: bool, what: &str| {
        if let Operand::Value(v) = o {
            if let Some(t) = types.get(v.as_str()) {
                if t.is_int() != int {
                    mismatch.push(format!("{what} `%{v}` is {t}"));
                }
            }
        } else if !int {
            mismatch.push(format!("{what} must be an f64 value"));
        }
    };
    let val = |s: &str| Operand::Value(s.to_string());
    match inst {
        Inst::Bin { lhs, rhs, .. } => {
            want(lhs, true, "operand");
            want(rhs, true, "operand");
        }
        Inst::FBin { lhs, rhs, .. } => {
            want(&val(lhs), false, "operand");
            want(&val(rhs), false, "operand");
        }
        Inst::Load { addr, .. } | Inst::FLoad { addr, .. } => want(&val(addr), true, "address"),
        Inst::Store { value, addr } => {
            want(value, true, "stored value");
            want(&val(addr), true, "address");
        }
        Inst::FStore { value, addr } => {
            want(&val(value), false, "stored value");
            want(&val(addr), true, "address");
        }
        Inst::AddrOfLocal { local, .. } => {
            if f.local(local).is_none() {
                cx.push(DiagKind::UnknownLocal, loc, format!("`{local}`"));
            }
        }
        Inst::AddrOfGlobal { global, .. } => {
            if cx.prog.global(global).is_none() {
                cx.push(DiagKind::UnknownGlobal, loc, format!("`{global}`"));
            }
        }
        Inst::Call { callee, args, .. } => match cx.prog.function(callee) {
            None => cx.push(DiagKind::UnresolvedCall, loc, format!("`{callee}`")),
            Some(c) => {
                if c.params.len() != args.len() {
                    cx.push(
                        DiagKind::ArityMismatch,
                        loc,
                        format!("`{callee}` takes {} arguments, given {}", c.params.len(), args.len()),
                    );
                }
                for (a, prm) in args.iter().zip(&c.params) {
                    want(a, prm.ty.is_int(), "argument");
                }
            }
        },
        Inst::Cmp { lhs, rhs, .. } => {
            let lt = types.get(lhs.as_str()).copied().unwrap_or(IrType::I64);
            want(rhs, lt.is_int(), "compare operand");
        }
        Inst::BrCond { cond, .. } => want(&val(cond), true, "condition"),
        Inst::Ret { value: Some(v) } => want(v, f.ret_ty.is_int(), "return value"),
        _ => {}
    }
    for m in mismatch {
        cx.push(DiagKind::TypeMismatch, loc, m);
    }
}

/// Must-defined dataflow: a use is legal only if its value is defined on every path to it.
fn check_defs(cx: &mut Ctx, fi: usize, f: &IrFunction, types: &HashMap<&str, IrType>) {
    let n = f.blocks.len();
    let all: BTreeSet<&str> = types.keys().copied().collect();
    let params: BTreeSet<&str> = f.params.iter().map(|p| p.name.as_str()).collect();
    let preds = f.predecessors();
    let mut reachable = vec![false; n];
    let mut stack = vec![0usize];
    while let Some(b) = stack.pop() {
        if !std::mem::replace(&mut reachable[b], true) {
            stack.extend(f.successors(b));
        }
    }
    let mut outs: Vec<BTreeSet<&str>> = vec![all.clone(); n];
    let block_defs: Vec<Vec<&str>> = f.blocks.iter().map(|b| b.insts.iter().filter_map(|i| i.def()).collect()).collect();
    fn input_of<'a>(
        b: usize,
        outs: &[BTreeSet<&'a str>],
        preds: &[Vec<usize>],
        reachable: &[bool],
        params: &BTreeSet<&'a str>,
        all: &BTreeSet<&'a str>,
    ) -> BTreeSet<&'a str> {
        if b == 0 {
            return params.clone();
        }
        let mut it = preds[b].iter().filter(|&&p| reachable[p]);
        let Some(&first) = it.next() else { return all.clone() };
        it.fold(outs[first].clone(), |acc, &p| acc.intersection(&outs[p]).copied().collect())
    }
    loop {
        let mut changed = false;
        for b in 0..n {
            let mut s = input_of(b, &outs, &preds, &reachable, &params, &all);
            s.extend(block_defs[b].iter().copied());
            if s != outs[b] {
                outs[b] = s;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    for b in (0..n).filter(|&b| reachable[b]) {
        let mut defined = input_of(b, &outs, &preds, &reachable, &params, &all);
        for (ii, inst) in f.blocks[b].insts.iter().enumerate() {
            for u in inst.uses() {
                if !types.contains_key(u) {
                    cx.push(DiagKind::UndefinedValue, (Some(fi), Some(b), Some(ii)), format!("`%{u}`"));
                } else if !defined.contains(u) {
                    cx.push(DiagKind::UseBeforeDef, (Some(fi), Some(b), Some(ii)), format!("`%{u}`"));
                }
            }
            if let Some(d) = inst.def() {
                defined.insert(d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_program;

    fn func(blocks: Vec<IrBlock>) -> IrProgram {
        IrProgram {
            globals: vec![],
            functions: vec![IrFunction {
                name: "main".into(),
                params: vec![Param { name: "n".into(), ty: IrType::I64 }],
                locals: vec![],
                blocks,
                ret_ty: IrType::I64,
            }],
            entry: "main".into(),
        }
    }

    fn blk(label: &str, insts: Vec<Inst>) -> IrBlock {
        IrBlock { label: label.into(), insts }
    }

    #[test]
    fn valid_program_has_no_diagnostics() {
        let p = parse_program("func main() {\n%a = const 1\nemit %a\nret %a\n}").unwrap();
        assert!(validate(&p).is_empty());
    }

    #[test]
    fn missing_terminator() {
        let p = func(vec![blk("entry", vec![Inst::Emit { value: Operand::Imm(1) }])]);
        let d = validate(&p);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].kind, DiagKind::MissingTerminator);
        assert_eq!(d[0].to_string(), "missing terminator: block `entry`");
    }

    fn diamond_with_partial_def() -> IrProgram {
        // entry -> (left | join); left defines %v; join uses %v.
        func(vec![
            blk(
                "entry",
                vec![
                    Inst::Cmp { dst: "c".into(), cond: Cond::Gt, lhs: "n".into(), rhs: Operand::Imm(0) },
                    Inst::BrCond { cond: "c".into(), then_to: "left".into(), else_to: "join".into() },
                ],
            ),
            blk(
                "left",
                vec![
                    Inst::Const { dst: "v".into(), ty: IrType::I64, bits: 3 },
                    Inst::Br { target: "join".into() },
                ],
            ),
            blk("join", vec![Inst::Ret { value: Some(Operand::Value("v".into())) }]),
        ])
    }

    /// Enumerate every acyclic path from the entry and report uses not preceded by a def.
    fn brute_force_use_before_def(p: &IrProgram) -> BTreeSet<(usize, usize, String)> {
        let f = &p.functions[0];
        let mut bad = BTreeSet::new();
        fn walk(
            f: &IrFunction,
            b: usize,
            mut defined: HashSet<String>,
            visited: &mut Vec<usize>,
            bad: &mut BTreeSet<(usize, usize, String)>,
        ) {
            visited.push(b);
            for (ii, inst) in f.blocks[b].insts.iter().enumerate() {
                for u in inst.uses() {
                    if !defined.contains(u) {
                        bad.insert((b, ii, u.to_string()));
                    }
                }
                if let Some(d) = inst.def() {
                    defined.insert(d.to_string());
                }
            }
            for s in f.successors(b) {
                if !visited.contains(&s) {
                    walk(f, s, defined.clone(), visited, bad);
                }
            }
            visited.pop();
        }
        let start: HashSet<String> = f.params.iter().map(|p| p.name.clone()).collect();
        walk(f, 0, start, &mut Vec::new(), &mut bad);
        bad
    }

    #[test]
    fn use_before_def_on_one_path() {
        let p = diamond_with_partial_def();
        let oracle = brute_force_use_before_def(&p);
        assert_eq!(oracle.len(), 1);
        let d = validate(&p);
        assert_eq!(d.len(), 1, "{d:?}");
        assert_eq!(d[0].kind, DiagKind::UseBeforeDef);
        let got: BTreeSet<(usize, usize, String)> = d
            .iter()
            .map(|d| (d.block.unwrap(), d.index.unwrap(), d.detail.trim_matches(|c| c == '`' || c == '%').to_string()))
            .collect();
        assert_eq!(got, oracle);
    }

    #[test]
    fn deterministic_order() {
        let p = diamond_with_partial_def();
        assert_eq!(validate(&p), validate(&p));
    }

    #[test]
    fn type_and_arity_errors() {
        let src = "func f(%a: i64) -> i64 { ret %a }\nfunc main() {\n%x = const f64 1.0\n%y = add %x, 1\n%z = call f()\nret 0\n}";
        let err = parse_program(src).unwrap_err();
        let msgs: Vec<&str> = err.diagnostics.iter().map(|d| d.message.as_str()).collect();
        assert!(msgs.iter().any(|m| m.starts_with("type mismatch")), "{msgs:?}");
        assert!(msgs.iter().any(|m| m.starts_with("argument count mismatch")), "{msgs:?}");
    }
}
