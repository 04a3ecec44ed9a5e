//! Seeded random-program generator used by the property suites.
//!
//! Programs are built from snippets that exercise each unification rule:
//! values kept across calls (addresses, large and zero constants, folded
//! address arithmetic, two-address chains), bounded loops, floats, large
//! frames and stack-passed arguments. The call graph only points forward,
//! except for one optional self-recursive function with a constant bound.

mod coverage;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ir::{
    validate, BinOp, Cond, FBinOp, GlobalDef, Inst, IrBlock, IrFunction, IrProgram, IrType, Local, Operand, Param,
};

pub use coverage::{rule_coverage, CoverageCounter, RuleCategory};

/// Fuel within which every generated program finishes on the reference interpreter.
pub const CORPUS_FUEL: u64 = 2_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub seed: u64,
    pub count: usize,
    pub max_functions: usize,
    pub max_snippets: usize,
    /// Probability that a snippet works on f64 values.
    pub float_share: f64,
    /// Probability of a loop snippet.
    pub loop_prob: f64,
    /// Probability of an if/else snippet.
    pub branch_prob: f64,
    /// Upper bound on estimated executed IR instructions per program.
    pub step_budget: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            seed: 1,
            count: 100,
            max_functions: 6,
            max_snippets: 8,
            float_share: 0.15,
            loop_prob: 0.15,
            branch_prob: 0.1,
            step_budget: 20_000,
        }
    }
}

impl CorpusSpec {
    pub fn new(seed: u64, count: usize) -> Self {
        CorpusSpec { seed, count, ..Default::default() }
    }

    /// One function, a few straight-line snippets, no loops or floats.
    pub fn minimal(seed: u64, count: usize) -> Self {
        CorpusSpec { seed, count, max_functions: 1, max_snippets: 3, float_share: 0.0, loop_prob: 0.0, branch_prob: 0.0, ..Default::default() }
    }
}

#[derive(Debug, Clone)]
struct Sig {
    params: Vec<IrType>,
    ret: IrType,
}

/// Deterministic corpus for `spec`.
pub fn generate_corpus(spec: &CorpusSpec) -> Vec<IrProgram> {
    (0..spec.count).map(|i| generate_program(spec, i as u64)).collect()
}

/// Program `index` of the corpus described by `spec`.
pub fn generate_program(spec: &CorpusSpec, index: u64) -> IrProgram {
    let seed = spec.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index.wrapping_mul(0xd1b5_4a32_d192_ed03);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = ProgGen::new(spec, &mut rng).run(&mut rng);
    debug_assert!(validate(&p).is_empty(), "{:?}", validate(&p));
    p
}

const SMALL_IMMS: [i64; 6] = [1, 3, 7, 100, 4095, 8];
const SHIFTED_IMMS: [i64; 3] = [4096, 0x5000, 0xfff000];
/// Fit in 32 bits but are not 12-bit (optionally shifted) immediates.
const MID_IMMS: [i64; 4] = [4097, 74565, 0x12_3456, 0x7fff_0001];
const WIDE_IMMS: [i64; 3] = [0x1_2345_6789, -2, 0x7fff_ffff_ffff];
const FLOATS: [f64; 5] = [1.5, -0.25, 3.0, 1e10, 0.1];

struct ProgGen {
    spec: CorpusSpec,
    sigs: Vec<Sig>,
    names: Vec<String>,
    /// Estimated cost per function (filled from the last function backwards).
    costs: Vec<u64>,
    globals: Vec<GlobalDef>,
    recursive: Option<usize>,
}

impl ProgGen {
    fn new(spec: &CorpusSpec, rng: &mut ChaCha8Rng) -> Self {
        let n = rng.gen_range(1..=spec.max_functions.max(1));
        let mut sigs = vec![Sig { params: vec![], ret: IrType::I64 }];
        let mut names = vec!["main".to_string()];
        for i in 1..n {
            let many = rng.gen_bool(0.15);
            let float_fn = rng.gen_bool(spec.float_share);
            let params = if many && float_fn {
                vec![IrType::F64; rng.gen_range(9..=10)]
            } else if many {
                vec![IrType::I64; rng.gen_range(7..=8)]
            } else {
                (0..rng.gen_range(0..=3))
                    .map(|_| if rng.gen_bool(spec.float_share) { IrType::F64 } else { IrType::I64 })
                    .collect()
            };
            let ret = if float_fn { IrType::F64 } else { IrType::I64 };
            sigs.push(Sig { params, ret });
            names.push(format!("f{i}"));
        }
        let recursive = if n > 1 && rng.gen_bool(0.2) {
            sigs.push(Sig { params: vec![IrType::I64], ret: IrType::I64 });
            names.push("rec".to_string());
            Some(sigs.len() - 1)
        } else {
            None
        };
        let globals = (0..rng.gen_range(1..=3))
            .map(|i| {
                let words = if rng.gen_bool(0.3) { 2 } else { 1 };
                let mut init = Vec::new();
                for _ in 0..words {
                    init.extend_from_slice(&rng.gen_range(-50i64..50).to_le_bytes());
                }
                GlobalDef { name: format!("g{i}"), ty: IrType::I64, init }
            })
            .collect();
        let costs = vec![0; sigs.len()];
        ProgGen { spec: spec.clone(), sigs, names, costs, globals, recursive }
    }

    fn run(mut self, rng: &mut ChaCha8Rng) -> IrProgram {
        let mut functions = vec![None; self.sigs.len()];
        if let Some(r) = self.recursive {
            let f = recursive_function(&self.names[r]);
            self.costs[r] = 12 * 8;
            functions[r] = Some(f);
        }
        let plain = self.sigs.len() - self.recursive.is_some() as usize;
        for i in (0..plain).rev() {
            let (f, cost) = FnGen::new(&self, i, rng).run(rng);
            self.costs[i] = cost;
            functions[i] = Some(f);
        }
        IrProgram {
            globals: self.globals,
            functions: functions.into_iter().map(Option::unwrap).collect(),
            entry: "main".to_string(),
        }
    }
}

fn recursive_function(name: &str) -> IrFunction {
    let v = |s: &str| Operand::Value(s.to_string());
    let entry = IrBlock {
        label: "entry".into(),
        insts: vec![
            Inst::Cmp { dst: "c".into(), cond: Cond::Le, lhs: "n".into(), rhs: Operand::Imm(0) },
            Inst::BrCond { cond: "c".into(), then_to: "base".into(), else_to: "step".into() },
        ],
    };
    let base = IrBlock { label: "base".into(), insts: vec![Inst::Ret { value: Some(Operand::Imm(1)) }] };
    let step = IrBlock {
        label: "step".into(),
        insts: vec![
            Inst::Const { dst: "z".into(), ty: IrType::I64, bits: 0 },
            Inst::Bin { op: BinOp::Sub, dst: "m".into(), lhs: v("n"), rhs: Operand::Imm(1) },
            Inst::Call { dst: Some("r".into()), callee: name.into(), args: vec![v("m")] },
            Inst::Bin { op: BinOp::Mul, dst: "s".into(), lhs: v("r"), rhs: Operand::Imm(3) },
            Inst::Bin { op: BinOp::Add, dst: "t".into(), lhs: v("s"), rhs: v("n") },
            Inst::Bin { op: BinOp::Add, dst: "u".into(), lhs: v("t"), rhs: v("z") },
            Inst::Ret { value: Some(v("u")) },
        ],
    };
    IrFunction {
        name: name.into(),
        params: vec![Param { name: "n".into(), ty: IrType::I64 }],
        locals: vec![],
        blocks: vec![entry, base, step],
        ret_ty: IrType::I64,
    }
}

struct FnGen<'g> {
    g: &'g ProgGen,
    idx: usize,
    blocks: Vec<IrBlock>,
    cur: usize,
    locals: Vec<Local>,
    ints: Vec<String>,
    floats: Vec<String>,
    next: u32,
    cost: u64,
    mult: u64,
    in_loop: bool,
}

impl<'g> FnGen<'g> {
    fn new(g: &'g ProgGen, idx: usize, _rng: &mut ChaCha8Rng) -> Self {
        FnGen {
            g,
            idx,
            blocks: vec![IrBlock { label: "entry".into(), insts: vec![] }],
            cur: 0,
            locals: vec![],
            ints: vec![],
            floats: vec![],
            next: 0,
            cost: 0,
            mult: 1,
            in_loop: false,
        }
    }

    fn val(&mut self) -> String {
        self.next += 1;
        format!("v{}", self.next)
    }

    fn label(&mut self, what: &str) -> String {
        self.next += 1;
        format!("{what}{}", self.next)
    }

    fn push(&mut self, i: Inst) {
        self.cost += self.mult;
        self.blocks[self.cur].insts.push(i);
    }

    fn start_block(&mut self, label: String) {
        self.blocks.push(IrBlock { label, insts: vec![] });
        self.cur = self.blocks.len() - 1;
    }

    fn local(&mut self, size: u32) -> String {
        let name = format!("l{}", self.locals.len());
        self.locals.push(Local { name: name.clone(), ty: IrType::I64, size });
        name
    }

    fn imm(&self, rng: &mut ChaCha8Rng) -> i64 {
        match rng.gen_range(0..10) {
            0..=4 => *SMALL_IMMS.choose(rng).unwrap(),
            5 | 6 => *SHIFTED_IMMS.choose(rng).unwrap(),
            7 | 8 => *MID_IMMS.choose(rng).unwrap(),
            _ => *WIDE_IMMS.choose(rng).unwrap(),
        }
    }

    fn int_value(&mut self, rng: &mut ChaCha8Rng) -> String {
        if !self.ints.is_empty() && rng.gen_bool(0.8) {
            return self.ints.choose(rng).unwrap().clone();
        }
        let d = self.val();
        let bits = self.imm(rng) as u64;
        self.push(Inst::Const { dst: d.clone(), ty: IrType::I64, bits });
        self.ints.push(d.clone());
        d
    }

    fn int_operand(&mut self, rng: &mut ChaCha8Rng) -> Operand {
        if rng.gen_bool(0.4) {
            Operand::Imm(self.imm(rng))
        } else {
            Operand::Value(self.int_value(rng))
        }
    }

    fn float_value(&mut self, rng: &mut ChaCha8Rng) -> String {
        if !self.floats.is_empty() && rng.gen_bool(0.7) {
            return self.floats.choose(rng).unwrap().clone();
        }
        let d = self.val();
        let bits = FLOATS.choose(rng).unwrap().to_bits();
        self.push(Inst::Const { dst: d.clone(), ty: IrType::F64, bits });
        self.floats.push(d.clone());
        d
    }

    fn callees(&self) -> Vec<usize> {
        let n = self.g.sigs.len();
        let budget = self.g.spec.step_budget;
        (self.idx + 1..n).filter(|&j| self.cost + self.mult * (self.g.costs[j] + 8) <= budget).collect()
    }

    /// Emits a call to some forward function; returns its result value.
    fn call(&mut self, rng: &mut ChaCha8Rng) -> Option<(String, IrType)> {
        let cands = self.callees();
        let &j = cands.choose(rng)?;
        let sig = self.g.sigs[j].clone();
        let args: Vec<Operand> = if Some(j) == self.g.recursive {
            vec![Operand::Imm(rng.gen_range(1..=6))]
        } else {
            sig.params
                .iter()
                .map(|t| match t {
                    IrType::F64 => Operand::Value(self.float_value(rng)),
                    _ => self.int_operand(rng),
                })
                .collect()
        };
        self.cost += self.mult * self.g.costs[j];
        let d = self.val();
        self.push(Inst::Call { dst: Some(d.clone()), callee: self.g.names[j].clone(), args });
        Some((d, sig.ret))
    }

    fn pool_result(&mut self, r: Option<(String, IrType)>) {
        if let Some((d, t)) = r {
            if t == IrType::F64 {
                self.floats.push(d)
            } else {
                self.ints.push(d)
            }
        }
    }

    fn emit(&mut self, v: &str) {
        self.push(Inst::Emit { value: Operand::Value(v.to_string()) });
    }

    fn bin(&mut self, op: BinOp, lhs: Operand, rhs: Operand) -> String {
        let d = self.val();
        self.push(Inst::Bin { op, dst: d.clone(), lhs, rhs });
        d
    }

    fn snippet(&mut self, rng: &mut ChaCha8Rng) {
        if !self.in_loop && rng.gen_bool(self.g.spec.loop_prob) {
            return self.loop_snippet(rng);
        }
        if rng.gen_bool(self.g.spec.branch_prob) {
            return self.diamond(rng);
        }
        if rng.gen_bool(self.g.spec.float_share) {
            return self.float_snippet(rng);
        }
        let v = |s: &String| Operand::Value(s.clone());
        match rng.gen_range(0..14) {
            0 => {
                let a = self.int_value(rng);
                let op = *[BinOp::Add, BinOp::Sub, BinOp::Mul].choose(rng).unwrap();
                let b = self.int_operand(rng);
                let d = self.bin(op, v(&a), b);
                self.ints.push(d);
            }
            1 => {
                let r = self.call(rng);
                if let Some((d, _)) = &r {
                    let d = d.clone();
                    self.emit(&d);
                }
                self.pool_result(r);
            }
            2 => {
                // Address of a local kept across a call.
                let l = self.local(8);
                let p = self.val();
                self.push(Inst::AddrOfLocal { dst: p.clone(), local: l });
                let x = self.int_value(rng);
                self.push(Inst::Store { value: v(&x), addr: p.clone() });
                let r = self.call(rng);
                self.pool_result(r);
                let y = self.val();
                self.push(Inst::Load { dst: y.clone(), addr: p });
                self.emit(&y);
                self.ints.push(y);
            }
            3 => {
                // Constant that is not a 12-bit immediate, used after a call.
                let c = *[MID_IMMS.as_slice(), WIDE_IMMS.as_slice(), SHIFTED_IMMS.as_slice()]
                    .choose(rng)
                    .unwrap()
                    .choose(rng)
                    .unwrap();
                let k = self.val();
                self.push(Inst::Const { dst: k.clone(), ty: IrType::I64, bits: c as u64 });
                let r = self.call(rng);
                self.pool_result(r);
                let a = self.int_value(rng);
                let d = self.bin(BinOp::Add, v(&a), v(&k));
                self.emit(&d);
                self.ints.push(d);
            }
            4 => {
                let z = self.val();
                self.push(Inst::Const { dst: z.clone(), ty: IrType::I64, bits: 0 });
                let r = self.call(rng);
                self.pool_result(r);
                let a = self.int_value(rng);
                let d = self.bin(BinOp::Sub, v(&a), v(&z));
                self.emit(&d);
                self.ints.push(d);
            }
            5 => {
                // base + offset used only as an address across a call.
                let n = rng.gen_range(3..=6);
                let arr = self.local(8 * n);
                let b0 = self.val();
                self.push(Inst::AddrOfLocal { dst: b0.clone(), local: arr });
                let b = self.bin(BinOp::Add, v(&b0), Operand::Imm(8));
                let o = self.bin(BinOp::Sub, v(&b), v(&b0));
                let q = self.bin(BinOp::Add, v(&b), v(&o));
                let x = self.int_value(rng);
                self.push(Inst::Store { value: v(&x), addr: q.clone() });
                let r = self.call(rng);
                self.pool_result(r);
                let y = self.val();
                self.push(Inst::Load { dst: y.clone(), addr: q });
                self.emit(&y);
                self.ints.push(y);
            }
            6 => {
                // a lives across one call and dies in an op whose result
                // lives across another.
                let x = self.int_value(rng);
                let o = self.int_operand(rng);
                let a = self.bin(BinOp::Add, v(&x), o);
                let r = self.call(rng);
                self.pool_result(r);
                let y = self.int_value(rng);
                let op = *[BinOp::Add, BinOp::Mul].choose(rng).unwrap();
                let c = self.bin(op, v(&a), v(&y));
                let r = self.call(rng);
                self.pool_result(r);
                self.emit(&c);
                self.ints.push(c);
            }
            7 => {
                let gi = rng.gen_range(0..self.g.globals.len());
                let g = self.g.globals[gi].name.clone();
                let gp = self.val();
                self.push(Inst::AddrOfGlobal { dst: gp.clone(), global: g });
                let x = self.val();
                self.push(Inst::Load { dst: x.clone(), addr: gp.clone() });
                if rng.gen_bool(0.5) {
                    let r = self.call(rng);
                    self.pool_result(r);
                }
                let o = self.int_operand(rng);
                let y = self.bin(BinOp::Add, v(&x), o);
                self.push(Inst::Store { value: v(&y), addr: gp });
                self.emit(&y);
                self.ints.push(y);
            }
            8 => {
                // Large frame: far slots need scavenged address registers.
                let size = 8 * rng.gen_range(33..=75);
                let big = self.local(size);
                let p = self.val();
                self.push(Inst::AddrOfLocal { dst: p.clone(), local: big });
                let x = self.int_value(rng);
                self.push(Inst::Store { value: v(&x), addr: p.clone() });
                let q = self.bin(BinOp::Add, v(&p), Operand::Imm(size as i64 - 8));
                let y = self.int_operand(rng);
                self.push(Inst::Store { value: y, addr: q.clone() });
                let r = self.call(rng);
                self.pool_result(r);
                let a = self.val();
                self.push(Inst::Load { dst: a.clone(), addr: p });
                let b = self.val();
                self.push(Inst::Load { dst: b.clone(), addr: q });
                let s = self.bin(BinOp::Add, v(&a), v(&b));
                self.emit(&s);
                self.ints.push(s);
            }
            9 => {
                let a = self.int_value(rng);
                let b = self.int_operand(rng);
                let c = self.val();
                let cond = *[Cond::Eq, Cond::Ne, Cond::Lt, Cond::Le, Cond::Gt, Cond::Ge].choose(rng).unwrap();
                self.push(Inst::Cmp { dst: c.clone(), cond, lhs: a, rhs: b });
                self.emit(&c);
                self.ints.push(c);
            }
            10..=12 => {
                let x = self.int_value(rng);
                self.emit(&x);
            }
            _ => {
                let r = self.call(rng);
                self.pool_result(r);
            }
        }
    }

    fn float_snippet(&mut self, rng: &mut ChaCha8Rng) {
        let a = self.float_value(rng);
        let b = self.float_value(rng);
        let op = *[FBinOp::FAdd, FBinOp::FMul].choose(rng).unwrap();
        let d = self.val();
        self.push(Inst::FBin { op, dst: d.clone(), lhs: a, rhs: b.clone() });
        let mut out = d.clone();
        if rng.gen_bool(0.4) {
            let l = self.local(8);
            let p = self.val();
            self.push(Inst::AddrOfLocal { dst: p.clone(), local: l });
            self.push(Inst::FStore { value: d.clone(), addr: p.clone() });
            let r = self.call(rng);
            self.pool_result(r);
            let y = self.val();
            self.push(Inst::FLoad { dst: y.clone(), addr: p });
            out = y;
        } else if rng.gen_bool(0.3) {
            let c = self.val();
            self.push(Inst::Cmp { dst: c.clone(), cond: Cond::Lt, lhs: d.clone(), rhs: Operand::Value(b) });
            self.emit(&c);
        }
        self.emit(&out);
        self.floats.push(out);
    }

    fn diamond(&mut self, rng: &mut ChaCha8Rng) {
        let a = self.int_value(rng);
        let b = self.int_operand(rng);
        let c = self.val();
        self.push(Inst::Cmp { dst: c.clone(), cond: Cond::Gt, lhs: a, rhs: b });
        let (t, e, j) = (self.label("then"), self.label("else"), self.label("join"));
        self.push(Inst::BrCond { cond: c, then_to: t.clone(), else_to: e.clone() });
        let (ni, nf) = (self.ints.len(), self.floats.len());
        for arm in [t, e] {
            self.start_block(arm);
            let k = rng.gen_range(1..=2);
            for _ in 0..k {
                self.snippet_no_loop(rng);
            }
            self.push(Inst::Br { target: j.clone() });
            self.ints.truncate(ni);
            self.floats.truncate(nf);
        }
        self.start_block(j);
    }

    fn snippet_no_loop(&mut self, rng: &mut ChaCha8Rng) {
        let was = self.in_loop;
        self.in_loop = true;
        self.snippet(rng);
        self.in_loop = was;
    }

    fn loop_snippet(&mut self, rng: &mut ChaCha8Rng) {
        let trips = rng.gen_range(2..=4u64);
        let cnt = self.local(8);
        let cp = self.val();
        self.push(Inst::AddrOfLocal { dst: cp.clone(), local: cnt });
        self.push(Inst::Store { value: Operand::Imm(0), addr: cp.clone() });
        let (h, b, x) = (self.label("head"), self.label("body"), self.label("exit"));
        self.push(Inst::Br { target: h.clone() });
        self.start_block(h.clone());
        let saved_mult = self.mult;
        self.mult *= trips + 1;
        let iv = self.val();
        self.push(Inst::Load { dst: iv.clone(), addr: cp.clone() });
        let c = self.val();
        self.push(Inst::Cmp { dst: c.clone(), cond: Cond::Lt, lhs: iv.clone(), rhs: Operand::Imm(trips as i64) });
        self.push(Inst::BrCond { cond: c, then_to: b.clone(), else_to: x.clone() });
        self.start_block(b);
        let (ni, nf) = (self.ints.len(), self.floats.len());
        self.ints.push(iv.clone());
        self.in_loop = true;
        for _ in 0..rng.gen_range(1..=2) {
            self.snippet(rng);
        }
        self.in_loop = false;
        let n = self.bin(BinOp::Add, Operand::Value(iv), Operand::Imm(1));
        self.push(Inst::Store { value: Operand::Value(n), addr: cp });
        self.push(Inst::Br { target: h });
        self.ints.truncate(ni);
        self.floats.truncate(nf);
        self.mult = saved_mult;
        self.start_block(x);
    }

    fn run(mut self, rng: &mut ChaCha8Rng) -> (IrFunction, u64) {
        let sig = self.g.sigs[self.idx].clone();
        let params: Vec<Param> = sig
            .params
            .iter()
            .enumerate()
            .map(|(i, t)| Param { name: format!("p{i}"), ty: *t })
            .collect();
        for p in &params {
            if p.ty == IrType::F64 {
                self.floats.push(p.name.clone())
            } else {
                self.ints.push(p.name.clone())
            }
        }
        let n = rng.gen_range(1..=self.g.spec.max_snippets.max(1));
        for _ in 0..n {
            self.snippet(rng);
        }
        let value = match sig.ret {
            IrType::F64 => Operand::Value(self.float_value(rng)),
            _ => self.int_operand(rng),
        };
        self.push(Inst::Ret { value: Some(value) });
        let f = IrFunction {
            name: self.g.names[self.idx].clone(),
            params,
            locals: self.locals,
            blocks: self.blocks,
            ret_ty: sig.ret,
        };
        (f, self.cost)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::emu::reference::interpret;
    use crate::ir::{parse_program, print_program};

    #[test]
    fn deterministic() {
        let s = CorpusSpec::new(7, 20);
        let a: Vec<String> = generate_corpus(&s).iter().map(print_program).collect();
        let b: Vec<String> = generate_corpus(&s).iter().map(print_program).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn programs_validate_roundtrip_and_terminate() {
        for p in generate_corpus(&CorpusSpec::new(3, 60)) {
            assert!(validate(&p).is_empty(), "{}\n{:?}", print_program(&p), validate(&p));
            let text = print_program(&p);
            assert_eq!(parse_program(&text).unwrap(), p);
            interpret(&p, CORPUS_FUEL).unwrap();
        }
    }

    #[test]
    fn minimal_spec_is_straight_line() {
        let p = &generate_corpus(&CorpusSpec::minimal(1, 1))[0];
        assert_eq!(p.functions.len(), 1);
        assert_eq!(p.functions[0].blocks.len(), 1);
    }
}
