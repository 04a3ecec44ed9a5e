//! Which unification rule categories a program exercises.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::codegen::imm::{fits_i32, legal_arith_immediate};
use crate::ir::{live_out_sets, BinOp, Inst, IrFunction, IrProgram, IrType, Operand};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RuleCategory {
    /// A callsite exists (return addresses must be aligned).
    Alignment,
    /// An address computation is live across a call.
    Remat,
    /// A 32-bit but non-12-bit constant is live across a call.
    Immediate,
    /// A `base + offset` used only as an address is live across a call.
    Addressing,
    /// An op consumes a value that lived across a call and dies there, and
    /// its result lives across another call.
    TwoAddress,
    /// The constant zero is live across a call.
    Zero,
}

impl RuleCategory {
    pub const ALL: [RuleCategory; 6] = [
        RuleCategory::Alignment,
        RuleCategory::Remat,
        RuleCategory::Immediate,
        RuleCategory::Addressing,
        RuleCategory::TwoAddress,
        RuleCategory::Zero,
    ];

    /// Ablation flag that disables this category.
    pub fn flag(self) -> &'static str {
        match self {
            RuleCategory::Alignment => "callsite-align",
            RuleCategory::Remat => "remat",
            RuleCategory::Immediate => "imm-unify",
            RuleCategory::Addressing => "addr-restrict",
            RuleCategory::TwoAddress => "two-addr",
            RuleCategory::Zero => "zero-rule",
        }
    }
}

/// Values live across each call, per function: (block, index) -> set.
fn live_across(f: &IrFunction) -> Vec<((usize, usize), BTreeSet<String>)> {
    let outs = live_out_sets(f);
    let mut res = Vec::new();
    for (bi, b) in f.blocks.iter().enumerate() {
        let mut live = outs[bi].clone();
        for (ii, i) in b.insts.iter().enumerate().rev() {
            if let Some(d) = i.def() {
                live.remove(d);
            }
            if let Inst::Call { .. } = i {
                res.push(((bi, ii), live.clone()));
            }
            for u in i.uses() {
                live.insert(u.to_string());
            }
        }
    }
    res
}

fn function_coverage(f: &IrFunction, out: &mut BTreeSet<RuleCategory>) {
    let across = live_across(f);
    if across.is_empty() {
        return;
    }
    out.insert(RuleCategory::Alignment);
    let crossing: BTreeSet<&str> = across.iter().flat_map(|(_, s)| s.iter().map(String::as_str)).collect();
    let mut defs: HashMap<&str, &Inst> = HashMap::new();
    let mut uses: HashMap<&str, Vec<(bool, &Inst)>> = HashMap::new();
    for b in &f.blocks {
        for i in &b.insts {
            if let Some(d) = i.def() {
                defs.insert(d, i);
            }
            let addr = match i {
                Inst::Load { addr, .. } | Inst::FLoad { addr, .. } => Some(addr.as_str()),
                Inst::Store { addr, .. } | Inst::FStore { addr, .. } => Some(addr.as_str()),
                _ => None,
            };
            for u in i.uses() {
                let is_addr = Some(u) == addr
                    && !matches!(i, Inst::Store { value: Operand::Value(v), .. } if v == u)
                    && !matches!(i, Inst::FStore { value, .. } if value == u);
                uses.entry(u).or_default().push((is_addr, i));
            }
        }
    }
    for v in &crossing {
        match defs.get(v) {
            Some(Inst::AddrOfLocal { .. } | Inst::AddrOfGlobal { .. }) => {
                out.insert(RuleCategory::Remat);
            }
            Some(Inst::Const { ty, bits, .. }) if *ty != IrType::F64 => {
                if *bits == 0 {
                    out.insert(RuleCategory::Zero);
                } else if fits_i32(*bits) && !legal_arith_immediate(*bits) {
                    out.insert(RuleCategory::Immediate);
                }
            }
            Some(Inst::Bin { op: BinOp::Add, lhs: Operand::Value(_), rhs: Operand::Value(_), .. }) => {
                if uses.get(v).is_some_and(|u| u.iter().all(|(a, _)| *a)) {
                    out.insert(RuleCategory::Addressing);
                }
            }
            _ => {}
        }
    }
    // Two-address chains: c = a op b, a crosses an earlier call and is used
    // only here, c crosses a later call.
    for b in &f.blocks {
        for i in &b.insts {
            if let Inst::Bin { dst, lhs: Operand::Value(a), .. } = i {
                let single = uses.get(a.as_str()).is_some_and(|u| u.len() == 1);
                if single && crossing.contains(a.as_str()) && crossing.contains(dst.as_str()) {
                    out.insert(RuleCategory::TwoAddress);
                }
            }
        }
    }
}

/// Categories exercised by `p`.
pub fn rule_coverage(p: &IrProgram) -> BTreeSet<RuleCategory> {
    let mut out = BTreeSet::new();
    for f in &p.functions {
        function_coverage(f, &mut out);
    }
    out
}

/// Counts programs per category.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageCounter {
    pub programs: usize,
    pub hits: BTreeMap<RuleCategory, usize>,
}

impl CoverageCounter {
    pub fn add(&mut self, p: &IrProgram) {
        self.programs += 1;
        for c in rule_coverage(p) {
            *self.hits.entry(c).or_default() += 1;
        }
    }

    pub fn missing(&self) -> Vec<RuleCategory> {
        RuleCategory::ALL.into_iter().filter(|c| !self.hits.contains_key(c)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusSpec};
    use crate::ir::parse_program;

    #[test]
    fn detects_each_pattern() {
        let p = parse_program(
            "func g() { ret 1 }
             func main() {
               local x: i64
               local a: i64 24
               %p = addr-of-local x
               %k = const 74565
               %z = const 0
               %b0 = addr-of-local a
               %b = add %b0, 8
               %o = sub %b, %b0
               %q = add %b, %o
               %t = add %k, 1
               %r = call g()
               store %z, %p
               store %k, %q
               %c = add %t, %r
               %r2 = call g()
               emit %c
               ret 0
             }",
        )
        .unwrap();
        assert_eq!(rule_coverage(&p), RuleCategory::ALL.into_iter().collect());
    }

    #[test]
    fn seed_7_hits_every_category() {
        let mut c = CoverageCounter::default();
        for p in generate_corpus(&CorpusSpec::new(7, 100)) {
            c.add(&p);
        }
        assert!(c.missing().is_empty(), "{:?}", c.hits);
    }
}
