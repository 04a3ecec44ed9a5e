//! Symbol placement and image construction for a pair of targets.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::fixpoint::{layout_program, FixpointReport};
use super::{data_layout, CODE_BASE, DATA_BASE, SYMBOL_GRANULE};
use crate::abi::TargetId;
use crate::codegen::{MOp, MachineFunction, MachineInstr, Rules};
use crate::ir::IrProgram;
use crate::stackmap::{emit_stackmaps, StackMapSection};

/// Return address the loader hands to the entry function; returning to it
/// halts the machine.
pub const EXIT_ADDR: u64 = 0;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LinkError {
    #[error("code does not fit below the data segment (ends at {0:#x})")]
    CodeOverflow(u64),
    #[error("undefined symbol `{0}`")]
    UndefinedSymbol(String),
    #[error("padding did not converge in `{function}` (callsites {sites:?})")]
    NoConvergence { function: String, sites: Vec<u32> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Symbol {
    pub name: String,
    pub addr: u64,
    pub size: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteInfo {
    /// Program-wide callsite id, in address order.
    pub id: u32,
    pub function: u32,
    pub site: u32,
    pub call_addr: u64,
    pub ret_addr: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub target: TargetId,
    pub rules: Rules,
    /// Hex SHA-256 of the canonical IR text.
    pub program_hash: String,
    pub entry: u64,
    pub functions: Vec<MachineFunction>,
    pub symbols: Vec<Symbol>,
    pub sites: Vec<SiteInfo>,
    pub data_base: u64,
    pub data: Vec<u8>,
    pub globals: Vec<Symbol>,
    pub stackmaps: Option<StackMapSection>,
    #[serde(skip)]
    pub(crate) index: HashMap<u64, (u32, u32)>,
    #[serde(skip)]
    pub(crate) addrs: Vec<Vec<u64>>,
    #[serde(skip)]
    pub(crate) labels: Vec<HashMap<u32, u64>>,
}

impl Image {
    pub(crate) fn empty() -> Image {
        Image {
            target: TargetId::X64,
            rules: Rules::default(),
            program_hash: String::new(),
            entry: 0,
            functions: Vec::new(),
            symbols: Vec::new(),
            sites: Vec::new(),
            data_base: 0,
            data: Vec::new(),
            globals: Vec::new(),
            stackmaps: None,
            index: HashMap::new(),
            addrs: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn rebuild_index(&mut self) {
        self.index.clear();
        self.addrs.clear();
        self.labels.clear();
        for (fi, f) in self.functions.iter().enumerate() {
            let mut a = self.symbols[fi].addr;
            let mut v = Vec::with_capacity(f.instrs.len());
            let mut labels = HashMap::new();
            for (ii, ins) in f.instrs.iter().enumerate() {
                v.push(a);
                if let MOp::Label { block, .. } = ins.op {
                    labels.insert(block, a);
                }
                if ins.size > 0 {
                    self.index.insert(a, (fi as u32, ii as u32));
                }
                a += ins.size as u64;
            }
            self.addrs.push(v);
            self.labels.push(labels);
        }
    }

    /// Instruction starting at `pc`.
    pub fn fetch(&self, pc: u64) -> Option<(u32, u32, &MachineInstr)> {
        let &(f, i) = self.index.get(&pc)?;
        Some((f, i, &self.functions[f as usize].instrs[i as usize]))
    }

    pub fn instr_addr(&self, f: u32, i: u32) -> u64 {
        self.addrs[f as usize][i as usize]
    }

    pub fn label_addr(&self, f: u32, block: u32) -> u64 {
        self.labels[f as usize][&block]
    }

    pub fn symbol(&self, name: &str) -> Option<&Symbol> {
        self.symbols.iter().find(|s| s.name == name)
    }

    pub fn function_index(&self, name: &str) -> Option<u32> {
        self.functions.iter().position(|f| f.name == name).map(|i| i as u32)
    }

    /// Function containing `pc`.
    pub fn function_at(&self, pc: u64) -> Option<u32> {
        self.symbols.iter().position(|s| pc >= s.addr && pc < s.addr + s.size.max(1)).map(|i| i as u32)
    }

    pub fn site_by_ret(&self, ret: u64) -> Option<&SiteInfo> {
        self.sites.iter().find(|s| s.ret_addr == ret)
    }

    pub fn site_by_id(&self, id: u32) -> Option<&SiteInfo> {
        self.sites.get(id as usize)
    }

    /// Bytes of code in function bodies.
    pub fn code_bytes(&self) -> u64 {
        self.functions.iter().map(|f| f.instrs.iter().map(|i| i.size as u64).sum::<u64>()).sum()
    }

    pub fn strip_stackmaps(&mut self) {
        self.stackmaps = None;
    }
}

fn fn_size(f: &MachineFunction) -> u64 {
    f.instrs.iter().map(|i| i.size as u64).sum()
}

fn build(
    prog: &IrProgram,
    target: TargetId,
    rules: &Rules,
    functions: Vec<MachineFunction>,
    addrs: &[u64],
) -> Result<Image, LinkError> {
    let symbols: Vec<Symbol> = functions
        .iter()
        .zip(addrs)
        .map(|(f, &addr)| Symbol { name: f.name.clone(), addr, size: fn_size(f) })
        .collect();
    for f in &functions {
        for i in &f.instrs {
            if let MOp::Call { callee, .. } = &i.op {
                if !symbols.iter().any(|s| &s.name == callee) {
                    return Err(LinkError::UndefinedSymbol(callee.clone()));
                }
            }
        }
    }
    let dl = data_layout(&prog.globals);
    let mut data = vec![0u8; dl.size as usize];
    let mut globals = Vec::new();
    for (g, off) in prog.globals.iter().zip(&dl.offsets) {
        data[*off as usize..*off as usize + g.init.len()].copy_from_slice(&g.init);
        globals.push(Symbol { name: g.name.clone(), addr: dl.base + off, size: g.init.len() as u64 });
    }
    let mut img = Image {
        target,
        rules: *rules,
        program_hash: hex(&prog.hash()),
        entry: addrs[0],
        functions,
        symbols,
        sites: Vec::new(),
        data_base: dl.base,
        data,
        globals,
        stackmaps: None,
        index: HashMap::new(),
        addrs: Vec::new(),
        labels: Vec::new(),
    };
    img.rebuild_index();
    let mut sites = Vec::new();
    for (fi, f) in img.functions.iter().enumerate() {
        for (ii, i) in f.instrs.iter().enumerate() {
            if let MOp::Call { site, .. } = i.op {
                let call_addr = img.instr_addr(fi as u32, ii as u32);
                sites.push(SiteInfo {
                    id: sites.len() as u32,
                    function: fi as u32,
                    site,
                    call_addr,
                    ret_addr: call_addr + i.size as u64,
                });
            }
        }
    }
    img.sites = sites;
    img.stackmaps = Some(emit_stackmaps(&img));
    Ok(img)
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Shared symbol addresses for functions with the given (X64, A64) sizes:
/// each starts on a `SYMBOL_GRANULE` boundary past the larger of the two
/// previous bodies.
pub fn assign_symbols(sizes: &[(u64, u64)]) -> Result<Vec<u64>, LinkError> {
    let mut addrs = Vec::with_capacity(sizes.len());
    let mut cur = CODE_BASE;
    for &(x, a) in sizes {
        let addr = cur.div_ceil(SYMBOL_GRANULE) * SYMBOL_GRANULE;
        addrs.push(addr);
        cur = addr + x.max(a);
    }
    if cur > DATA_BASE {
        return Err(LinkError::CodeOverflow(cur));
    }
    Ok(addrs)
}

/// Links both targets' functions into images with identical symbol
/// addresses. The entry function is placed first, the rest in program order.
pub fn link(
    prog: &IrProgram,
    mut fx: Vec<MachineFunction>,
    mut fa: Vec<MachineFunction>,
    rules: &Rules,
) -> Result<(Image, Image, FixpointReport), LinkError> {
    let entry = |fs: &mut Vec<MachineFunction>| -> Result<(), LinkError> {
        let i = fs
            .iter()
            .position(|f| f.name == prog.entry)
            .ok_or_else(|| LinkError::UndefinedSymbol(prog.entry.clone()))?;
        let f = fs.remove(i);
        fs.insert(0, f);
        Ok(())
    };
    entry(&mut fx)?;
    entry(&mut fa)?;
    let report = layout_program(&mut fx, &mut fa, rules);
    if let Some((function, sites)) = report.unsettled.first() {
        return Err(LinkError::NoConvergence { function: function.clone(), sites: sites.clone() });
    }
    let sizes: Vec<(u64, u64)> = fx.iter().zip(&fa).map(|(x, a)| (fn_size(x), fn_size(a))).collect();
    let addrs = assign_symbols(&sizes)?;
    let ix = build(prog, TargetId::X64, rules, fx, &addrs)?;
    let ia = build(prog, TargetId::A64, rules, fa, &addrs)?;
    Ok((ix, ia, report))
}
