//! Per-callsite records of where each live value sits, and the cross-target
//! equivalence check over them.

use serde::{Deserialize, Serialize};

use crate::abi::Role;
use crate::codegen::Home;
use crate::layout::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Location {
    Register(Role),
    /// Offset from the frame base (the return-address slot).
    StackSlot(i64),
    Constant(u64),
    Recomputed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LiveEntry {
    /// Local names are bare; IR values carry a `%` prefix.
    pub name: String,
    pub location: Location,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackMapRecord {
    pub id: u32,
    pub function: String,
    pub ret_addr: u64,
    pub frame_size: u32,
    pub entries: Vec<LiveEntry>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackMapSection {
    pub records: Vec<StackMapRecord>,
}

impl StackMapSection {
    pub fn record(&self, id: u32) -> Option<&StackMapRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn by_ret(&self, ret: u64) -> Option<&StackMapRecord> {
        self.records.iter().find(|r| r.ret_addr == ret)
    }
}

fn location(h: Home, spills: &[i64]) -> Location {
    match h {
        Home::Reg(r) => Location::Register(r),
        Home::Spill(s) => Location::StackSlot(spills[s as usize]),
        Home::Constant(c) => Location::Constant(c),
        Home::Recomputed => Location::Recomputed,
        Home::VReg(v) => panic!("unallocated virtual register {v} in stack map"),
    }
}

/// Records for every callsite of a linked image, in id order.
pub fn emit_stackmaps(img: &Image) -> StackMapSection {
    let mut records = Vec::new();
    for s in &img.sites {
        let f = &img.functions[s.function as usize];
        let mut entries = Vec::new();
        let mut frame_size = 0;
        if let Some(layout) = &f.frame {
            frame_size = layout.size;
            for (name, off) in f.locals.iter().zip(&layout.locals) {
                entries.push(LiveEntry { name: name.clone(), location: Location::StackSlot(*off) });
            }
            let cs = f.callsites.iter().find(|c| c.site == s.site).expect("callsite record");
            for (name, h) in &cs.live {
                entries.push(LiveEntry { name: format!("%{name}"), location: location(*h, &layout.spills) });
            }
        }
        records.push(StackMapRecord { id: s.id, function: f.name.clone(), ret_addr: s.ret_addr, frame_size, entries });
    }
    StackMapSection { records }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mismatch {
    pub id: u32,
    pub function: String,
    /// Differing value, with its location in each image.
    pub value: Option<(String, Option<Location>, Option<Location>)>,
    pub what: String,
}

impl Mismatch {
    fn other(id: u32, function: &str, what: String) -> Self {
        Mismatch { id, function: function.to_string(), value: None, what }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub callsites: usize,
    pub equivalent: bool,
    pub symbols_equal: bool,
    pub mismatches: Vec<Mismatch>,
}

/// Pairwise comparison of two record lists.
pub fn verify_records(sx: &StackMapSection, sa: &StackMapSection) -> Vec<Mismatch> {
    let mut mm = Vec::new();
    if sx.records.len() != sa.records.len() {
        mm.push(Mismatch::other(0, "", format!("record count {} vs {}", sx.records.len(), sa.records.len())));
    }
    for (rx, ra) in sx.records.iter().zip(&sa.records) {
        let (id, f) = (rx.id, rx.function.as_str());
        if rx.id != ra.id || rx.function != ra.function {
            mm.push(Mismatch::other(id, f, format!("callsite {}/{} vs {}/{}", rx.id, rx.function, ra.id, ra.function)));
            continue;
        }
        if rx.ret_addr != ra.ret_addr {
            mm.push(Mismatch::other(id, f, format!("return address {:#x} vs {:#x}", rx.ret_addr, ra.ret_addr)));
        }
        if rx.frame_size != ra.frame_size {
            mm.push(Mismatch::other(id, f, format!("frame size {} vs {}", rx.frame_size, ra.frame_size)));
        }
        let names: Vec<&String> = rx.entries.iter().map(|e| &e.name).collect();
        if names != ra.entries.iter().map(|e| &e.name).collect::<Vec<_>>() {
            mm.push(Mismatch::other(id, f, "live value lists differ".to_string()));
            continue;
        }
        for (ex, ea) in rx.entries.iter().zip(&ra.entries) {
            if ex.location != ea.location {
                mm.push(Mismatch {
                    id,
                    function: f.to_string(),
                    value: Some((ex.name.clone(), Some(ex.location), Some(ea.location))),
                    what: format!("{}: {:?} vs {:?}", ex.name, ex.location, ea.location),
                });
            }
        }
    }
    mm
}

/// Compares the layouts of two images of the same program.
pub fn verify(x: &Image, a: &Image) -> VerifyReport {
    let symbols_equal = x.symbols.len() == a.symbols.len()
        && x.symbols.iter().zip(&a.symbols).all(|(p, q)| p.name == q.name && p.addr == q.addr)
        && x.globals == a.globals;
    let mm = match (&x.stackmaps, &a.stackmaps) {
        (Some(sx), Some(sa)) => verify_records(sx, sa),
        _ => vec![Mismatch::other(0, "", "stack maps stripped".to_string())],
    };
    VerifyReport { callsites: x.sites.len(), equivalent: symbols_equal && mm.is_empty(), symbols_equal, mismatches: mm }
}
