//! Joint placement of both targets' instruction streams: callsite padding and
//! loop-header alignment, iterated on top of cached padding until addresses
//! stop moving.

use serde::{Deserialize, Serialize};

use super::align::{apply_jump_over, nops, place, PaddingPlan};
use super::{instr_size, BLOCK_ALIGN};
use crate::abi::TargetId;
use crate::codegen::{MOp, MachineFunction, MachineInstr, Rules};

/// Iteration cap for the placement fixpoint.
pub const MAX_ITERATIONS: u32 = 16;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FixpointReport {
    /// Iterations per function, in program order.
    pub iterations: Vec<(String, u32)>,
    pub converged: bool,
    pub plans: Vec<(String, Vec<PaddingPlan>)>,
    /// Functions that hit the cap, with the callsites still unequal.
    pub unsettled: Vec<(String, Vec<u32>)>,
}

impl FixpointReport {
    pub fn mean_iterations(&self) -> f64 {
        if self.iterations.is_empty() {
            return 0.0;
        }
        self.iterations.iter().map(|(_, n)| *n as f64).sum::<f64>() / self.iterations.len() as f64
    }

    pub fn max_iterations(&self) -> u32 {
        self.iterations.iter().map(|(_, n)| *n).max().unwrap_or(0)
    }
}

fn strip(instrs: &[MachineInstr]) -> Vec<MachineInstr> {
    instrs.iter().filter(|i| !matches!(i.op, MOp::Nop { .. } | MOp::JumpOver { .. })).cloned().collect()
}

/// Cached padding for one target: lead bytes for each call, bytes directly
/// before each call, and bytes after each loop-header label.
#[derive(Debug, Clone, Default, PartialEq)]
struct Pads {
    /// Base index before which call k's lead goes: just past the last loop
    /// header since the previous call, or the start of that stretch. Keeping
    /// it behind headers stops header realignment from absorbing it.
    lead_at: Vec<usize>,
    lead: Vec<u32>,
    sites: Vec<u32>,
    headers: Vec<u32>,
}

fn is_header(op: &MOp) -> bool {
    matches!(op, MOp::Label { loop_header: true, .. })
}

fn is_call(op: &MOp) -> bool {
    matches!(op, MOp::Call { .. })
}

fn pads_for(base: &[MachineInstr]) -> Pads {
    let mut lead_at = Vec::new();
    let mut at = 0;
    for (i, ins) in base.iter().enumerate() {
        if is_header(&ins.op) {
            at = i + 1;
        }
        if is_call(&ins.op) {
            lead_at.push(at);
            at = i + 1;
        }
    }
    let calls = lead_at.len();
    Pads {
        lead_at,
        lead: vec![0; calls],
        sites: vec![0; calls],
        headers: vec![0; base.iter().filter(|i| is_header(&i.op)).count()],
    }
}

fn render(target: TargetId, base: &[MachineInstr], pads: &Pads) -> Vec<MachineInstr> {
    let mut out = Vec::with_capacity(base.len());
    let push = |out: &mut Vec<MachineInstr>, mut i: MachineInstr| {
        i.size = instr_size(target, &i.op);
        out.push(i);
    };
    let (mut c, mut h) = (0, 0);
    for (n, i) in base.iter().enumerate() {
        if c < pads.lead.len() && pads.lead_at[c] == n {
            out.extend(nops(target, pads.lead[c]));
        }
        if is_call(&i.op) {
            for p in apply_jump_over(target, pads.sites[c]) {
                push(&mut out, p);
            }
            c += 1;
        }
        let header = is_header(&i.op);
        push(&mut out, i.clone());
        if header {
            out.extend(nops(target, pads.headers[h]));
            h += 1;
        }
    }
    out
}

/// Forward walk over a base stream with cached padding applied.
struct Cursor<'a> {
    target: TargetId,
    base: &'a [MachineInstr],
    i: usize,
    off: u64,
    h: usize,
}

impl<'a> Cursor<'a> {
    fn new(target: TargetId, base: &'a [MachineInstr]) -> Self {
        Cursor { target, base, i: 0, off: 0, h: 0 }
    }

    /// Advances to call `k`, returning its offset before the call padding.
    fn to_call(&mut self, pads: &Pads, k: usize) -> u64 {
        while !is_call(&self.base[self.i].op) {
            if pads.lead_at[k] == self.i {
                self.off += pads.lead[k] as u64;
            }
            self.off += instr_size(self.target, &self.base[self.i].op) as u64;
            if is_header(&self.base[self.i].op) {
                self.off += pads.headers[self.h] as u64;
                self.h += 1;
            }
            self.i += 1;
        }
        if pads.lead_at[k] == self.i {
            self.off += pads.lead[k] as u64;
        }
        self.off
    }

    fn past_call(&mut self, pads: &Pads, k: usize) -> u64 {
        self.off += (pads.sites[k] + self.target.call_size()) as u64;
        self.i += 1;
        self.off
    }
}

/// Walks both streams forward, growing the padding around each call until
/// the return addresses agree. Later offsets shift as pads grow.
fn callsite_pass(bx: &[MachineInstr], ba: &[MachineInstr], px: &mut Pads, pa: &mut Pads) {
    let mut cx = Cursor::new(TargetId::X64, bx);
    let mut ca = Cursor::new(TargetId::A64, ba);
    for k in 0..px.sites.len() {
        let old_lead = px.lead[k];
        let dx = cx.to_call(px, k) + (px.sites[k] + TargetId::X64.call_size()) as u64;
        let da = ca.to_call(pa, k) + (pa.sites[k] + TargetId::A64.call_size()) as u64;
        let (lead, ex, ea) = place(dx, da);
        px.lead[k] += lead;
        px.sites[k] += ex;
        pa.sites[k] += ea;
        // Cancel padding both sides carry over from earlier iterations.
        let common = px.sites[k].min(pa.sites[k]) / 4 * 4;
        px.sites[k] -= common;
        pa.sites[k] -= common;
        if px.sites[k] > 0 && pa.sites[k] > 0 {
            px.lead[k] += px.sites[k];
            px.sites[k] = 0;
        }
        cx.off += (px.lead[k] - old_lead) as u64;
        cx.past_call(px, k);
        ca.past_call(pa, k);
    }
}

/// Offsets just past each call and just past each loop header's padding.
/// With `realign`, header padding is first recomputed so the block after
/// each header starts on a `BLOCK_ALIGN` boundary.
fn header_pass(target: TargetId, base: &[MachineInstr], pads: &mut Pads, realign: bool) -> (Vec<u64>, Vec<u64>) {
    let (mut sites, mut headers) = (Vec::new(), Vec::new());
    let mut o = 0u64;
    for (n, i) in base.iter().enumerate() {
        let c = sites.len();
        if c < pads.lead.len() && pads.lead_at[c] == n {
            o += pads.lead[c] as u64;
        }
        if is_call(&i.op) {
            o += (pads.sites[c] + instr_size(target, &i.op)) as u64;
            sites.push(o);
            continue;
        }
        o += instr_size(target, &i.op) as u64;
        if is_header(&i.op) {
            let h = headers.len();
            if realign {
                pads.headers[h] = ((BLOCK_ALIGN - o % BLOCK_ALIGN) % BLOCK_ALIGN) as u32;
            }
            o += pads.headers[h] as u64;
            headers.push(o);
        }
    }
    (sites, headers)
}

fn site_ids(instrs: &[MachineInstr]) -> Vec<u32> {
    instrs
        .iter()
        .filter_map(|i| match i.op {
            MOp::Call { site, .. } => Some(site),
            _ => None,
        })
        .collect()
}

/// Places every function pair in place. Each iteration runs a forward
/// callsite pass, which only adds to the cached callsite padding, and then,
/// with block alignment on, a loop-header pass that realigns every header. Stops at the first iteration after which
/// every return address agrees and every loop header is aligned.
pub fn layout_program(fx: &mut [MachineFunction], fa: &mut [MachineFunction], rules: &Rules) -> FixpointReport {
    let mut report = FixpointReport { converged: true, ..Default::default() };
    for (x, a) in fx.iter_mut().zip(fa.iter_mut()) {
        let bx = strip(&x.instrs);
        let ba = strip(&a.instrs);
        let sites = site_ids(&bx);
        assert_eq!(sites, site_ids(&ba), "callsites differ between targets");
        let (mut px, mut pa) = (pads_for(&bx), pads_for(&ba));
        let mut iters = 0;
        loop {
            iters += 1;
            if rules.callsite_align {
                callsite_pass(&bx, &ba, &mut px, &mut pa);
            }
            if rules.block_align {
                header_pass(TargetId::X64, &bx, &mut px, true);
                header_pass(TargetId::A64, &ba, &mut pa, true);
            }
            let (sx, hx) = header_pass(TargetId::X64, &bx, &mut px, false);
            let (sa, ha) = header_pass(TargetId::A64, &ba, &mut pa, false);
            let unequal: Vec<u32> = if rules.callsite_align {
                (0..sites.len()).filter(|&k| sx[k] != sa[k]).map(|k| sites[k]).collect()
            } else {
                Vec::new()
            };
            let aligned = !rules.block_align || hx.iter().chain(&ha).all(|o| o % BLOCK_ALIGN == 0);
            if unequal.is_empty() && aligned {
                break;
            }
            if iters == MAX_ITERATIONS {
                report.converged = false;
                report.unsettled.push((x.name.clone(), unequal));
                break;
            }
        }
        let ox = render(TargetId::X64, &bx, &px);
        let oa = render(TargetId::A64, &ba, &pa);
        let plans = sites
            .iter()
            .enumerate()
            .map(|(k, &site)| PaddingPlan {
                site,
                pad_x64: px.sites[k],
                pad_a64: pa.sites[k],
                lead_x64: px.lead[k],
            })
            .collect();
        x.instrs = ox;
        a.instrs = oa;
        report.iterations.push((x.name.clone(), iters));
        report.plans.push((x.name.clone(), plans));
    }
    report
}
