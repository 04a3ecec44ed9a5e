//! Checkpoint, rewrite and restore of execution state at callsites.
//!
//! Migration never consults stack maps: the unified layout means memory is
//! copied verbatim and only the register file is renamed through the role map.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abi::{all_roles, physical, Role, TargetId};
use crate::codegen::MOp;
use crate::emu::machine::{pending_call, reg_slot, run_with, Control, EmuError, MachineState, RunEnd};
use crate::emu::load_image;
use crate::layout::{json_section, Container, ContainerError, Image, STACK_BASE, STACK_LIMIT};
use crate::pipeline::Build;

#[derive(Debug, Error)]
pub enum MigrateError {
    #[error("pc {0:#x} is not at a callsite")]
    NotAtCallsite(u64),
    #[error("checkpoint is already for {0}")]
    SameTarget(TargetId),
    #[error("register `{name}` holds {value:#x} but has no role")]
    UnmappableRegister { name: String, value: u64 },
    #[error("checkpoint for {found} cannot be restored on {expected}")]
    TargetMismatch { expected: TargetId, found: TargetId },
    #[error("program hash mismatch")]
    HashMismatch,
    #[error("bad schedule: {0}")]
    BadSchedule(String),
    #[error(transparent)]
    Emu(#[from] EmuError),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub source: TargetId,
    pub program_hash: String,
    /// Address of the pending call instruction.
    pub pc: u64,
    pub site: u32,
    /// Role-keyed register values, in role id order.
    pub regs: Vec<(Role, u64)>,
    pub sp: u64,
    /// Stack bytes from `sp` up to the stack base.
    pub stack: Vec<u8>,
    pub globals: Vec<u8>,
    pub output: Vec<u64>,
    pub steps: u64,
}

impl Checkpoint {
    pub fn reg(&self, r: Role) -> Option<u64> {
        self.regs.iter().find(|(x, _)| *x == r).map(|(_, v)| *v)
    }

    /// Register file with physical names.
    pub fn named_regs(&self) -> Vec<(String, u64)> {
        self.regs.iter().filter_map(|(r, v)| Some((physical(*r, self.source)?, *v))).collect()
    }

    /// Value in the current frame's return-address slot.
    pub fn stacked_return_address(&self) -> Option<u64> {
        let fp = self.reg(Role::Fp)?;
        let off = (fp + 8).checked_sub(self.sp)? as usize;
        Some(u64::from_le_bytes(self.stack.get(off..off + 8)?.try_into().ok()?))
    }
}

/// Roles captured for a target: every role with a register of its own.
fn captured_roles(t: TargetId) -> Vec<Role> {
    all_roles()
        .into_iter()
        .filter(|r| !matches!(r, Role::Ret1 | Role::Zero))
        .filter(|r| physical(*r, t).is_some())
        .collect()
}

pub fn checkpoint(s: &MachineState, img: &Image) -> Result<Checkpoint, MigrateError> {
    let site = pending_call(s, img).ok_or(MigrateError::NotAtCallsite(s.pc))?;
    let roles = captured_roles(s.target);
    // Registers outside the role set must be idle.
    let owned: Vec<(bool, usize)> = roles.iter().filter_map(|r| reg_slot(s.target, *r)).collect();
    for (i, v) in s.gpr.iter().enumerate() {
        if *v != 0 && !owned.contains(&(false, i)) && !(s.target == TargetId::A64 && i == 32) {
            return Err(MigrateError::UnmappableRegister { name: format!("gpr{i}"), value: *v });
        }
    }
    let sp = s.sp();
    let lo = STACK_BASE - STACK_LIMIT;
    Ok(Checkpoint {
        source: s.target,
        program_hash: img.program_hash.clone(),
        pc: s.pc,
        site: site.id,
        regs: roles.iter().map(|r| (*r, s.get(*r))).collect(),
        sp,
        stack: s.stack[(sp - lo) as usize..].to_vec(),
        globals: s.data.clone(),
        output: s.output.clone(),
        steps: s.steps,
    })
}

/// Renames registers for `to`. Memory is copied verbatim; the PC keeps the
/// return address fixed.
pub fn rewrite_checkpoint(cp: &Checkpoint, to: TargetId) -> Result<Checkpoint, MigrateError> {
    if cp.source == to {
        return Err(MigrateError::SameTarget(to));
    }
    let mut regs: Vec<(Role, u64)> = Vec::new();
    for r in captured_roles(to) {
        let v = if r == Role::Lr {
            cp.stacked_return_address().unwrap_or(0)
        } else {
            cp.reg(r).unwrap_or(0)
        };
        regs.push((r, v));
    }
    let from = cp.source;
    Ok(Checkpoint {
        source: to,
        pc: cp.pc + from.call_size() as u64 - to.call_size() as u64,
        regs,
        ..cp.clone()
    })
}

pub fn restore(img: &Image, cp: &Checkpoint) -> Result<MachineState, MigrateError> {
    if cp.source != img.target {
        return Err(MigrateError::TargetMismatch { expected: img.target, found: cp.source });
    }
    if cp.program_hash != img.program_hash {
        return Err(MigrateError::HashMismatch);
    }
    let mut s = load_image(img);
    for (r, v) in &cp.regs {
        s.set(*r, *v);
    }
    let lo = STACK_BASE - STACK_LIMIT;
    let off = (cp.sp - lo) as usize;
    s.stack[off..].copy_from_slice(&cp.stack);
    s.data = cp.globals.clone();
    s.output = cp.output.clone();
    s.pc = cp.pc;
    s.steps = cp.steps;
    Ok(s)
}

pub const CHECKPOINT_KIND: &[u8; 4] = b"CKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    version: u32,
    source: TargetId,
    program_hash: String,
    pc: u64,
    site: u32,
    sp: u64,
    steps: u64,
    output: Vec<u64>,
}

pub fn write_checkpoint(cp: &Checkpoint) -> Vec<u8> {
    let mut c = Container::new(CHECKPOINT_KIND);
    let meta = Meta {
        version: CHECKPOINT_VERSION,
        source: cp.source,
        program_hash: cp.program_hash.clone(),
        pc: cp.pc,
        site: cp.site,
        sp: cp.sp,
        steps: cp.steps,
        output: cp.output.clone(),
    };
    c.push(b"META", serde_json::to_vec(&meta).unwrap());
    let mut regs = Vec::with_capacity(cp.regs.len() * 9);
    for (r, v) in &cp.regs {
        regs.push(r.id());
        regs.extend_from_slice(&v.to_le_bytes());
    }
    c.push(b"REGS", regs);
    c.push(b"STAK", cp.stack.clone());
    c.push(b"GLOB", cp.globals.clone());
    c.to_bytes()
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint, MigrateError> {
    let c = Container::from_bytes(bytes, CHECKPOINT_KIND)?;
    let meta: Meta = json_section(&c, b"META")?;
    if meta.version != CHECKPOINT_VERSION {
        return Err(ContainerError::Malformed("META".into(), format!("version {}", meta.version)).into());
    }
    let raw = c.require(b"REGS")?;
    if raw.len() % 9 != 0 {
        return Err(ContainerError::Malformed("REGS".into(), "length".into()).into());
    }
    let mut regs = Vec::new();
    for ch in raw.chunks(9) {
        let r = Role::from_id(ch[0]).ok_or_else(|| ContainerError::Malformed("REGS".into(), format!("role {}", ch[0])))?;
        regs.push((r, u64::from_le_bytes(ch[1..].try_into().unwrap())));
    }
    Ok(Checkpoint {
        source: meta.source,
        program_hash: meta.program_hash,
        pc: meta.pc,
        site: meta.site,
        regs,
        sp: meta.sp,
        stack: c.require(b"STAK")?.to_vec(),
        globals: c.require(b"GLOB")?.to_vec(),
        output: meta.output,
        steps: meta.steps,
    })
}

/// True when every compare is consumed by the instruction right after it, so
/// no condition flags are live across a call.
pub fn flags_dead_at_calls(img: &Image) -> bool {
    img.functions.iter().all(|f| {
        let ops: Vec<&MOp> = f.instrs.iter().map(|i| &i.op).filter(|o| !matches!(o, MOp::Label { .. })).collect();
        ops.windows(2).all(|w| match w[0] {
            MOp::Cmp { .. } | MOp::FCmp { .. } => matches!(w[1], MOp::JCond { .. } | MOp::SetCond { .. }),
            _ => true,
        }) && !matches!(ops.last(), Some(MOp::Cmp { .. } | MOp::FCmp { .. }))
    })
}

/// Ordered (occurrence index, from, to) migration points.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MigrationSchedule {
    pub points: Vec<(u64, TargetId, TargetId)>,
}

impl MigrationSchedule {
    pub fn new(points: Vec<(u64, TargetId, TargetId)>) -> Result<Self, MigrateError> {
        if points.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(MigrateError::BadSchedule("occurrence indices must increase".into()));
        }
        if points.iter().any(|p| p.1 == p.2) {
            return Err(MigrateError::BadSchedule("migration to the same target".into()));
        }
        Ok(MigrationSchedule { points })
    }

    /// `cs@k:x64>a64,cs@m:a64>x64`
    pub fn parse(s: &str) -> Result<Self, MigrateError> {
        let bad = |m: &str| MigrateError::BadSchedule(m.to_string());
        let mut points = Vec::new();
        for item in s.split(',').map(str::trim).filter(|x| !x.is_empty()) {
            let rest = item.strip_prefix("cs@").ok_or_else(|| bad(item))?;
            let (k, dir) = rest.split_once(':').ok_or_else(|| bad(item))?;
            let (f, t) = dir.split_once('>').ok_or_else(|| bad(item))?;
            let k: u64 = k.parse().map_err(|_| bad(item))?;
            let f = TargetId::parse(f).ok_or_else(|| bad(item))?;
            let t = TargetId::parse(t).ok_or_else(|| bad(item))?;
            points.push((k, f, t));
        }
        Self::new(points)
    }

    /// Migrates at every one of `occurrences` callsite occurrences, alternating.
    pub fn every(start: TargetId, occurrences: u64) -> Self {
        let mut cur = start;
        let points = (0..occurrences)
            .map(|k| {
                let p = (k, cur, cur.other());
                cur = cur.other();
                p
            })
            .collect();
        MigrationSchedule { points }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MigrationCheck {
    pub occurrence: u64,
    pub site: u32,
    /// Stack and globals identical between input and rewritten checkpoint.
    pub memory_verbatim: bool,
    /// Rewriting back restores the original register file.
    pub involution: bool,
    /// Bytes of the register section rewritten.
    pub rewrite_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MigrationOutcome {
    pub output: Vec<u64>,
    pub final_target: TargetId,
    pub migrations: usize,
    pub checks: Vec<MigrationCheck>,
    /// Schedule points never reached.
    pub missed: Vec<u64>,
}

/// Runs `build` starting on `start`, migrating per `sched`. When `dir` is
/// given every checkpoint goes through a file written there.
pub fn migrate_run(
    build: &Build,
    start: TargetId,
    sched: &MigrationSchedule,
    fuel: u64,
    dir: Option<&Path>,
) -> Result<MigrationOutcome, MigrateError> {
    let mut target = start;
    let mut state = load_image(build.image(target));
    let mut seen = 0u64;
    let mut next = 0usize;
    let mut checks = Vec::new();
    let mut remaining = fuel;
    loop {
        let img = build.image(target);
        let pending = sched.points.get(next).copied();
        let before = state.steps;
        let end = run_with(&mut state, img, remaining, None, |_, _| {
            let here = seen;
            seen += 1;
            match pending {
                Some((k, _, _)) if k == here => Control::Pause,
                _ => Control::Continue,
            }
        })?;
        remaining -= state.steps - before;
        match end {
            RunEnd::Halted => {
                let missed = sched.points[next..].iter().map(|p| p.0).collect();
                return Ok(MigrationOutcome {
                    output: state.output,
                    final_target: target,
                    migrations: checks.len(),
                    checks,
                    missed,
                });
            }
            RunEnd::Paused(_) => {
                let (k, from, to) = pending.unwrap();
                if from != target {
                    return Err(MigrateError::BadSchedule(format!("occurrence {k} is on {target}, not {from}")));
                }
                let cp = checkpoint(&state, img)?;
                let mut out = rewrite_checkpoint(&cp, to)?;
                if let Some(d) = dir {
                    let path = d.join(format!("ckpt-{k:06}-{to}.bin"));
                    std::fs::write(&path, write_checkpoint(&out)).map_err(ContainerError::from)?;
                    out = read_checkpoint(&std::fs::read(&path).map_err(ContainerError::from)?)?;
                }
                let back = rewrite_checkpoint(&out, from)?;
                checks.push(MigrationCheck {
                    occurrence: k,
                    site: cp.site,
                    memory_verbatim: out.stack == cp.stack && out.globals == cp.globals && out.sp == cp.sp,
                    involution: back.regs == cp.regs && back.pc == cp.pc,
                    rewrite_bytes: out.regs.len() * 9,
                });
                state = restore(build.image(to), &out)?;
                // The restored state sits at the same occurrence; it is not offered again.
                target = to;
                next += 1;
            }
        }
    }
}
