use proptest::prelude::*;

use unistack::abi::TargetId;
use unistack::codegen::imm::legal_arith_immediate;
use unistack::codegen::{compile_program, MOp, Rules, Src};
use unistack::corpus::{generate_corpus, generate_program, CorpusSpec, CORPUS_FUEL};
use unistack::emu::reference::interpret;
use unistack::emu::{load_image, run_with, Control, MachineState, RunEnd};
use unistack::ir::{parse_program, print_program, validate};
use unistack::layout::{align_callsites, Image};
use unistack::migrate::{migrate_run, read_checkpoint, write_checkpoint, checkpoint, MigrationSchedule};
use unistack::pipeline::build_program;
use unistack::stackmap::Location;

fn spec(seed: u64) -> CorpusSpec {
    CorpusSpec { seed, ..CorpusSpec::new(seed, 1) }
}

fn pause_at(img: &Image, k: u64) -> Option<MachineState> {
    let mut s = load_image(img);
    let mut n = 0;
    let end = run_with(&mut s, img, 10 * CORPUS_FUEL, None, |_, _| {
        n += 1;
        if n > k {
            Control::Pause
        } else {
            Control::Continue
        }
    })
    .unwrap();
    matches!(end, RunEnd::Paused(_)).then_some(s)
}

/// Values named by the current callsite's record, read from a live state.
fn record_values(s: &MachineState, img: &Image) -> Vec<(String, Option<u64>)> {
    let site = unistack::emu::machine::pending_call(s, img).unwrap();
    let rec = img.stackmaps.as_ref().unwrap().record(site.id).unwrap();
    let base = s.fp() + 8;
    rec.entries
        .iter()
        .map(|e| {
            let v = match e.location {
                Location::Register(r) => Some(s.get(r)),
                Location::StackSlot(off) => s.read_u64((base as i64 + off) as u64),
                Location::Constant(c) => Some(c),
                Location::Recomputed => None,
            };
            (e.name.clone(), v)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn printed_ir_parses_back(seed in any::<u64>()) {
        let p = generate_program(&spec(seed), 0);
        prop_assert!(validate(&p).is_empty());
        let text = print_program(&p);
        let q = parse_program(&text).unwrap();
        prop_assert_eq!(&p, &q);
        prop_assert_eq!(print_program(&q), text);
    }

    #[test]
    fn padding_equalizes_and_is_single_sided(
        gaps in prop::collection::vec((0u64..64, 0u64..16), 1..12),
    ) {
        let (mut dx, mut da) = (0u64, 0u64);
        let sites: Vec<(u32, u64, u64)> = gaps
            .iter()
            .enumerate()
            .map(|(i, &(gx, ga))| {
                dx += gx + 5;
                da += ga * 4 + 4;
                (i as u32, dx, da)
            })
            .collect();
        let plans = align_callsites(&sites);
        let (mut sx, mut sa) = (0u64, 0u64);
        for (p, &(_, x, a)) in plans.iter().zip(&sites) {
            sx += (p.lead_x64 + p.pad_x64) as u64;
            sa += p.pad_a64 as u64;
            prop_assert_eq!(x + sx, a + sa);
            prop_assert!(p.pad_x64 == 0 || p.pad_a64 == 0);
            prop_assert_eq!(p.pad_a64 % 4, 0);
            prop_assert!(p.lead_x64 < 4);
        }
    }

    #[test]
    fn arithmetic_immediates_are_legal_on_both_targets(seed in any::<u64>()) {
        let p = generate_program(&spec(seed), 0);
        let b = build_program(&p, &Rules::default()).unwrap();
        for img in [&b.x64, &b.a64] {
            for f in &img.functions {
                for i in &f.instrs {
                    let imm = match &i.op {
                        MOp::Alu { rhs: Src::Imm(v), .. } | MOp::Cmp { rhs: Src::Imm(v), .. } => Some(*v),
                        _ => None,
                    };
                    if let Some(v) = imm {
                        prop_assert!(legal_arith_immediate(v as u64), "{} in {}: {:?}", v, f.name, i.op);
                    }
                    if let MOp::Load { mem, .. } | MOp::Store { mem, .. } = &i.op {
                        prop_assert!(mem.index.is_none());
                    }
                }
            }
        }
    }

    #[test]
    fn allocation_is_deterministic(seed in any::<u64>()) {
        let p = generate_program(&spec(seed), 0);
        for t in [TargetId::X64, TargetId::A64] {
            let a = compile_program(&p, t, &Rules::default()).unwrap();
            let b = compile_program(&p, t, &Rules::default()).unwrap();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn images_decode_on_their_own_boundaries(seed in any::<u64>()) {
        let p = generate_program(&spec(seed), 0);
        let b = build_program(&p, &Rules::default()).unwrap();
        for img in [&b.x64, &b.a64] {
            for (fi, f) in img.functions.iter().enumerate() {
                let mut at = img.symbols[fi].addr;
                for (ii, i) in f.instrs.iter().enumerate() {
                    prop_assert_eq!(img.instr_addr(fi as u32, ii as u32), at);
                    if let MOp::JumpOver { skip } = i.op {
                        let dest = at + i.size as u64 + skip as u64;
                        let (_, _, landed) = img.fetch(dest).unwrap();
                        let is_call = matches!(landed.op, MOp::Call { .. });
                        prop_assert!(is_call);
                    }
                    at += i.size as u64;
                }
            }
        }
        for (x, a) in b.x64.sites.iter().zip(&b.a64.sites) {
            prop_assert_eq!(x.ret_addr, a.ret_addr);
        }
        prop_assert_eq!(
            b.x64.symbols.iter().map(|s| s.addr).collect::<Vec<_>>(),
            b.a64.symbols.iter().map(|s| s.addr).collect::<Vec<_>>()
        );
    }

    #[test]
    fn stack_maps_read_the_same_values(seed in any::<u64>(), pick in any::<u64>()) {
        let p = generate_program(&spec(seed), 0);
        let calls = interpret(&p, CORPUS_FUEL).unwrap().calls;
        prop_assume!(calls > 0);
        let b = build_program(&p, &Rules::default()).unwrap();
        let k = pick % calls;
        let sx = pause_at(&b.x64, k).unwrap();
        let sa = pause_at(&b.a64, k).unwrap();
        prop_assert_eq!(sx.sp() % 16, 0);
        prop_assert_eq!(sx.sp(), sa.sp());
        prop_assert_eq!(record_values(&sx, &b.x64), record_values(&sa, &b.a64));
    }

    #[test]
    fn migration_at_a_random_point_is_transparent(seed in any::<u64>(), pick in any::<u64>(), x_first in any::<bool>()) {
        let p = generate_program(&spec(seed), 0);
        let native = interpret(&p, CORPUS_FUEL).unwrap();
        prop_assume!(native.calls > 0);
        let b = build_program(&p, &Rules::default()).unwrap();
        let (from, to) = if x_first { (TargetId::X64, TargetId::A64) } else { (TargetId::A64, TargetId::X64) };
        let sched = MigrationSchedule::new(vec![(pick % native.calls, from, to)]).unwrap();
        let out = migrate_run(&b, from, &sched, 10 * CORPUS_FUEL, None).unwrap();
        prop_assert_eq!(out.output, native.output);
        prop_assert_eq!(out.migrations, 1);
        prop_assert!(out.checks.iter().all(|c| c.memory_verbatim && c.involution));
    }

    #[test]
    fn checkpoint_files_round_trip(seed in any::<u64>(), pick in any::<u64>()) {
        let p = generate_program(&spec(seed), 0);
        let calls = interpret(&p, CORPUS_FUEL).unwrap().calls;
        prop_assume!(calls > 0);
        let b = build_program(&p, &Rules::default()).unwrap();
        let s = pause_at(&b.a64, pick % calls).unwrap();
        let cp = checkpoint(&s, &b.a64).unwrap();
        let bytes = write_checkpoint(&cp);
        let back = read_checkpoint(&bytes).unwrap();
        prop_assert_eq!(&back, &cp);
        prop_assert_eq!(write_checkpoint(&back), bytes);
    }
}

#[test]
fn corpus_is_deterministic() {
    let s = CorpusSpec::new(7, 20);
    let a: Vec<String> = generate_corpus(&s).iter().map(print_program).collect();
    let b: Vec<String> = generate_corpus(&s).iter().map(print_program).collect();
    assert_eq!(a, b);
}
