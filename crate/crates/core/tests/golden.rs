use unistack::abi::{Role, TargetId};
use unistack::codegen::{MOp, Rules};
use unistack::emu::machine::{pending_call, Step};
use unistack::emu::reference::{interpret, pause_at_call};
use unistack::emu::{load_image, run, run_with, step, Control, RunEnd};
use unistack::layout::{
    align_callsites, apply_jump_over, assign_symbols, read_image, write_image, PaddingPlan, CODE_BASE, STACK_BASE,
};
use unistack::migrate::{
    checkpoint, migrate_run, read_checkpoint, restore, rewrite_checkpoint, write_checkpoint, MigrateError,
    MigrationSchedule,
};
use unistack::pipeline::{build_source, Build};
use unistack::stackmap::{verify, verify_records, LiveEntry, Location, StackMapRecord, StackMapSection};

const HOT: &str = r#"
func hot_func(%p: i64) -> i64 {
  %v = load %p
  %w = add %v, 1
  store %w, %p
  %r = mul %w, %w
  ret %r
}
func main() {
  local x: i64
  local sum: i64
  local i: i64
  %z = const 0
  %px = addr-of-local x
  %ps = addr-of-local sum
  %pi = addr-of-local i
  store %z, %px
  store %z, %ps
  store %z, %pi
  br head
head:
  %iv = load %pi
  %c = cmp lt %iv, 3
  br-cond %c, body, done
body:
  %r = call hot_func(%px)
  %s = load %ps
  %t = add %s, %r
  store %t, %ps
  %i2 = load %pi
  %n = add %i2, 1
  store %n, %pi
  br head
done:
  %out = load %ps
  emit %out
  ret 0
}
"#;

fn hot(rules: &Rules) -> Build {
    build_source(HOT, rules).unwrap().1
}

fn main_record(b: &Build, t: TargetId) -> StackMapRecord {
    let img = b.image(t);
    let f = img.function_index("main").unwrap();
    let site = img.sites.iter().find(|s| s.function == f).unwrap();
    img.stackmaps.as_ref().unwrap().record(site.id).unwrap().clone()
}

#[test]
fn hot_loop_has_unified_layout() {
    let b = hot(&Rules::default());
    let r = verify(&b.x64, &b.a64);
    assert!(r.equivalent, "{:?}", r.mismatches);
    for t in [TargetId::X64, TargetId::A64] {
        let rec = main_record(&b, t);
        let loc = |n: &str| rec.entries.iter().find(|e| e.name == n).map(|e| e.location);
        assert!(matches!(loc("x"), Some(Location::StackSlot(_))));
        assert!(matches!(loc("sum"), Some(Location::StackSlot(_))));
        assert_eq!(loc("%px"), Some(Location::Recomputed), "{t}");
        let img = b.image(t);
        let main = &img.functions[img.function_index("main").unwrap() as usize];
        assert!(main.saved.is_empty(), "{t} saves {:?}", main.saved);
    }
}

#[test]
fn hot_loop_without_remat_diverges_on_address() {
    let b = hot(&Rules::default().without("remat").unwrap());
    let r = verify(&b.x64, &b.a64);
    assert!(!r.equivalent);
    assert!(r.mismatches.iter().any(|m| m.value.as_ref().is_some_and(|v| v.0 == "%px")), "{:?}", r.mismatches);
}

#[test]
fn hot_loop_output_matches_reference() {
    let (prog, b) = build_source(HOT, &Rules::default()).unwrap();
    let want = interpret(&prog, 10_000).unwrap().output;
    // x goes 1, 2, 3: 1 + 4 + 9
    assert_eq!(want, vec![14]);
    for img in [&b.x64, &b.a64] {
        assert_eq!(run(img, 10_000).unwrap().output, want);
    }
}

#[test]
fn loader_state() {
    let b = hot(&Rules::default());
    for img in [&b.x64, &b.a64] {
        assert_eq!(img.symbol("main").unwrap().addr, CODE_BASE);
        let s = load_image(img);
        assert_eq!(s.pc, 0x1000);
        assert!(s.output.is_empty());
    }
    assert_eq!(load_image(&b.a64).sp(), STACK_BASE);
    // X64 starts with the loader's return address pushed.
    assert_eq!(load_image(&b.x64).sp(), STACK_BASE - 8);
}

#[test]
fn global_initializer_is_loaded() {
    let src = "global g: i64 = 7\nfunc main() {\n  ret 0\n}\n";
    let (_, b) = build_source(src, &Rules::default()).unwrap();
    for img in [&b.x64, &b.a64] {
        let s = load_image(img);
        assert_eq!(s.read_u64(img.globals[0].addr), Some(7));
    }
}

#[test]
fn return_addresses_diverge_then_agree() {
    let raw = hot(&Rules::default().without("callsite-align").unwrap());
    let differs = raw.x64.sites.iter().zip(&raw.a64.sites).any(|(x, a)| x.ret_addr != a.ret_addr);
    assert!(differs, "unaligned build should disagree somewhere");
    let b = hot(&Rules::default());
    for (x, a) in b.x64.sites.iter().zip(&b.a64.sites) {
        assert_eq!(x.ret_addr, a.ret_addr);
        assert_eq!(x.call_addr + 5, a.call_addr + 4);
    }
}

#[test]
fn three_byte_gap_pads_x64() {
    let plans = align_callsites(&[(0, 0x104, 0x107)]);
    assert_eq!(plans, vec![PaddingPlan { site: 0, pad_x64: 3, pad_a64: 0, lead_x64: 0 }]);
    assert_eq!(0x104 + plans[0].pad_x64 as u64, 0x107);
}

#[test]
fn call_pushes_or_links_the_same_address() {
    let b = hot(&Rules::default());
    let mut seen = Vec::new();
    for img in [&b.x64, &b.a64] {
        let mut s = load_image(img);
        let end = run_with(&mut s, img, 10_000, None, |_, _| Control::Pause).unwrap();
        assert!(matches!(end, RunEnd::Paused(_)));
        let site = *pending_call(&s, img).unwrap();
        assert_eq!(step(&mut s, img).unwrap(), Step::Called);
        let ra = match img.target {
            TargetId::X64 => s.read_u64(s.sp()).unwrap(),
            TargetId::A64 => s.get(Role::Lr),
        };
        assert_eq!(ra, site.ret_addr);
        assert_eq!(s.pc, img.symbol("hot_func").unwrap().addr);
        seen.push(ra);
    }
    assert_eq!(seen[0], seen[1]);
}

#[test]
fn seventeen_byte_pad_is_jump_and_twelve_nops() {
    let v = apply_jump_over(TargetId::X64, 17);
    assert_eq!(v[0].op, MOp::JumpOver { skip: 12 });
    assert_eq!(v[0].size, 5);
    assert_eq!(v[1..].iter().map(|i| i.size).sum::<u32>(), 12);
    let v = apply_jump_over(TargetId::X64, 5);
    assert!(v.iter().all(|i| matches!(i.op, MOp::Nop { .. })));
    let v = apply_jump_over(TargetId::A64, 8);
    assert_eq!(v[0].op, MOp::JumpOver { skip: 4 });
    assert_eq!(v.len(), 2);
}

#[test]
fn symbol_placement_examples() {
    assert_eq!(assign_symbols(&[(12, 8)]).unwrap(), vec![0x1000]);
    assert_eq!(assign_symbols(&[(40, 96), (10, 10)]).unwrap(), vec![0x1000, 0x1000 + 128]);
    assert_eq!(assign_symbols(&[(64, 64), (1, 1)]).unwrap(), vec![0x1000, 0x1040]);
    assert!(assign_symbols(&[(0x10_0000, 4)]).is_err());
}

#[test]
fn empty_program_links_one_symbol() {
    let (_, b) = build_source("func main() {\n  ret 0\n}\n", &Rules::default()).unwrap();
    assert_eq!(b.x64.symbols.len(), 1);
    assert_eq!(b.a64.symbols.len(), 1);
    assert_eq!(b.x64.symbols[0].addr, b.a64.symbols[0].addr);
    for img in [&b.x64, &b.a64] {
        assert!(run(img, 100).unwrap().output.is_empty());
    }
}

#[test]
fn many_live_values_spill_to_the_same_slots() {
    let mut src = String::from("func id(%a: i64) -> i64 {\n  ret %a\n}\nfunc main() {\n");
    for i in 0..20 {
        src += &format!("  %v{i} = call id({})\n", 1000 + i);
    }
    src += "  %k = call id(0)\n  %s0 = add %k, %v0\n";
    for i in 1..20 {
        src += &format!("  %s{i} = add %s{}, %v{i}\n", i - 1);
    }
    src += "  emit %s19\n  ret 0\n}\n";
    let (prog, b) = build_source(&src, &Rules::default()).unwrap();
    let r = verify(&b.x64, &b.a64);
    assert!(r.equivalent, "{:?}", r.mismatches);
    let last = b.x64.stackmaps.as_ref().unwrap().records.last().unwrap().clone();
    let slots = last.entries.iter().filter(|e| matches!(e.location, Location::StackSlot(_))).count();
    assert!(slots >= 15, "{last:?}");
    let want = interpret(&prog, 10_000).unwrap().output;
    assert_eq!(want, vec![(1000..1020).sum::<u64>()]);
    for img in [&b.x64, &b.a64] {
        assert_eq!(run(img, 10_000).unwrap().output, want);
    }
}

#[test]
fn verify_reports_slot_mismatch() {
    let rec = |off| StackMapSection {
        records: vec![StackMapRecord {
            id: 0,
            function: "f".into(),
            ret_addr: 0x1107,
            frame_size: 32,
            entries: vec![LiveEntry { name: "%a".into(), location: Location::StackSlot(off) }],
        }],
    };
    assert!(verify_records(&rec(-24), &rec(-24)).is_empty());
    let mm = verify_records(&rec(-24), &rec(-16));
    assert_eq!(mm.len(), 1);
    assert_eq!(
        mm[0].value,
        Some(("%a".to_string(), Some(Location::StackSlot(-24)), Some(Location::StackSlot(-16))))
    );
    let empty = StackMapSection { records: vec![StackMapRecord { entries: vec![], ..rec(0).records[0].clone() }] };
    assert!(verify_records(&empty, &empty).is_empty());
}

/// Pauses `img` before the `k`-th executed call.
fn pause(img: &unistack::layout::Image, k: u64) -> unistack::emu::MachineState {
    let mut s = load_image(img);
    let mut n = 0;
    let end = run_with(&mut s, img, 100_000, None, |_, _| {
        n += 1;
        if n > k {
            Control::Pause
        } else {
            Control::Continue
        }
    })
    .unwrap();
    assert!(matches!(end, RunEnd::Paused(_)));
    s
}

#[test]
fn checkpoint_matches_reference_pause() {
    let (prog, b) = build_source(HOT, &Rules::default()).unwrap();
    let paused = pause_at_call(&prog, 1, 10_000).unwrap().unwrap();
    let sum = paused.locals.iter().find(|(n, _)| n == "sum").unwrap().1;
    assert_eq!(sum, 1);
    for img in [&b.x64, &b.a64] {
        let cp = checkpoint(&pause(img, 1), img).unwrap();
        let rec = img.stackmaps.as_ref().unwrap().record(cp.site).unwrap();
        let Some(Location::StackSlot(off)) = rec.entries.iter().find(|e| e.name == "sum").map(|e| e.location) else {
            panic!("sum not in a slot");
        };
        let base = cp.reg(Role::Fp).unwrap() + 8;
        let at = (base as i64 + off) as u64 - cp.sp;
        let v = u64::from_le_bytes(cp.stack[at as usize..at as usize + 8].try_into().unwrap());
        assert_eq!(v, sum);
    }
}

#[test]
fn checkpoint_outside_callsite_fails() {
    let b = hot(&Rules::default());
    let s = load_image(&b.x64);
    assert!(matches!(checkpoint(&s, &b.x64), Err(MigrateError::NotAtCallsite(0x1000))));
}

#[test]
fn callee_saved_value_keeps_its_role() {
    let b = hot(&Rules::default());
    let mut s = pause(&b.x64, 0);
    s.set(Role::Cs0, 17);
    let cp = checkpoint(&s, &b.x64).unwrap();
    assert!(cp.named_regs().contains(&("rbx".to_string(), 17)));
    let out = rewrite_checkpoint(&cp, TargetId::A64).unwrap();
    assert!(out.named_regs().contains(&("r19".to_string(), 17)));
    assert_eq!(out.stack, cp.stack);
    assert_eq!(out.globals, cp.globals);
    assert_eq!(Some(out.reg(Role::Lr).unwrap()), cp.stacked_return_address());
}

#[test]
fn link_register_matches_native_run() {
    let b = hot(&Rules::default());
    let from_x = rewrite_checkpoint(&checkpoint(&pause(&b.x64, 2), &b.x64).unwrap(), TargetId::A64).unwrap();
    let native = checkpoint(&pause(&b.a64, 2), &b.a64).unwrap();
    assert_eq!(from_x.reg(Role::Lr), native.reg(Role::Lr));
    assert_eq!(from_x.pc, native.pc);
    assert_eq!(from_x.stack, native.stack);
}

#[test]
fn restore_rejects_other_program() {
    let b = hot(&Rules::default());
    let (_, other) = build_source("func main() {\n  ret 0\n}\n", &Rules::default()).unwrap();
    let cp = rewrite_checkpoint(&checkpoint(&pause(&b.x64, 0), &b.x64).unwrap(), TargetId::A64).unwrap();
    assert!(matches!(restore(&other.a64, &cp), Err(MigrateError::HashMismatch)));
    assert!(matches!(restore(&b.x64, &cp), Err(MigrateError::TargetMismatch { .. })));
}

#[test]
fn restore_then_checkpoint_is_fixed_point() {
    let b = hot(&Rules::default());
    for img in [&b.x64, &b.a64] {
        let cp = checkpoint(&pause(img, 1), img).unwrap();
        let again = checkpoint(&restore(img, &cp).unwrap(), img).unwrap();
        assert_eq!(cp, again);
        let mut s = restore(img, &cp).unwrap();
        run_with(&mut s, img, 10_000, None, |_, _| Control::Continue).unwrap();
        assert_eq!(s.output, vec![14]);
    }
}

#[test]
fn checkpoint_file_is_bit_exact() {
    let b = hot(&Rules::default());
    let cp = checkpoint(&pause(&b.a64, 1), &b.a64).unwrap();
    let bytes = write_checkpoint(&cp);
    let back = read_checkpoint(&bytes).unwrap();
    assert_eq!(back, cp);
    assert_eq!(write_checkpoint(&back), bytes);
    assert!(read_checkpoint(&bytes[..bytes.len() - 3]).is_err());
}

#[test]
fn image_file_round_trips() {
    let b = hot(&Rules::default());
    let bytes = write_image(&b.x64);
    let back = read_image(&bytes).unwrap();
    assert_eq!(write_image(&back), bytes);
    assert_eq!(run(&back, 10_000).unwrap().output, vec![14]);
    assert!(read_image(&bytes[..20]).is_err());
}

#[test]
fn single_migration_at_first_call() {
    let b = hot(&Rules::default());
    let sched = MigrationSchedule::parse("cs@0:x64>a64").unwrap();
    let out = migrate_run(&b, TargetId::X64, &sched, 100_000, None).unwrap();
    assert_eq!(out.output, vec![14]);
    assert_eq!(out.migrations, 1);
    assert_eq!(out.final_target, TargetId::A64);
    let none = migrate_run(&b, TargetId::A64, &MigrationSchedule::default(), 100_000, None).unwrap();
    assert_eq!(none.output, vec![14]);
    let late = MigrationSchedule::parse("cs@0:a64>x64,cs@99:x64>a64").unwrap();
    let out = migrate_run(&b, TargetId::A64, &late, 100_000, None).unwrap();
    assert_eq!(out.missed, vec![99]);
    assert!(MigrationSchedule::parse("cs@3:x64>a64,cs@1:a64>x64").is_err());
}

#[test]
fn migration_through_checkpoint_files() {
    let b = hot(&Rules::default());
    let dir = tempfile::tempdir().unwrap();
    let out =
        migrate_run(&b, TargetId::X64, &MigrationSchedule::every(TargetId::X64, 3), 100_000, Some(dir.path())).unwrap();
    assert_eq!(out.output, vec![14]);
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 3);
}
