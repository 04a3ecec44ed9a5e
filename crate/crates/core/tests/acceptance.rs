//! Acceptance suite: runs every criterion and prints one PASS/FAIL line each.

use std::time::{Duration, Instant};

use unistack::abi::TargetId;
use unistack::codegen::imm::legal_arith_immediate;
use unistack::codegen::{compile_program, MOp, Rules};
use unistack::corpus::{generate_corpus, CorpusSpec, CORPUS_FUEL};
use unistack::emu::reference::interpret;
use unistack::emu::{run, run_traced, stack_stats, Quartiles, Trace, TraceEvent};
use unistack::ir::IrProgram;
use unistack::layout::{align_callsites, apply_jump_over, Image};
use unistack::migrate::{migrate_run, MigrationOutcome, MigrationSchedule};
use unistack::pipeline::{build_program, build_source, Build};
use unistack::stackmap::verify;

const SEED: u64 = 2024;
const CORPUS: usize = 500;
const MIGRATION_PROGRAMS: usize = 200;
const FUEL: u64 = 10 * CORPUS_FUEL;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

struct Corpus {
    programs: Vec<IrProgram>,
    builds: Vec<Build>,
    reference: Vec<(Vec<u64>, u64)>,
    build_time: Duration,
}

fn corpus() -> Corpus {
    let t = Instant::now();
    let programs = generate_corpus(&CorpusSpec::new(SEED, CORPUS));
    let builds = programs.iter().map(|p| build_program(p, &Rules::default()).expect("build")).collect();
    let build_time = t.elapsed();
    let reference = programs
        .iter()
        .map(|p| {
            let r = interpret(p, CORPUS_FUEL).expect("reference run");
            (r.output, r.steps)
        })
        .collect();
    Corpus { programs, builds, reference, build_time }
}

fn layout_equivalence(c: &Corpus) -> Outcome {
    let t = Instant::now();
    let divergent: Vec<usize> =
        c.builds.iter().enumerate().filter(|(_, b)| !verify(&b.x64, &b.a64).equivalent).map(|(i, _)| i).collect();
    let secs = (c.build_time + t.elapsed()).as_secs_f64();
    let callsites: usize = c.builds.iter().map(|b| b.x64.sites.len()).sum();
    outcome(
        divergent.is_empty() && secs < 60.0,
        format!("{} programs, {callsites} callsites, {} divergent, {secs:.1}s", c.programs.len(), divergent.len()),
    )
}

fn rule_necessity(c: &Corpus) -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for flag in Rules::ABLATIONS {
        let rules = Rules::default().without(flag).unwrap();
        let n = c
            .programs
            .iter()
            .take(100)
            .filter(|p| build_program(p, &rules).map(|b| !verify(&b.x64, &b.a64).equivalent).unwrap_or(false))
            .count();
        pass &= n > 0;
        parts.push(format!("{flag} {n}"));
    }
    outcome(pass, format!("divergent per 100 programs: {}", parts.join(", ")))
}

const HOT: &str = "func hot_func(%p: i64) -> i64 {
  %v = load %p
  %w = add %v, 1
  store %w, %p
  ret %w
}
func main() {
  local x: i64
  %z = const 0
  %px = addr-of-local x
  store %z, %px
  %r = call hot_func(%px)
  emit %r
  ret 0
}
";

fn return_address_equality(c: &Corpus) -> Outcome {
    let (mut total, mut equal) = (0usize, 0usize);
    for b in &c.builds {
        for (x, a) in b.x64.sites.iter().zip(&b.a64.sites) {
            total += 1;
            equal += (x.ret_addr == a.ret_addr) as usize;
        }
    }
    let raw = build_source(HOT, &Rules::default().without("callsite-align").unwrap()).unwrap().1;
    let aligned = build_source(HOT, &Rules::default()).unwrap().1;
    let before = (raw.x64.sites[0].ret_addr, raw.a64.sites[0].ret_addr);
    let after = (aligned.x64.sites[0].ret_addr, aligned.a64.sites[0].ret_addr);
    let plan = align_callsites(&[(0, 0x104, 0x107)])[0];
    let golden = before.0 != before.1 && after.0 == after.1 && plan.pad_x64 == 3 && plan.pad_a64 == 0;
    outcome(
        equal == total && golden,
        format!(
            "{equal}/{total} callsites equal; golden {:#x} vs {:#x} unpadded, {:#x} both padded; 0x104/0x107 -> x64 pad {}",
            before.0, before.1, after.0, plan.pad_x64
        ),
    )
}

fn occurrences(b: &Build) -> u64 {
    run_traced(&b.x64, FUEL).unwrap().1.calls().count() as u64
}

fn migration_ok(o: &Result<MigrationOutcome, unistack::migrate::MigrateError>, want: &[u64]) -> (bool, bool) {
    match o {
        Ok(o) => (
            o.output == want && o.missed.is_empty(),
            o.checks.iter().all(|c| c.memory_verbatim && c.involution),
        ),
        Err(_) => (false, false),
    }
}

struct MigrationStats {
    programs: usize,
    runs: usize,
    migrations: usize,
    transparent_failures: usize,
    transform_failures: usize,
    ping_pong: usize,
    ping_pong_failures: usize,
}

fn migration_sweep(c: &Corpus, strip: bool) -> MigrationStats {
    let mut st = MigrationStats {
        programs: 0,
        runs: 0,
        migrations: 0,
        transparent_failures: 0,
        transform_failures: 0,
        ping_pong: 0,
        ping_pong_failures: 0,
    };
    let prepared = |b: &Build| {
        let mut b = b.clone();
        if strip {
            b.x64.strip_stackmaps();
            b.a64.strip_stackmaps();
        }
        b
    };
    for (b, (want, _)) in c.builds.iter().zip(&c.reference).take(MIGRATION_PROGRAMS) {
        let b = prepared(b);
        let n = occurrences(&b);
        st.programs += 1;
        for start in [TargetId::X64, TargetId::A64] {
            let o = migrate_run(&b, start, &MigrationSchedule::every(start, n), FUEL, None);
            let (same, clean) = migration_ok(&o, want);
            st.runs += 1;
            st.migrations += o.as_ref().map(|o| o.migrations).unwrap_or(0);
            st.transparent_failures += !same as usize;
            st.transform_failures += !clean as usize;
        }
    }
    // Ping-pong: ten round trips on the longest-running programs.
    let mut order: Vec<usize> = (0..c.programs.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(c.reference[i].1));
    for &i in order.iter().take(5) {
        let b = prepared(&c.builds[i]);
        let n = occurrences(&b);
        let hops = 20.min(n);
        let mut cur = TargetId::X64;
        let points = (0..hops)
            .map(|h| {
                let p = (h * n / hops, cur, cur.other());
                cur = cur.other();
                p
            })
            .collect();
        let sched = MigrationSchedule::new(points).unwrap();
        let o = migrate_run(&b, TargetId::X64, &sched, FUEL, None);
        let (same, clean) = migration_ok(&o, &c.reference[i].0);
        st.ping_pong += o.as_ref().map(|o| o.migrations).unwrap_or(0);
        st.ping_pong_failures += !(same && clean) as usize;
    }
    st
}

fn migration_line(st: &MigrationStats) -> String {
    format!(
        "{} programs x 2 starts, {} migrations, {} output mismatches; ping-pong {} migrations on 5 longest, {} failures",
        st.programs, st.migrations, st.transparent_failures, st.ping_pong, st.ping_pong_failures
    )
}

fn jump_over_padding(c: &Corpus) -> Outcome {
    let mut pass = true;
    let (mut sites, mut jumps, mut both, mut leads) = (0usize, 0usize, 0usize, 0usize);
    for b in &c.builds {
        for (_, plans) in &b.fixpoint.plans {
            for p in plans {
                sites += 1;
                both += (p.pad_x64 > 0 && p.pad_a64 > 0) as usize;
                leads += (p.lead_x64 > 0) as usize;
            }
        }
        for img in [&b.x64, &b.a64] {
            let t = img.target;
            let expected = b.fixpoint.plans.iter().flat_map(|(_, ps)| ps).filter(|p| p.jumps(t)).count();
            let mut found = 0;
            for f in &img.functions {
                for (k, i) in f.instrs.iter().enumerate() {
                    if let MOp::JumpOver { skip } = i.op {
                        found += 1;
                        // The skipped bytes are NOPs ending exactly at the call.
                        let mut n = 0;
                        let mut j = k + 1;
                        while let MOp::Nop { bytes } = f.instrs[j].op {
                            n += bytes;
                            j += 1;
                        }
                        pass &= n == skip && skip > 0;
                        pass &= matches!(f.instrs[j].op, MOp::Call { .. });
                    }
                }
            }
            pass &= found == expected;
            jumps += found;
        }
    }
    let v = apply_jump_over(TargetId::X64, 17);
    let golden = v[0].op == MOp::JumpOver { skip: 12 }
        && v[0].size == 5
        && v[1..].iter().map(|i| i.size).sum::<u32>() == 12
        && !apply_jump_over(TargetId::X64, 5).iter().any(|i| matches!(i.op, MOp::JumpOver { .. }))
        && !apply_jump_over(TargetId::A64, 4).iter().any(|i| matches!(i.op, MOp::JumpOver { .. }))
        && matches!(apply_jump_over(TargetId::A64, 8)[0].op, MOp::JumpOver { skip: 4 });
    outcome(
        pass && both == 0 && golden,
        format!(
            "{sites} callsites, {jumps} jump-overs, {both} padded on both sides, {leads} with x64 residue moved ahead; 17 -> 5 + 12: {golden}"
        ),
    )
}

fn fixpoint_convergence(c: &Corpus) -> Outcome {
    let rules = Rules { block_align: true, ..Rules::default() };
    let (mut ok, mut means, mut worst) = (0usize, Vec::new(), 0u32);
    for p in &c.programs {
        if let Ok(b) = build_program(p, &rules) {
            if b.fixpoint.converged && verify(&b.x64, &b.a64).equivalent {
                ok += 1;
            }
            means.push(b.fixpoint.mean_iterations());
            worst = worst.max(b.fixpoint.max_iterations());
        }
    }
    let mean = means.iter().sum::<f64>() / means.len().max(1) as f64;
    outcome(
        ok == c.programs.len(),
        format!("{ok}/{} converged with block alignment, mean {mean:.2} iterations, max {worst}", c.programs.len()),
    )
}

fn immediate_predicate() -> Outcome {
    let t = Instant::now();
    let limit = 1u64 << 25;
    let mut legal = vec![false; limit as usize];
    for i in 0..4096u64 {
        legal[i as usize] = true;
        legal[(i * 4096) as usize] = true;
    }
    let bad = (0..limit).filter(|&v| legal_arith_immediate(v) != legal[v as usize]).count();
    let secs = t.elapsed().as_secs_f64();
    outcome(bad == 0 && secs < 5.0, format!("{limit} values, {bad} disagreements, {secs:.2}s"))
}

fn text_bytes(fs: &[unistack::codegen::MachineFunction]) -> u64 {
    fs.iter().flat_map(|f| &f.instrs).map(|i| i.size as u64).sum()
}

fn code_size(c: &Corpus) -> Outcome {
    let mut overheads = Vec::new();
    let mut pad_share = Vec::new();
    for (p, b) in c.programs.iter().zip(&c.builds) {
        for img in [&b.x64, &b.a64] {
            let native = text_bytes(&compile_program(p, img.target, &Rules::native()).unwrap());
            let unified = img.code_bytes();
            let pad: u64 = img
                .functions
                .iter()
                .flat_map(|f| &f.instrs)
                .filter(|i| matches!(i.op, MOp::Nop { .. } | MOp::JumpOver { .. }))
                .map(|i| i.size as u64)
                .sum();
            overheads.push(unified as f64 / native as f64 - 1.0);
            pad_share.push(pad as f64 / unified as f64);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let m = mean(&overheads);
    outcome(
        m <= 0.25,
        format!("mean text overhead {:.1}% over native, padding {:.1}% of unified text", m * 100.0, mean(&pad_share) * 100.0),
    )
}

/// Five-point summary by sorting and interpolating at rank `p * (n - 1)`.
fn five_point(mut v: Vec<u64>) -> Option<[f64; 5]> {
    if v.is_empty() {
        return None;
    }
    v.sort_unstable();
    let n = v.len() - 1;
    let at = |num: usize| {
        // rank num/4 * n, split into whole and quarter parts
        let whole = num * n / 4;
        let quarters = (num * n % 4) as f64 / 4.0;
        let lo = v[whole] as f64;
        let hi = v[(whole + 1).min(n)] as f64;
        lo + quarters * (hi - lo)
    };
    Some([v[0] as f64, at(1), at(2), at(3), v[n] as f64])
}

fn as_array(q: Option<Quartiles>) -> Option<[f64; 5]> {
    q.map(|q| [q.min, q.q1, q.median, q.q3, q.max])
}

/// Frame stack rebuilt from call and return events and each function's layout.
fn oracle_stats(img: &Image, t: &Trace) -> (Option<[f64; 5]>, Option<[f64; 5]>) {
    let size_of = |name: &str| {
        let f = &img.functions[img.function_index(name).unwrap() as usize];
        f.frame.as_ref().unwrap().size as u64
    };
    let entry = img.functions.iter().find(|f| img.symbol(&f.name).unwrap().addr == img.entry).unwrap();
    let mut stack = vec![size_of(&entry.name)];
    let (mut counts, mut sizes) = (Vec::new(), Vec::new());
    for e in &t.events {
        match e {
            TraceEvent::Call(c) => {
                counts.push(stack.len() as u64);
                sizes.extend(stack.iter().copied());
                let site = img.site_by_id(c.site).unwrap();
                let f = &img.functions[site.function as usize];
                let callee = f.instrs.iter().find_map(|i| match &i.op {
                    MOp::Call { callee, site: s, .. } if *s == site.site => Some(callee.clone()),
                    _ => None,
                });
                stack.push(size_of(&callee.unwrap()));
            }
            TraceEvent::Return { .. } => {
                stack.pop();
            }
        }
    }
    (five_point(counts), five_point(sizes))
}

fn stats_oracle(c: &Corpus) -> Outcome {
    let (mut agree, mut cross) = (0usize, 0usize);
    let n = 50;
    for b in c.builds.iter().take(n) {
        let mut summaries = Vec::new();
        let mut ok = true;
        for img in [&b.x64, &b.a64] {
            let (_, t) = run_traced(img, FUEL).unwrap();
            let st = stack_stats(&t);
            let (oc, os) = oracle_stats(img, &t);
            ok &= as_array(st.frame_count) == oc && as_array(st.frame_size) == os;
            summaries.push((as_array(st.frame_count), as_array(st.frame_size)));
        }
        agree += ok as usize;
        cross += (summaries[0] == summaries[1]) as usize;
    }
    outcome(agree == n && cross == n, format!("{agree}/{n} match the oracle, {cross}/{n} identical across targets"))
}

fn emulator_equivalence(c: &Corpus) -> Outcome {
    let mut bad = 0;
    for (b, (want, _)) in c.builds.iter().zip(&c.reference) {
        for img in [&b.x64, &b.a64] {
            if run(img, FUEL).map(|s| &s.output != want).unwrap_or(true) {
                bad += 1;
            }
        }
    }
    outcome(bad == 0, format!("{} programs x 2 targets, {bad} mismatches", c.programs.len()))
}

fn main() {
    let c = corpus();
    let (plain, stripped) = std::thread::scope(|s| {
        let a = s.spawn(|| migration_sweep(&c, false));
        let b = s.spawn(|| migration_sweep(&c, true));
        (a.join().unwrap(), b.join().unwrap())
    });
    let results = [
        ("layout equivalence", layout_equivalence(&c)),
        ("rule necessity", rule_necessity(&c)),
        ("return-address equality", return_address_equality(&c)),
        (
            "migration transparency",
            outcome(
                plain.transparent_failures == 0 && plain.ping_pong_failures == 0 && plain.programs >= 200,
                migration_line(&plain),
            ),
        ),
        (
            "zero transformation",
            outcome(
                plain.transform_failures == 0,
                format!("{} runs, {} with a non-verbatim or non-involutive rewrite", plain.runs, plain.transform_failures),
            ),
        ),
        (
            "no-metadata migration",
            outcome(
                stripped.transparent_failures == 0 && stripped.transform_failures == 0 && stripped.ping_pong_failures == 0,
                format!("stack maps stripped: {}", migration_line(&stripped)),
            ),
        ),
        ("jump-over padding", jump_over_padding(&c)),
        ("fixpoint convergence", fixpoint_convergence(&c)),
        ("immediate predicate", immediate_predicate()),
        ("code-size accounting", code_size(&c)),
        ("stats oracle", stats_oracle(&c)),
        ("emulator equivalence", emulator_equivalence(&c)),
    ];
    let mut failed = 0;
    for (i, (name, o)) in results.iter().enumerate() {
        println!("criterion {:>2} {:<24} {}  {}", i + 1, name, if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += !o.pass as usize;
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
