use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use unistack::abi::{register_table, TargetId};
use unistack::codegen::print::listing;
use unistack::codegen::{compile_program, Rules};
use unistack::corpus::{generate_corpus, CorpusSpec, CoverageCounter, CORPUS_FUEL};
use unistack::emu::{run, run_traced, stack_stats, Quartiles};
use unistack::ir::{parse_program, print_program, validate, IrProgram};
use unistack::layout::{read_image, write_image, Image};
use unistack::migrate::{migrate_run, MigrationSchedule};
use unistack::pipeline::{build_program, Build};
use unistack::stackmap::verify;

#[derive(Parser)]
#[command(name = "unistack", version, about = "Two-target compiler with a unified stack layout")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct Global {
    /// Corpus seed.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Step limit for emulation.
    #[arg(long, global = true, default_value_t = CORPUS_FUEL)]
    fuel: u64,
    /// Align loop headers to 16 bytes (enables the padding fixpoint).
    #[arg(long, global = true)]
    block_align: bool,
    #[arg(long, global = true)]
    no_remat: bool,
    #[arg(long, global = true)]
    no_callsite_align: bool,
    #[arg(long, global = true)]
    no_imm_unify: bool,
    #[arg(long, global = true)]
    no_addr_restrict: bool,
    #[arg(long, global = true)]
    no_two_addr: bool,
    #[arg(long, global = true)]
    no_zero_rule: bool,
}

impl Global {
    fn rules(&self) -> Rules {
        Rules {
            remat: !self.no_remat,
            callsite_align: !self.no_callsite_align,
            imm_unify: !self.no_imm_unify,
            addr_restrict: !self.no_addr_restrict,
            two_addr: !self.no_two_addr,
            zero_rule: !self.no_zero_rule,
            block_align: self.block_align,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetArg {
    X64,
    A64,
    Both,
}

impl TargetArg {
    fn targets(self) -> Vec<TargetId> {
        match self {
            TargetArg::X64 => vec![TargetId::X64],
            TargetArg::A64 => vec![TargetId::A64],
            TargetArg::Both => vec![TargetId::X64, TargetId::A64],
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Emit {
    /// Role-named machine IR.
    Mir,
    /// Target register names.
    Asm,
}

#[derive(Subcommand)]
enum Command {
    /// Lower an IR file and print the machine code.
    Compile {
        input: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        target: TargetArg,
        #[arg(long, value_enum, default_value = "asm")]
        emit: Emit,
    },
    /// Compile, link and verify; writes PREFIX.x64.img and PREFIX.a64.img.
    Link {
        input: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Compare the stack maps of two images.
    Verify {
        first: PathBuf,
        second: PathBuf,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Execute an image and print its output, one value per line.
    Run {
        image: PathBuf,
        /// Write the call trace as JSON.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run an image pair, migrating at scheduled callsite occurrences.
    Migrate {
        /// Image to start on; its partner is found by swapping the target in
        /// the file name unless --other is given.
        image: PathBuf,
        #[arg(long)]
        other: Option<PathBuf>,
        /// e.g. "cs@3:x64>a64,cs@9:a64>x64"
        #[arg(long)]
        schedule: String,
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
    },
    /// Frame count and frame size summaries at callsites.
    Stats {
        image: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Print an image's code with addresses.
    Disasm { image: PathBuf },
    /// Print the register role table.
    AbiDump,
    /// Generate random programs; prints rule coverage.
    Corpus {
        #[arg(long, default_value_t = 100)]
        count: usize,
        /// Directory for the generated .ir files.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Build and verify every program.
        #[arg(long)]
        check: bool,
    },
}

/// Failure with its exit status.
struct Fail(u8, String);

impl Fail {
    fn internal(e: impl std::fmt::Display) -> Fail {
        Fail(3, e.to_string())
    }
}

fn read_ir(path: &Path) -> Result<IrProgram, Fail> {
    let text = std::fs::read_to_string(path).map_err(|e| Fail(2, format!("{}: {e}", path.display())))?;
    let p = parse_program(&text).map_err(|e| Fail(2, format!("{}: {e}", path.display())))?;
    let diags = validate(&p);
    if !diags.is_empty() {
        let msg: Vec<String> = diags.iter().map(|d| d.to_string()).collect();
        return Err(Fail(2, format!("{}: {}", path.display(), msg.join("; "))));
    }
    Ok(p)
}

fn load(path: &Path) -> Result<Image, Fail> {
    let bytes = std::fs::read(path).map_err(|e| Fail(2, format!("{}: {e}", path.display())))?;
    read_image(&bytes).map_err(|e| Fail(2, format!("{}: {e}", path.display())))
}

fn save(path: &Path, bytes: &[u8]) -> Result<(), Fail> {
    std::fs::write(path, bytes).map_err(|e| Fail(3, format!("{}: {e}", path.display())))
}

fn build(p: &IrProgram, rules: &Rules) -> Result<Build, Fail> {
    build_program(p, rules).map_err(|e| Fail::internal(format!("build: {e}")))
}

fn summary_row(name: &str, q: Option<Quartiles>) -> String {
    match q {
        Some(q) => format!(
            "{name:<11}{:>10.1}{:>10.1}{:>10.1}{:>10.1}{:>10.1}",
            q.min, q.q1, q.median, q.q3, q.max
        ),
        None => format!("{name:<11}{:>10}", "-"),
    }
}

fn partner(path: &Path, target: TargetId) -> PathBuf {
    let s = path.to_string_lossy();
    let (from, to) = (format!(".{}.", target.name()), format!(".{}.", target.other().name()));
    PathBuf::from(s.replacen(&from, &to, 1))
}

fn execute(cli: Cli) -> Result<u8, Fail> {
    let g = &cli.global;
    let rules = g.rules();
    match cli.cmd {
        Command::Compile { input, target, emit } => {
            let p = read_ir(&input)?;
            for t in target.targets() {
                let fs = compile_program(&p, t, &rules).map_err(|e| Fail::internal(format!("codegen: {e}")))?;
                println!("; {t}");
                for f in &fs {
                    match emit {
                        Emit::Asm => print!("{}", listing(f, 0)),
                        Emit::Mir => {
                            println!("{}:", f.name);
                            for i in &f.instrs {
                                println!("  {:?}", i.op);
                            }
                        }
                    }
                }
            }
            Ok(0)
        }
        Command::Link { input, out } => {
            let p = read_ir(&input)?;
            let b = build(&p, &rules)?;
            for img in [&b.x64, &b.a64] {
                let path = PathBuf::from(format!("{}.{}.img", out.display(), img.target));
                save(&path, &write_image(img))?;
                println!("wrote {}", path.display());
            }
            let r = verify(&b.x64, &b.a64);
            println!(
                "{} callsites, {} functions, fixpoint mean {:.2} iterations",
                r.callsites,
                b.x64.symbols.len(),
                b.fixpoint.mean_iterations()
            );
            for m in &r.mismatches {
                println!("divergent: callsite {} in {}: {}", m.id, m.function, m.what);
            }
            Ok(if r.equivalent { 0 } else { 1 })
        }
        Command::Verify { first, second, json } => {
            let (a, b) = (load(&first)?, load(&second)?);
            let r = verify(&a, &b);
            if json {
                println!("{}", serde_json::to_string_pretty(&r).map_err(Fail::internal)?);
            } else {
                for m in &r.mismatches {
                    println!("callsite {} in {}: {}", m.id, m.function, m.what);
                }
                println!("{} ({} callsites)", if r.equivalent { "equivalent" } else { "divergent" }, r.callsites);
            }
            Ok(if r.equivalent { 0 } else { 1 })
        }
        Command::Run { image, trace } => {
            let img = load(&image)?;
            let s = match &trace {
                Some(path) => {
                    let (s, t) = run_traced(&img, g.fuel).map_err(Fail::internal)?;
                    save(path, &serde_json::to_vec_pretty(&t).map_err(Fail::internal)?)?;
                    s
                }
                None => run(&img, g.fuel).map_err(Fail::internal)?,
            };
            for v in &s.output {
                println!("{v}");
            }
            Ok(0)
        }
        Command::Migrate { image, other, schedule, checkpoint_dir } => {
            let first = load(&image)?;
            let second = load(&other.unwrap_or_else(|| partner(&image, first.target)))?;
            if second.target == first.target || second.program_hash != first.program_hash {
                return Err(Fail(2, "images are not a pair from one link".into()));
            }
            let start = first.target;
            let (x64, a64) = if start == TargetId::X64 { (first, second) } else { (second, first) };
            let b = Build { x64, a64, fixpoint: Default::default() };
            let sched = MigrationSchedule::parse(&schedule).map_err(|e| Fail(2, e.to_string()))?;
            if let Some(d) = &checkpoint_dir {
                std::fs::create_dir_all(d).map_err(Fail::internal)?;
            }
            let out = migrate_run(&b, start, &sched, g.fuel, checkpoint_dir.as_deref()).map_err(Fail::internal)?;
            for v in &out.output {
                println!("{v}");
            }
            for c in &out.checks {
                eprintln!(
                    "migrated at occurrence {} (callsite {}): {} register bytes rewritten, memory verbatim: {}",
                    c.occurrence, c.site, c.rewrite_bytes, c.memory_verbatim
                );
            }
            for k in &out.missed {
                eprintln!("occurrence {k} never reached");
            }
            Ok(0)
        }
        Command::Stats { image, json } => {
            let img = load(&image)?;
            let (_, t) = run_traced(&img, g.fuel).map_err(Fail::internal)?;
            let st = stack_stats(&t);
            if json {
                println!("{}", serde_json::to_string_pretty(&st).map_err(Fail::internal)?);
            } else {
                println!("{} callsite occurrences, max depth {}", st.callsite_occurrences, st.max_depth);
                println!("{:<11}{:>10}{:>10}{:>10}{:>10}{:>10}", "", "min", "q1", "median", "q3", "max");
                println!("{}", summary_row("frames", st.frame_count));
                println!("{}", summary_row("frame size", st.frame_size));
            }
            Ok(0)
        }
        Command::Disasm { image } => {
            let img = load(&image)?;
            println!("; {} image, program {}", img.target, &img.program_hash[..16]);
            for (f, s) in img.functions.iter().zip(&img.symbols) {
                print!("{}", listing(f, s.addr));
            }
            Ok(0)
        }
        Command::AbiDump => {
            println!("{:<8}{:<8}{:<8}{:<8}", "role", "x64", "a64", "saved");
            for row in register_table() {
                println!(
                    "{:<8}{:<8}{:<8}{:<8}",
                    row.role,
                    row.x64.as_deref().unwrap_or("-"),
                    row.a64.as_deref().unwrap_or("-"),
                    format!("{:?}", row.saved_by).to_lowercase()
                );
            }
            Ok(0)
        }
        Command::Corpus { count, out, check } => {
            let corpus = generate_corpus(&CorpusSpec::new(g.seed, count));
            if let Some(d) = &out {
                std::fs::create_dir_all(d).map_err(Fail::internal)?;
                for (i, p) in corpus.iter().enumerate() {
                    save(&d.join(format!("prog{i:04}.ir")), print_program(p).as_bytes())?;
                }
            }
            let mut cov = CoverageCounter::default();
            let mut divergent = 0;
            for p in &corpus {
                cov.add(p);
                if check {
                    let b = build(p, &rules)?;
                    if !verify(&b.x64, &b.a64).equivalent {
                        divergent += 1;
                    }
                }
            }
            for (cat, n) in &cov.hits {
                println!("{:<16}{n}", cat.flag());
            }
            if check {
                println!("{divergent} of {count} programs divergent");
            }
            Ok(if divergent > 0 { 1 } else { 0 })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => ExitCode::from(code),
        Err(Fail(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
