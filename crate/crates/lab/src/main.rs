use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use ptauth_core::instrument::{instrument, site_summary, verdict_equivalence_audit, InstrumentOptions};
use ptauth_core::ir::{interpret, parse_program, ExecMode, Verdict};
use ptauth_core::{AcFunction, PacMode};
use ptauth_lab::bench::{run_bench, suite};
use ptauth_lab::corpus::{gen_corpus, run_corpus, Category, CorpusCase};
use ptauth_lab::report::{text_table, write_all, write_summary};
use ptauth_lab::robustness::run_robustness;
use ptauth_lab::LabConfig;

#[derive(Parser)]
#[command(name = "ptauth-lab", version, about = "Pointer-authentication temporal safety lab")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Pac {
    V83,
    V86,
}

#[derive(Clone, Copy, ValueEnum)]
enum Ac {
    Xorfold,
    Mixer,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Raw,
    Checked,
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the temporal-bug corpus and run it checked.
    Corpus {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Cases per category: use-after-free, double free, invalid free.
        #[arg(long, default_value = "50,50,50", value_parser = parse_counts)]
        counts: [usize; 3],
        /// Restrict to one PAC mode (default: both).
        #[arg(long)]
        pac: Option<Pac>,
        /// Restrict to one AC function (default: both).
        #[arg(long)]
        ac: Option<Ac>,
        #[arg(long, value_enum, default_value = "on")]
        optimize: OnOff,
        /// Write the cases and per-config summaries here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one IR program.
    Run {
        file: PathBuf,
        #[arg(long, value_enum, default_value = "checked")]
        mode: Mode,
        #[arg(long, value_enum, default_value = "on")]
        optimize: OnOff,
        #[arg(long, value_enum, default_value = "v83")]
        pac: Pac,
        #[arg(long, value_enum, default_value = "xorfold")]
        ac: Ac,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Print the instrumented program before running it.
        #[arg(long)]
        emit_instrumented: bool,
        /// Print every candidate check site and whether it was elided.
        #[arg(long)]
        check_sites: bool,
        /// Write the alloc/free trace as JSON.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Print the full run report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Run the benchmark suite and write bench.csv and bench.json.
    Bench {
        #[arg(long, default_value = "default")]
        suite: String,
        #[arg(long, default_value_t = 10)]
        reps: usize,
        #[arg(long, default_value = "bench-out")]
        out: PathBuf,
    },
    /// Compare optimized and unoptimized instrumentation on one program.
    Audit {
        file: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Header-overwrite and ID-spray cases plus data-only clean cases.
    Robustness {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Attack cases; the same number of clean cases is added.
        #[arg(long, default_value_t = 30)]
        cases: usize,
    },
    /// Corpus, robustness and audit gates together.
    Gates {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Random programs audited in addition to the corpus.
        #[arg(long, default_value_t = 1000)]
        random: u64,
    },
}

fn parse_counts(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> =
        s.split(',').map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}"))).collect::<Result<_, _>>()?;
    let counts: [usize; 3] = parts.try_into().map_err(|_| "expected three counts, e.g. 50,50,50".to_string())?;
    if counts.contains(&0) {
        return Err("every category needs at least one case".into());
    }
    Ok(counts)
}

fn pac_mode(p: Pac) -> PacMode {
    match p {
        Pac::V83 => PacMode::V83Poison,
        Pac::V86 => PacMode::V86Fault,
    }
}

fn ac_function(a: Ac) -> AcFunction {
    match a {
        Ac::Xorfold => AcFunction::XorFold,
        Ac::Mixer => AcFunction::KeyedMixer,
    }
}

fn describe(v: &Verdict) -> String {
    match v {
        Verdict::Clean => "clean".into(),
        Verdict::Violation { kind, function, index, step } => {
            format!("violation {kind:?} at {function}:{index} after {step} steps")
        }
        Verdict::Fault { kind, function, index, step } => {
            format!("fault {kind:?} at {function}:{index} after {step} steps")
        }
        Verdict::Timeout => "timeout".into(),
    }
}

fn read_program(path: &Path) -> Result<ptauth_core::ir::Program> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_program(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
}

fn corpus_configs(seed: u64, pac: Option<Pac>, ac: Option<Ac>, optimize: bool) -> Vec<LabConfig> {
    LabConfig::all_variants(seed, optimize)
        .into_iter()
        .filter(|c| pac.is_none_or(|p| pac_mode(p) == c.pac_mode))
        .filter(|c| ac.is_none_or(|a| ac_function(a) == c.ac_function))
        .collect()
}

/// Runs the corpus under each config and prints one line per category.
/// Returns the ids of diverging cases.
fn corpus_gate(cases: &[CorpusCase], configs: &[LabConfig], out: Option<&Path>) -> Result<Vec<String>> {
    let mut failed = Vec::new();
    for cfg in configs {
        let summary = run_corpus(cases, cfg);
        for cat in Category::ALL {
            let s = &summary.per_category[&cat];
            println!(
                "{:<22} CWE-{} {:<3} detected {}/{} ({:.1}%)  false positives {}/{}",
                cfg.label(),
                cat.cwe(),
                cat.short(),
                s.detected,
                s.vulnerable,
                100.0 * s.detection_rate(),
                s.false_positives,
                s.patched
            );
        }
        if summary.free_backward_steps != 0 {
            println!("{}: frees walked back {} steps", cfg.label(), summary.free_backward_steps);
            failed.push(format!("{}: free backward steps", cfg.label()));
        }
        for m in &summary.mismatches {
            println!("MISMATCH {} [{}]: expected {:?}, got {}", m.id, cfg.label(), m.expected, describe(&m.verdict));
            failed.push(m.id.clone());
        }
        if let Some(dir) = out {
            let name = format!("summary-{}.json", cfg.label().replace('/', "-"));
            write_summary(&summary, &dir.join(name))?;
        }
    }
    Ok(failed)
}

fn cmd_corpus(
    seed: u64,
    counts: [usize; 3],
    pac: Option<Pac>,
    ac: Option<Ac>,
    optimize: bool,
    out: Option<PathBuf>,
) -> Result<bool> {
    let cases = gen_corpus(seed, counts);
    if let Some(dir) = &out {
        let case_dir = dir.join("cases");
        std::fs::create_dir_all(&case_dir).with_context(|| format!("creating {}", case_dir.display()))?;
        for c in &cases {
            let path = case_dir.join(format!("{}.pt", c.id));
            std::fs::write(&path, &c.source).with_context(|| format!("writing {}", path.display()))?;
        }
    }
    let failed = corpus_gate(&cases, &corpus_configs(seed, pac, ac, optimize), out.as_deref())?;
    Ok(failed.is_empty())
}

#[allow(clippy::too_many_arguments)]
fn cmd_run(
    file: &Path,
    mode: Mode,
    optimize: bool,
    pac: Pac,
    ac: Ac,
    seed: u64,
    emit: bool,
    sites: bool,
    trace: Option<PathBuf>,
    json: bool,
) -> Result<bool> {
    let program = read_program(file)?;
    let lab = LabConfig { pac_mode: pac_mode(pac), ac_function: ac_function(ac), seed, optimize };
    let mut cfg = lab.interp();
    cfg.trace = trace.is_some();
    let report = match mode {
        Mode::Raw => interpret(&program, ExecMode::Raw, &cfg)?,
        Mode::Checked => {
            let inst = instrument(&program, InstrumentOptions { optimize });
            if emit {
                print!("{}", inst.program);
            }
            if sites {
                for s in &inst.sites {
                    let how = match s.elision_reason {
                        Some(r) => format!("elided ({r:?})"),
                        None => "checked".into(),
                    };
                    println!("site {} {:?} {how}", s.key(), s.kind);
                }
                for (tag, n) in site_summary(&inst.sites) {
                    println!("{tag}: {n}");
                }
            }
            interpret(&inst.program, ExecMode::Checked, &cfg)?
        }
    };
    if let Some(path) = trace {
        write_summary(&report.trace, &path)?;
    }
    if json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        for line in &report.output {
            println!("{line}");
        }
        println!("{}", describe(&report.verdict));
        for e in &report.ground_truth {
            println!("ground truth: {:?} at {}:{} after {} steps", e.kind, e.function, e.index, e.step);
        }
        println!(
            "instructions {}  cost {}  checks {}  backward steps {}  peak bytes {}",
            report.instructions, report.cost, report.checks, report.backward_steps, report.peak_bytes
        );
    }
    Ok(report.verdict.is_clean())
}

fn cmd_bench(name: &str, reps: usize, out: &Path) -> Result<bool> {
    let programs = suite(name)?;
    let results = run_bench(&programs, reps)?;
    print!("{}", text_table(&results)?);
    let (csv, json) = write_all(&results, out)?;
    println!("wrote {} and {}", csv.display(), json.display());
    Ok(true)
}

fn cmd_audit(file: &Path, seed: u64) -> Result<bool> {
    let program = read_program(file)?;
    let cfg = LabConfig { seed, ..LabConfig::default() }.interp();
    let a = verdict_equivalence_audit(&program, &cfg)?;
    println!("unoptimized: {}  checks {}", describe(&a.unoptimized.verdict), a.unoptimized.checks);
    println!("optimized:   {}  checks {}", describe(&a.optimized.verdict), a.optimized.checks);
    println!("elided site hits {}", a.elided_hits);
    for m in &a.mismatches {
        println!("MISMATCH {m}");
    }
    println!("{}", if a.passed() { "audit passed" } else { "audit FAILED" });
    Ok(a.passed())
}

fn cmd_robustness(seed: u64, cases: usize) -> Result<bool> {
    let mut ok = true;
    for cfg in LabConfig::all_variants(seed, true) {
        let s = run_robustness(seed, cases, &cfg);
        println!(
            "{:<22} attacks detected {}/{}  clean false positives {}/{}",
            cfg.label(),
            s.detected,
            s.attacks,
            s.false_positives,
            s.clean
        );
        for f in &s.failures {
            println!(
                "FAILED {} [{}]: expected {:?}, got {}, ground truth {}",
                f.id,
                cfg.label(),
                f.expected,
                describe(&f.verdict),
                if f.ground_truth_ok { "agrees" } else { "disagrees" }
            );
        }
        ok &= s.passed();
    }
    Ok(ok)
}

fn cmd_gates(seed: u64, random: u64) -> Result<bool> {
    let cases = gen_corpus(seed, [50, 50, 50]);
    let corpus_failed = corpus_gate(&cases, &LabConfig::all_variants(seed, true), None)?;
    println!("gate corpus: {}", if corpus_failed.is_empty() { "pass" } else { "FAIL" });

    let robust_ok = cmd_robustness(seed, 30)?;
    println!("gate robustness: {}", if robust_ok { "pass" } else { "FAIL" });

    let cfg = LabConfig { seed, ..LabConfig::default() }.interp();
    let mut audit_failed = Vec::new();
    let mut programs: Vec<(String, ptauth_core::ir::Program)> =
        cases.iter().map(|c| (c.id.clone(), parse_program(&c.source).expect("corpus parses"))).collect();
    for s in 0..random {
        let id = format!("random-{s}");
        programs.push((id, ptauth_core::ir::random::random_program(seed.wrapping_add(s), &Default::default())));
    }
    for (id, p) in &programs {
        let a = verdict_equivalence_audit(p, &cfg)?;
        if !a.passed() {
            println!("AUDIT MISMATCH {id}: {}", a.mismatches.join("; "));
            audit_failed.push(id.clone());
        }
    }
    println!("gate audit: {} ({} programs)", if audit_failed.is_empty() { "pass" } else { "FAIL" }, programs.len());
    Ok(corpus_failed.is_empty() && robust_ok && audit_failed.is_empty())
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Cmd::Corpus { seed, counts, pac, ac, optimize, out } => {
            cmd_corpus(seed, counts, pac, ac, matches!(optimize, OnOff::On), out)
        }
        Cmd::Run { file, mode, optimize, pac, ac, seed, emit_instrumented, check_sites, trace, json } => cmd_run(
            &file,
            mode,
            matches!(optimize, OnOff::On),
            pac,
            ac,
            seed,
            emit_instrumented,
            check_sites,
            trace,
            json,
        ),
        Cmd::Bench { suite, reps, out } => {
            if reps == 0 {
                bail!("--reps must be at least 1");
            }
            cmd_bench(&suite, reps, &out)
        }
        Cmd::Audit { file, seed } => cmd_audit(&file, seed),
        Cmd::Robustness { seed, cases } => cmd_robustness(seed, cases),
        Cmd::Gates { seed, random } => cmd_gates(seed, random),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
