//! Synthetic benchmark suite and overhead measurement.
//!
//! Overhead is counted in cost units: one per retired IR instruction plus
//! the runtime work charged by the cost model. The interpreter is
//! deterministic, so repetitions check reproducibility rather than average
//! out noise.

use std::collections::BTreeMap;
use std::fmt::Write;
use std::time::Instant;

use ptauth_core::instrument::{instrument, InstrumentOptions};
use ptauth_core::ir::{interpret, parse_program, CostModel, ExecMode, InterpConfig, Program, RunReport, Verdict};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchProgram {
    pub name: String,
    pub source: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostMode {
    /// Software AC computation, backward search charged per candidate.
    Software,
    /// Four units per PAC operation, backward search not charged.
    Pac4,
}

impl CostMode {
    pub fn model(self) -> CostModel {
        match self {
            CostMode::Software => CostModel::software(),
            CostMode::Pac4 => CostModel::pac4(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CostMode::Software => "software",
            CostMode::Pac4 => "pac4",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub program: String,
    pub mode: CostMode,
    pub optimize: bool,
    pub reps: usize,
    pub instr_raw: u64,
    pub instr_checked: u64,
    pub overhead_ratio: f64,
    pub checks: u64,
    pub backward_steps: u64,
    pub peak_raw: u64,
    pub peak_checked: u64,
    pub mem_ratio: f64,
    pub mean_rss_ratio: f64,
    pub stddev: f64,
    pub overhead_min: f64,
    pub overhead_max: f64,
    /// Share of the added cost spent walking back past the first candidate.
    pub backward_share: f64,
    pub elided_sites: usize,
    pub backward_histogram: BTreeMap<u64, u64>,
    /// Wall-clock of the checked runs, recorded for reference only.
    pub wall_ms: f64,
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("unknown suite `{0}`")]
    UnknownSuite(String),
    #[error("reps must be at least 1")]
    NoReps,
    #[error("benchmark {program} did not run clean: {verdict:?}")]
    NotClean { program: String, verdict: Verdict },
    #[error("benchmark {0} failed to parse: {1}")]
    Parse(String, String),
}

fn list_build(name: &str, sizes: &[u64], nodes: usize) -> BenchProgram {
    let mut s = String::from("fn main {\n  head = const 0\n  i = const 0\nbuild:\n");
    for (k, size) in sizes.iter().enumerate() {
        writeln!(s, "  n{k} = alloc {size}").unwrap();
        writeln!(s, "  store [n{k}], head").unwrap();
        writeln!(s, "  store [n{k} + 8], i").unwrap();
        writeln!(s, "  head = copy n{k}").unwrap();
    }
    let rounds = nodes / sizes.len();
    writeln!(
        s,
        "  i = add i, 1\n  c = cmp i, {rounds}\n  cbr c, build, walk_init\nwalk_init:\n  p = copy head\n  j = const 0\n  sum = const 0\nwalk:"
    )
    .unwrap();
    s.push_str("  v = load [p + 8]\n  sum = add sum, v\n  nx = load [p]\n  free p\n  p = copy nx\n");
    writeln!(s, "  j = add j, 1\n  c2 = cmp j, {}\n  cbr c2, walk, out\nout:\n  ret sum\n}}", rounds * sizes.len())
        .unwrap();
    BenchProgram { name: name.into(), source: s }
}

/// Objects reached through a pointer table, each walked with an interior
/// pointer: the backward search is exercised on every access.
fn ptr_chase(objects: usize, passes: usize) -> BenchProgram {
    let mut s = String::new();
    writeln!(s, "fn fill(obj) {{\n  w = copy obj\n  k = const 0\nfl:\n  store [w], k\n  w = ptradd w, 16\n  k = add k, 1\n  c = cmp k, 16\n  cbr c, fl, done\ndone:\n  ret\n}}\n").unwrap();
    writeln!(s, "fn walk(obj) {{\n  w = ptradd obj, 248\n  acc = const 0\n  k = const 0\nwl:\n  v = load [w]\n  acc = add acc, v\n  x = load [w - 8]\n  w = ptradd w, -16\n  k = add k, 1\n  c = cmp k, 15\n  cbr c, wl, done\ndone:\n  ret acc\n}}\n").unwrap();
    writeln!(s, "fn main {{\n  table = alloc {}\n  t = copy table\n  i = const 0\nmk:", objects * 8).unwrap();
    s.push_str("  o = alloc 256\n  call fill(o)\n  store [t], o\n  t = ptradd t, 8\n  i = add i, 1\n");
    writeln!(s, "  c = cmp i, {objects}\n  cbr c, mk, pass_init\npass_init:\n  pass = const 0\npass_top:\n  t = copy table\n  i = const 0\nrd:").unwrap();
    s.push_str("  o = load [t]\n  r = call walk(o)\n  t = ptradd t, 8\n  i = add i, 1\n");
    writeln!(s, "  c = cmp i, {objects}\n  cbr c, rd, pass_next\npass_next:\n  pass = add pass, 1\n  c = cmp pass, {passes}\n  cbr c, pass_top, out\nout:\n  ret\n}}").unwrap();
    BenchProgram { name: "ptr_chase".into(), source: s }
}

/// Integer work with a global accumulator and one heap object reached
/// through memory.
fn arith(iters: usize) -> BenchProgram {
    let s = format!(
        "global acc 16\n\nfn main {{\n  g = globaddr acc\n  box = alloc 32\n  cell = alloc 16\n  store [box], cell\n  i = const 0\n  x = const 1\ntop:\n  x = add x, i\n  x = sub x, 3\n  y = add x, 7\n  y = add y, i\n  store [g], y\n  z = load [g + 8]\n  x = add x, 1\n  c = load [box]\n  store [c + 8], x\n  i = add i, 1\n  d = cmp i, {iters}\n  cbr d, top, out\nout:\n  ret x\n}}\n"
    );
    BenchProgram { name: "arith".into(), source: s }
}

/// Short-lived objects used right after allocation: every check sits in a
/// safe window.
fn fresh_window(iters: usize) -> BenchProgram {
    let s = format!(
        "fn main {{\n  i = const 0\ntop:\n  p = alloc 64\n  store [p], i\n  store [p + 8], i\n  a = load [p]\n  b = load [p + 8]\n  q = ptradd p, 32\n  store [q], a\n  e = load [q]\n  free p\n  i = add i, 1\n  c = cmp i, {iters}\n  cbr c, top, out\nout:\n  ret\n}}\n"
    );
    BenchProgram { name: "fresh_window".into(), source: s }
}

/// Strings handed to whitelisted and opaque externals.
fn extcall_mix(iters: usize) -> BenchProgram {
    let s = format!(
        "fn main {{\n  i = const 0\n  word = const 7955819\n  n = const 8\ntop:\n  s = alloc 16\n  store [s], word\n  d = alloc 16\n  extcall mem_copy(d, s, n)\n  extcall str_copy(s, d)\n  old = extcall opaque_keep(d)\n  free s\n  i = add i, 1\n  c = cmp i, {iters}\n  cbr c, top, out\nout:\n  extcall print_str(d)\n  ret\n}}\n"
    );
    BenchProgram { name: "extcall_mix".into(), source: s }
}

/// Sizes whose 32-byte granule absorbs the header: every one but 256.
pub const MIXED_SIZES: [u64; 6] = [16, 24, 48, 80, 100, 256];

pub fn default_suite() -> Vec<BenchProgram> {
    vec![
        list_build("alloc16", &[16], 600),
        list_build("alloc_mixed", &MIXED_SIZES, 600),
        list_build("aligned32", &[128], 300),
        ptr_chase(32, 4),
        arith(2000),
        fresh_window(500),
        extcall_mix(200),
    ]
}

pub fn suite(name: &str) -> Result<Vec<BenchProgram>, BenchError> {
    match name {
        "default" => Ok(default_suite()),
        "small" => Ok(vec![
            list_build("alloc16", &[16], 60),
            list_build("alloc_mixed", &MIXED_SIZES, 60),
            list_build("aligned32", &[128], 30),
            ptr_chase(4, 1),
            arith(100),
            fresh_window(40),
            extcall_mix(20),
        ]),
        other => Err(BenchError::UnknownSuite(other.to_string())),
    }
}

fn config(mode: CostMode) -> InterpConfig {
    InterpConfig { cost: mode.model(), ..InterpConfig::default() }
}

// Both statistics are taken relative to the first sample so identical
// samples give an exact mean and a zero deviation.
fn mean(xs: &[f64]) -> f64 {
    let x0 = xs[0];
    x0 + xs.iter().map(|x| x - x0).sum::<f64>() / xs.len() as f64
}

/// Population standard deviation.
pub fn stddev(xs: &[f64]) -> f64 {
    let x0 = xs[0];
    let n = xs.len() as f64;
    let m = xs.iter().map(|x| x - x0).sum::<f64>() / n;
    let sq = xs.iter().map(|x| (x - x0) * (x - x0)).sum::<f64>() / n;
    (sq - m * m).max(0.0).sqrt()
}

fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        1.0
    } else {
        a / b
    }
}

fn run_one(
    program: &Program,
    optimize: bool,
    mode: CostMode,
    reps: usize,
    name: &str,
) -> Result<BenchResult, BenchError> {
    let cfg = config(mode);
    let inst = instrument(program, InstrumentOptions { optimize });
    let mut ratios = Vec::with_capacity(reps);
    let mut last: Option<(RunReport, RunReport)> = None;
    let start = Instant::now();
    for _ in 0..reps {
        let raw = interpret(program, ExecMode::Raw, &cfg).expect("valid config");
        let chk = interpret(&inst.program, ExecMode::Checked, &cfg).expect("valid config");
        for r in [&raw, &chk] {
            if !r.verdict.is_clean() {
                return Err(BenchError::NotClean { program: name.to_string(), verdict: r.verdict.clone() });
            }
        }
        ratios.push(ratio(chk.cost as f64, raw.cost as f64));
        last = Some((raw, chk));
    }
    let wall_ms = start.elapsed().as_secs_f64() * 1000.0;
    let (raw, chk) = last.expect("reps >= 1");
    let added = chk.cost.saturating_sub(raw.cost);
    Ok(BenchResult {
        program: name.to_string(),
        mode,
        optimize,
        reps,
        instr_raw: raw.cost,
        instr_checked: chk.cost,
        overhead_ratio: mean(&ratios),
        checks: chk.checks,
        backward_steps: chk.backward_steps,
        peak_raw: raw.peak_bytes,
        peak_checked: chk.peak_bytes,
        mem_ratio: ratio(chk.peak_bytes as f64, raw.peak_bytes as f64),
        mean_rss_ratio: ratio(chk.mean_bytes, raw.mean_bytes),
        stddev: stddev(&ratios),
        overhead_min: ratios.iter().copied().fold(f64::INFINITY, f64::min),
        overhead_max: ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        backward_share: ratio(chk.backward_cost as f64, added as f64).min(1.0) * (added > 0) as u8 as f64,
        elided_sites: inst.elided().count(),
        backward_histogram: chk.backward_histogram,
        wall_ms,
    })
}

/// Every program under optimize off/on and both cost modes.
pub fn run_bench(programs: &[BenchProgram], reps: usize) -> Result<Vec<BenchResult>, BenchError> {
    if reps == 0 {
        return Err(BenchError::NoReps);
    }
    let parsed: Vec<(String, Program)> = programs
        .iter()
        .map(|p| {
            parse_program(&p.source)
                .map(|prog| (p.name.clone(), prog))
                .map_err(|e| BenchError::Parse(p.name.clone(), e.to_string()))
        })
        .collect::<Result<_, _>>()?;
    let mut jobs = Vec::new();
    for (i, _) in parsed.iter().enumerate() {
        for optimize in [false, true] {
            for mode in [CostMode::Software, CostMode::Pac4] {
                jobs.push((i, optimize, mode));
            }
        }
    }
    jobs.par_iter().map(|&(i, optimize, mode)| run_one(&parsed[i].1, optimize, mode, reps, &parsed[i].0)).collect()
}
