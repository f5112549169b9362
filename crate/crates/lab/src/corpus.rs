//! Generated temporal-bug corpus: use-after-free (CWE-416), double free
//! (CWE-415) and free of a non-base pointer (CWE-761), each vulnerable
//! program paired with a patched twin.

use std::collections::BTreeMap;
use std::fmt::Write;

use ptauth_core::instrument::{instrument, InstrumentOptions};
use ptauth_core::ir::{interpret, parse_program, ExecMode, Verdict};
use ptauth_core::ViolationKind;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::LabConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    UseAfterFree,
    DoubleFree,
    InvalidFree,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::UseAfterFree, Category::DoubleFree, Category::InvalidFree];

    pub fn violation(self) -> ViolationKind {
        match self {
            Category::UseAfterFree => ViolationKind::UseAfterFree,
            Category::DoubleFree => ViolationKind::DoubleFree,
            Category::InvalidFree => ViolationKind::InvalidFree,
        }
    }

    pub fn cwe(self) -> u32 {
        match self {
            Category::UseAfterFree => 416,
            Category::DoubleFree => 415,
            Category::InvalidFree => 761,
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            Category::UseAfterFree => "uaf",
            Category::DoubleFree => "df",
            Category::InvalidFree => "if",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Vulnerable,
    Patched,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusCase {
    pub id: String,
    pub category: Category,
    pub variant: Variant,
    pub template: String,
    pub source: String,
    /// `None` means the run must be clean.
    pub expected: Option<ViolationKind>,
}

/// Source of one program; `bug` selects the vulnerable variant.
struct Src {
    out: String,
    fillers: usize,
}

impl Src {
    fn new() -> Self {
        Src { out: String::new(), fillers: 0 }
    }

    fn line(&mut self, s: impl AsRef<str>) {
        self.out.push_str("  ");
        self.out.push_str(s.as_ref());
        self.out.push('\n');
    }

    fn fillers(&mut self, rng: &mut ChaCha8Rng, max: usize) {
        for _ in 0..rng.gen_range(0..=max) {
            self.fillers += 1;
            let f = self.fillers;
            let size = *[16u64, 32, 48, 64].choose(rng).expect("non-empty");
            self.line(format!("f{f} = alloc {size}"));
            self.line(format!("fk{f} = const {}", rng.gen_range(1..1000)));
            self.line(format!("store [f{f}], fk{f}"));
        }
    }

    fn finish(mut self, prelude: &str) -> String {
        self.line("ret");
        let mut s = String::from(prelude);
        writeln!(s, "fn main {{").expect("string write");
        s.push_str(&self.out);
        s.push_str("}\n");
        s
    }
}

const RELEASE: &str = "fn release(x) {\n  free x\n  ret\n}\n\n";

fn size(rng: &mut ChaCha8Rng) -> u64 {
    *[16u64, 24, 32, 40, 64, 100, 128, 256].choose(rng).expect("non-empty")
}

/// A word offset that stays inside an object of `size` bytes.
fn offset(rng: &mut ChaCha8Rng, size: u64) -> u64 {
    8 * rng.gen_range(0..=(size - 8) / 8)
}

type Template = fn(&mut ChaCha8Rng, bool) -> String;

fn uaf_alias(rng: &mut ChaCha8Rng, bug: bool) -> String {
    let mut s = Src::new();
    let n = size(rng);
    let off = offset(rng, n);
    s.fillers(rng, 2);
    s.line(format!("p = alloc {n}"));
    s.line(format!("k = const {}", rng.gen_range(1..100)));
    s.line(format!("store [p + {off}], k"));
    s.line("q = copy p");
    s.fillers(rng, 2);
    if !bug {
        s.line(format!("v = load [q + {off}]"));
    }
    s.line("free p");
    if bug {
        s.line(format!("v = load [q + {off}]"));
    }
    s.finish("")
}

fn uaf_realloc(rng: &mut ChaCha8Rng, bug: bool) -> String {
    let mut s = Src::new();
    let (n, m) = (size(rng), size(rng));
    s.fillers(rng, 2);
    s.line(format!("p = alloc {n}"));
    s.line("q = copy p");
    s.line(format!("r = realloc p, {m}"));
    s.line(if bug { "v = load [q]" } else { "v = load [r]" });
    s.line("free r");
    s.finish("")
}

fn uaf_extcall(rng: &mut ChaCha8Rng, bug: bool) -> String {
    let mut s = Src::new();
    let n = size(rng);
    let off = offset(rng, n);
    s.fillers(rng, 2);
    s.line(format!("p = alloc {n}"));
    s.line("q = copy p");
    if bug {
        s.line("extcall opaque_free(p)");
        s.line(format!("v = load [q + {off}]"));
    } else {
        s.line(format!("v = load [q + {off}]"));
        s.line("extcall opaque_free(p)");
    }
    s.finish("")
}

fn uaf_reuse(rng: &mut ChaCha8Rng, bug: bool) -> String {
    let mut s = Src::new();
    let n = size(rng);
    let off = offset(rng, n);
    s.fillers(rng, 2);
    s.line(format!("p = alloc {n}"));
    s.line("q = copy p");
    s.line("free p");
    // same size, so the allocator hands the region straight back
    s.line(format!("n = alloc {n}"));
    s.line(format!("k = const {}", rng.gen_range(1..100)));
    s.line("store [n], k");
    s.line(if bug { format!("v = load [q + {off}]") } else { format!("v = load [n + {off}]") });
    s.line("free n");
    s.finish("")
}

fn uaf_interior(rng: &mut ChaCha8Rng, bug: bool) -> String {
    let mut s = Src::new();
    let n = *[64u64, 100, 128, 256].choose(rng).expect("non-empty");
    let d = 8 * rng.gen_range(1..=(n - 8) / 8);
    s.fillers(rng, 2);
    s.line(format!("p = alloc {n}"));
    s.line(format!("q = ptradd p, {d}"));
    if bug {
        s.line("free p");
        s.line("v = load [q]");
    } else {
        s.line("v = load [q]");
        s.line("free p");
    }
    s.finish("")
}

fn uaf_callee(rng: &mut ChaCha8Rng, bug: bool) -> String {
    let mut s = Src::new();
    let n = size(rng);
    let off = offset(rng, n);
    s.fillers(rng, 2);
    s.line(format!("p = alloc {n}"));
    s.line("q = copy p");
    s.line(format!("k = const {}", rng.gen_range(1..100)));
    if bug {
        s.line("call release(p)");
        s.line(format!("store [q + {off}], k"));
    } else {
        s.line(format!("store [q + {off}], k"));
        s.line("call release(p)");
    }
    s.finish(RELEASE)
}

fn uaf_stored(rng: &mut ChaCha8Rng, bug: bool) -> String {
    let mut s = Src::new();
    let n = size(rng);
    s.fillers(rng, 2);
    s.line("h = alloc 16");
    s.line(format!("p = alloc {n}"));
    s.line("store [h + 8], p");
    if bug {
        s.line("free p");
        s.line("r = load [h + 8]");
        s.line("v = load [r]");
    } else {
        s.line("r = load [h + 8]");
        s.line("v = load [r]");
        s.line("free p");
    }
    s.finish("")
}

fn df_alias(rng: &mut ChaCha8Rng, bug: bool) -> String {
    let mut s = Src::new();
    s.fillers(rng, 2);
    s.line(format!("p = alloc {}", size(rng)));
    s.line("q = copy p");
    s.fillers(rng, 2);
    s.line("free p");
    if bug {
        s.line("free q");
    }
    s.finish("")
}

fn df_callee(rng: &mut ChaCha8Rng, bug: bool) -> String {
    let mut s = Src::new();
    s.fillers(rng, 2);
    s.line(format!("p = alloc {}", size(rng)));
    s.line("call release(p)");
    if bug {
        s.line("free p");
    }
    s.finish(RELEASE)
}

fn df_reuse(rng: &mut ChaCha8Rng, bug: bool) -> String {
    let mut s = Src::new();
    let n = size(rng);
    s.fillers(rng, 2);
    s.line(format!("p = alloc {n}"));
    s.line("q = copy p");
    s.line("free p");
    s.line(format!("n = alloc {n}"));
    s.line(if bug { "free q" } else { "free n" });
    s.finish("")
}

fn df_realloc(rng: &mut ChaCha8Rng, bug: bool) -> String {
    let mut s = Src::new();
    s.fillers(rng, 2);
    s.line(format!("p = alloc {}", size(rng)));
    s.line(format!("r = realloc p, {}", size(rng)));
    s.line(if bug { "free p" } else { "free r" });
    s.finish("")
}

fn df_realloc_in_place(rng: &mut ChaCha8Rng, bug: bool) -> String {
    let mut s = Src::new();
    let n = *[64u64, 128, 256].choose(rng).expect("non-empty");
    s.fillers(rng, 2);
    s.line(format!("p = alloc {n}"));
    s.line("q = copy p");
    // shrinking keeps the chunk where it is, only the ID changes
    s.line(format!("r = realloc p, {}", n / 2));
    s.line(if bug { "free q" } else { "free r" });
    s.finish("")
}

fn df_extcall(rng: &mut ChaCha8Rng, bug: bool) -> String {
    let mut s = Src::new();
    s.fillers(rng, 2);
    s.line(format!("p = alloc {}", size(rng)));
    s.line("q = copy p");
    s.line("extcall opaque_free(p)");
    if bug {
        s.line("free q");
    }
    s.finish("")
}

fn if_walked(rng: &mut ChaCha8Rng, bug: bool) -> String {
    let mut s = Src::new();
    let n = *[64u64, 100, 128, 256].choose(rng).expect("non-empty");
    let steps = rng.gen_range(1..=(n - 8) / 8);
    s.fillers(rng, 2);
    s.line(format!("p = alloc {n}"));
    s.line("w = copy p");
    s.line("i = const 0");
    s.out.push_str("walk:\n");
    s.line("store [w], i");
    s.line("w = ptradd w, 8");
    s.line("i = add i, 1");
    s.line(format!("c = cmp i, {steps}"));
    s.line("cbr c, walk, done");
    s.out.push_str("done:\n");
    s.line(if bug { "free w" } else { "free p" });
    s.finish("")
}

fn if_interior(rng: &mut ChaCha8Rng, bug: bool) -> String {
    let mut s = Src::new();
    let n = *[32u64, 64, 100, 256].choose(rng).expect("non-empty");
    let d = 8 * rng.gen_range(1..=(n - 8) / 8);
    s.fillers(rng, 2);
    s.line(format!("p = alloc {n}"));
    s.line(format!("q = ptradd p, {d}"));
    s.line(if bug { "free q" } else { "free p" });
    s.finish("")
}

fn if_global(rng: &mut ChaCha8Rng, bug: bool) -> String {
    let mut s = Src::new();
    s.fillers(rng, 2);
    s.line(format!("p = alloc {}", size(rng)));
    s.line("g = globaddr table");
    s.line("store [g], p");
    s.line(if bug { "free g" } else { "free p" });
    s.finish("global table 64\n\n")
}

fn if_offset_back(rng: &mut ChaCha8Rng, bug: bool) -> String {
    let mut s = Src::new();
    let n = *[64u64, 128, 256].choose(rng).expect("non-empty");
    s.fillers(rng, 2);
    s.line(format!("p = alloc {n}"));
    s.line("q = ptradd p, 32");
    // walking back by less than the forward walk leaves an interior pointer
    s.line(if bug { "r = ptradd q, -16" } else { "r = ptradd q, -32" });
    s.line("free r");
    s.finish("")
}

fn templates(category: Category) -> &'static [(&'static str, Template)] {
    match category {
        Category::UseAfterFree => &[
            ("alias", uaf_alias),
            ("realloc-stale", uaf_realloc),
            ("extcall-free", uaf_extcall),
            ("reuse", uaf_reuse),
            ("interior", uaf_interior),
            ("callee-free", uaf_callee),
            ("stored-pointer", uaf_stored),
        ],
        Category::DoubleFree => &[
            ("alias", df_alias),
            ("callee-free", df_callee),
            ("reuse", df_reuse),
            ("realloc-old", df_realloc),
            ("realloc-in-place", df_realloc_in_place),
            ("extcall-free", df_extcall),
        ],
        Category::InvalidFree => {
            &[("walked", if_walked), ("interior", if_interior), ("global", if_global), ("offset-back", if_offset_back)]
        }
    }
}

/// `counts` vulnerable programs per category, each followed by its patched
/// twin. Same seed, same corpus.
pub fn gen_corpus(seed: u64, counts: [usize; 3]) -> Vec<CorpusCase> {
    let mut cases = Vec::new();
    for (category, count) in Category::ALL.into_iter().zip(counts) {
        let temps = templates(category);
        for i in 0..count {
            let (name, template) = temps[i % temps.len()];
            // both twins draw the same parameters
            let case_seed = seed ^ ((category.cwe() as u64) << 32) ^ i as u64;
            for (variant, bug) in [(Variant::Vulnerable, true), (Variant::Patched, false)] {
                let mut rng = ChaCha8Rng::seed_from_u64(case_seed);
                let tag = match variant {
                    Variant::Vulnerable => "vuln",
                    Variant::Patched => "patched",
                };
                cases.push(CorpusCase {
                    id: format!("cwe{}-{}-{i:03}-{name}-{tag}", category.cwe(), category.short()),
                    category,
                    variant,
                    template: name.to_string(),
                    source: template(&mut rng, bug),
                    expected: bug.then(|| category.violation()),
                });
            }
        }
    }
    cases
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub vulnerable: usize,
    pub detected: usize,
    pub patched: usize,
    pub false_positives: usize,
}

impl CategoryStats {
    pub fn detection_rate(&self) -> f64 {
        if self.vulnerable == 0 {
            return 1.0;
        }
        self.detected as f64 / self.vulnerable as f64
    }

    pub fn false_positive_rate(&self) -> f64 {
        if self.patched == 0 {
            return 0.0;
        }
        self.false_positives as f64 / self.patched as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mismatch {
    pub id: String,
    pub expected: Option<ViolationKind>,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseOutcome {
    pub id: String,
    pub verdict: Verdict,
    pub frees: u64,
    pub free_backward_steps: u64,
    pub checks: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub config: LabConfig,
    pub per_category: BTreeMap<Category, CategoryStats>,
    pub mismatches: Vec<Mismatch>,
    pub frees: u64,
    pub free_backward_steps: u64,
    pub outcomes: Vec<CaseOutcome>,
}

impl CorpusSummary {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Instruments one case and runs it checked.
pub fn run_case(case: &CorpusCase, config: &LabConfig) -> CaseOutcome {
    let program = parse_program(&case.source).unwrap_or_else(|e| panic!("{}: {e}", case.id));
    let inst = instrument(&program, InstrumentOptions { optimize: config.optimize });
    let report = interpret(&inst.program, ExecMode::Checked, &config.interp()).expect("lab configs are valid");
    CaseOutcome {
        id: case.id.clone(),
        verdict: report.verdict,
        frees: report.frees,
        free_backward_steps: report.free_backward_steps,
        checks: report.checks,
    }
}

pub fn run_corpus(cases: &[CorpusCase], config: &LabConfig) -> CorpusSummary {
    let outcomes: Vec<CaseOutcome> = cases.par_iter().map(|c| run_case(c, config)).collect();
    let mut per_category: BTreeMap<Category, CategoryStats> = BTreeMap::new();
    let mut mismatches = Vec::new();
    for (case, out) in cases.iter().zip(&outcomes) {
        let stats = per_category.entry(case.category).or_default();
        let got = out.verdict.violation();
        match case.expected {
            Some(_) => {
                stats.vulnerable += 1;
                if got == case.expected {
                    stats.detected += 1;
                }
            }
            None => {
                stats.patched += 1;
                if !out.verdict.is_clean() {
                    stats.false_positives += 1;
                }
            }
        }
        let ok = match case.expected {
            Some(_) => got == case.expected,
            None => out.verdict.is_clean(),
        };
        if !ok {
            mismatches.push(Mismatch { id: case.id.clone(), expected: case.expected, verdict: out.verdict.clone() });
        }
    }
    CorpusSummary {
        config: *config,
        per_category,
        mismatches,
        frees: outcomes.iter().map(|o| o.frees).sum(),
        free_backward_steps: outcomes.iter().map(|o| o.free_backward_steps).sum(),
        outcomes,
    }
}

/// Cross-checks a case against the allocator-level ground truth of an
/// unchecked run: vulnerable cases must exhibit their bug, patched ones none.
pub fn ground_truth_agrees(case: &CorpusCase) -> bool {
    let program = parse_program(&case.source).expect("corpus parses");
    let report = interpret(&program, ExecMode::Raw, &LabConfig::default().interp()).expect("valid config");
    let first = report.temporal_events().next().map(|e| e.kind);
    let expected = case.expected.map(|k| match k {
        ViolationKind::UseAfterFree => ptauth_core::ir::GroundTruthKind::UseAfterFree,
        ViolationKind::DoubleFree => ptauth_core::ir::GroundTruthKind::DoubleFree,
        _ => ptauth_core::ir::GroundTruthKind::InvalidFree,
    });
    first == expected && report.verdict.is_clean()
}
