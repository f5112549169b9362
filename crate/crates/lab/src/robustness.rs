//! Spatial-corruption cases layered on temporal bugs.
//!
//! Each attack program linearly overflows one object to overwrite the next
//! chunk's 8-byte ID header, or sprays IDs into object interiors, and only
//! then triggers its temporal bug. IDs are leaked the way an attacker with an
//! overflow read would: by loading past the end of a neighbouring object.
//! Clean cases overwrite object data only and must never trip a check.

use ptauth_core::instrument::{instrument, InstrumentOptions};
use ptauth_core::ir::{interpret, parse_program, ExecMode, GroundTruthKind, Verdict};
use ptauth_core::memory::HeaderLayout;
use ptauth_core::ViolationKind;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Category;
use crate::LabConfig;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RobustnessCase {
    pub id: String,
    pub category: Category,
    pub attack: bool,
    pub source: String,
    pub expected: Option<ViolationKind>,
}

/// Offset from an object's base to the header slot of the chunk allocated
/// right after it.
fn next_header(size: u64) -> u64 {
    HeaderLayout::Inline.footprint(size) - 8
}

fn size(rng: &mut ChaCha8Rng) -> u64 {
    *[16u64, 24, 32, 48, 64, 100].choose(rng).expect("non-empty")
}

fn junk(rng: &mut ChaCha8Rng) -> i64 {
    rng.gen_range(1..i64::MAX)
}

fn program(lines: &[String], prelude: &str) -> String {
    let mut s = String::from(prelude);
    s.push_str("fn main {\n");
    for l in lines {
        s.push_str("  ");
        s.push_str(l);
        s.push('\n');
    }
    s.push_str("  ret\n}\n");
    s
}

macro_rules! lines {
    ($($e:expr),* $(,)?) => { vec![$($e.to_string()),*] };
}

type Attack = fn(&mut ChaCha8Rng) -> (Category, String);

/// Victim freed and unmapped, its old header slot overwritten with junk.
fn uaf_junk_unmapped(rng: &mut ChaCha8Rng) -> (Category, String) {
    let (a, b) = (size(rng), size(rng));
    let l = lines![
        format!("a = alloc {a}"),
        format!("b = alloc {b}"),
        "bq = copy b",
        "free b",
        format!("j = const {}", junk(rng)),
        format!("store [a + {}], j", next_header(a)),
        "v = load [bq]",
    ];
    (Category::UseAfterFree, program(&l, ""))
}

/// Victim region reused by a new object whose header is then smashed.
fn uaf_junk_reused(rng: &mut ChaCha8Rng) -> (Category, String) {
    let (a, b) = (size(rng), size(rng));
    let l = lines![
        format!("a = alloc {a}"),
        format!("b = alloc {b}"),
        "bq = copy b",
        "free b",
        format!("c = alloc {b}"),
        format!("j = const {}", junk(rng)),
        format!("store [a + {}], j", next_header(a)),
        "v = load [bq]",
    ];
    (Category::UseAfterFree, program(&l, ""))
}

/// The victim's own ID is leaked, then sprayed inside the object that
/// reuses its region; a stale interior pointer walks back over the spray.
fn uaf_spray_own_id(rng: &mut ChaCha8Rng) -> (Category, String) {
    let a = size(rng);
    let b = *[64u64, 128, 256].choose(rng).expect("non-empty");
    let k = 16 * rng.gen_range(1..b / 16);
    let l = lines![
        format!("a = alloc {a}"),
        format!("b = alloc {b}"),
        format!("id = load [a + {}]", next_header(a)),
        format!("bi = ptradd b, {k}"),
        "free b",
        format!("c = alloc {b}"),
        format!("store [c + {}], id", k - 8),
        "v = load [bi]",
    ];
    (Category::UseAfterFree, program(&l, ""))
}

/// Leaked victim ID written back into its old header slot after the victim
/// moved out: the slot is unmapped, so nothing authenticates there.
fn uaf_spray_old_slot(rng: &mut ChaCha8Rng) -> (Category, String) {
    let a = size(rng);
    let b = size(rng);
    let l = lines![
        format!("a = alloc {a}"),
        format!("b = alloc {b}"),
        format!("id = load [a + {}]", next_header(a)),
        "bq = copy b",
        "free b",
        format!("c = alloc {}", b + 512),
        format!("store [a + {}], id", next_header(a)),
        "v = load [bq]",
    ];
    (Category::UseAfterFree, program(&l, ""))
}

/// Another live object's ID copied over the header of the reused region.
fn uaf_foreign_id(rng: &mut ChaCha8Rng) -> (Category, String) {
    let (a, b, d) = (size(rng), size(rng), size(rng));
    let l = lines![
        format!("a = alloc {a}"),
        format!("b = alloc {b}"),
        format!("d = alloc {d}"),
        format!("id = load [b + {}]", next_header(b)),
        "bq = copy b",
        "free b",
        format!("c = alloc {b}"),
        format!("store [a + {}], id", next_header(a)),
        "v = load [bq]",
    ];
    (Category::UseAfterFree, program(&l, ""))
}

fn df_junk_unmapped(rng: &mut ChaCha8Rng) -> (Category, String) {
    let (a, b) = (size(rng), size(rng));
    let l = lines![
        format!("a = alloc {a}"),
        format!("b = alloc {b}"),
        "bq = copy b",
        "free b",
        format!("j = const {}", junk(rng)),
        format!("store [a + {}], j", next_header(a)),
        "free bq",
    ];
    (Category::DoubleFree, program(&l, ""))
}

fn df_junk_reused(rng: &mut ChaCha8Rng) -> (Category, String) {
    let (a, b) = (size(rng), size(rng));
    let l = lines![
        format!("a = alloc {a}"),
        format!("b = alloc {b}"),
        "bq = copy b",
        "free b",
        format!("c = alloc {b}"),
        format!("j = const {}", junk(rng)),
        format!("store [a + {}], j", next_header(a)),
        "free bq",
    ];
    (Category::DoubleFree, program(&l, ""))
}

fn df_spray_own_id(rng: &mut ChaCha8Rng) -> (Category, String) {
    let a = size(rng);
    let b = *[64u64, 128].choose(rng).expect("non-empty");
    let k = 16 * rng.gen_range(1..b / 16);
    let l = lines![
        format!("a = alloc {a}"),
        format!("b = alloc {b}"),
        format!("id = load [a + {}]", next_header(a)),
        "bq = copy b",
        "free b",
        format!("c = alloc {b}"),
        format!("store [c + {}], id", k - 8),
        "free bq",
    ];
    (Category::DoubleFree, program(&l, ""))
}

fn df_foreign_id(rng: &mut ChaCha8Rng) -> (Category, String) {
    let (a, b, d) = (size(rng), size(rng), size(rng));
    let l = lines![
        format!("a = alloc {a}"),
        format!("b = alloc {b}"),
        format!("d = alloc {d}"),
        format!("id = load [b + {}]", next_header(b)),
        "bq = copy b",
        "free b",
        format!("c = alloc {b}"),
        format!("store [a + {}], id", next_header(a)),
        "free bq",
    ];
    (Category::DoubleFree, program(&l, ""))
}

fn df_zeroed_header(rng: &mut ChaCha8Rng) -> (Category, String) {
    let (a, b) = (size(rng), size(rng));
    let l = lines![
        format!("a = alloc {a}"),
        format!("b = alloc {b}"),
        "bq = copy b",
        "free b",
        format!("c = alloc {b}"),
        "z = const 0",
        format!("store [a + {}], z", next_header(a)),
        "free bq",
    ];
    (Category::DoubleFree, program(&l, ""))
}

/// The object's real ID is copied to just before an interior address,
/// forging a header there; the pointer's code is still bound to the base.
fn if_forged_header(rng: &mut ChaCha8Rng) -> (Category, String) {
    let a = size(rng);
    let b = *[64u64, 128, 256].choose(rng).expect("non-empty");
    let k = 16 * rng.gen_range(1..b / 16);
    let l = lines![
        format!("a = alloc {a}"),
        format!("b = alloc {b}"),
        format!("id = load [a + {}]", next_header(a)),
        format!("store [b + {}], id", k - 8),
        format!("bi = ptradd b, {k}"),
        "free bi",
    ];
    (Category::InvalidFree, program(&l, ""))
}

fn if_junk_before_interior(rng: &mut ChaCha8Rng) -> (Category, String) {
    let b = *[64u64, 128, 256].choose(rng).expect("non-empty");
    let k = 16 * rng.gen_range(1..b / 16);
    let l = lines![
        format!("b = alloc {b}"),
        format!("j = const {}", junk(rng)),
        format!("store [b + {}], j", k - 8),
        format!("bi = ptradd b, {k}"),
        "free bi",
    ];
    (Category::InvalidFree, program(&l, ""))
}

fn if_smashed_own_header(rng: &mut ChaCha8Rng) -> (Category, String) {
    let (a, b) = (size(rng), *[64u64, 128].choose(rng).expect("non-empty"));
    let l = lines![
        format!("a = alloc {a}"),
        format!("b = alloc {b}"),
        format!("j = const {}", junk(rng)),
        format!("store [a + {}], j", next_header(a)),
        "bi = ptradd b, 24",
        "free bi",
    ];
    (Category::InvalidFree, program(&l, ""))
}

fn if_global_with_id(rng: &mut ChaCha8Rng) -> (Category, String) {
    let a = size(rng);
    let l = lines![
        format!("a = alloc {a}"),
        format!("b = alloc {}", size(rng)),
        format!("id = load [a + {}]", next_header(a)),
        "g = globaddr arena",
        "store [g + 8], id",
        "gi = ptradd g, 16",
        "free gi",
    ];
    (Category::InvalidFree, program(&l, "global arena 64\n\n"))
}

fn if_walked_with_id(rng: &mut ChaCha8Rng) -> (Category, String) {
    let a = size(rng);
    let steps = rng.gen_range(2..8);
    let l = lines![
        format!("a = alloc {a}"),
        "b = alloc 128",
        format!("id = load [a + {}]", next_header(a)),
        format!("store [b + {}], id", 16 * steps - 8),
        format!("w = ptradd b, {}", 16 * steps),
        "free w",
    ];
    (Category::InvalidFree, program(&l, ""))
}

const ATTACKS: [(&str, Attack); 15] = [
    ("junk-unmapped", uaf_junk_unmapped),
    ("junk-reused", uaf_junk_reused),
    ("spray-own-id", uaf_spray_own_id),
    ("spray-old-slot", uaf_spray_old_slot),
    ("foreign-id", uaf_foreign_id),
    ("junk-unmapped", df_junk_unmapped),
    ("junk-reused", df_junk_reused),
    ("spray-own-id", df_spray_own_id),
    ("foreign-id", df_foreign_id),
    ("zeroed-header", df_zeroed_header),
    ("forged-header", if_forged_header),
    ("junk-before-interior", if_junk_before_interior),
    ("smashed-own-header", if_smashed_own_header),
    ("global-with-id", if_global_with_id),
    ("walked-with-id", if_walked_with_id),
];

/// Data-only overwrites: attacker-chosen values, including leaked IDs,
/// land in object payloads of a bug-free program.
fn clean_case(rng: &mut ChaCha8Rng, shape: usize) -> String {
    let b = *[64u64, 128, 256].choose(rng).expect("non-empty");
    let a = size(rng);
    let k = 16 * rng.gen_range(1..b / 16);
    let mut l = lines![format!("a = alloc {a}"), format!("b = alloc {b}")];
    match shape {
        0 => {
            // junk across the whole payload, then interior reads
            for off in (0..b).step_by(8) {
                l.push(format!("j{off} = const {}", junk(rng)));
                l.push(format!("store [b + {off}], j{off}"));
            }
            l.push(format!("bi = ptradd b, {k}"));
            l.push("v = load [bi]".into());
        }
        1 => {
            // the object's own ID sprayed mid-object, interior pointer past it
            l.push(format!("id = load [a + {}]", next_header(a)));
            l.push(format!("store [b + {}], id", k - 8));
            l.push(format!("bi = ptradd b, {}", (k + 8).min(b - 8)));
            l.push("v = load [bi]".into());
            l.push("store [bi], v".into());
        }
        _ => {
            // another object's ID and junk in data, then normal frees
            l.push(format!("d = alloc {}", size(rng)));
            l.push(format!("id = load [b + {}]", next_header(b)));
            l.push(format!("store [b + {}], id", k - 8));
            l.push(format!("j = const {}", junk(rng)));
            l.push("store [a], j".to_string());
            l.push("free d".into());
            l.push(format!("bi = ptradd b, {k}"));
            l.push("v = load [bi]".into());
            l.push("free b".into());
            l.push("free a".into());
        }
    }
    program(&l, "")
}

/// `n_cases` attacks spread over the three categories, plus as many clean
/// data-only cases.
pub fn gen_robustness(seed: u64, n_cases: usize) -> Vec<RobustnessCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(2 * n_cases);
    for i in 0..n_cases {
        // round-robin across categories first, then across variants
        let per_cat = ATTACKS.len() / 3;
        let cat = i % 3;
        let var = (i / 3) % per_cat;
        let (name, attack) = ATTACKS[cat * per_cat + var];
        let (category, source) = attack(&mut rng);
        out.push(RobustnessCase {
            id: format!("attack-{}-{i:02}-{name}", category.short()),
            category,
            attack: true,
            source,
            expected: Some(category.violation()),
        });
    }
    for i in 0..n_cases {
        let category = Category::ALL[i % 3];
        out.push(RobustnessCase {
            id: format!("clean-{i:02}-shape{}", i % 3),
            category,
            attack: false,
            source: clean_case(&mut rng, i % 3),
            expected: None,
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RobustnessOutcome {
    pub id: String,
    pub expected: Option<ViolationKind>,
    pub verdict: Verdict,
    /// Whether the unchecked run shows the intended temporal bug (attacks)
    /// or no temporal bug at all (clean cases).
    pub ground_truth_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RobustnessSummary {
    pub attacks: usize,
    pub detected: usize,
    pub clean: usize,
    pub false_positives: usize,
    pub failures: Vec<RobustnessOutcome>,
}

impl RobustnessSummary {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.detected == self.attacks && self.false_positives == 0
    }
}

fn truth_kind(k: ViolationKind) -> GroundTruthKind {
    match k {
        ViolationKind::UseAfterFree => GroundTruthKind::UseAfterFree,
        ViolationKind::DoubleFree => GroundTruthKind::DoubleFree,
        _ => GroundTruthKind::InvalidFree,
    }
}

pub fn run_case(case: &RobustnessCase, config: &LabConfig) -> RobustnessOutcome {
    let program = parse_program(&case.source).unwrap_or_else(|e| panic!("{}: {e}", case.id));
    let raw = interpret(&program, ExecMode::Raw, &config.interp()).expect("valid config");
    let first = raw.temporal_events().next().map(|e| e.kind);
    let ground_truth_ok = first == case.expected.map(truth_kind);
    let inst = instrument(&program, InstrumentOptions { optimize: config.optimize });
    let report = interpret(&inst.program, ExecMode::Checked, &config.interp()).expect("valid config");
    RobustnessOutcome { id: case.id.clone(), expected: case.expected, verdict: report.verdict, ground_truth_ok }
}

pub fn run_robustness(seed: u64, n_cases: usize, config: &LabConfig) -> RobustnessSummary {
    let cases = gen_robustness(seed, n_cases);
    let outcomes: Vec<RobustnessOutcome> = cases.par_iter().map(|c| run_case(c, config)).collect();
    let mut s = RobustnessSummary { attacks: 0, detected: 0, clean: 0, false_positives: 0, failures: Vec::new() };
    for o in outcomes {
        let ok = match o.expected {
            Some(k) => {
                s.attacks += 1;
                let hit = o.verdict.violation() == Some(k);
                s.detected += hit as usize;
                hit
            }
            None => {
                s.clean += 1;
                let fp = !o.verdict.is_clean();
                s.false_positives += fp as usize;
                !fp
            }
        };
        if !ok || !o.ground_truth_ok {
            s.failures.push(o);
        }
    }
    s
}
