//! Acceptance gates. Runs without the libtest harness so every criterion
//! prints exactly one PASS/FAIL line, then exits nonzero if any failed.

use std::collections::{BTreeMap, BTreeSet};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ptauth_core::instrument::verdict_equivalence_audit;
use ptauth_core::ir::random::{random_program, RandomConfig};
use ptauth_core::ir::{parse_program, InterpConfig, Verdict};
use ptauth_core::pac::{AuthResult, PacEngine};
use ptauth_core::{AcFunction, CheckOutcome, KeySlot, PacMode, RawAddress, Runtime, RuntimeConfig, SignedPointer};
use ptauth_lab::bench::{run_bench, suite, BenchResult, CostMode, MIXED_SIZES};
use ptauth_lab::corpus::{gen_corpus, ground_truth_agrees, run_corpus, Category};
use ptauth_lab::robustness::{gen_robustness, run_robustness};
use ptauth_lab::LabConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Gate = Result<String, String>;
type GateFn<'a> = Box<dyn Fn() -> Gate + 'a>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn detection_accuracy() -> Gate {
    let start = Instant::now();
    let cases = gen_corpus(1, [50, 50, 50]);
    let vulnerable = cases.iter().filter(|c| c.expected.is_some()).count();
    ensure(vulnerable == 150 && cases.len() == 300, || format!("corpus has {vulnerable}/{} cases", cases.len()))?;
    for cat in Category::ALL {
        let n = cases.iter().filter(|c| c.category == cat && c.expected == Some(cat.violation())).count();
        ensure(n == 50, || format!("CWE-{} has {n} vulnerable cases", cat.cwe()))?;
    }
    // the unchecked run must exhibit exactly the bug the case is labelled with
    if let Some(c) = cases.iter().find(|c| !ground_truth_agrees(c)) {
        return Err(format!("{} disagrees with allocator ground truth", c.id));
    }
    let mut by_mode: BTreeMap<String, Vec<Verdict>> = BTreeMap::new();
    for cfg in LabConfig::all_variants(1, true) {
        let s = run_corpus(&cases, &cfg);
        if let Some(m) = s.mismatches.first() {
            return Err(format!("{} under {}: expected {:?}, got {:?}", m.id, cfg.label(), m.expected, m.verdict));
        }
        for st in s.per_category.values() {
            ensure(st.detection_rate() == 1.0 && st.false_positive_rate() == 0.0, || {
                format!("{}: {st:?}", cfg.label())
            })?;
        }
        let verdicts: Vec<Verdict> = s.outcomes.into_iter().map(|o| o.verdict).collect();
        let key = format!("{:?}", cfg.ac_function);
        match by_mode.get(&key) {
            Some(prev) => ensure(prev == &verdicts, || format!("{key}: verdicts differ between PAC modes"))?,
            None => {
                by_mode.insert(key, verdicts);
            }
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!("150/150 detected, 0/150 false positives under 4 configs in {:.2}s", elapsed.as_secs_f64()))
}

fn robustness() -> Gate {
    let cases = gen_robustness(1, 30);
    let attacks = cases.iter().filter(|c| c.attack).count();
    ensure(attacks == 30 && cases.len() == 60, || format!("{attacks} attacks in {} cases", cases.len()))?;
    for cat in Category::ALL {
        ensure(cases.iter().any(|c| c.attack && c.category == cat), || format!("no attack for CWE-{}", cat.cwe()))?;
    }
    for cfg in LabConfig::all_variants(1, true) {
        let s = run_robustness(1, 30, &cfg);
        if let Some(f) = s.failures.first() {
            return Err(format!(
                "{} under {}: {:?} (ground truth ok: {})",
                f.id,
                cfg.label(),
                f.verdict,
                f.ground_truth_ok
            ));
        }
        ensure(s.detected == 30 && s.attacks == 30, || {
            format!("{}: {}/{} detected", cfg.label(), s.detected, s.attacks)
        })?;
        ensure(s.clean == 30 && s.false_positives == 0, || {
            format!("{}: {} false positives", cfg.label(), s.false_positives)
        })?;
    }
    Ok("30/30 attacks detected, 0/30 false positives under 4 configs".into())
}

fn optimization_soundness() -> Gate {
    let cfg = InterpConfig::default();
    let mut programs: Vec<(String, _)> =
        gen_corpus(1, [50, 50, 50]).into_iter().map(|c| (c.id.clone(), parse_program(&c.source).unwrap())).collect();
    programs.extend((0..1000).map(|s| (format!("random-{s}"), random_program(s, &RandomConfig::default()))));
    let mut elided_programs = 0;
    for (id, p) in &programs {
        let a = verdict_equivalence_audit(p, &cfg).map_err(|e| e.to_string())?;
        ensure(a.passed(), || format!("{id}: {}", a.mismatches.join("; ")))?;
        if a.elided_hits > 0 {
            elided_programs += 1;
            ensure(a.optimized.checks < a.unoptimized.checks, || format!("{id}: elided sites but no fewer checks"))?;
        }
    }
    ensure(elided_programs > 0, || "nothing was elided".into())?;
    Ok(format!("{} programs equivalent, {elided_programs} with strictly fewer checks", programs.len()))
}

fn backward_search_oracle() -> Gate {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut total_steps = 0u64;
    let trials = 10_000;
    let per_runtime = 100;
    for batch in 0..trials / per_runtime {
        let mut rt = Runtime::new(RuntimeConfig { seed: batch as u64, ..RuntimeConfig::default() }).unwrap();
        let mut live: Vec<SignedPointer> = Vec::new();
        for _ in 0..per_runtime {
            // churn the heap so objects land on reused regions
            if !live.is_empty() && rng.gen_bool(0.5) {
                let victim = live.swap_remove(rng.gen_range(0..live.len()));
                rt.pt_free(victim);
            }
            let size = rng.gen_range(1..=1024u64);
            let sp = rt.pt_malloc(size).map_err(|e| e.to_string())?;
            live.push(sp);
            let base = sp.address().0;
            let target = base + rng.gen_range(0..size);
            // every 16-aligned address above the base and at or below the target
            let expected = (base + 1..=target).filter(|a| a % 16 == 0).count() as u64;
            let report = rt.pt_check(sp.with_address(RawAddress(target)));
            ensure(report.outcome == CheckOutcome::OkAt(RawAddress(base)), || {
                format!("size {size} offset {}: {:?}", target - base, report.outcome)
            })?;
            ensure(report.backward_steps == expected, || {
                format!("size {size} offset {}: {} steps, oracle {expected}", target - base, report.backward_steps)
            })?;
            total_steps += expected;
        }
    }
    Ok(format!("{trials} pairs, 0 mismatches, {total_steps} steps total"))
}

fn pac_properties() -> Gate {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let trials = 10_000u32;
    for mode in [PacMode::V83Poison, PacMode::V86Fault] {
        for function in [AcFunction::XorFold, AcFunction::KeyedMixer] {
            let engine = PacEngine::new(rng.gen(), KeySlot::Ia, function, mode);
            for _ in 0..trials / 10 {
                let addr = RawAddress(rng.gen::<u64>() & ((1 << 48) - 1));
                let modifier: u64 = rng.gen();
                let sp = engine.sign(addr, modifier).map_err(|e| e.to_string())?;
                ensure(engine.auth(sp, modifier) == AuthResult::Ok(addr), || format!("{addr} did not round-trip"))?;
                for bit in 0..16 {
                    let tampered = SignedPointer(sp.0 ^ (1 << (48 + bit)));
                    let r = engine.auth(tampered, modifier);
                    let delivered = match mode {
                        PacMode::V83Poison => matches!(r, AuthResult::Poisoned(_)),
                        PacMode::V86Fault => r == AuthResult::Fault,
                    };
                    ensure(delivered, || format!("{function:?}/{mode:?}: AC bit {bit} flip gave {r:?}"))?;
                }
            }
        }
    }
    let engine = PacEngine::new(rng.gen(), KeySlot::Ia, AcFunction::KeyedMixer, PacMode::V83Poison);
    let mut collisions = 0u32;
    for _ in 0..trials {
        let addr = RawAddress(rng.gen::<u64>() & ((1 << 48) - 1));
        let (m1, m2): (u64, u64) = (rng.gen(), rng.gen());
        if m1 != m2 && engine.ac(addr, m1) == engine.ac(addr, m2) {
            collisions += 1;
        }
    }
    let p = 1.0 / 65536.0;
    let bound = p + 3.0 * (p * (1.0 - p) / trials as f64).sqrt();
    let rate = collisions as f64 / trials as f64;
    ensure(rate <= bound, || format!("collision rate {rate} above {bound}"))?;
    Ok(format!("round trip and 16-bit tamper ok; {collisions}/{trials} modifier collisions (bound {bound:.2e})"))
}

fn granule(n: u64) -> u64 {
    n.div_ceil(32) * 32
}

/// Peak-byte ratio of a heap of equally many objects of each size, with and
/// without an 8-byte inline header.
fn expected_mem_ratio(sizes: &[u64]) -> f64 {
    let checked: u64 = sizes.iter().map(|&s| granule(s + 8)).sum();
    let raw: u64 = sizes.iter().map(|&s| granule(s)).sum();
    checked as f64 / raw as f64
}

fn find<'a>(results: &'a [BenchResult], program: &str, mode: CostMode, optimize: bool) -> &'a BenchResult {
    results.iter().find(|r| r.program == program && r.mode == mode && r.optimize == optimize).unwrap()
}

fn memory_overhead(results: &[BenchResult]) -> Gate {
    let absorbed = MIXED_SIZES.iter().filter(|&&s| granule(s) - s >= 8).count();
    ensure(2 * absorbed >= MIXED_SIZES.len(), || format!("only {absorbed} sizes absorb the header"))?;
    let mixed = find(results, "alloc_mixed", CostMode::Software, true);
    let small = find(results, "alloc16", CostMode::Software, true);
    let aligned = find(results, "aligned32", CostMode::Software, true);
    ensure(mixed.mem_ratio == expected_mem_ratio(&MIXED_SIZES), || format!("alloc_mixed ratio {}", mixed.mem_ratio))?;
    ensure(mixed.mem_ratio <= 1.10, || format!("alloc_mixed ratio {} > 1.10", mixed.mem_ratio))?;
    ensure(small.mem_ratio == 1.0 && small.peak_raw == small.peak_checked, || {
        format!("alloc16 ratio {}", small.mem_ratio)
    })?;
    ensure(aligned.mem_ratio == expected_mem_ratio(&[128]) && aligned.mem_ratio <= 1.25, || {
        format!("aligned32 ratio {}", aligned.mem_ratio)
    })?;
    Ok(format!(
        "alloc_mixed {:.4} ({absorbed}/{} sizes absorbed), alloc16 {:.2}, aligned32 {:.2}",
        mixed.mem_ratio,
        MIXED_SIZES.len(),
        small.mem_ratio,
        aligned.mem_ratio
    ))
}

fn overhead_reporting(results: &[BenchResult]) -> Gate {
    for r in results {
        ensure(r.reps == 10 && r.stddev == 0.0, || format!("{} {:?}: stddev {}", r.program, r.mode, r.stddev))?;
        ensure(r.overhead_min <= r.overhead_ratio && r.overhead_ratio <= r.overhead_max, || {
            format!("{}: mean outside [min, max]", r.program)
        })?;
    }
    let mut elidable = 0;
    let mut check_heavy = 0;
    let programs: BTreeSet<&str> = results.iter().map(|r| r.program.as_str()).collect();
    for prog in programs {
        for mode in [CostMode::Software, CostMode::Pac4] {
            let (off, on) = (find(results, prog, mode, false), find(results, prog, mode, true));
            if on.elided_sites > 0 {
                elidable += 1;
                ensure(on.overhead_ratio < off.overhead_ratio, || {
                    format!("{prog} {mode:?}: optimized {} not below {}", on.overhead_ratio, off.overhead_ratio)
                })?;
            }
        }
        for optimize in [false, true] {
            let (sw, hw) =
                (find(results, prog, CostMode::Software, optimize), find(results, prog, CostMode::Pac4, optimize));
            if sw.checks > 0 {
                check_heavy += 1;
                ensure(hw.overhead_ratio < sw.overhead_ratio, || {
                    format!(
                        "{prog} opt={optimize}: pac4 {} not below software {}",
                        hw.overhead_ratio, sw.overhead_ratio
                    )
                })?;
            }
        }
    }
    ensure(elidable > 0 && check_heavy > 0, || "suite has nothing to compare".into())?;
    Ok(format!(
        "{} rows with stddev 0; optimize wins on {elidable} elidable rows, pac4 wins on {check_heavy} checked rows",
        results.len()
    ))
}

fn free_discipline() -> Gate {
    let cases = gen_corpus(1, [50, 50, 50]);
    let mut frees = 0;
    for optimize in [false, true] {
        for cfg in LabConfig::all_variants(1, optimize) {
            let s = run_corpus(&cases, &cfg);
            if let Some(o) = s.outcomes.iter().find(|o| o.free_backward_steps != 0) {
                return Err(format!(
                    "{} under {}: free walked back {} steps",
                    o.id,
                    cfg.label(),
                    o.free_backward_steps
                ));
            }
            frees += s.frees;
        }
    }
    ensure(frees > 0, || "corpus executed no frees".into())?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut rt = Runtime::new(RuntimeConfig::default()).unwrap();
    let mut mid = 0;
    for _ in 0..200 {
        let size = rng.gen_range(2..=512u64);
        let sp = rt.pt_malloc(size).map_err(|e| e.to_string())?;
        let base = sp.address();
        for off in [1, rng.gen_range(1..size), size - 1] {
            let r = rt.pt_free(sp.with_address(RawAddress(base.0 + off)));
            ensure(r.outcome == CheckOutcome::InvalidFree && r.backward_steps == 0, || {
                format!("free at +{off} of {size}: {:?}, {} steps", r.outcome, r.backward_steps)
            })?;
            mid += 1;
        }
        // the object survives the rejected frees
        ensure(rt.pt_check(sp).outcome == CheckOutcome::OkAt(base), || format!("object of {size} lost"))?;
        ensure(rt.pt_free(sp).outcome == CheckOutcome::OkAt(base), || format!("base free of {size} failed"))?;
    }
    ensure(rt.stats().free_backward_steps == 0, || "runtime counted free backward steps".into())?;
    Ok(format!("{frees} corpus frees with 0 backward steps; {mid} mid-object frees rejected as invalid"))
}

fn main() -> ExitCode {
    let bench = run_bench(&suite("default").unwrap(), 10).expect("bench suite runs");
    let gates: Vec<(&str, GateFn)> = vec![
        ("detection accuracy", Box::new(detection_accuracy)),
        ("robustness", Box::new(robustness)),
        ("optimization soundness", Box::new(optimization_soundness)),
        ("backward-search oracle", Box::new(backward_search_oracle)),
        ("pac primitive properties", Box::new(pac_properties)),
        ("memory overhead", Box::new(|| memory_overhead(&bench))),
        ("runtime-overhead reporting", Box::new(|| overhead_reporting(&bench))),
        ("free-path discipline", Box::new(free_discipline)),
    ];
    let mut failed = 0;
    for (i, (name, gate)) in gates.iter().enumerate() {
        match gate() {
            Ok(detail) => println!("PASS {}. {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {}. {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {}/{} criteria passed", gates.len() - failed, gates.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
