use std::collections::{BTreeMap, HashSet};

use ptauth_core::instrument::{instrument, verdict_equivalence_audit, ElisionReason, InstrumentOptions, SiteKind};
use ptauth_core::ir::random::{random_program, RandomConfig};
use ptauth_core::ir::{
    interpret, parse_instrumented, parse_program, ExecMode, Function, GroundTruthEvent, Instr, InterpConfig, Reg,
    Verdict, WHITELIST,
};

#[test]
fn audit_holds_on_random_programs() {
    let cfg = InterpConfig::default();
    let mut verdicts: BTreeMap<String, usize> = BTreeMap::new();
    let mut elided_runs = 0;
    for seed in 0..300 {
        let p = random_program(seed, &RandomConfig::default());
        let a = verdict_equivalence_audit(&p, &cfg).unwrap();
        assert!(a.passed(), "seed {seed}: {:?}", a.mismatches);
        let tag = match &a.unoptimized.verdict {
            Verdict::Violation { kind, .. } => format!("{kind:?}"),
            v => format!("{v:?}").split_whitespace().next().unwrap().to_string(),
        };
        *verdicts.entry(tag).or_default() += 1;
        if a.elided_hits > 0 {
            elided_runs += 1;
        }
    }
    // the generator exercises both clean runs and violations
    assert!(verdicts.get("Clean").copied().unwrap_or(0) > 50, "{verdicts:?}");
    assert!(verdicts.len() >= 3, "{verdicts:?}");
    assert!(elided_runs > 100);
}

#[test]
fn checked_runs_miss_nothing_the_raw_run_saw() {
    let cfg = InterpConfig::default();
    for seed in 0..200 {
        let p = random_program(seed, &RandomConfig { bug_rate: 0.4, ..Default::default() });
        let raw = interpret(&p, ExecMode::Raw, &cfg).unwrap();
        let inst = instrument(&p, InstrumentOptions { optimize: true });
        let chk = interpret(&inst.program, ExecMode::Checked, &cfg).unwrap();
        // a checked run may only report temporal ground truth it failed to stop
        // frees performed by uninstrumented code are out of reach
        let in_scope =
            |e: &&GroundTruthEvent| !matches!(p.function(&e.function).unwrap().body[e.index], Instr::ExtCall { .. });
        let missed: Vec<_> = chk.temporal_events().filter(in_scope).collect();
        assert!(missed.is_empty(), "seed {seed}: {missed:?}");
        let first = raw.temporal_events().find(in_scope).cloned();
        if let Some(first) = first {
            let Verdict::Violation { .. } = &chk.verdict else {
                panic!("seed {seed}: raw saw {first:?} but checked run gave {:?}", chk.verdict);
            };
            // detection happens no later than the first raw event
            assert!(chk.source_steps <= first.step, "seed {seed}");
        }
    }
}

#[test]
fn instrumented_text_round_trips() {
    for seed in 0..50 {
        let p = random_program(seed, &RandomConfig::default());
        let inst = instrument(&p, InstrumentOptions { optimize: seed % 2 == 0 });
        let text = inst.program.to_string();
        let back = parse_instrumented(&text).unwrap();
        let mut expect = inst.program.clone();
        // the origin table is not part of the text format
        for f in &mut expect.functions {
            f.origin.clear();
        }
        let mut got = back;
        for f in &mut got.functions {
            f.origin.clear();
        }
        assert_eq!(got, expect);
    }
}

#[test]
fn check_sites_serialize() {
    let p = parse_program("global g 8\n\nfn main {\n  a = alloc 16\n  b = globaddr g\n  v = load [a]\n  store [b], v\n  free a\n  ret\n}\n").unwrap();
    let sites = instrument(&p, InstrumentOptions { optimize: true }).sites;
    let json = serde_json::to_value(&sites).unwrap();
    assert_eq!(json[0]["kind"], "load");
    assert_eq!(json[0]["elision_reason"], "safe_window");
    assert_eq!(json[1]["elision_reason"], "global");
    assert_eq!(json[2]["kind"], "free");
    assert_eq!(json[2]["elided"], false);
}

// Path-enumeration oracle: walk every path of an acyclic function and keep,
// per register, which object it names. An elided register must name an
// object that was allocated or checked on that path and that nothing on the
// path could have freed since.

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
enum Obj {
    /// Allocated on this path, identified by position in the path.
    Local(usize),
    /// Reached through memory, a parameter or a call result.
    Foreign(usize),
    Global,
    Int,
}

#[derive(Clone, Default)]
struct PathState {
    regs: BTreeMap<Reg, Obj>,
    dead: HashSet<Obj>,
    escaped: HashSet<Obj>,
    /// Objects validated by a check and not invalidated since.
    validated: HashSet<Obj>,
    next: usize,
}

impl PathState {
    fn fresh(&mut self, local: bool) -> Obj {
        self.next += 1;
        if local {
            Obj::Local(self.next)
        } else {
            Obj::Foreign(self.next)
        }
    }

    fn get(&mut self, r: Reg) -> Obj {
        if let Some(o) = self.regs.get(&r) {
            return *o;
        }
        let o = self.fresh(false);
        self.regs.insert(r, o);
        o
    }

    fn safe(&self, o: Obj) -> bool {
        match o {
            Obj::Local(_) | Obj::Foreign(_) if self.dead.contains(&o) => false,
            Obj::Local(_) => self.validated.contains(&o) || !self.escaped.contains(&o),
            Obj::Foreign(_) => self.validated.contains(&o),
            Obj::Global => true,
            Obj::Int => false,
        }
    }

    /// Anything not provably private may be gone.
    fn opaque_free(&mut self) {
        self.validated.clear();
        let escaped: Vec<Obj> = self.escaped.iter().copied().collect();
        self.dead.extend(escaped);
    }

    fn free(&mut self, o: Obj) {
        match o {
            Obj::Local(_) if !self.escaped.contains(&o) => {
                self.dead.insert(o);
            }
            _ => {
                self.dead.insert(o);
                self.opaque_free();
            }
        }
    }
}

fn check_paths(func: &Function, elided: &HashSet<(usize, String)>, src: &str) -> usize {
    let mut paths = 0;
    let mut stack = vec![(0usize, PathState::default())];
    while let Some((i, mut st)) = stack.pop() {
        let Some(ins) = func.body.get(i) else {
            paths += 1;
            continue;
        };
        let derefs: Vec<Reg> = match ins {
            Instr::Load { addr, .. } | Instr::Store { addr, .. } => vec![*addr],
            Instr::ExtCall { args, .. } => args.clone(),
            _ => vec![],
        };
        for r in derefs {
            let o = st.get(r);
            if elided.contains(&(i, func.reg_name(r).to_string())) {
                assert!(st.safe(o), "{}:{i} elides {} but {o:?} may be dead\n{src}", func.name, func.reg_name(r));
            }
            // a failing check ends the path, so past this point o is live
            if let Obj::Local(_) | Obj::Foreign(_) = o {
                st.dead.remove(&o);
                st.validated.insert(o);
            }
        }
        match ins {
            Instr::Alloc { dst, .. } => {
                let o = st.fresh(true);
                st.regs.insert(*dst, o);
            }
            Instr::Free { ptr } => {
                let o = st.get(*ptr);
                st.free(o);
            }
            Instr::Realloc { dst, ptr, .. } => {
                let o = st.get(*ptr);
                st.free(o);
                let n = st.fresh(true);
                st.regs.insert(*dst, n);
            }
            Instr::Load { dst, .. } => {
                let o = st.fresh(false);
                st.regs.insert(*dst, o);
            }
            Instr::Store { value, .. } => {
                let o = st.get(*value);
                st.escaped.insert(o);
            }
            Instr::PtrAdd { dst, ptr, .. } | Instr::Copy { dst, src: ptr } => {
                let o = st.get(*ptr);
                st.regs.insert(*dst, o);
            }
            Instr::GlobAddr { dst, .. } => {
                st.regs.insert(*dst, Obj::Global);
            }
            Instr::Const { dst, .. } | Instr::Bin { dst, .. } => {
                st.regs.insert(*dst, Obj::Int);
            }
            Instr::Call { dst, args, .. } | Instr::ExtCall { dst, args, .. } => {
                let opaque = match ins {
                    Instr::ExtCall { name, .. } => !WHITELIST.contains(&name.as_str()),
                    _ => true,
                };
                if opaque {
                    for a in args {
                        let o = st.get(*a);
                        st.escaped.insert(o);
                    }
                    st.opaque_free();
                }
                if let Some(d) = dst {
                    let o = st.fresh(false);
                    st.regs.insert(*d, o);
                }
            }
            Instr::Check { .. } | Instr::Br { .. } | Instr::CondBr { .. } | Instr::Ret { .. } => {}
        }
        if matches!(ins, Instr::Ret { .. }) {
            paths += 1;
            continue;
        }
        for s in func.successors(i) {
            assert!(s > i, "oracle needs acyclic functions");
            stack.push((s, st.clone()));
        }
    }
    paths
}

fn acyclic_source(seed: u64) -> String {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let regs = ["a", "b", "c", "d"];
    let mut out = String::from(
        "global g 64\n\nfn opaque(x) {\n  free x\n  ret\n}\n\nfn main(a, b) {\n  c = alloc 32\n  d = globaddr g\n",
    );
    let blocks = rng.gen_range(2..5);
    for blk in 0..blocks {
        out.push_str(&format!("b{blk}:\n"));
        for _ in 0..rng.gen_range(2..7) {
            let r = regs[rng.gen_range(0..4)];
            let s = regs[rng.gen_range(0..4)];
            let line = match rng.gen_range(0..12) {
                0 | 1 => format!("v = load [{r}]"),
                2 => format!("store [{r} + 8], {s}"),
                3 => format!("store [{r}], {r}"),
                4 => format!("free {r}"),
                5 => format!("{r} = alloc 48"),
                6 => format!("{r} = copy {s}"),
                7 => format!("{r} = ptradd {s}, 16"),
                8 => format!("call opaque({r})"),
                9 => format!("extcall print_str({r})"),
                10 => format!("{r} = load [{s}]"),
                _ => format!("{r} = realloc {s}, 64"),
            };
            out.push_str(&format!("  {line}\n"));
        }
        if blk + 1 < blocks {
            let t = rng.gen_range(blk + 1..blocks);
            out.push_str(&format!("  k = const {}\n  cbr k, b{t}, b{}\n", rng.gen_range(0..2), blk + 1));
        }
    }
    out.push_str("  ret\n}\n");
    out
}

#[test]
fn elision_is_sound_on_every_path() {
    let mut elided_total = 0;
    let mut paths_total = 0;
    for seed in 0..500 {
        let src = acyclic_source(seed);
        let p = parse_program(&src).unwrap();
        let inst = instrument(&p, InstrumentOptions { optimize: true });
        for f in &p.functions {
            let elided: HashSet<(usize, String)> = inst
                .sites
                .iter()
                .filter(|s| s.function == f.name && s.elided)
                .map(|s| (s.index, s.register.clone()))
                .collect();
            elided_total += elided.len();
            paths_total += check_paths(f, &elided, &src);
        }
    }
    assert!(elided_total > 200, "oracle saw too few elisions: {elided_total}");
    assert!(paths_total > 1000);
}

#[test]
fn unoptimized_elides_nothing_and_frees_are_never_elided() {
    for seed in 0..100 {
        let p = random_program(seed, &RandomConfig::default());
        assert!(instrument(&p, InstrumentOptions { optimize: false }).sites.iter().all(|s| !s.elided));
        let opt = instrument(&p, InstrumentOptions { optimize: true });
        assert!(opt.sites.iter().filter(|s| s.kind == SiteKind::Free).all(|s| !s.elided));
        assert!(opt
            .elided()
            .all(|s| matches!(s.elision_reason, Some(ElisionReason::SafeWindow | ElisionReason::Global))));
    }
}
