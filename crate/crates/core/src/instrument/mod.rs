//! Check insertion.
//!
//! Every load, store and external-call argument gets a `check` of its
//! pointer register. With optimization on, a forward must-analysis finds
//! registers that provably hold a pointer to a live object (fresh from an
//! allocation, or already checked, with no possibly-freeing event since) and
//! global addresses, and their checks are elided.
//!
//! Frees are never elided and get no inserted check: the runtime free
//! authenticates on its own.

mod audit;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::ir::{Function, Instr, Program, Reg, WHITELIST};

pub use audit::{verdict_equivalence_audit, AuditReport, RunSummary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    Load,
    Store,
    ExtBoundary,
    Free,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElisionReason {
    /// Pointer is fresh from an allocation or an earlier check, with no
    /// intervening free, realloc or opaque call.
    SafeWindow,
    /// Address of a program global.
    Global,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckSite {
    pub function: String,
    /// Source instruction index.
    pub index: usize,
    /// Index of the inserted `check`, or of the free itself for free sites.
    pub instrumented_index: Option<usize>,
    pub kind: SiteKind,
    pub register: String,
    pub elided: bool,
    pub elision_reason: Option<ElisionReason>,
}

impl CheckSite {
    pub fn key(&self) -> String {
        crate::ir::site_key(&self.function, self.index, &self.register)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct InstrumentOptions {
    pub optimize: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instrumented {
    pub program: Program,
    pub sites: Vec<CheckSite>,
}

impl Instrumented {
    pub fn elided(&self) -> impl Iterator<Item = &CheckSite> {
        self.sites.iter().filter(|s| s.elided)
    }

    pub fn inserted_checks(&self) -> usize {
        self.sites.iter().filter(|s| s.kind != SiteKind::Free && !s.elided).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Origin {
    Alloc(usize),
    Checked(usize),
}

/// Abstract value of a register at a program point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Fact {
    /// Not reached or not yet defined.
    Undef,
    Scalar,
    Global,
    /// Points into a live object. Registers sharing an origin may alias.
    Fresh(Origin),
    Unknown,
}

impl Fact {
    fn meet(self, other: Fact) -> Fact {
        match (self, other) {
            (Fact::Undef, x) | (x, Fact::Undef) => x,
            (a, b) if a == b => a,
            _ => Fact::Unknown,
        }
    }
}

type State = Vec<Fact>;

fn kill_origin(state: &mut State, origin: Origin) {
    for f in state.iter_mut() {
        if *f == Fact::Fresh(origin) {
            *f = Fact::Unknown;
        }
    }
}

fn kill_checked(state: &mut State) {
    for f in state.iter_mut() {
        if matches!(f, Fact::Fresh(Origin::Checked(_))) {
            *f = Fact::Unknown;
        }
    }
}

/// A free through `r`: only its own allocation dies when it is a known
/// allocation, otherwise anything reached through memory may die.
fn kill_free(state: &mut State, r: Reg) {
    match state[r.index()] {
        Fact::Fresh(o @ Origin::Alloc(_)) => kill_origin(state, o),
        Fact::Fresh(o) => {
            kill_origin(state, o);
            kill_checked(state);
        }
        _ => kill_checked(state),
    }
}

fn escape(state: &mut State, r: Reg) {
    if let Fact::Fresh(o) = state[r.index()] {
        kill_origin(state, o);
    }
}

/// Registers an instruction dereferences, with the site kind.
pub fn deref_uses(ins: &Instr) -> Vec<(Reg, SiteKind)> {
    match ins {
        Instr::Load { addr, .. } => vec![(*addr, SiteKind::Load)],
        Instr::Store { addr, .. } => vec![(*addr, SiteKind::Store)],
        Instr::ExtCall { args, .. } => args.iter().map(|a| (*a, SiteKind::ExtBoundary)).collect(),
        _ => vec![],
    }
}

/// After a passing check the register points to a live object.
fn mark_checked(state: &mut State, r: Reg, i: usize) {
    if matches!(state[r.index()], Fact::Unknown | Fact::Undef) {
        state[r.index()] = Fact::Fresh(Origin::Checked(i));
    }
}

fn transfer(state: &mut State, i: usize, ins: &Instr) {
    for (r, _) in deref_uses(ins) {
        mark_checked(state, r, i);
    }
    match ins {
        Instr::Alloc { dst, .. } => state[dst.index()] = Fact::Fresh(Origin::Alloc(i)),
        Instr::Free { ptr } => kill_free(state, *ptr),
        Instr::Realloc { dst, ptr, .. } => {
            kill_free(state, *ptr);
            state[dst.index()] = Fact::Fresh(Origin::Alloc(i));
        }
        Instr::Load { dst, .. } => state[dst.index()] = Fact::Unknown,
        Instr::Store { value, .. } => escape(state, *value),
        Instr::PtrAdd { dst, ptr, .. } | Instr::Copy { dst, src: ptr } => state[dst.index()] = state[ptr.index()],
        Instr::GlobAddr { dst, .. } => state[dst.index()] = Fact::Global,
        Instr::Const { dst, .. } | Instr::Bin { dst, .. } => state[dst.index()] = Fact::Scalar,
        Instr::Call { dst, args, .. } => {
            for a in args {
                escape(state, *a);
            }
            kill_checked(state);
            if let Some(d) = dst {
                state[d.index()] = Fact::Unknown;
            }
        }
        Instr::ExtCall { dst, name, args } => {
            if !WHITELIST.contains(&name.as_str()) {
                for a in args {
                    escape(state, *a);
                }
                kill_checked(state);
            }
            if let Some(d) = dst {
                state[d.index()] = Fact::Unknown;
            }
        }
        Instr::Check { ptr } => mark_checked(state, *ptr, i),
        Instr::Br { .. } | Instr::CondBr { .. } | Instr::Ret { .. } => {}
    }
}

/// Facts holding before each instruction of `func`.
pub fn analyze(func: &Function) -> Vec<State> {
    let n = func.body.len();
    let width = func.regs.len();
    let mut entry = vec![Fact::Undef; width];
    for p in &func.params {
        entry[p.index()] = Fact::Unknown;
    }
    let mut before: Vec<Option<State>> = vec![None; n + 1];
    if n == 0 {
        return vec![];
    }
    before[0] = Some(entry);
    let mut work: Vec<usize> = vec![0];
    while let Some(i) = work.pop() {
        if i >= n {
            continue;
        }
        let mut out = before[i].clone().expect("queued states are set");
        transfer(&mut out, i, &func.body[i]);
        for s in func.successors(i) {
            let merged = match &before[s] {
                None => out.clone(),
                Some(old) => old.iter().zip(&out).map(|(a, b)| a.meet(*b)).collect(),
            };
            if before[s].as_ref() != Some(&merged) {
                before[s] = Some(merged);
                work.push(s);
            }
        }
    }
    // unreachable instructions: nothing is known
    before.into_iter().take(n).map(|s| s.unwrap_or_else(|| vec![Fact::Unknown; width])).collect()
}

fn elision(fact: Fact, optimize: bool) -> Option<ElisionReason> {
    if !optimize {
        return None;
    }
    match fact {
        Fact::Fresh(_) => Some(ElisionReason::SafeWindow),
        Fact::Global => Some(ElisionReason::Global),
        _ => None,
    }
}

fn instrument_function(func: &Function, options: InstrumentOptions, sites: &mut Vec<CheckSite>) -> Function {
    let facts = analyze(func);
    let mut body = Vec::with_capacity(func.body.len() * 2);
    let mut origin = Vec::with_capacity(func.body.len() * 2);
    let mut new_index = Vec::with_capacity(func.body.len() + 1);
    for (i, ins) in func.body.iter().enumerate() {
        new_index.push(body.len());
        // a check earlier in the same instruction covers a repeated register
        let mut state = facts[i].clone();
        for (r, kind) in deref_uses(ins) {
            let fact = state[r.index()];
            if fact == Fact::Scalar {
                continue;
            }
            let reason = elision(fact, options.optimize);
            let at = match reason {
                Some(_) => None,
                None => {
                    body.push(Instr::Check { ptr: r });
                    origin.push(i);
                    Some(body.len() - 1)
                }
            };
            sites.push(CheckSite {
                function: func.name.clone(),
                index: i,
                instrumented_index: at,
                kind,
                register: func.reg_name(r).to_string(),
                elided: reason.is_some(),
                elision_reason: reason,
            });
            mark_checked(&mut state, r, i);
        }
        if let Instr::Free { ptr } | Instr::Realloc { ptr, .. } = ins {
            sites.push(CheckSite {
                function: func.name.clone(),
                index: i,
                instrumented_index: Some(body.len()),
                kind: SiteKind::Free,
                register: func.reg_name(*ptr).to_string(),
                elided: false,
                elision_reason: None,
            });
        }
        body.push(ins.clone());
        origin.push(i);
    }
    new_index.push(body.len());
    Function {
        name: func.name.clone(),
        params: func.params.clone(),
        body,
        labels: func.labels.iter().map(|(l, at)| (l.clone(), new_index[*at])).collect(),
        regs: func.regs.clone(),
        origin,
    }
}

/// Inserts checks into every function of an uninstrumented program.
pub fn instrument(program: &Program, options: InstrumentOptions) -> Instrumented {
    let mut sites = Vec::new();
    let functions = program.functions.iter().map(|f| instrument_function(f, options, &mut sites)).collect();
    Instrumented {
        program: Program { globals: program.globals.clone(), functions, entry: program.entry.clone() },
        sites,
    }
}

/// Site counts per kind and elision state, for summaries.
pub fn site_summary(sites: &[CheckSite]) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for s in sites {
        let tag = match (s.elided, s.elision_reason) {
            (false, _) => "kept",
            (true, Some(ElisionReason::Global)) => "elided_global",
            (true, _) => "elided_safe_window",
        };
        *out.entry(format!("{:?}.{tag}", s.kind).to_lowercase()).or_default() += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::parse_program;

    fn sites_of(src: &str, optimize: bool) -> Vec<CheckSite> {
        instrument(&parse_program(src).unwrap(), InstrumentOptions { optimize }).sites
    }

    #[test]
    fn fresh_allocation_is_elided() {
        let src = "fn main {\n  p = alloc 16\n  store [p], p\n  v = load [p + 8]\n  ret\n}\n";
        let s = sites_of(src, true);
        assert_eq!(s.len(), 2);
        // storing p into memory is an escape, so the following load is kept
        assert!(s[0].elided);
        assert!(!s[1].elided);
        assert!(sites_of(src, false).iter().all(|s| !s.elided));
    }

    #[test]
    fn free_kills_window() {
        let src = "fn main {\n  p = alloc 16\n  q = copy p\n  free p\n  v = load [q]\n  ret\n}\n";
        let s = sites_of(src, true);
        let load = s.iter().find(|s| s.kind == SiteKind::Load).unwrap();
        assert!(!load.elided);
        assert_eq!(s.iter().filter(|s| s.kind == SiteKind::Free).count(), 1);
    }

    #[test]
    fn checked_window_survives_unrelated_allocation_free() {
        let src = "fn f(a) {\n  x = load [a]\n  t = alloc 32\n  free t\n  y = load [a + 8]\n  ret\n}\n\nfn main {\n  p = alloc 16\n  call f(p)\n  ret\n}\n";
        let s = sites_of(src, true);
        let loads: Vec<_> = s.iter().filter(|s| s.function == "f" && s.kind == SiteKind::Load).collect();
        assert!(!loads[0].elided);
        assert!(loads[1].elided);
    }

    #[test]
    fn unknown_free_kills_checked_windows() {
        let src = "fn f(a, b) {\n  x = load [a]\n  free b\n  y = load [a]\n  ret\n}\n\nfn main {\n  p = alloc 16\n  call f(p, p)\n  ret\n}\n";
        let s = sites_of(src, true);
        assert!(s.iter().filter(|s| s.kind == SiteKind::Load).all(|s| !s.elided));
    }

    #[test]
    fn calls_and_opaque_externals_kill() {
        let src = "fn g(a) {\n  ret\n}\n\nfn main {\n  p = alloc 16\n  call g(p)\n  v = load [p]\n  q = alloc 16\n  extcall opaque_keep(q)\n  w = load [q]\n  r = alloc 16\n  extcall print_str(r)\n  z = load [r]\n  ret\n}\n";
        let s = sites_of(src, true);
        let load = |reg: &str| s.iter().find(|s| s.kind == SiteKind::Load && s.register == reg).unwrap().elided;
        assert!(!load("p"));
        assert!(!load("q"));
        assert!(load("r"));
    }

    #[test]
    fn loop_join_is_conservative() {
        let src = "fn main {\n  p = alloc 16\n  i = const 0\ntop:\n  v = load [p]\n  i = add i, 1\n  c = cmp i, 3\n  cbr c, top, out\nout:\n  free p\n  ret\n}\n";
        let s = sites_of(src, true);
        // nothing frees p inside the loop
        assert!(s.iter().find(|s| s.kind == SiteKind::Load).unwrap().elided);
        let src2 = "fn main {\n  p = alloc 16\n  i = const 0\ntop:\n  v = load [p]\n  free p\n  i = add i, 1\n  c = cmp i, 3\n  cbr c, top, out\nout:\n  ret\n}\n";
        assert!(!sites_of(src2, true).iter().find(|s| s.kind == SiteKind::Load).unwrap().elided);
    }

    #[test]
    fn globals_elided_only_when_optimizing() {
        let src = "global g 16\n\nfn main {\n  a = globaddr g\n  v = load [a]\n  ret\n}\n";
        let s = sites_of(src, true);
        assert_eq!(s[0].elision_reason, Some(ElisionReason::Global));
        assert!(!sites_of(src, false)[0].elided);
    }

    #[test]
    fn labels_point_at_inserted_checks() {
        let src = "fn main(p) {\ntop:\n  v = load [p]\n  br top\n}\n";
        let out = instrument(&parse_program(src).unwrap(), InstrumentOptions { optimize: false });
        let f = &out.program.functions[0];
        assert_eq!(f.label("top"), Some(0));
        assert!(matches!(f.body[0], Instr::Check { .. }));
        assert_eq!(f.origin, vec![0, 0, 1]);
    }

    #[test]
    fn scalars_get_no_site() {
        let src = "fn main {\n  k = const 64\n  v = load [k]\n  ret\n}\n";
        assert!(sites_of(src, false).is_empty());
    }
}
