//! Seeded random program generator.
//!
//! Programs always parse and terminate. They allocate, walk, alias, store
//! pointers into memory, call helpers and externals, and loop. A fraction of
//! them are buggy on purpose (`bug_rate`): stale aliases survive a free, or a
//! walked pointer gets freed.

use std::fmt::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{parse_program, Program};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomConfig {
    pub helpers: usize,
    /// Top-level statements in `main`.
    pub statements: usize,
    /// Probability that a free leaves stale aliases behind.
    pub bug_rate: f64,
}

impl Default for RandomConfig {
    fn default() -> Self {
        RandomConfig { helpers: 2, statements: 24, bug_rate: 0.15 }
    }
}

#[derive(Debug, Clone)]
struct PtrVar {
    name: String,
    object: usize,
    size: u64,
    offset: u64,
}

struct Gen {
    rng: ChaCha8Rng,
    out: String,
    next: usize,
    objects: usize,
    ptrs: Vec<PtrVar>,
    /// Registers usable as store values or call results (ints or pointers).
    values: Vec<String>,
    /// Helpers as (name, frees_argument).
    helpers: Vec<(String, bool)>,
    bug_rate: f64,
    depth: usize,
}

impl Gen {
    fn fresh(&mut self, prefix: &str) -> String {
        self.next += 1;
        format!("{prefix}{}", self.next)
    }

    fn line(&mut self, s: &str) {
        self.out.push_str("  ");
        self.out.push_str(s);
        self.out.push('\n');
    }

    fn size(&mut self) -> u64 {
        *[16u64, 24, 32, 40, 48, 64, 96, 128, 200, 256].choose(&mut self.rng).expect("non-empty")
    }

    fn alloc(&mut self) {
        let name = self.fresh("p");
        let size = self.size();
        self.line(&format!("{name} = alloc {size}"));
        self.ptrs.push(PtrVar { name, object: self.objects, size, offset: 0 });
        self.objects += 1;
    }

    fn pick_ptr(&mut self) -> Option<PtrVar> {
        self.ptrs.choose(&mut self.rng).cloned()
    }

    /// A word offset relative to `p` that stays inside its object.
    fn word_offset(&mut self, p: &PtrVar) -> Option<i64> {
        let room = p.size.checked_sub(p.offset + 8)?;
        Some(8 * self.rng.gen_range(0..=room / 8) as i64)
    }

    fn value(&mut self) -> String {
        if !self.values.is_empty() && self.rng.gen_bool(0.5) {
            return self.values.choose(&mut self.rng).expect("non-empty").clone();
        }
        let name = self.fresh("k");
        let v = self.rng.gen_range(-1000..1000);
        self.line(&format!("{name} = const {v}"));
        self.values.push(name.clone());
        name
    }

    fn drop_object(&mut self, object: usize, keep_stale: bool) {
        if keep_stale {
            // only the register that was freed disappears
            return;
        }
        self.ptrs.retain(|p| p.object != object);
    }

    fn free(&mut self, via_extern: bool) {
        let Some(p) = self.pick_ptr() else { return };
        let buggy = self.rng.gen_bool(self.bug_rate);
        if p.offset != 0 && !buggy {
            return;
        }
        if via_extern {
            self.line(&format!("extcall opaque_free({})", p.name));
        } else {
            self.line(&format!("free {}", p.name));
        }
        self.ptrs.retain(|q| q.name != p.name);
        self.drop_object(p.object, buggy);
    }

    fn statement(&mut self, frees_allowed: bool) {
        if self.ptrs.is_empty() {
            self.alloc();
            return;
        }
        match self.rng.gen_range(0..100) {
            0..=11 => self.alloc(),
            12..=27 => {
                let p = self.pick_ptr().expect("non-empty");
                if let Some(off) = self.word_offset(&p) {
                    let v = self.value();
                    self.line(&format!("store [{} + {off}], {v}", p.name));
                }
            }
            28..=41 => {
                let p = self.pick_ptr().expect("non-empty");
                if let Some(off) = self.word_offset(&p) {
                    let v = self.fresh("v");
                    self.line(&format!("{v} = load [{} + {off}]", p.name));
                    self.values.push(v);
                }
            }
            42..=49 => {
                let p = self.pick_ptr().expect("non-empty");
                let room = p.size - p.offset;
                if room > 8 {
                    let step = if self.rng.gen_bool(0.5) { 8 } else { 16 };
                    let d = step * self.rng.gen_range(0..=(room - 8) / step);
                    let q = self.fresh("q");
                    self.line(&format!("{q} = ptradd {}, {d}", p.name));
                    self.ptrs.push(PtrVar { name: q, offset: p.offset + d, ..p });
                }
            }
            50..=54 => {
                let p = self.pick_ptr().expect("non-empty");
                let q = self.fresh("c");
                self.line(&format!("{q} = copy {}", p.name));
                self.ptrs.push(PtrVar { name: q, ..p });
            }
            55..=61 => {
                // spill a pointer into memory and reload it
                let holder = self.pick_ptr().expect("non-empty");
                let p = self.pick_ptr().expect("non-empty");
                if let Some(off) = self.word_offset(&holder) {
                    let r = self.fresh("r");
                    self.line(&format!("store [{} + {off}], {}", holder.name, p.name));
                    self.line(&format!("{r} = load [{} + {off}]", holder.name));
                    self.ptrs.push(PtrVar { name: r, ..p });
                }
            }
            62..=67 if frees_allowed => self.free(false),
            68..=70 if frees_allowed => self.free(true),
            71..=74 if frees_allowed => {
                let p = self.pick_ptr().expect("non-empty");
                if p.offset == 0 || self.rng.gen_bool(self.bug_rate) {
                    let size = self.size();
                    let n = self.fresh("p");
                    self.line(&format!("{n} = realloc {}, {size}", p.name));
                    self.ptrs.retain(|q| q.name != p.name);
                    let stale = self.rng.gen_bool(self.bug_rate);
                    self.drop_object(p.object, stale);
                    self.ptrs.push(PtrVar { name: n, object: self.objects, size, offset: 0 });
                    self.objects += 1;
                }
            }
            75..=80 if !self.helpers.is_empty() => {
                let (h, frees) = self.helpers.choose(&mut self.rng).expect("non-empty").clone();
                if frees && !frees_allowed {
                    return;
                }
                let p = self.pick_ptr().expect("non-empty");
                if p.size - p.offset < 16 || (frees && p.offset != 0) {
                    return;
                }
                self.line(&format!("call {h}({})", p.name));
                if frees {
                    self.ptrs.retain(|q| q.name != p.name);
                    let stale = self.rng.gen_bool(self.bug_rate);
                    self.drop_object(p.object, stale);
                }
            }
            81..=84 => {
                let p = self.pick_ptr().expect("non-empty");
                self.line(&format!("extcall print_str({})", p.name));
            }
            85..=87 => {
                let d = self.pick_ptr().expect("non-empty");
                let s = self.pick_ptr().expect("non-empty");
                if d.object != s.object {
                    let n = (d.size - d.offset).min(s.size - s.offset).min(32);
                    let k = self.fresh("k");
                    self.line(&format!("{k} = const {n}"));
                    self.line(&format!("extcall mem_copy({}, {}, {k})", d.name, s.name));
                }
            }
            88..=89 => {
                let p = self.pick_ptr().expect("non-empty");
                let k = self.fresh("o");
                self.line(&format!("{k} = extcall opaque_keep({})", p.name));
                self.values.push(k);
            }
            90..=92 => {
                let g = self.fresh("g");
                let v = self.value();
                self.line(&format!("{g} = globaddr scratch"));
                let off = 8 * self.rng.gen_range(0..4);
                self.line(&format!("store [{g} + {off}], {v}"));
            }
            93..=96 if self.depth < 2 => self.count_loop(),
            97..=99 if self.depth < 2 => self.branch(),
            _ => {
                let k = self.fresh("k");
                let n = self.fresh("n");
                let v = self.rng.gen_range(0..100);
                self.line(&format!("{k} = const {v}"));
                self.line(&format!("{n} = add {k}, 1"));
                self.values.push(n);
            }
        }
    }

    fn count_loop(&mut self) {
        let i = self.fresh("i");
        let c = self.fresh("t");
        let top = self.fresh("loop");
        let done = self.fresh("done");
        let n = self.rng.gen_range(2..6);
        self.line(&format!("{i} = const 0"));
        self.out.push_str(&format!("{top}:\n"));
        self.depth += 1;
        let saved = self.ptrs.clone();
        let body = self.rng.gen_range(2..6);
        let allocate_inside = self.rng.gen_bool(0.4);
        if allocate_inside {
            // allocate and release within one iteration
            let name = self.fresh("p");
            let size = self.size();
            self.line(&format!("{name} = alloc {size}"));
            self.ptrs.push(PtrVar { name: name.clone(), object: self.objects, size, offset: 0 });
            self.objects += 1;
            for _ in 0..body {
                self.statement(false);
            }
            self.line(&format!("free {name}"));
        } else {
            for _ in 0..body {
                self.statement(false);
            }
        }
        self.ptrs = saved;
        self.depth -= 1;
        self.line(&format!("{i} = add {i}, 1"));
        self.line(&format!("{c} = cmp {i}, {n}"));
        self.line(&format!("cbr {c}, {top}, {done}"));
        self.out.push_str(&format!("{done}:\n"));
    }

    fn branch(&mut self) {
        let k = self.fresh("k");
        let c = self.fresh("t");
        let (yes, no, join) = (self.fresh("then"), self.fresh("else"), self.fresh("join"));
        let v = self.rng.gen_range(0..4);
        self.line(&format!("{k} = const {v}"));
        self.line(&format!("{c} = cmp {k}, 2"));
        self.line(&format!("cbr {c}, {yes}, {no}"));
        self.depth += 1;
        let saved = (self.ptrs.clone(), self.values.clone());
        let buggy = self.rng.gen_bool(self.bug_rate);
        for label in [&yes, &no] {
            self.out.push_str(&format!("{label}:\n"));
            for _ in 0..self.rng.gen_range(1..4) {
                self.statement(buggy);
            }
            (self.ptrs, self.values) = saved.clone();
            self.line(&format!("br {join}"));
        }
        self.depth -= 1;
        self.out.push_str(&format!("{join}:\n"));
    }

    fn helper(&mut self, name: &str, frees: bool) {
        writeln!(self.out, "fn {name}(a) {{").expect("string write");
        let saved = (std::mem::take(&mut self.ptrs), std::mem::take(&mut self.values));
        self.ptrs.push(PtrVar { name: "a".into(), object: usize::MAX, size: 16, offset: 0 });
        for _ in 0..self.rng.gen_range(1..5) {
            self.statement(false);
        }
        if frees {
            self.line("free a");
        }
        self.line("ret");
        self.out.push_str("}\n\n");
        (self.ptrs, self.values) = saved;
    }
}

/// Source text of a random program.
pub fn random_source(seed: u64, config: &RandomConfig) -> String {
    let mut g = Gen {
        rng: ChaCha8Rng::seed_from_u64(seed),
        out: String::from("global scratch 32\n\n"),
        next: 0,
        objects: 0,
        ptrs: Vec::new(),
        values: Vec::new(),
        helpers: Vec::new(),
        bug_rate: config.bug_rate,
        depth: 0,
    };
    for h in 0..config.helpers {
        let frees = g.rng.gen_bool(0.3);
        let name = format!("helper{h}");
        g.helper(&name, frees);
        g.helpers.push((name, frees));
    }
    g.out.push_str("fn main() {\n");
    for _ in 0..config.statements {
        g.statement(true);
    }
    g.line("ret");
    g.out.push_str("}\n");
    g.out
}

pub fn random_program(seed: u64, config: &RandomConfig) -> Program {
    let src = random_source(seed, config);
    parse_program(&src).unwrap_or_else(|e| panic!("generator produced invalid program: {e}\n{src}"))
}
