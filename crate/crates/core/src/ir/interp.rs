//! Interpreter for the pointer IR.
//!
//! Raw mode runs the program over a header-less heap with no checks. Checked
//! mode routes allocation, deallocation and `check` through the
//! runtime and halts at the first violation, before the offending access.
//!
//! Both modes keep an allocator-level ground truth (which allocation each
//! pointer value came from, and whether it is still live). It never feeds a
//! detection decision; it only records what actually happened so runs can be
//! compared against an oracle. In checked mode an event is recorded only when
//! an access went through, so any temporal event there is a missed detection.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{BinOp, Function, Instr, Operand, Program, Reg};
use crate::memory::{round_up, HeaderLayout, HeapState, MemEvent, WriteOutcome, ALIGNMENT};
use crate::pac::{RawAddress, SignedPointer, ADDRESS_MASK};
use crate::runtime::{CheckOutcome, ConfigError, PtError, Runtime, RuntimeConfig, ViolationKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecMode {
    Raw,
    Checked,
}

/// Work units charged per runtime action on top of one unit per retired
/// instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    /// Entry and exit of a runtime hook.
    pub call_overhead: u64,
    /// One authentication code computation (sign or authenticate).
    pub ac_eval: u64,
    /// One header word read or write.
    pub header_access: u64,
    /// Drawing a fresh object ID.
    pub id_gen: u64,
    /// Stripping a pointer at a blackbox boundary.
    pub strip: u64,
    /// Charge every backward-search candidate; when false a check costs a
    /// single authentication regardless of how far the search walked.
    pub charge_backward_search: bool,
}

impl CostModel {
    /// Software AC: and, and, xor, shift, or.
    pub fn software() -> Self {
        CostModel { call_overhead: 2, ac_eval: 5, header_access: 1, id_gen: 2, strip: 1, charge_backward_search: true }
    }

    /// Hardware estimate: 4 units per PAC instruction, search not charged.
    pub fn pac4() -> Self {
        CostModel { ac_eval: 4, charge_backward_search: false, ..Self::software() }
    }
}

impl Default for CostModel {
    fn default() -> Self {
        Self::software()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterpConfig {
    pub runtime: RuntimeConfig,
    /// Instruction budget.
    pub fuel: u64,
    pub cost: CostModel,
    /// Record alloc/free events in the report.
    pub trace: bool,
}

impl Default for InterpConfig {
    fn default() -> Self {
        InterpConfig { runtime: RuntimeConfig::default(), fuel: 100_000_000, cost: CostModel::software(), trace: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FaultKind {
    TypeFault,
    UndefinedRegister,
    AllocFailure,
    StackOverflow,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Clean,
    /// `index` is the source instruction index, `step` the number of source
    /// instructions completed before it.
    Violation {
        kind: ViolationKind,
        function: String,
        index: usize,
        step: u64,
    },
    Fault {
        kind: FaultKind,
        function: String,
        index: usize,
        step: u64,
    },
    Timeout,
}

impl Verdict {
    pub fn violation(&self) -> Option<ViolationKind> {
        match self {
            Verdict::Violation { kind, .. } => Some(*kind),
            _ => None,
        }
    }

    pub fn is_clean(&self) -> bool {
        matches!(self, Verdict::Clean)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GroundTruthKind {
    UseAfterFree,
    DoubleFree,
    InvalidFree,
    UnmappedRead,
    WildWrite,
    CrossChunkWrite,
}

impl GroundTruthKind {
    pub fn is_temporal(self) -> bool {
        matches!(self, GroundTruthKind::UseAfterFree | GroundTruthKind::DoubleFree | GroundTruthKind::InvalidFree)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthEvent {
    pub kind: GroundTruthKind,
    pub function: String,
    pub index: usize,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: ExecMode,
    pub verdict: Verdict,
    /// IR instructions retired, including `check`.
    pub instructions: u64,
    /// Retired instructions excluding `check`.
    pub source_steps: u64,
    /// Instructions plus runtime work units.
    pub cost: u64,
    pub checks: u64,
    pub backward_steps: u64,
    pub backward_histogram: BTreeMap<u64, u64>,
    /// Work units spent inside checks, and the part of it spent past the
    /// first candidate.
    pub check_cost: u64,
    pub backward_cost: u64,
    pub frees: u64,
    pub free_backward_steps: u64,
    pub collisions: u64,
    pub masked_failures: u64,
    pub peak_bytes: u64,
    pub mean_bytes: f64,
    pub final_bytes: u64,
    /// Requested sizes of the chunks still live at exit, sorted.
    pub live_objects: Vec<u64>,
    pub ground_truth: Vec<GroundTruthEvent>,
    pub output: Vec<String>,
    pub return_value: Option<i64>,
    /// Pointer checks executed per `function:index:register` site.
    pub site_checks: BTreeMap<String, u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<MemEvent>,
}

impl RunReport {
    pub fn temporal_events(&self) -> impl Iterator<Item = &GroundTruthEvent> {
        self.ground_truth.iter().filter(|e| e.kind.is_temporal())
    }
}

pub fn site_key(function: &str, index: usize, register: &str) -> String {
    format!("{function}:{index}:{register}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Prov {
    Heap(u32),
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Value {
    Int(u64),
    Ptr { bits: u64, prov: Prov },
}

impl Value {
    fn bits(self) -> u64 {
        match self {
            Value::Int(v) => v,
            Value::Ptr { bits, .. } => bits,
        }
    }
}

struct Frame {
    func: usize,
    pc: usize,
    regs: Vec<Option<Value>>,
    ret_dst: Option<Reg>,
}

struct Object {
    base: u64,
    live: bool,
}

enum Machine {
    Raw(Box<HeapState>),
    Checked(Box<Runtime>),
}

impl Machine {
    fn heap(&mut self) -> &mut HeapState {
        match self {
            Machine::Raw(h) => h,
            Machine::Checked(r) => r.heap_mut(),
        }
    }

    fn heap_ref(&self) -> &HeapState {
        match self {
            Machine::Raw(h) => h,
            Machine::Checked(r) => r.heap(),
        }
    }
}

enum Flow {
    Next,
    Jump(usize),
    Call { func: usize, args: Vec<Value>, dst: Option<Reg> },
    Return(Option<Value>),
    Halt(Verdict),
}

const MAX_DEPTH: usize = 10_000;
const MAX_STRING: u64 = 4096;

pub fn interpret(program: &Program, mode: ExecMode, config: &InterpConfig) -> Result<RunReport, ConfigError> {
    config.runtime.validate()?;
    let mut m = match mode {
        ExecMode::Raw => Machine::Raw(Box::new(HeapState::with_limit(HeaderLayout::None, config.runtime.heap_limit))),
        ExecMode::Checked => Machine::Checked(Box::new(Runtime::new(config.runtime)?)),
    };
    if config.trace {
        m.heap().enable_trace();
    }
    let globals = program.globals.iter().map(|g| (g.name.clone(), m.heap().map_global(g.size).0)).collect();
    let mut it = Interp {
        program,
        mode,
        config,
        m,
        globals,
        objects: Vec::new(),
        live_by_base: HashMap::new(),
        ptr_words: BTreeMap::new(),
        kept: None,
        stack: Vec::new(),
        instructions: 0,
        source_steps: 0,
        cost: 0,
        checks: 0,
        check_cost: 0,
        backward_cost: 0,
        ground_truth: Vec::new(),
        output: Vec::new(),
        site_checks: BTreeMap::new(),
        events_seen: 0,
    };
    let (verdict, ret) = it.run();
    Ok(it.finish(verdict, ret))
}

struct Interp<'p> {
    program: &'p Program,
    mode: ExecMode,
    config: &'p InterpConfig,
    m: Machine,
    globals: HashMap<String, u64>,
    objects: Vec<Object>,
    live_by_base: HashMap<u64, u32>,
    /// Addresses holding a pointer-typed word, with its provenance.
    ptr_words: BTreeMap<u64, Prov>,
    kept: Option<(u64, Prov)>,
    stack: Vec<Frame>,
    instructions: u64,
    source_steps: u64,
    cost: u64,
    checks: u64,
    check_cost: u64,
    backward_cost: u64,
    ground_truth: Vec<GroundTruthEvent>,
    output: Vec<String>,
    site_checks: BTreeMap<String, u64>,
    events_seen: usize,
}

impl<'p> Interp<'p> {
    fn run(&mut self) -> (Verdict, Option<Value>) {
        let program = self.program;
        let Some(entry) = program.function_index(&program.entry) else {
            return (
                Verdict::Fault {
                    kind: FaultKind::UndefinedRegister,
                    function: program.entry.clone(),
                    index: 0,
                    step: 0,
                },
                None,
            );
        };
        let nregs = program.functions[entry].regs.len();
        self.stack.push(Frame { func: entry, pc: 0, regs: vec![None; nregs], ret_dst: None });
        let interval = self.config.runtime.sample_interval;
        loop {
            let frame = self.stack.last().expect("non-empty stack");
            let func = &program.functions[frame.func];
            let pc = frame.pc;
            let flow = if pc >= func.body.len() {
                Flow::Return(None)
            } else {
                if self.instructions >= self.config.fuel {
                    return (Verdict::Timeout, None);
                }
                self.instructions += 1;
                self.cost += 1;
                let ins = &func.body[pc];
                let flow = self.step(func, pc, ins);
                if !matches!(ins, Instr::Check { .. }) && !matches!(flow, Flow::Halt(_)) {
                    self.source_steps += 1;
                    if self.source_steps.is_multiple_of(interval) {
                        self.m.heap().sample();
                    }
                }
                self.drain_heap_events(func, pc);
                flow
            };
            match flow {
                Flow::Next => self.stack.last_mut().expect("frame").pc += 1,
                Flow::Jump(t) => self.stack.last_mut().expect("frame").pc = t,
                Flow::Call { func: callee, args, dst } => {
                    if self.stack.len() >= MAX_DEPTH {
                        return (self.fault(func, pc, FaultKind::StackOverflow), None);
                    }
                    self.stack.last_mut().expect("frame").pc += 1;
                    let target = &program.functions[callee];
                    let mut regs = vec![None; target.regs.len()];
                    for (p, v) in target.params.iter().zip(args) {
                        regs[p.index()] = Some(v);
                    }
                    self.stack.push(Frame { func: callee, pc: 0, regs, ret_dst: dst });
                }
                Flow::Return(v) => {
                    let done = self.stack.pop().expect("frame");
                    match self.stack.last_mut() {
                        None => return (Verdict::Clean, v),
                        Some(caller) => {
                            if let Some(d) = done.ret_dst {
                                caller.regs[d.index()] = Some(v.unwrap_or(Value::Int(0)));
                            }
                        }
                    }
                }
                Flow::Halt(v) => return (v, None),
            }
        }
    }

    fn finish(mut self, verdict: Verdict, ret: Option<Value>) -> RunReport {
        let usage = self.m.heap().usage_stats();
        let mut live_objects: Vec<u64> = self.m.heap_ref().live_chunks().map(|c| c.requested_size).collect();
        live_objects.sort_unstable();
        let (stats, trace) = match &self.m {
            Machine::Raw(h) => (Default::default(), h.events().to_vec()),
            Machine::Checked(r) => (r.stats().clone(), r.heap().events().to_vec()),
        };
        let trace = if self.config.trace { trace } else { Vec::new() };
        RunReport {
            mode: self.mode,
            verdict,
            instructions: self.instructions,
            source_steps: self.source_steps,
            cost: self.cost,
            checks: self.checks,
            backward_steps: stats.backward_steps,
            backward_histogram: stats.backward_histogram,
            check_cost: self.check_cost,
            backward_cost: self.backward_cost,
            frees: stats.frees,
            free_backward_steps: stats.free_backward_steps,
            collisions: stats.collisions,
            masked_failures: stats.masked_failures,
            peak_bytes: usage.peak,
            mean_bytes: usage.mean_sampled,
            final_bytes: usage.current,
            live_objects,
            ground_truth: self.ground_truth,
            output: self.output,
            return_value: match ret {
                Some(Value::Int(v)) => Some(v as i64),
                _ => None,
            },
            site_checks: self.site_checks,
            trace,
        }
    }

    fn frame(&mut self) -> &mut Frame {
        self.stack.last_mut().expect("frame")
    }

    fn get(&self, r: Reg) -> Option<Value> {
        self.stack.last().expect("frame").regs[r.index()]
    }

    fn set(&mut self, r: Reg, v: Value) {
        self.frame().regs[r.index()] = Some(v);
    }

    fn site(&self, func: &Function, pc: usize) -> (String, usize, u64) {
        (func.name.clone(), func.source_index(pc), self.source_steps)
    }

    fn fault(&self, func: &Function, pc: usize, kind: FaultKind) -> Verdict {
        let (function, index, step) = self.site(func, pc);
        Verdict::Fault { kind, function, index, step }
    }

    fn violation(&self, func: &Function, pc: usize, kind: ViolationKind) -> Verdict {
        let (function, index, step) = self.site(func, pc);
        Verdict::Violation { kind, function, index, step }
    }

    fn record(&mut self, func: &Function, pc: usize, kind: GroundTruthKind) {
        let (function, index, step) = self.site(func, pc);
        self.ground_truth.push(GroundTruthEvent { kind, function, index, step });
    }

    /// Converts wild/cross-chunk/unmapped events logged by the heap during
    /// the last instruction into ground-truth entries.
    fn drain_heap_events(&mut self, func: &Function, pc: usize) {
        let heap_events = self.m.heap_ref().events().len();
        if heap_events == self.events_seen {
            return;
        }
        let fresh: Vec<GroundTruthKind> = self.m.heap_ref().events()[self.events_seen..]
            .iter()
            .filter_map(|e| match e {
                MemEvent::WildWrite { .. } => Some(GroundTruthKind::WildWrite),
                MemEvent::CrossChunkWrite { .. } => Some(GroundTruthKind::CrossChunkWrite),
                MemEvent::UnmappedRead { .. } => Some(GroundTruthKind::UnmappedRead),
                _ => None,
            })
            .collect();
        self.events_seen = heap_events;
        for k in fresh {
            self.record(func, pc, k);
        }
    }

    fn operand(&self, o: &Operand) -> Option<Value> {
        match o {
            Operand::Imm(n) => Some(Value::Int(*n as u64)),
            Operand::Reg(r) => self.get(*r),
        }
    }

    fn new_object(&mut self, base: u64) -> Prov {
        let serial = self.objects.len() as u32;
        self.objects.push(Object { base, live: true });
        self.live_by_base.insert(base, serial);
        Prov::Heap(serial)
    }

    fn kill_object_at(&mut self, base: u64) {
        if let Some(s) = self.live_by_base.remove(&base) {
            self.objects[s as usize].live = false;
        }
    }

    fn clear_tags(&mut self, start: u64, len: u64) {
        let keys: Vec<u64> = self.ptr_words.range(start.saturating_sub(7)..start + len).map(|(k, _)| *k).collect();
        for k in keys {
            self.ptr_words.remove(&k);
        }
    }

    fn copy_tags(&mut self, src: u64, dst: u64, len: u64) {
        let moved: Vec<(u64, Prov)> = self.ptr_words.range(src..src + len).map(|(k, p)| (*k, *p)).collect();
        self.clear_tags(dst, len);
        for (k, p) in moved {
            if k + 8 <= src + len {
                self.ptr_words.insert(k - src + dst, p);
            }
        }
    }

    fn fresh_region(&mut self, base: u64) {
        if let Some(c) = self.m.heap_ref().chunk_of(RawAddress(base)) {
            self.clear_tags(c.region_start(self.m.heap_ref().layout()), c.padded_size);
        }
    }

    /// Ground truth for a dereference through `v`.
    fn truth_deref(&mut self, func: &Function, pc: usize, v: Value) {
        if let Value::Ptr { prov: Prov::Heap(s), .. } = v {
            if !self.objects[s as usize].live {
                self.record(func, pc, GroundTruthKind::UseAfterFree);
            }
        }
    }

    /// Ground truth for a free of `v`.
    fn truth_free(&mut self, func: &Function, pc: usize, v: Value) {
        let addr = v.bits() & ADDRESS_MASK;
        let kind = match v {
            Value::Ptr { prov: Prov::Heap(s), .. } => {
                let o = &self.objects[s as usize];
                if !o.live {
                    Some(GroundTruthKind::DoubleFree)
                } else if o.base != addr {
                    Some(GroundTruthKind::InvalidFree)
                } else {
                    None
                }
            }
            _ => Some(GroundTruthKind::InvalidFree),
        };
        if let Some(k) = kind {
            self.record(func, pc, k);
        }
    }

    fn read_word(&mut self, addr: u64) -> Value {
        let word = self.m.heap().read_u64(RawAddress(addr)).unwrap_or(0);
        match self.ptr_words.get(&addr) {
            Some(p) => Value::Ptr { bits: word, prov: *p },
            None => Value::Int(word),
        }
    }

    fn write_word(&mut self, addr: u64, v: Value) -> WriteOutcome {
        self.clear_tags(addr, 8);
        if let Value::Ptr { prov, .. } = v {
            self.ptr_words.insert(addr, prov);
        }
        self.m.heap().write_u64(RawAddress(addr), v.bits())
    }

    fn charge_check(&mut self, steps: u64, header_reads: u64, ac_evals: u64) {
        let c = self.config.cost;
        let (work, backward) = if c.charge_backward_search {
            let total = c.call_overhead + header_reads * c.header_access + ac_evals * c.ac_eval;
            let first = c.call_overhead + c.header_access + c.ac_eval;
            (total, if steps > 0 { total.saturating_sub(first) } else { 0 })
        } else {
            (c.call_overhead + c.header_access + c.ac_eval, 0)
        };
        self.cost += work;
        self.check_cost += work;
        self.backward_cost += backward;
    }

    fn charge_sign(&mut self) {
        let c = self.config.cost;
        self.cost += c.call_overhead + c.id_gen + c.header_access + c.ac_eval;
    }

    fn charge_exact_auth(&mut self, ac_evals: u64, success: bool) {
        let c = self.config.cost;
        self.cost += c.call_overhead + c.header_access + ac_evals * c.ac_eval;
        if success {
            self.cost += c.header_access;
        }
    }

    fn runtime(&mut self) -> &mut Runtime {
        match &mut self.m {
            Machine::Checked(r) => r,
            Machine::Raw(_) => unreachable!("checked-mode only"),
        }
    }

    fn step(&mut self, func: &Function, pc: usize, ins: &Instr) -> Flow {
        macro_rules! val {
            ($r:expr) => {
                match self.get($r) {
                    Some(v) => v,
                    None => return Flow::Halt(self.fault(func, pc, FaultKind::UndefinedRegister)),
                }
            };
        }
        macro_rules! int {
            ($v:expr) => {
                match $v {
                    Some(Value::Int(n)) => n,
                    Some(Value::Ptr { .. }) => return Flow::Halt(self.fault(func, pc, FaultKind::TypeFault)),
                    None => return Flow::Halt(self.fault(func, pc, FaultKind::UndefinedRegister)),
                }
            };
        }
        macro_rules! ptr {
            ($r:expr) => {
                match self.get($r) {
                    Some(v @ Value::Ptr { .. }) => v,
                    Some(Value::Int(_)) => return Flow::Halt(self.fault(func, pc, FaultKind::TypeFault)),
                    None => return Flow::Halt(self.fault(func, pc, FaultKind::UndefinedRegister)),
                }
            };
        }
        let checked = self.mode == ExecMode::Checked;
        match ins {
            Instr::Alloc { dst, size } => {
                let size = int!(self.operand(size));
                let v = match self.allocate(size) {
                    Some(v) => v,
                    None => return Flow::Halt(self.fault(func, pc, FaultKind::AllocFailure)),
                };
                self.set(*dst, v);
            }
            Instr::Free { ptr } => {
                let v = ptr!(*ptr);
                let addr = v.bits() & ADDRESS_MASK;
                if checked {
                    let rep = self.runtime().pt_free(SignedPointer(v.bits()));
                    self.charge_exact_auth(rep.ac_evals, rep.outcome.is_ok());
                    if let Some(kind) = rep.outcome.violation() {
                        return Flow::Halt(self.violation(func, pc, kind));
                    }
                    self.truth_free(func, pc, v);
                    self.kill_object_at(addr);
                } else {
                    self.truth_free(func, pc, v);
                    if self.m.heap().mem_free(RawAddress(addr)).is_ok() {
                        self.kill_object_at(addr);
                    }
                }
            }
            Instr::Realloc { dst, ptr, size } => {
                let v = ptr!(*ptr);
                let size = int!(self.operand(size));
                let old = v.bits() & ADDRESS_MASK;
                let old_size = self.m.heap_ref().live_chunk(RawAddress(old)).map(|c| c.requested_size);
                if checked {
                    let res = self.runtime().pt_realloc(SignedPointer(v.bits()), size);
                    match res {
                        Ok((sp, rep)) => {
                            self.charge_exact_auth(rep.ac_evals, true);
                            self.charge_sign();
                            self.truth_free(func, pc, v);
                            let new = sp.address().0;
                            if new != old {
                                self.copy_tags(old, new, old_size.unwrap_or(0).min(size));
                            }
                            self.kill_object_at(old);
                            if new != old {
                                self.fresh_region_tail(new, old_size.unwrap_or(0).min(size));
                            }
                            let prov = self.new_object(new);
                            self.set(*dst, Value::Ptr { bits: sp.0, prov });
                        }
                        Err(PtError::Violation(kind)) => {
                            self.charge_exact_auth(1, false);
                            return Flow::Halt(self.violation(func, pc, kind));
                        }
                        Err(PtError::Mem(_)) => return Flow::Halt(self.fault(func, pc, FaultKind::AllocFailure)),
                    }
                } else {
                    self.truth_free(func, pc, v);
                    let heap = self.m.heap();
                    let new = if old_size.is_some() && heap.resize_in_place(RawAddress(old), size) {
                        old
                    } else {
                        let Ok(new) = heap.mem_alloc(size) else {
                            return Flow::Halt(self.fault(func, pc, FaultKind::AllocFailure));
                        };
                        if let Some(n) = old_size {
                            let data = heap.peek(old, n.min(size));
                            heap.mem_write(new, &data);
                            heap.mem_free(RawAddress(old)).expect("live chunk");
                        }
                        let new = new.0;
                        self.fresh_region_tail(new, old_size.unwrap_or(0).min(size));
                        if let Some(n) = old_size {
                            self.copy_tags(old, new, n.min(size));
                        }
                        new
                    };
                    if old_size.is_some() {
                        self.kill_object_at(old);
                    }
                    let prov = self.new_object(new);
                    self.set(*dst, Value::Ptr { bits: new, prov });
                }
            }
            Instr::Load { dst, addr, offset } => {
                let v = ptr!(*addr);
                self.truth_deref(func, pc, v);
                let a = (v.bits() & ADDRESS_MASK).wrapping_add(*offset as u64);
                let w = self.read_word(a);
                self.set(*dst, w);
            }
            Instr::Store { addr, offset, value } => {
                let v = ptr!(*addr);
                let x = val!(*value);
                self.truth_deref(func, pc, v);
                let a = (v.bits() & ADDRESS_MASK).wrapping_add(*offset as u64);
                self.write_word(a, x);
            }
            Instr::PtrAdd { dst, ptr, bytes } => {
                let v = ptr!(*ptr);
                let n = int!(self.operand(bytes));
                let Value::Ptr { bits, prov } = v else { unreachable!() };
                let moved = (bits & !ADDRESS_MASK) | (bits.wrapping_add(n) & ADDRESS_MASK);
                self.set(*dst, Value::Ptr { bits: moved, prov });
            }
            Instr::Copy { dst, src } => {
                let v = val!(*src);
                self.set(*dst, v);
            }
            Instr::GlobAddr { dst, global } => {
                let a = self.globals[global];
                self.set(*dst, Value::Ptr { bits: a, prov: Prov::Global });
            }
            Instr::Const { dst, value } => self.set(*dst, Value::Int(*value as u64)),
            Instr::Bin { op, dst, a, b } => {
                let out = match op {
                    BinOp::Add | BinOp::Sub => {
                        let x = int!(self.get(*a));
                        let y = int!(self.operand(b));
                        if *op == BinOp::Add {
                            x.wrapping_add(y)
                        } else {
                            x.wrapping_sub(y)
                        }
                    }
                    BinOp::Cmp => {
                        let x = val!(*a);
                        let Some(y) = self.operand(b) else {
                            return Flow::Halt(self.fault(func, pc, FaultKind::UndefinedRegister));
                        };
                        let key = |v: Value| match v {
                            Value::Int(n) => n as i64,
                            Value::Ptr { bits, .. } => (bits & ADDRESS_MASK) as i64,
                        };
                        (key(x) < key(y)) as u64
                    }
                };
                self.set(*dst, Value::Int(out));
            }
            Instr::Br { target } => return Flow::Jump(func.label(target).expect("validated label")),
            Instr::CondBr { cond, if_true, if_false } => {
                let c = val!(*cond);
                let t = if c.bits() != 0 { if_true } else { if_false };
                return Flow::Jump(func.label(t).expect("validated label"));
            }
            Instr::Ret { value } => {
                let v = match value {
                    Some(r) => Some(val!(*r)),
                    None => None,
                };
                return Flow::Return(v);
            }
            Instr::Call { dst, callee, args } => {
                let mut vals = Vec::with_capacity(args.len());
                for a in args {
                    vals.push(val!(*a));
                }
                let func_ix = self.program.function_index(callee).expect("validated callee");
                return Flow::Call { func: func_ix, args: vals, dst: *dst };
            }
            Instr::ExtCall { dst, name, args } => {
                let mut vals = Vec::with_capacity(args.len());
                for a in args {
                    vals.push(val!(*a));
                }
                if checked {
                    let strip = self.config.cost.strip;
                    for v in vals.iter_mut() {
                        if let Value::Ptr { bits, prov } = *v {
                            self.cost += strip;
                            *v = Value::Ptr { bits: bits & ADDRESS_MASK, prov };
                        }
                    }
                }
                let ret = match self.external(func, pc, name, &vals) {
                    Ok(r) => r,
                    Err(kind) => return Flow::Halt(self.fault(func, pc, kind)),
                };
                if let Some(d) = dst {
                    let v = match ret {
                        Some(Value::Ptr { bits, prov })
                            if checked && !self.m.heap_ref().is_global(RawAddress(bits)) =>
                        {
                            let c = self.config.cost;
                            self.cost += c.call_overhead + c.header_access + c.ac_eval;
                            match self.runtime().pt_resign_external(RawAddress(bits)) {
                                Ok(sp) => Value::Ptr { bits: sp.0, prov },
                                Err(kind) => return Flow::Halt(self.violation(func, pc, kind)),
                            }
                        }
                        Some(v) => v,
                        None => Value::Int(0),
                    };
                    self.set(*d, v);
                }
            }
            Instr::Check { ptr } => {
                if !checked {
                    return Flow::Next;
                }
                let v = val!(*ptr);
                let Value::Ptr { bits, .. } = v else {
                    return Flow::Next;
                };
                self.checks += 1;
                *self
                    .site_checks
                    .entry(site_key(&func.name, func.source_index(pc), func.reg_name(*ptr)))
                    .or_default() += 1;
                let raw = RawAddress(bits);
                if raw.is_canonical() && self.m.heap_ref().is_global(raw) {
                    self.cost += self.config.cost.call_overhead;
                    self.check_cost += self.config.cost.call_overhead;
                    return Flow::Next;
                }
                let rep = self.runtime().pt_check(SignedPointer(bits));
                self.charge_check(rep.backward_steps, rep.header_reads, rep.ac_evals);
                if let CheckOutcome::OkAt(_) = rep.outcome {
                    return Flow::Next;
                }
                let kind = rep.outcome.violation().expect("not ok");
                return Flow::Halt(self.violation(func, pc, kind));
            }
        }
        Flow::Next
    }

    /// Clears stale pointer tags in a freshly allocated region, except for the
    /// first `keep` bytes that were just copied in.
    fn fresh_region_tail(&mut self, base: u64, keep: u64) {
        if let Some(c) = self.m.heap_ref().chunk_of(RawAddress(base)) {
            let start = c.region_start(self.m.heap_ref().layout());
            let end = start + c.padded_size;
            let from = base + round_up(keep, 8);
            self.clear_tags(start, base.saturating_sub(start));
            if end > from {
                self.clear_tags(from, end - from);
            }
        }
    }

    fn allocate(&mut self, size: u64) -> Option<Value> {
        let bits = match &mut self.m {
            Machine::Raw(h) => h.mem_alloc(size).ok()?.0,
            Machine::Checked(r) => r.pt_malloc(size).ok()?.0,
        };
        if self.mode == ExecMode::Checked {
            self.charge_sign();
        }
        let base = bits & ADDRESS_MASK;
        self.fresh_region(base);
        let prov = self.new_object(base);
        Some(Value::Ptr { bits, prov })
    }

    fn read_cstr(&mut self, func: &Function, pc: usize, addr: u64) -> Vec<u8> {
        let heap = self.m.heap_ref();
        let mut out = Vec::new();
        for a in addr..addr + MAX_STRING {
            if !heap.is_mapped(RawAddress(a)) {
                if a == addr {
                    self.m.heap().mem_read(RawAddress(a), 1).ok();
                    self.drain_heap_events(func, pc);
                }
                break;
            }
            let b = heap.peek(a, 1)[0];
            if b == 0 {
                break;
            }
            out.push(b);
        }
        out
    }

    fn external(&mut self, func: &Function, pc: usize, name: &str, args: &[Value]) -> Result<Option<Value>, FaultKind> {
        let ptr_arg = |v: &Value| match v {
            Value::Ptr { bits, .. } => Ok(bits & ADDRESS_MASK),
            Value::Int(_) => Err(FaultKind::TypeFault),
        };
        for v in args {
            self.truth_deref(func, pc, *v);
        }
        match name {
            "print_str" => {
                let p = ptr_arg(&args[0])?;
                let bytes = self.read_cstr(func, pc, p);
                self.output.push(String::from_utf8_lossy(&bytes).into_owned());
                Ok(None)
            }
            "mem_copy" => {
                let (d, s) = (ptr_arg(&args[0])?, ptr_arg(&args[1])?);
                let Value::Int(n) = args[2] else { return Err(FaultKind::TypeFault) };
                let n = n.min(1 << 20);
                let heap = self.m.heap();
                let data = match heap.mem_read(RawAddress(s), n) {
                    Ok(d) => d,
                    Err(_) => heap.peek(s, n),
                };
                heap.mem_write(RawAddress(d), &data);
                self.copy_tags(s, d, n);
                Ok(None)
            }
            "str_copy" => {
                let (d, s) = (ptr_arg(&args[0])?, ptr_arg(&args[1])?);
                let mut bytes = self.read_cstr(func, pc, s);
                bytes.push(0);
                self.m.heap().mem_write(RawAddress(d), &bytes);
                self.clear_tags(d, bytes.len() as u64);
                Ok(None)
            }
            "opaque_free" => {
                let v = args[0];
                let p = ptr_arg(&v)?;
                self.truth_free(func, pc, v);
                if self.m.heap().mem_free(RawAddress(p)).is_ok() {
                    self.kill_object_at(p);
                }
                Ok(None)
            }
            "opaque_keep" => {
                let Value::Ptr { bits, prov } = args[0] else { return Err(FaultKind::TypeFault) };
                let prev = self.kept.replace((bits & ADDRESS_MASK, prov));
                Ok(Some(match prev {
                    Some((a, p)) => Value::Ptr { bits: a, prov: p },
                    None => Value::Int(0),
                }))
            }
            _ => unreachable!("externals are validated at parse time"),
        }
    }
}

// 16-byte alignment of heap bases is relied on by `fresh_region`.
const _: () = assert!(ALIGNMENT == 16);
