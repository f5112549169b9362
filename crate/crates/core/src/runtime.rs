//! Points-to authentication runtime.
//!
//! Allocation writes a random 64-bit object ID into the header slot before the
//! object and signs the base address with the ID as modifier. Dereference
//! checks recompute the code for 16-byte-aligned candidate bases walking
//! backwards from the pointer until one authenticates. Deallocation performs a
//! single authentication at the pointer itself and zeroes the ID.

use std::collections::BTreeMap;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::{HeaderLayout, HeapState, MemError, ALIGNMENT, DEFAULT_HEAP_LIMIT, HEADER_BYTES};
use crate::pac::{AcFunction, AuthResult, KeySlot, PacEngine, PacMode, RawAddress, SignedPointer};

/// 64-bit object identity. Zero marks a freed or never-valid object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObjectId(pub u64);

impl ObjectId {
    pub const INVALID: ObjectId = ObjectId(0);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ViolationKind {
    UseAfterFree,
    DoubleFree,
    InvalidFree,
    WildPointer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CheckOutcome {
    OkAt(RawAddress),
    UseAfterFree,
    DoubleFree,
    InvalidFree,
    WildPointer,
}

impl CheckOutcome {
    pub fn is_ok(&self) -> bool {
        matches!(self, CheckOutcome::OkAt(_))
    }

    pub fn violation(&self) -> Option<ViolationKind> {
        match self {
            CheckOutcome::OkAt(_) => None,
            CheckOutcome::UseAfterFree => Some(ViolationKind::UseAfterFree),
            CheckOutcome::DoubleFree => Some(ViolationKind::DoubleFree),
            CheckOutcome::InvalidFree => Some(ViolationKind::InvalidFree),
            CheckOutcome::WildPointer => Some(ViolationKind::WildPointer),
        }
    }

    fn from_violation(kind: ViolationKind) -> Self {
        match kind {
            ViolationKind::UseAfterFree => CheckOutcome::UseAfterFree,
            ViolationKind::DoubleFree => CheckOutcome::DoubleFree,
            ViolationKind::InvalidFree => CheckOutcome::InvalidFree,
            ViolationKind::WildPointer => CheckOutcome::WildPointer,
        }
    }
}

/// Outcome of one authentication plus the work it took.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckReport {
    pub outcome: CheckOutcome,
    /// Candidates inspected after the first one.
    pub backward_steps: u64,
    /// Header words read.
    pub header_reads: u64,
    /// Authentication codes recomputed (candidates with a nonzero ID).
    pub ac_evals: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuntimeConfig {
    /// Bytes between the first and the last candidate base; multiple of 16.
    pub max_backward_distance: u64,
    pub pac_mode: PacMode,
    pub ac_function: AcFunction,
    pub key_slot: KeySlot,
    pub seed: u64,
    /// Source instructions between two heap-usage samples.
    pub sample_interval: u64,
    pub heap_limit: u64,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        RuntimeConfig {
            max_backward_distance: 4096,
            pac_mode: PacMode::V83Poison,
            ac_function: AcFunction::KeyedMixer,
            key_slot: KeySlot::Ia,
            seed: 0,
            sample_interval: 64,
            heap_limit: DEFAULT_HEAP_LIMIT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("max_backward_distance {0} is not a multiple of 16")]
    MisalignedDistance(u64),
    #[error("sample_interval must be nonzero")]
    ZeroSampleInterval,
}

impl RuntimeConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !self.max_backward_distance.is_multiple_of(ALIGNMENT) {
            return Err(ConfigError::MisalignedDistance(self.max_backward_distance));
        }
        if self.sample_interval == 0 {
            return Err(ConfigError::ZeroSampleInterval);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum PtError {
    #[error("temporal violation: {0:?}")]
    Violation(ViolationKind),
    #[error(transparent)]
    Mem(#[from] MemError),
}

/// Aggregate counters across all runtime operations.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuntimeStats {
    pub checks: u64,
    pub backward_steps: u64,
    pub backward_histogram: BTreeMap<u64, u64>,
    pub frees: u64,
    pub free_backward_steps: u64,
    /// Failed candidate authentications delivered as poison or fault and
    /// absorbed by the search.
    pub masked_failures: u64,
    /// Candidate matches whose base disagreed with the allocator's chunk
    /// (16-bit collisions).
    pub collisions: u64,
}

#[derive(Debug, Clone)]
pub struct Runtime {
    heap: HeapState,
    pac: PacEngine,
    ids: ChaCha8Rng,
    config: RuntimeConfig,
    stats: RuntimeStats,
}

impl Runtime {
    pub fn new(config: RuntimeConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        Ok(Runtime {
            heap: HeapState::with_limit(HeaderLayout::Inline, config.heap_limit),
            pac: PacEngine::new(config.seed, config.key_slot, config.ac_function, config.pac_mode),
            ids: ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15),
            config,
            stats: RuntimeStats::default(),
        })
    }

    pub fn config(&self) -> &RuntimeConfig {
        &self.config
    }

    pub fn heap(&self) -> &HeapState {
        &self.heap
    }

    pub fn heap_mut(&mut self) -> &mut HeapState {
        &mut self.heap
    }

    pub fn stats(&self) -> &RuntimeStats {
        &self.stats
    }

    fn fresh_id(&mut self) -> ObjectId {
        loop {
            let id = self.ids.next_u64();
            if id != 0 {
                return ObjectId(id);
            }
        }
    }

    fn header_addr(base: RawAddress) -> RawAddress {
        RawAddress(base.0.wrapping_sub(HEADER_BYTES))
    }

    /// ID currently stored in the header slot of `base`, if mapped.
    pub fn header_id(&self, base: RawAddress) -> Option<ObjectId> {
        self.heap.probe_u64(Self::header_addr(base)).map(ObjectId)
    }

    fn install(&mut self, base: RawAddress) -> SignedPointer {
        let id = self.fresh_id();
        self.heap.write_u64(Self::header_addr(base), id.0);
        self.pac.sign(base, id.0).expect("heap addresses are canonical")
    }

    pub fn pt_malloc(&mut self, size: u64) -> Result<SignedPointer, PtError> {
        let base = self.heap.mem_alloc(size)?;
        Ok(self.install(base))
    }

    /// Authenticates `sp` against a candidate base, reading its header.
    fn try_candidate(&mut self, sp: SignedPointer, candidate: RawAddress, report: &mut CheckReport) -> Option<bool> {
        let id = self.heap.probe_u64(Self::header_addr(candidate))?;
        report.header_reads += 1;
        if id == ObjectId::INVALID.0 {
            return Some(false);
        }
        report.ac_evals += 1;
        match self.pac.auth(sp.with_address(candidate), id) {
            AuthResult::Ok(_) => Some(true),
            AuthResult::Poisoned(_) | AuthResult::Fault => {
                self.stats.masked_failures += 1;
                Some(false)
            }
        }
    }

    fn diagnose_deref(&self, addr: RawAddress) -> CheckOutcome {
        if addr.is_canonical() && self.heap.ever_allocated(addr) {
            CheckOutcome::UseAfterFree
        } else {
            CheckOutcome::WildPointer
        }
    }

    /// Points-to authentication with backward base search.
    pub fn pt_check(&mut self, sp: SignedPointer) -> CheckReport {
        let addr = sp.address();
        let start = RawAddress(addr.0 & !(ALIGNMENT - 1));
        let mut report =
            CheckReport { outcome: CheckOutcome::WildPointer, backward_steps: 0, header_reads: 0, ac_evals: 0 };
        let mut candidate = start;
        let outcome = loop {
            match self.try_candidate(sp, candidate, &mut report) {
                None => break self.diagnose_deref(addr),
                Some(true) => break CheckOutcome::OkAt(candidate),
                Some(false) => {}
            }
            if candidate.0 < ALIGNMENT || start.0 - (candidate.0 - ALIGNMENT) > self.config.max_backward_distance {
                break self.diagnose_deref(addr);
            }
            candidate = RawAddress(candidate.0 - ALIGNMENT);
            report.backward_steps += 1;
        };
        report.outcome = outcome;
        if let CheckOutcome::OkAt(base) = outcome {
            if self.heap.chunk_of(addr).map(|c| c.base) != Some(base) {
                self.stats.collisions += 1;
            }
        }
        self.stats.checks += 1;
        self.stats.backward_steps += report.backward_steps;
        *self.stats.backward_histogram.entry(report.backward_steps).or_default() += 1;
        report
    }

    /// Single-round authentication at the pointer itself; no base search.
    fn authenticate_exact(&mut self, sp: SignedPointer) -> CheckReport {
        let addr = sp.address();
        let mut report =
            CheckReport { outcome: CheckOutcome::InvalidFree, backward_steps: 0, header_reads: 0, ac_evals: 0 };
        let ok = addr.0.is_multiple_of(ALIGNMENT) && self.try_candidate(sp, addr, &mut report) == Some(true);
        report.outcome = if ok {
            CheckOutcome::OkAt(addr)
        } else if self.heap.was_base(addr) {
            CheckOutcome::DoubleFree
        } else {
            CheckOutcome::InvalidFree
        };
        report
    }

    pub fn pt_free(&mut self, sp: SignedPointer) -> CheckReport {
        let mut report = self.authenticate_exact(sp);
        self.stats.frees += 1;
        self.stats.free_backward_steps += report.backward_steps;
        if let CheckOutcome::OkAt(base) = report.outcome {
            self.heap.write_u64(Self::header_addr(base), ObjectId::INVALID.0);
            if self.heap.mem_free(base).is_err() {
                report.outcome = CheckOutcome::InvalidFree;
            }
        }
        report
    }

    /// Reallocation always refreshes the object ID, so every pointer issued
    /// before the call stops authenticating.
    pub fn pt_realloc(&mut self, sp: SignedPointer, new_size: u64) -> Result<(SignedPointer, CheckReport), PtError> {
        let report = self.authenticate_exact(sp);
        let base = match report.outcome {
            CheckOutcome::OkAt(base) => base,
            other => return Err(PtError::Violation(other.violation().expect("not ok"))),
        };
        if new_size == 0 {
            return Err(PtError::Mem(MemError::AllocFailure { size: 0 }));
        }
        if self.heap.resize_in_place(base, new_size) {
            return Ok((self.install(base), report));
        }
        let old_size = self.heap.live_chunk(base).map_or(0, |c| c.requested_size);
        let new_base = self.heap.mem_alloc(new_size)?;
        let data = self.heap.peek(base.0, old_size.min(new_size));
        self.heap.mem_write(new_base, &data);
        self.heap.write_u64(Self::header_addr(base), ObjectId::INVALID.0);
        self.heap.mem_free(base)?;
        Ok((self.install(new_base), report))
    }

    /// Authenticate-then-strip for pointers flowing into uninstrumented code.
    pub fn pt_strip_external(&mut self, sp: SignedPointer) -> Result<RawAddress, CheckReport> {
        let report = self.pt_check(sp);
        match report.outcome {
            CheckOutcome::OkAt(_) => Ok(sp.address()),
            _ => Err(report),
        }
    }

    /// Re-signs a pointer returned from uninstrumented code. Only live chunk
    /// bases can be re-signed.
    pub fn pt_resign_external(&mut self, addr: RawAddress) -> Result<SignedPointer, ViolationKind> {
        if self.heap.live_chunk(addr).is_none() {
            return Err(ViolationKind::WildPointer);
        }
        match self.header_id(addr) {
            Some(id) if id != ObjectId::INVALID => Ok(self.pac.sign(addr, id.0).expect("canonical")),
            _ => Err(ViolationKind::WildPointer),
        }
    }

    /// Attacker writes `sprayed` as an 8-byte word at `at`, then the pointer
    /// is checked.
    pub fn id_spray_probe(&mut self, sp: SignedPointer, at: RawAddress, sprayed: ObjectId) -> CheckOutcome {
        self.heap.write_u64(at, sprayed.0);
        self.pt_check(sp).outcome
    }

    /// Same as [`id_spray_probe`](Self::id_spray_probe) but with no write.
    pub fn probe_without_spray(&mut self, sp: SignedPointer) -> CheckOutcome {
        self.pt_check(sp).outcome
    }
}

impl From<ViolationKind> for CheckOutcome {
    fn from(kind: ViolationKind) -> Self {
        CheckOutcome::from_violation(kind)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rt() -> Runtime {
        Runtime::new(RuntimeConfig::default()).unwrap()
    }

    #[test]
    fn config_validation() {
        let bad = RuntimeConfig { max_backward_distance: 100, ..Default::default() };
        assert_eq!(Runtime::new(bad).unwrap_err(), ConfigError::MisalignedDistance(100));
    }

    #[test]
    fn malloc_installs_nonzero_id() {
        let mut r = rt();
        let p = r.pt_malloc(16).unwrap();
        assert_eq!(p.address().0 % 16, 0);
        assert_ne!(r.header_id(p.address()).unwrap(), ObjectId::INVALID);
        let q = r.pt_malloc(16).unwrap();
        assert_ne!(r.header_id(p.address()), r.header_id(q.address()));
        let c = r.pt_check(p);
        assert_eq!(c.outcome, CheckOutcome::OkAt(p.address()));
        assert_eq!(c.backward_steps, 0);
    }

    #[test]
    fn interior_pointer_walks_back() {
        let mut r = rt();
        let p = r.pt_malloc(64).unwrap();
        let base = p.address();
        let c = r.pt_check(p.with_address(base.offset(32)));
        assert_eq!(c.outcome, CheckOutcome::OkAt(base));
        assert_eq!(c.backward_steps, 2);
        let c = r.pt_check(p.with_address(base.offset(35)));
        assert_eq!((c.outcome, c.backward_steps), (CheckOutcome::OkAt(base), 2));
    }

    #[test]
    fn freed_object_is_use_after_free() {
        let mut r = rt();
        let p = r.pt_malloc(16).unwrap();
        assert!(r.pt_free(p).outcome.is_ok());
        assert_eq!(r.pt_check(p).outcome, CheckOutcome::UseAfterFree);
    }

    #[test]
    fn freed_then_reused_slot_is_use_after_free() {
        let mut r = rt();
        let p = r.pt_malloc(16).unwrap();
        r.pt_free(p);
        let q = r.pt_malloc(16).unwrap();
        assert_eq!(p.address(), q.address());
        assert_eq!(r.pt_check(p).outcome, CheckOutcome::UseAfterFree);
        assert!(r.pt_check(q).outcome.is_ok());
    }

    #[test]
    fn free_zeroes_header_and_detects_double_free() {
        let mut r = rt();
        let p = r.pt_malloc(16).unwrap();
        let keep = r.pt_malloc(16).unwrap();
        let f = r.pt_free(p);
        assert_eq!(f.outcome, CheckOutcome::OkAt(p.address()));
        assert_eq!(r.heap().peek(p.address().0 - 8, 8), vec![0; 8]);
        let again = r.pt_free(p);
        assert_eq!(again.outcome, CheckOutcome::DoubleFree);
        assert_eq!(again.backward_steps, 0);
        assert!(r.pt_check(keep).outcome.is_ok());
    }

    #[test]
    fn mid_object_free_is_invalid_and_frees_nothing() {
        let mut r = rt();
        let p = r.pt_malloc(64).unwrap();
        for off in [8, 16, 32] {
            let f = r.pt_free(p.with_address(p.address().offset(off)));
            assert_eq!(f.outcome, CheckOutcome::InvalidFree);
            assert_eq!(f.backward_steps, 0);
        }
        assert!(r.heap().live_chunk(p.address()).is_some());
        assert!(r.pt_free(p).outcome.is_ok());
    }

    #[test]
    fn realloc_move_invalidates_stale_pointer() {
        let mut r = rt();
        let p = r.pt_malloc(16).unwrap();
        r.heap_mut().write_u64(p.address(), 0xabcd);
        let (q, rep) = r.pt_realloc(p, 64).unwrap();
        assert_eq!(rep.backward_steps, 0);
        assert_ne!(p.address(), q.address());
        assert_eq!(r.pt_check(p).outcome, CheckOutcome::UseAfterFree);
        assert!(r.pt_check(q).outcome.is_ok());
        assert_eq!(r.heap_mut().read_u64(q.address()), Ok(0xabcd));
    }

    #[test]
    fn realloc_in_place_still_refreshes() {
        let mut r = rt();
        let p = r.pt_malloc(64).unwrap();
        let (q, _) = r.pt_realloc(p, 32).unwrap();
        assert_eq!(p.address(), q.address());
        assert!(r.pt_check(q).outcome.is_ok());
        assert!(!r.pt_check(p).outcome.is_ok());
    }

    #[test]
    fn realloc_of_freed_pointer_is_double_free() {
        let mut r = rt();
        let p = r.pt_malloc(16).unwrap();
        r.pt_free(p);
        let before = r.heap().usage_stats();
        assert_eq!(r.pt_realloc(p, 64).unwrap_err(), PtError::Violation(ViolationKind::DoubleFree));
        assert_eq!(r.heap().usage_stats(), before);
    }

    #[test]
    fn external_round_trip() {
        let mut r = rt();
        let p = r.pt_malloc(32).unwrap();
        let raw = r.pt_strip_external(p).unwrap();
        assert_eq!(raw, p.address());
        let back = r.pt_resign_external(raw).unwrap();
        assert_eq!(back, p);
        r.pt_free(p);
        assert_eq!(r.pt_strip_external(p).unwrap_err().outcome, CheckOutcome::UseAfterFree);
        assert_eq!(r.pt_resign_external(raw), Err(ViolationKind::WildPointer));
    }

    #[test]
    fn resign_requires_a_base() {
        let mut r = rt();
        let p = r.pt_malloc(64).unwrap();
        assert_eq!(r.pt_resign_external(p.address().offset(16)), Err(ViolationKind::WildPointer));
    }

    #[test]
    fn wild_pointer_outside_heap() {
        let mut r = rt();
        r.pt_malloc(16).unwrap();
        assert_eq!(r.pt_check(SignedPointer(0x40)).outcome, CheckOutcome::WildPointer);
    }

    #[test]
    fn search_stops_at_max_distance() {
        let cfg = RuntimeConfig { max_backward_distance: 64, ..Default::default() };
        let mut r = Runtime::new(cfg).unwrap();
        let p = r.pt_malloc(512).unwrap();
        assert!(r.pt_check(p.with_address(p.address().offset(64))).outcome.is_ok());
        let far = r.pt_check(p.with_address(p.address().offset(80)));
        assert_eq!(far.outcome, CheckOutcome::UseAfterFree);
        assert_eq!(far.backward_steps, 4);
    }

    #[test]
    fn correct_id_sprayed_mid_object_does_not_authenticate() {
        let mut r = rt();
        let p = r.pt_malloc(128).unwrap();
        let base = p.address();
        let id = r.header_id(base).unwrap();
        let interior = p.with_address(base.offset(64));
        r.pt_free(p);
        // reuse the slot so the spray lands in mapped memory
        let q = r.pt_malloc(128).unwrap();
        assert_eq!(q.address(), base);
        let outcome = r.id_spray_probe(interior, base.offset(56), id);
        assert_eq!(outcome, CheckOutcome::UseAfterFree);
    }

    #[test]
    fn no_spray_keeps_verdict() {
        let mut r = rt();
        let p = r.pt_malloc(32).unwrap();
        r.pt_free(p);
        assert_eq!(r.probe_without_spray(p), CheckOutcome::UseAfterFree);
    }

    #[test]
    fn fault_mode_gives_same_decisions() {
        for mode in [PacMode::V83Poison, PacMode::V86Fault] {
            let mut r = Runtime::new(RuntimeConfig { pac_mode: mode, ..Default::default() }).unwrap();
            let p = r.pt_malloc(64).unwrap();
            let c = r.pt_check(p.with_address(p.address().offset(48)));
            assert_eq!(c.outcome, CheckOutcome::OkAt(p.address()));
            r.pt_free(p);
            assert_eq!(r.pt_check(p).outcome, CheckOutcome::UseAfterFree);
        }
    }

    #[derive(Debug, Clone)]
    enum Step {
        Alloc(u64),
        Use(usize, u64),
        Free(usize),
    }

    fn step() -> impl Strategy<Value = Step> {
        prop_oneof![
            (1u64..512).prop_map(Step::Alloc),
            (any::<usize>(), any::<u64>()).prop_map(|(i, o)| Step::Use(i, o)),
            any::<usize>().prop_map(Step::Free),
        ]
    }

    proptest! {
        // Clean traces: only live objects are used or freed.
        #[test]
        fn no_false_positives(steps in proptest::collection::vec(step(), 1..120), seed in any::<u64>(), xor in any::<bool>()) {
            let ac_function = if xor { AcFunction::XorFold } else { AcFunction::KeyedMixer };
            let mut r = Runtime::new(RuntimeConfig { seed, ac_function, ..Default::default() }).unwrap();
            let mut live: Vec<(SignedPointer, u64)> = Vec::new();
            for s in steps {
                match s {
                    Step::Alloc(n) => live.push((r.pt_malloc(n).unwrap(), n)),
                    Step::Use(i, off) if !live.is_empty() => {
                        let (p, n) = live[i % live.len()];
                        let q = p.with_address(p.address().offset((off % n) as i64));
                        let c = r.pt_check(q);
                        prop_assert_eq!(c.outcome, CheckOutcome::OkAt(p.address()));
                    }
                    Step::Free(i) if !live.is_empty() => {
                        let (p, _) = live.remove(i % live.len());
                        let f = r.pt_free(p);
                        prop_assert_eq!(f.outcome, CheckOutcome::OkAt(p.address()));
                        prop_assert_eq!(f.backward_steps, 0);
                    }
                    _ => {}
                }
            }
        }

    }

    proptest! {
        // Fixed seed: a stale pointer can authenticate at a wrong candidate
        // with probability 2^-16 per candidate, which the assertion tolerates
        // only when the runtime logged it as a collision.
        #![proptest_config(ProptestConfig { rng_seed: proptest::test_runner::RngSeed::Fixed(0x5eed), ..ProptestConfig::default() })]

        // Buggy traces: every use or free of a dead pointer is flagged.
        #[test]
        fn dead_pointers_are_flagged(steps in proptest::collection::vec(step(), 1..120), seed in any::<u64>()) {
            let mut r = Runtime::new(RuntimeConfig { seed, ..Default::default() }).unwrap();
            let mut all: Vec<(SignedPointer, u64, bool)> = Vec::new();
            for s in steps {
                match s {
                    Step::Alloc(n) => all.push((r.pt_malloc(n).unwrap(), n, true)),
                    Step::Use(i, off) if !all.is_empty() => {
                        let (p, n, alive) = all[i % all.len()];
                        let q = p.with_address(p.address().offset((off % n) as i64));
                        let before = r.stats().collisions;
                        let c = r.pt_check(q);
                        let collided = r.stats().collisions > before;
                        prop_assert!(c.outcome.is_ok() == alive || (collided && !alive));
                    }
                    Step::Free(i) if !all.is_empty() => {
                        let k = i % all.len();
                        let (p, _, alive) = all[k];
                        let f = r.pt_free(p);
                        if alive {
                            prop_assert!(f.outcome.is_ok());
                            all[k].2 = false;
                        } else {
                            prop_assert_eq!(f.outcome, CheckOutcome::DoubleFree);
                        }
                    }
                    _ => {}
                }
            }
        }
    }
}
