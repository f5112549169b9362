//! Simulated byte-addressable heap with ptmalloc-like 32-byte granules.
//!
//! Every chunk owns a contiguous region. When the heap is laid out with
//! inline headers the region is `[base - 8, base - 8 + footprint)`: the first
//! eight bytes hold the object header and the user data starts at the
//! 16-byte-aligned `base`. Tail padding of the granule absorbs the header when
//! there is room for it, otherwise the footprint grows by one granule.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pac::{RawAddress, ADDRESS_MASK};

/// Start of the simulated heap region. Address 0 is never valid.
pub const HEAP_BASE: u64 = 0x0000_1000_0000_0000;
/// Start of the segment holding program globals.
pub const GLOBAL_BASE: u64 = 0x0000_0800_0000_0000;
pub const GRANULE: u64 = 32;
pub const ALIGNMENT: u64 = 16;
pub const HEADER_BYTES: u64 = 8;
pub const DEFAULT_HEAP_LIMIT: u64 = 1 << 30;

const PAGE_BITS: u32 = 12;
const PAGE_SIZE: usize = 1 << PAGE_BITS;

pub fn round_up(value: u64, to: u64) -> u64 {
    value.div_ceil(to) * to
}

/// Whether chunks reserve an 8-byte header slot before the user base.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeaderLayout {
    /// Baseline allocator, no per-object metadata.
    None,
    /// One 8-byte header immediately before each user base.
    Inline,
}

impl HeaderLayout {
    pub fn header_bytes(self) -> u64 {
        match self {
            HeaderLayout::None => 0,
            HeaderLayout::Inline => HEADER_BYTES,
        }
    }

    /// Bytes a request of `size` occupies on the heap.
    pub fn footprint(self, size: u64) -> u64 {
        let payload = round_up(size, GRANULE);
        match self {
            HeaderLayout::None => payload,
            HeaderLayout::Inline if payload - size >= HEADER_BYTES => payload,
            HeaderLayout::Inline => payload + GRANULE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkInfo {
    pub base: RawAddress,
    pub requested_size: u64,
    pub padded_size: u64,
    pub live: bool,
}

impl ChunkInfo {
    pub fn region_start(&self, layout: HeaderLayout) -> u64 {
        self.base.0 - layout.header_bytes()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum MemError {
    #[error("allocation of {size} bytes failed")]
    AllocFailure { size: u64 },
    #[error("free of {0}, which is not a live chunk base")]
    InvalidFree(RawAddress),
    #[error("read of unmapped address {0}")]
    UnmappedRead(RawAddress),
}

/// Ground-truth memory events, recorded regardless of whether any checker is
/// active.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum MemEvent {
    Alloc { base: u64, size: u64, footprint: u64 },
    Free { base: u64 },
    InvalidFree { addr: u64 },
    WildWrite { addr: u64, len: u64 },
    CrossChunkWrite { addr: u64, len: u64 },
    UnmappedRead { addr: u64, len: u64 },
}

/// Result of a write: written bytes always land in the store, the flags say
/// whether the write was out of line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct WriteOutcome {
    pub wild: bool,
    pub cross_chunk: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UsageStats {
    pub current: u64,
    pub peak: u64,
    pub mean_sampled: f64,
}

#[derive(Debug, Clone)]
struct GlobalSegment {
    base: u64,
    size: u64,
}

#[derive(Debug, Clone)]
pub struct HeapState {
    layout: HeaderLayout,
    limit: u64,
    pages: HashMap<u64, Box<[u8; PAGE_SIZE]>>,
    /// Live chunks keyed by region start.
    chunks: BTreeMap<u64, ChunkInfo>,
    /// Free regions keyed by start, value is length.
    free_regions: BTreeMap<u64, u64>,
    top: u64,
    globals: Vec<GlobalSegment>,
    globals_top: u64,
    past_bases: HashSet<u64>,
    current: u64,
    peak: u64,
    allocations: u64,
    sample_sum: u128,
    sample_count: u64,
    events: Vec<MemEvent>,
    trace: bool,
}

impl HeapState {
    pub fn new(layout: HeaderLayout) -> Self {
        Self::with_limit(layout, DEFAULT_HEAP_LIMIT)
    }

    pub fn with_limit(layout: HeaderLayout, limit: u64) -> Self {
        HeapState {
            layout,
            limit,
            pages: HashMap::new(),
            chunks: BTreeMap::new(),
            free_regions: BTreeMap::new(),
            // first user base lands on HEAP_BASE + 16
            top: HEAP_BASE + ALIGNMENT - layout.header_bytes(),
            globals: Vec::new(),
            globals_top: GLOBAL_BASE,
            past_bases: HashSet::new(),
            current: 0,
            peak: 0,
            allocations: 0,
            sample_sum: 0,
            sample_count: 0,
            events: Vec::new(),
            trace: false,
        }
    }

    pub fn layout(&self) -> HeaderLayout {
        self.layout
    }

    /// Record alloc/free events too, not only anomalies.
    pub fn enable_trace(&mut self) {
        self.trace = true;
    }

    pub fn events(&self) -> &[MemEvent] {
        &self.events
    }

    /// Writes the event log as JSON lines.
    pub fn dump_trace<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn map_global(&mut self, size: u64) -> RawAddress {
        let base = self.globals_top;
        let size = size.max(1);
        self.globals.push(GlobalSegment { base, size });
        self.globals_top = round_up(base + size, ALIGNMENT);
        self.touch(base, size);
        RawAddress(base)
    }

    pub fn is_global(&self, addr: RawAddress) -> bool {
        self.globals.iter().any(|g| addr.0 >= g.base && addr.0 < g.base + g.size)
    }

    pub fn mem_alloc(&mut self, size: u64) -> Result<RawAddress, MemError> {
        if size == 0 {
            return Err(MemError::AllocFailure { size });
        }
        let footprint = self.layout.footprint(size);
        let start = match self.take_free_region(footprint) {
            Some(start) => start,
            None => {
                let start = self.top;
                if start + footprint > HEAP_BASE + self.limit {
                    return Err(MemError::AllocFailure { size });
                }
                self.top += footprint;
                start
            }
        };
        let base = start + self.layout.header_bytes();
        debug_assert_eq!(base % ALIGNMENT, 0);
        self.fill(start, footprint, 0);
        self.chunks.insert(
            start,
            ChunkInfo { base: RawAddress(base), requested_size: size, padded_size: footprint, live: true },
        );
        self.past_bases.insert(base);
        self.allocations += 1;
        self.current += footprint;
        self.peak = self.peak.max(self.current);
        if self.trace {
            self.events.push(MemEvent::Alloc { base, size, footprint });
        }
        Ok(RawAddress(base))
    }

    fn take_free_region(&mut self, footprint: u64) -> Option<u64> {
        let (&start, &len) = self.free_regions.iter().find(|(_, len)| **len >= footprint)?;
        self.free_regions.remove(&start);
        if len > footprint {
            self.free_regions.insert(start + footprint, len - footprint);
        }
        Some(start)
    }

    pub fn mem_free(&mut self, base: RawAddress) -> Result<(), MemError> {
        let start = base.0.wrapping_sub(self.layout.header_bytes());
        match self.chunks.get(&start) {
            Some(c) if c.base == base => {
                let c = self.chunks.remove(&start).expect("present");
                self.current -= c.padded_size;
                self.free_regions.insert(start, c.padded_size);
                if self.trace {
                    self.events.push(MemEvent::Free { base: base.0 });
                }
                Ok(())
            }
            _ => {
                self.events.push(MemEvent::InvalidFree { addr: base.0 });
                Err(MemError::InvalidFree(base))
            }
        }
    }

    /// Shrinks or keeps a chunk in place when the new size still fits its
    /// region. Returns false when the chunk would have to move.
    pub fn resize_in_place(&mut self, base: RawAddress, new_size: u64) -> bool {
        let start = base.0.wrapping_sub(self.layout.header_bytes());
        let footprint = self.layout.footprint(new_size);
        match self.chunks.get_mut(&start) {
            Some(c) if c.base == base && new_size > 0 && footprint <= c.padded_size => {
                c.requested_size = new_size;
                true
            }
            _ => false,
        }
    }

    pub fn chunk_of(&self, addr: RawAddress) -> Option<ChunkInfo> {
        let (&start, c) = self.chunks.range(..=addr.0).next_back()?;
        (addr.0 < start + c.padded_size).then_some(*c)
    }

    /// Live chunk whose user base is exactly `base`.
    pub fn live_chunk(&self, base: RawAddress) -> Option<ChunkInfo> {
        let start = base.0.wrapping_sub(self.layout.header_bytes());
        self.chunks.get(&start).filter(|c| c.base == base).copied()
    }

    pub fn is_mapped(&self, addr: RawAddress) -> bool {
        self.chunk_of(addr).is_some() || self.is_global(addr)
    }

    fn range_mapped(&self, addr: u64, len: u64) -> bool {
        if len == 0 {
            return true;
        }
        let mut a = addr;
        let end = addr + len;
        while a < end {
            if let Some((&start, c)) = self.chunks.range(..=a).next_back() {
                if a < start + c.padded_size {
                    a = start + c.padded_size;
                    continue;
                }
            }
            if let Some(g) = self.globals.iter().find(|g| a >= g.base && a < g.base + g.size) {
                a = g.base + g.size;
                continue;
            }
            return false;
        }
        true
    }

    /// True once the address has been part of some chunk region.
    pub fn ever_allocated(&self, addr: RawAddress) -> bool {
        addr.0 >= HEAP_BASE && addr.0 < self.top
    }

    pub fn was_base(&self, addr: RawAddress) -> bool {
        self.past_bases.contains(&addr.0)
    }

    pub fn mem_read(&mut self, addr: RawAddress, len: u64) -> Result<Vec<u8>, MemError> {
        if !addr.is_canonical() || !self.range_mapped(addr.0, len) {
            self.events.push(MemEvent::UnmappedRead { addr: addr.0, len });
            return Err(MemError::UnmappedRead(addr));
        }
        Ok(self.peek(addr.0, len))
    }

    /// Reads without mapping checks or event logging.
    pub fn peek(&self, addr: u64, len: u64) -> Vec<u8> {
        (addr..addr + len).map(|a| self.byte(a)).collect()
    }

    pub fn read_u64(&mut self, addr: RawAddress) -> Result<u64, MemError> {
        let bytes = self.mem_read(addr, 8)?;
        Ok(u64::from_le_bytes(bytes.try_into().expect("8 bytes")))
    }

    /// Reads a header-sized word without logging; `None` when unmapped.
    pub fn probe_u64(&self, addr: RawAddress) -> Option<u64> {
        if !addr.is_canonical() || !self.range_mapped(addr.0, 8) {
            return None;
        }
        Some(u64::from_le_bytes(self.peek(addr.0, 8).try_into().expect("8 bytes")))
    }

    pub fn mem_write(&mut self, addr: RawAddress, bytes: &[u8]) -> WriteOutcome {
        let len = bytes.len() as u64;
        let mut outcome = WriteOutcome::default();
        if !addr.is_canonical() || !self.range_mapped(addr.0, len) {
            outcome.wild = true;
            self.events.push(MemEvent::WildWrite { addr: addr.0, len });
        } else if len > 0 && !self.is_global(addr) {
            let first = self.chunk_of(addr).map(|c| c.base);
            let last = self.chunk_of(RawAddress(addr.0 + len - 1)).map(|c| c.base);
            if first != last {
                outcome.cross_chunk = true;
                self.events.push(MemEvent::CrossChunkWrite { addr: addr.0, len });
            }
        }
        for (i, b) in bytes.iter().enumerate() {
            self.set_byte((addr.0 + i as u64) & ADDRESS_MASK, *b);
        }
        outcome
    }

    pub fn write_u64(&mut self, addr: RawAddress, value: u64) -> WriteOutcome {
        self.mem_write(addr, &value.to_le_bytes())
    }

    /// Samples current usage for the mean-RSS statistic.
    pub fn sample(&mut self) {
        self.sample_sum += self.current as u128;
        self.sample_count += 1;
    }

    pub fn usage_stats(&self) -> UsageStats {
        let mean_sampled = if self.sample_count == 0 { 0.0 } else { self.sample_sum as f64 / self.sample_count as f64 };
        UsageStats { current: self.current, peak: self.peak, mean_sampled }
    }

    pub fn allocations(&self) -> u64 {
        self.allocations
    }

    pub fn live_chunks(&self) -> impl Iterator<Item = &ChunkInfo> {
        self.chunks.values()
    }

    fn byte(&self, addr: u64) -> u8 {
        self.pages.get(&(addr >> PAGE_BITS)).map_or(0, |p| p[(addr as usize) & (PAGE_SIZE - 1)])
    }

    fn set_byte(&mut self, addr: u64, value: u8) {
        let page = self.pages.entry(addr >> PAGE_BITS).or_insert_with(|| Box::new([0; PAGE_SIZE]));
        page[(addr as usize) & (PAGE_SIZE - 1)] = value;
    }

    fn fill(&mut self, start: u64, len: u64, value: u8) {
        for a in start..start + len {
            if value != 0 || self.pages.contains_key(&(a >> PAGE_BITS)) {
                self.set_byte(a, value);
            }
        }
    }

    fn touch(&mut self, start: u64, len: u64) {
        self.fill(start, len, 0);
    }
}
