//! Trace-driven memory hierarchy: one private L1-D cache per simulated core
//! in front of a shared L2, in front of flat main memory.
//!
//! Both cache levels are set-associative with true-LRU replacement,
//! write-back + write-allocate. Latencies are additive along the fetch path,
//! so with the default 2/20/100-cycle levels a completely cold access costs
//! 122 cycles and an L1 hit costs 2.
//!
//! The exact event order of a demand access is fixed (and mirrored by the
//! reference model used in tests):
//!
//! 1. probe the core's L1; on a hit the access completes at L1 latency;
//! 2. on a miss, fetch the line through L2 (an L2 read; an L2 miss adds the
//!    memory latency and installs the line in L2, possibly writing back a
//!    dirty L2 victim);
//! 3. install the line in L1; if that evicts a dirty L1 line, the victim is
//!    written back to L2 (an L2 write, allocating on miss). Writebacks add
//!    no latency to the requesting core — a write buffer is assumed.
//!
//! The optional prefetcher is a tagged next-line prefetcher at L1: a demand
//! miss, or the first demand hit to a line the prefetcher installed,
//! triggers a fetch of the next line into L1. Prefetch fills charge no
//! latency to any core (assumed fully overlapped with compute) but their
//! traffic updates L2 state and all hit/miss/writeback counters, and is
//! reported separately as `prefetch_fills`.

use serde::{Deserialize, Serialize};

use crate::error::SimError;
use crate::trace::{AccessKind, TraceSink, VecTrace};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct CacheLevelConfig {
    pub capacity_bytes: usize,
    pub line_bytes: usize,
    pub associativity: usize,
    pub hit_latency: u64,
}

impl CacheLevelConfig {
    pub fn sets(&self) -> usize {
        self.capacity_bytes / (self.line_bytes * self.associativity)
    }

    pub fn validate(&self, name: &str) -> Result<(), SimError> {
        if self.line_bytes == 0 || !self.line_bytes.is_power_of_two() {
            return Err(SimError::Config(format!(
                "{name}: line size must be a positive power of two, got {}",
                self.line_bytes
            )));
        }
        if self.associativity == 0 {
            return Err(SimError::Config(format!("{name}: associativity must be positive")));
        }
        if self.capacity_bytes == 0
            || self.capacity_bytes % (self.line_bytes * self.associativity) != 0
        {
            return Err(SimError::Config(format!(
                "{name}: capacity {} is not a whole number of {}-way sets of {}-byte lines",
                self.capacity_bytes, self.associativity, self.line_bytes
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct HierarchyConfig {
    pub l1: CacheLevelConfig,
    pub l2: CacheLevelConfig,
    pub mem_latency: u64,
    pub cores: usize,
    pub prefetch: bool,
    /// Accesses consumed from one core's trace before moving to the next when
    /// replaying buffered multi-core traces.
    pub interleave_chunk: usize,
}

impl Default for HierarchyConfig {
    fn default() -> Self {
        HierarchyConfig {
            l1: CacheLevelConfig {
                capacity_bytes: 32 * 1024,
                line_bytes: 64,
                associativity: 4,
                hit_latency: 2,
            },
            l2: CacheLevelConfig {
                capacity_bytes: 1024 * 1024,
                line_bytes: 64,
                associativity: 8,
                hit_latency: 20,
            },
            mem_latency: 100,
            cores: 1,
            prefetch: false,
            interleave_chunk: 64,
        }
    }
}

impl HierarchyConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        self.l1.validate("l1")?;
        self.l2.validate("l2")?;
        if self.cores == 0 {
            return Err(SimError::Config("core count must be positive".into()));
        }
        if self.l2.line_bytes < self.l1.line_bytes
            || self.l2.line_bytes % self.l1.line_bytes != 0
        {
            return Err(SimError::Config(
                "l2 line size must be a multiple of the l1 line size".into(),
            ));
        }
        if self.interleave_chunk == 0 {
            return Err(SimError::Config("interleave chunk must be positive".into()));
        }
        Ok(())
    }
}

/// Counter block for one cache level (L1 counters are summed across cores in
/// snapshots).
#[derive(Clone, Copy, Default, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct LevelStats {
    /// Demand accesses plus writeback traffic arriving at this level.
    pub accesses: u64,
    pub hits: u64,
    pub misses: u64,
    /// Dirty lines evicted from this level.
    pub writebacks: u64,
    /// Lines installed by the prefetcher (L1) or due to prefetch traffic (L2).
    pub prefetch_fills: u64,
}

impl LevelStats {
    pub fn miss_rate(&self) -> f64 {
        if self.accesses == 0 {
            0.0
        } else {
            self.misses as f64 / self.accesses as f64
        }
    }

    pub fn add(&mut self, other: &LevelStats) {
        self.accesses += other.accesses;
        self.hits += other.hits;
        self.misses += other.misses;
        self.writebacks += other.writebacks;
        self.prefetch_fills += other.prefetch_fills;
    }

    pub fn delta(&self, before: &LevelStats) -> LevelStats {
        LevelStats {
            accesses: self.accesses - before.accesses,
            hits: self.hits - before.hits,
            misses: self.misses - before.misses,
            writebacks: self.writebacks - before.writebacks,
            prefetch_fills: self.prefetch_fills - before.prefetch_fills,
        }
    }
}

const FLAG_DIRTY: u8 = 1;
const FLAG_PREFETCHED: u8 = 2;

/// One physical cache array. Tags store `line + 1` so zero means invalid.
struct Level {
    line_shift: u32,
    sets: usize,
    assoc: usize,
    hit_latency: u64,
    tags: Vec<u64>,
    stamps: Vec<u64>,
    flags: Vec<u8>,
    clock: u64,
    stats: LevelStats,
}

enum Probe {
    Hit { first_use_of_prefetch: bool },
    Miss,
}

impl Level {
    fn new(cfg: &CacheLevelConfig) -> Self {
        let sets = cfg.sets();
        let ways = sets * cfg.associativity;
        Level {
            line_shift: cfg.line_bytes.trailing_zeros(),
            sets,
            assoc: cfg.associativity,
            hit_latency: cfg.hit_latency,
            tags: vec![0; ways],
            stamps: vec![0; ways],
            flags: vec![0; ways],
            clock: 0,
            stats: LevelStats::default(),
        }
    }

    #[inline]
    fn set_of(&self, line: u64) -> usize {
        (line % self.sets as u64) as usize * self.assoc
    }

    /// Demand lookup: updates access/hit/miss counters, LRU order and the
    /// dirty bit. Consumes the prefetched tag on a hit.
    #[inline]
    fn probe(&mut self, line: u64, is_write: bool) -> Probe {
        self.stats.accesses += 1;
        let base = self.set_of(line);
        let tag = line + 1;
        for way in base..base + self.assoc {
            if self.tags[way] == tag {
                self.stats.hits += 1;
                self.clock += 1;
                self.stamps[way] = self.clock;
                let first_use_of_prefetch = self.flags[way] & FLAG_PREFETCHED != 0;
                self.flags[way] &= !FLAG_PREFETCHED;
                if is_write {
                    self.flags[way] |= FLAG_DIRTY;
                }
                return Probe::Hit { first_use_of_prefetch };
            }
        }
        self.stats.misses += 1;
        Probe::Miss
    }

    /// Installs `line`, evicting the LRU way if the set is full. Returns the
    /// victim line if it was dirty.
    fn fill(&mut self, line: u64, dirty: bool, prefetched: bool) -> Option<u64> {
        let base = self.set_of(line);
        let mut victim_way = base;
        let mut oldest = u64::MAX;
        for way in base..base + self.assoc {
            if self.tags[way] == 0 {
                victim_way = way;
                break;
            }
            if self.stamps[way] < oldest {
                oldest = self.stamps[way];
                victim_way = way;
            }
        }
        let evicted_dirty = if self.tags[victim_way] != 0 && self.flags[victim_way] & FLAG_DIRTY != 0
        {
            Some(self.tags[victim_way] - 1)
        } else {
            None
        };
        self.tags[victim_way] = line + 1;
        self.clock += 1;
        self.stamps[victim_way] = self.clock;
        self.flags[victim_way] =
            (if dirty { FLAG_DIRTY } else { 0 }) | (if prefetched { FLAG_PREFETCHED } else { 0 });
        evicted_dirty
    }

    /// Presence check that disturbs neither the LRU order nor any counter.
    #[inline]
    fn contains(&self, line: u64) -> bool {
        let base = self.set_of(line);
        let tag = line + 1;
        self.tags[base..base + self.assoc].contains(&tag)
    }

    fn reset(&mut self) {
        self.tags.fill(0);
        self.stamps.fill(0);
        self.flags.fill(0);
        self.clock = 0;
        self.stats = LevelStats::default();
    }
}

/// Aggregated counters at a point in time. L1 numbers are summed over cores;
/// `core_latency` holds each core's accumulated demand latency in cycles.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheSnapshot {
    pub l1: LevelStats,
    pub l2: LevelStats,
    pub core_latency: Vec<u64>,
}

impl CacheSnapshot {
    pub fn delta(&self, before: &CacheSnapshot) -> CacheSnapshot {
        CacheSnapshot {
            l1: self.l1.delta(&before.l1),
            l2: self.l2.delta(&before.l2),
            core_latency: self
                .core_latency
                .iter()
                .zip(&before.core_latency)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    /// Wall-clock memory cycles of the window: the slowest core bounds it.
    pub fn memory_cycles(&self) -> u64 {
        self.core_latency.iter().copied().max().unwrap_or(0)
    }
}

pub struct MemoryHierarchy {
    l1: Vec<Level>,
    l2: Level,
    mem_latency: u64,
    prefetch: bool,
    interleave_chunk: usize,
    core_latency: Vec<u64>,
}

impl MemoryHierarchy {
    pub fn new(cfg: &HierarchyConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        Ok(MemoryHierarchy {
            l1: (0..cfg.cores).map(|_| Level::new(&cfg.l1)).collect(),
            l2: Level::new(&cfg.l2),
            mem_latency: cfg.mem_latency,
            prefetch: cfg.prefetch,
            interleave_chunk: cfg.interleave_chunk,
            core_latency: vec![0; cfg.cores],
        })
    }

    pub fn cores(&self) -> usize {
        self.l1.len()
    }

    pub fn interleave_chunk(&self) -> usize {
        self.interleave_chunk
    }

    /// Simulates one demand access by `core` and returns its latency in
    /// cycles. The latency also accumulates into the core's running total.
    pub fn access(&mut self, core: usize, addr: u64, kind: AccessKind) -> u64 {
        let is_write = kind == AccessKind::Write;
        let line = addr >> self.l1[core].line_shift;
        let latency = match self.l1[core].probe(line, is_write) {
            Probe::Hit { first_use_of_prefetch } => {
                if first_use_of_prefetch && self.prefetch {
                    self.prefetch_into(core, line + 1);
                }
                self.l1[core].hit_latency
            }
            Probe::Miss => {
                let mut latency = self.l1[core].hit_latency;
                latency += self.l2_demand_fetch(addr);
                if let Some(victim) = self.l1[core].fill(line, is_write, false) {
                    self.l1[core].stats.writebacks += 1;
                    let victim_addr = victim << self.l1[core].line_shift;
                    self.l2_writeback(victim_addr);
                }
                if self.prefetch {
                    self.prefetch_into(core, line + 1);
                }
                latency
            }
        };
        self.core_latency[core] += latency;
        latency
    }

    /// L2 leg of a demand miss; returns the latency beyond L1.
    fn l2_demand_fetch(&mut self, addr: u64) -> u64 {
        let line = addr >> self.l2.line_shift;
        match self.l2.probe(line, false) {
            Probe::Hit { .. } => self.l2.hit_latency,
            Probe::Miss => {
                if self.l2.fill(line, false, false).is_some() {
                    self.l2.stats.writebacks += 1;
                }
                self.l2.hit_latency + self.mem_latency
            }
        }
    }

    /// A dirty L1 victim arriving at L2: a write access, allocating on miss.
    /// Charged to no core.
    fn l2_writeback(&mut self, addr: u64) {
        let line = addr >> self.l2.line_shift;
        if let Probe::Miss = self.l2.probe(line, true) {
            if self.l2.fill(line, true, false).is_some() {
                self.l2.stats.writebacks += 1;
            }
        }
    }

    /// Tagged next-line prefetch into `core`'s L1. No latency is charged.
    fn prefetch_into(&mut self, core: usize, line: u64) {
        if self.l1[core].contains(line) {
            return;
        }
        let addr = line << self.l1[core].line_shift;
        let l2_line = addr >> self.l2.line_shift;
        if let Probe::Miss = self.l2.probe(l2_line, false) {
            if self.l2.fill(l2_line, false, false).is_some() {
                self.l2.stats.writebacks += 1;
            }
            self.l2.stats.prefetch_fills += 1;
        }
        self.l1[core].stats.prefetch_fills += 1;
        if let Some(victim) = self.l1[core].fill(line, false, true) {
            self.l1[core].stats.writebacks += 1;
            let victim_addr = victim << self.l1[core].line_shift;
            self.l2_writeback(victim_addr);
        }
    }

    /// Clears all cached lines, counters and per-core latency totals.
    pub fn reset(&mut self) {
        for l1 in &mut self.l1 {
            l1.reset();
        }
        self.l2.reset();
        self.core_latency.fill(0);
    }

    pub fn snapshot(&self) -> CacheSnapshot {
        let mut l1 = LevelStats::default();
        for level in &self.l1 {
            l1.add(&level.stats);
        }
        CacheSnapshot {
            l1,
            l2: self.l2.stats,
            core_latency: self.core_latency.clone(),
        }
    }
}

/// Replays one buffered trace per core through the hierarchy, interleaving
/// cores round-robin in chunks of [`HierarchyConfig::interleave_chunk`]
/// accesses. Returns the counter delta of the replay and its wall-clock
/// memory cycles (the slowest core's accumulated latency).
pub fn run_trace(h: &mut MemoryHierarchy, traces: &[VecTrace]) -> (CacheSnapshot, u64) {
    assert!(
        traces.len() <= h.cores(),
        "{} traces for {} cores",
        traces.len(),
        h.cores()
    );
    let before = h.snapshot();
    let chunk = h.interleave_chunk;
    let mut next = vec![0usize; traces.len()];
    loop {
        let mut progressed = false;
        for (core, trace) in traces.iter().enumerate() {
            let start = next[core];
            let end = (start + chunk).min(trace.events.len());
            for &event in &trace.events[start..end] {
                let (kind, addr) = VecTrace::unpack(event);
                h.access(core, addr, kind);
            }
            if end > start {
                progressed = true;
                next[core] = end;
            }
        }
        if !progressed {
            break;
        }
    }
    let delta = h.snapshot().delta(&before);
    let cycles = delta.memory_cycles();
    (delta, cycles)
}

/// Streams kernel events straight into the hierarchy as one core's demand
/// accesses. Used for single-core runs, where buffering whole traces would
/// only waste memory.
pub struct LiveSink<'a> {
    pub hierarchy: &'a mut MemoryHierarchy,
    pub core: usize,
}

impl TraceSink for LiveSink<'_> {
    #[inline]
    fn read(&mut self, addr: u64) {
        self.hierarchy.access(self.core, addr, AccessKind::Read);
    }

    #[inline]
    fn write(&mut self, addr: u64) {
        self.hierarchy.access(self.core, addr, AccessKind::Write);
    }
}
