//! Built-in self checks, exposed as the `verify` CLI subcommand. Each suite
//! validates one layer of the simulator against an independent oracle
//! computed right here with the dumbest possible method: exhaustive
//! enumeration for address maps, a triple loop for GEMM, and a
//! `VecDeque`-based LRU model for the cache hierarchy.
//!
//! `inject_offset_fault` deliberately corrupts one probed address so a
//! failing check (and the nonzero exit it causes) can be demonstrated
//! end to end.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::accel::{tile_load_trace, tiled_gemm, AcceleratorKind, AcceleratorModel};
use crate::cache::{CacheLevelConfig, HierarchyConfig, MemoryHierarchy};
use crate::encoder::{run_model, ModelConfig, RunParams};
use crate::layout::{conversion_access_trace, AddressAllocator, ConversionDirection, Layout, LayoutChoice, Matrix};
use crate::trace::{AccessKind, NullSink};

#[derive(Clone, Copy, Default)]
pub struct VerifyOptions {
    pub inject_offset_fault: bool,
}

pub struct VerifyReport {
    pub lines: Vec<String>,
    pub passed: usize,
    pub failed: usize,
}

impl VerifyReport {
    fn record(&mut self, name: &str, result: Result<(), String>) {
        match result {
            Ok(()) => {
                self.passed += 1;
                self.lines.push(format!("PASS {name}"));
            }
            Err(msg) => {
                self.failed += 1;
                self.lines.push(format!("FAIL {name}: {msg}"));
            }
        }
    }

    pub fn all_passed(&self) -> bool {
        self.failed == 0
    }
}

pub fn run_verification(opts: &VerifyOptions) -> VerifyReport {
    let mut report = VerifyReport { lines: Vec::new(), passed: 0, failed: 0 };
    report.record("layout-offsets", check_layout_offsets(opts.inject_offset_fault));
    report.record("layout-roundtrip", check_layout_roundtrip());
    report.record("tile-contiguity", check_tile_contiguity());
    report.record("gemm-vs-naive", check_gemm_vs_naive());
    report.record("cache-vs-reference", check_cache_vs_reference());
    report.record("layout-invariance", check_layout_invariance());
    report
}

/// Address maps against exhaustive enumeration of the block walk.
fn check_layout_offsets(inject_fault: bool) -> Result<(), String> {
    let fault = usize::from(inject_fault);

    let bw = Layout::BlockWise { block_edge: 4 };
    let (_, pc) = bw.padded_dims(8, 8);
    if bw.offset(0, 4, pc) + fault != 16 {
        return Err(format!("BlockWise b=4 8x8 (0,4): got {}, want 16", bw.offset(0, 4, pc) + fault));
    }
    let rw = Layout::RowWise;
    if rw.offset(1, 2, 8) != 10 {
        return Err(format!("RowWise 8x8 (1,2): got {}, want 10", rw.offset(1, 2, 8)));
    }

    // A block edge equal to the matrix edge degenerates to row-major.
    let degenerate = Layout::BlockWise { block_edge: 8 };
    for r in 0..8 {
        for c in 0..8 {
            if degenerate.offset(r, c, 8) != r * 8 + c {
                return Err(format!("b=8 on 8x8 is not row-major at ({r},{c})"));
            }
        }
    }

    // Independent oracle: walking blocks row-major, then rows within the
    // block, must visit storage slots 0,1,2,... exactly once each.
    for (rows, cols, b) in [(8usize, 8usize, 4usize), (5, 7, 4), (3, 9, 8), (16, 16, 4)] {
        let layout = Layout::BlockWise { block_edge: b };
        let (pr, pc) = layout.padded_dims(rows, cols);
        let mut expected = 0usize;
        for br in (0..pr).step_by(b) {
            for bc in (0..pc).step_by(b) {
                for lr in 0..b {
                    for lc in 0..b {
                        let got = layout.offset(br + lr, bc + lc, pc);
                        if got != expected {
                            return Err(format!(
                                "{rows}x{cols} b={b}: ({},{}) -> {got}, want {expected}",
                                br + lr,
                                bc + lc
                            ));
                        }
                        let back = layout.coords_of(got, pc);
                        if back != (br + lr, bc + lc) {
                            return Err(format!("coords_of({got}) -> {back:?} is not inverse"));
                        }
                        expected += 1;
                    }
                }
            }
        }
    }
    Ok(())
}

/// Row-major -> blocked -> row-major preserves every logical element, and the
/// conversion touches exactly the expected number of slots.
fn check_layout_roundtrip() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut alloc = AddressAllocator::new(0);
    for (rows, cols, b) in [(5usize, 7usize, 4usize), (16, 16, 4), (9, 33, 8), (12, 12, 16)] {
        let src = Matrix::from_fn(rows, cols, Layout::RowWise, alloc.alloc((rows * cols * 4) as u64), 4, |_, _| {
            rng.gen_range(-1.0f32..1.0)
        });
        let blocked = src.to_blockwise(b, &mut alloc).map_err(|e| e.to_string())?;
        let back = blocked.from_blockwise(&mut alloc).map_err(|e| e.to_string())?;
        if !src.logical_eq(&back) {
            return Err(format!("{rows}x{cols} b={b}: round trip changed values"));
        }
        let trace = conversion_access_trace(&src, ConversionDirection::ToBlockWise { block_edge: b })
            .map_err(|e| e.to_string())?;
        let reads = trace.iter().filter(|(k, _)| *k == AccessKind::Read).count();
        let writes = trace.iter().filter(|(k, _)| *k == AccessKind::Write).count();
        if reads != rows * cols || writes != blocked.storage_elems() {
            return Err(format!(
                "{rows}x{cols} b={b}: conversion touched {reads}R/{writes}W, want {}R/{}W",
                rows * cols,
                blocked.storage_elems()
            ));
        }
    }
    Ok(())
}

fn count_runs(addrs: &[u64], elem_width: u64) -> usize {
    let mut runs = 0;
    let mut prev: Option<u64> = None;
    for &a in addrs {
        if prev != Some(a.wrapping_sub(elem_width)) {
            runs += 1;
        }
        prev = Some(a);
    }
    runs
}

/// A blocked tile loads as one contiguous burst; a row-major tile needs one
/// run per covered row.
fn check_tile_contiguity() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut alloc = AddressAllocator::new(0);
    for k in [8usize, 16] {
        let rows = 5 * k;
        let cols = 3 * k;
        let rw = Matrix::zeros(rows, cols, Layout::RowWise, alloc.alloc((rows * cols * 4) as u64), 4);
        let bw = rw.to_blockwise(k, &mut alloc).map_err(|e| e.to_string())?;
        for _ in 0..25 {
            let tr = rng.gen_range(0..rows / k);
            let tc = rng.gen_range(0..cols / k);
            let bw_trace = tile_load_trace(&bw, tr * k, tc * k, k).map_err(|e| e.to_string())?;
            if bw_trace.len() != k * k || count_runs(&bw_trace, 4) != 1 {
                return Err(format!(
                    "blocked tile ({tr},{tc}) k={k}: {} addrs in {} runs, want {} in 1",
                    bw_trace.len(),
                    count_runs(&bw_trace, 4),
                    k * k
                ));
            }
            let rw_trace = tile_load_trace(&rw, tr * k, tc * k, k).map_err(|e| e.to_string())?;
            if count_runs(&rw_trace, 4) != k {
                return Err(format!(
                    "row-major tile ({tr},{tc}) k={k}: {} runs, want {k}",
                    count_runs(&rw_trace, 4)
                ));
            }
        }
    }
    Ok(())
}

fn naive_gemm(a: &Matrix, b: &Matrix) -> Vec<f32> {
    let mut out = vec![0.0f32; a.rows * b.cols];
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut acc = 0.0f32;
            for k in 0..a.cols {
                acc += a.get(i, k) * b.get(k, j);
            }
            out[i * b.cols + j] = acc;
        }
    }
    out
}

/// Tiled accelerator GEMM against the triple loop, bit for bit, under both
/// layouts and ragged shapes.
fn check_gemm_vs_naive() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let accel = AcceleratorModel::new(AcceleratorKind::SystolicArray, 8);
    for (m, n, p) in [(8usize, 8usize, 8usize), (12, 20, 8), (17, 9, 5), (32, 16, 24)] {
        for choice in [LayoutChoice::Rwma, LayoutChoice::Bwma] {
            let layout = choice.to_layout(accel.kernel_size);
            let mut alloc = AddressAllocator::new(0);
            let (pr, pc) = layout.padded_dims(m, n);
            let a = Matrix::from_fn(m, n, layout, alloc.alloc((pr * pc * 4) as u64), 4, |_, _| {
                rng.gen_range(-1.0f32..1.0)
            });
            let (pr, pc) = layout.padded_dims(n, p);
            let b = Matrix::from_fn(n, p, layout, alloc.alloc((pr * pc * 4) as u64), 4, |_, _| {
                rng.gen_range(-1.0f32..1.0)
            });
            let mut sink = NullSink;
            let (c, _) = tiled_gemm(&a, &b, &accel, None, &mut alloc, true, &mut sink)
                .map_err(|e| e.to_string())?;
            let want = naive_gemm(&a, &b);
            for i in 0..m {
                for j in 0..p {
                    let got = c.get(i, j);
                    let expect = want[i * p + j];
                    if got.to_bits() != expect.to_bits() {
                        return Err(format!(
                            "{m}x{n}x{p} {}: C[{i}][{j}] = {got}, naive {expect}",
                            choice.name()
                        ));
                    }
                }
            }
        }
    }
    Ok(())
}

/// Minimal reference hierarchy: per-set `VecDeque`s in true LRU order,
/// storing `(line, dirty)`. Mirrors the documented access sequence with the
/// prefetcher off.
struct RefLevel {
    sets: Vec<VecDeque<(u64, bool)>>,
    assoc: usize,
    shift: u32,
    accesses: u64,
    hits: u64,
    misses: u64,
    writebacks: u64,
}

impl RefLevel {
    fn new(cfg: &CacheLevelConfig) -> Self {
        RefLevel {
            sets: vec![VecDeque::new(); cfg.sets()],
            assoc: cfg.associativity,
            shift: cfg.line_bytes.trailing_zeros(),
            accesses: 0,
            hits: 0,
            misses: 0,
            writebacks: 0,
        }
    }

    fn probe(&mut self, line: u64, mark_dirty: bool) -> bool {
        self.accesses += 1;
        let idx = (line % self.sets.len() as u64) as usize;
        let set = &mut self.sets[idx];
        if let Some(pos) = set.iter().position(|e| e.0 == line) {
            let mut entry = set.remove(pos).unwrap();
            entry.1 |= mark_dirty;
            set.push_back(entry);
            self.hits += 1;
            true
        } else {
            self.misses += 1;
            false
        }
    }

    fn fill(&mut self, line: u64, dirty: bool) -> Option<u64> {
        let idx = (line % self.sets.len() as u64) as usize;
        let set = &mut self.sets[idx];
        let victim = if set.len() == self.assoc {
            let (vline, vdirty) = set.pop_front().unwrap();
            vdirty.then_some(vline)
        } else {
            None
        };
        set.push_back((line, dirty));
        victim
    }
}

struct RefHierarchy {
    l1: RefLevel,
    l2: RefLevel,
    mem_latency: u64,
    l1_latency: u64,
    l2_latency: u64,
    latency: u64,
}

impl RefHierarchy {
    fn access(&mut self, addr: u64, is_write: bool) {
        let line = addr >> self.l1.shift;
        if self.l1.probe(line, is_write) {
            self.latency += self.l1_latency;
            return;
        }
        let mut latency = self.l1_latency + self.l2_latency;
        let l2_line = addr >> self.l2.shift;
        if !self.l2.probe(l2_line, false) {
            latency += self.mem_latency;
            if self.l2.fill(l2_line, false).is_some() {
                self.l2.writebacks += 1;
            }
        }
        if let Some(victim) = self.l1.fill(line, is_write) {
            self.l1.writebacks += 1;
            let vline = (victim << self.l1.shift) >> self.l2.shift;
            if !self.l2.probe(vline, true) && self.l2.fill(vline, true).is_some() {
                self.l2.writebacks += 1;
            }
        }
        self.latency += latency;
    }
}

fn check_cache_vs_reference() -> Result<(), String> {
    let cfg = HierarchyConfig {
        l1: CacheLevelConfig { capacity_bytes: 1024, line_bytes: 64, associativity: 2, hit_latency: 2 },
        l2: CacheLevelConfig { capacity_bytes: 4096, line_bytes: 64, associativity: 4, hit_latency: 20 },
        mem_latency: 100,
        cores: 1,
        prefetch: false,
        interleave_chunk: 64,
    };
    let mut h = MemoryHierarchy::new(&cfg).map_err(|e| e.to_string())?;
    let mut reference = RefHierarchy {
        l1: RefLevel::new(&cfg.l1),
        l2: RefLevel::new(&cfg.l2),
        mem_latency: cfg.mem_latency,
        l1_latency: cfg.l1.hit_latency,
        l2_latency: cfg.l2.hit_latency,
        latency: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..4000 {
        let addr = rng.gen_range(0u64..16 * 1024) & !3;
        let is_write = rng.gen_bool(0.3);
        let kind = if is_write { AccessKind::Write } else { AccessKind::Read };
        h.access(0, addr, kind);
        reference.access(addr, is_write);
    }
    let snap = h.snapshot();
    let pairs = [
        ("l1.accesses", snap.l1.accesses, reference.l1.accesses),
        ("l1.hits", snap.l1.hits, reference.l1.hits),
        ("l1.misses", snap.l1.misses, reference.l1.misses),
        ("l1.writebacks", snap.l1.writebacks, reference.l1.writebacks),
        ("l2.accesses", snap.l2.accesses, reference.l2.accesses),
        ("l2.hits", snap.l2.hits, reference.l2.hits),
        ("l2.misses", snap.l2.misses, reference.l2.misses),
        ("l2.writebacks", snap.l2.writebacks, reference.l2.writebacks),
        ("latency", snap.core_latency[0], reference.latency),
    ];
    for (name, got, want) in pairs {
        if got != want {
            return Err(format!("{name}: got {got}, reference {want}"));
        }
    }

    // With the prefetcher on, every L1 line arrival must still be an L2
    // access: demand misses, dirty victim writebacks and prefetch fills.
    let mut h = MemoryHierarchy::new(&HierarchyConfig { prefetch: true, ..cfg }).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..4000 {
        let addr = rng.gen_range(0u64..16 * 1024) & !3;
        let kind = if rng.gen_bool(0.3) { AccessKind::Write } else { AccessKind::Read };
        h.access(0, addr, kind);
    }
    let snap = h.snapshot();
    let expected = snap.l1.misses + snap.l1.writebacks + snap.l1.prefetch_fills;
    if snap.l2.accesses != expected {
        return Err(format!(
            "prefetch conservation: l2.accesses {} != misses+writebacks+fills {}",
            snap.l2.accesses, expected
        ));
    }
    Ok(())
}

/// The full encoder produces bit-identical outputs under both layouts, and
/// only the blocked run pays for layout conversions.
fn check_layout_invariance() -> Result<(), String> {
    let accel = AcceleratorModel::new(AcceleratorKind::SystolicArray, 8);
    let run = |choice: LayoutChoice| -> Result<_, String> {
        let params = RunParams::new(ModelConfig::toy(), choice, accel);
        run_model(&params).map_err(|e| e.to_string())
    };
    let rwma = run(LayoutChoice::Rwma)?;
    let bwma = run(LayoutChoice::Bwma)?;
    if rwma.output.digest() != bwma.output.digest() {
        return Err("outputs differ between layouts".into());
    }
    let conv = |r: &crate::encoder::RunResult| {
        let t = r.component(crate::encoder::Component::LayoutConversion);
        t.compute_cycles + t.memory_cycles
    };
    if conv(&rwma) != 0 {
        return Err("row-major run should not pay for conversions".into());
    }
    if conv(&bwma) == 0 {
        return Err("blocked run should pay for conversions".into());
    }
    Ok(())
}
