//! Acceptance gate: every release-blocking claim of the simulator, checked
//! at fixed tolerances. Each test prints exactly one `PASS`/`FAIL` line
//! (visible with `cargo test --test acceptance -- --nocapture`) and asserts
//! the same condition, so the suite is both a report and a gate.
//!
//! The heavyweight full-size runs are shared between criteria through
//! `OnceLock` cells; everything downstream of them is deterministic, so the
//! numbers below are stable run to run.

mod common;

use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use bwsim::accel::{tile_load_trace, tiled_gemm, AcceleratorKind, AcceleratorModel};
use bwsim::cache::{CacheLevelConfig, HierarchyConfig, MemoryHierarchy};
use bwsim::encoder::{run_model, Component, ModelConfig, RunParams, RunResult};
use bwsim::kernels::{residual_add, softmax_rows, transpose, Activation};
use bwsim::layout::{AddressAllocator, Layout, LayoutChoice};
use bwsim::trace::{AccessKind, NullSink};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::RefHierarchy;

fn report(id: u32, name: &str, ok: bool, detail: &str) {
    let tag = if ok { "PASS" } else { "FAIL" };
    println!("{tag} criterion {id:02} {name}: {detail}");
    assert!(ok, "criterion {id:02} {name}: {detail}");
}

// ---------------------------------------------------------------------------
// Shared full-size runs (seq 512, model 768, 12 heads, ff 3072, one layer,
// timing-only). Prefetch is enabled for the layout-contrast measurements
// because a 16x4-byte tile row is exactly one cache line: the next-line
// prefetcher is what a streaming accelerator front-end would do, and the
// comparison is meaningless without it.
// ---------------------------------------------------------------------------

struct Pair {
    rwma: RunResult,
    bwma: RunResult,
}

fn heavy_params(layout: LayoutChoice, k: usize, cores: usize) -> RunParams {
    let mut model = ModelConfig::bert_base();
    model.layers = 1;
    let mut p = RunParams::new(
        model,
        layout,
        AcceleratorModel::new(AcceleratorKind::SystolicArray, k),
    );
    p.hierarchy.cores = cores;
    p.hierarchy.prefetch = true;
    p.compute_values = false;
    p
}

/// Full-size runs buffer multi-gigabyte traces; hold this while one is in
/// flight so concurrently initializing cells don't stack their peaks.
fn heavy_run_lock() -> &'static Mutex<()> {
    static LOCK: Mutex<()> = Mutex::new(());
    &LOCK
}

fn run_pair(k: usize, cores: usize) -> Pair {
    let _guard = heavy_run_lock().lock().unwrap();
    Pair {
        rwma: run_model(&heavy_params(LayoutChoice::Rwma, k, cores)).unwrap(),
        bwma: run_model(&heavy_params(LayoutChoice::Bwma, k, cores)).unwrap(),
    }
}

fn pair_k16_c1() -> &'static Pair {
    static CELL: OnceLock<Pair> = OnceLock::new();
    CELL.get_or_init(|| run_pair(16, 1))
}

fn pair_k8_c1() -> &'static Pair {
    static CELL: OnceLock<Pair> = OnceLock::new();
    CELL.get_or_init(|| run_pair(8, 1))
}

fn pair_k16_c2() -> &'static Pair {
    static CELL: OnceLock<Pair> = OnceLock::new();
    CELL.get_or_init(|| run_pair(16, 2))
}

fn pair_k16_c4() -> &'static Pair {
    static CELL: OnceLock<Pair> = OnceLock::new();
    CELL.get_or_init(|| run_pair(16, 4))
}

/// Full 12-layer stack under the block layout, prefetch off: the worst
/// honest case for the one-time conversion overhead.
fn deep_bwma() -> &'static RunResult {
    static CELL: OnceLock<RunResult> = OnceLock::new();
    CELL.get_or_init(|| {
        let _guard = heavy_run_lock().lock().unwrap();
        let mut p = heavy_params(LayoutChoice::Bwma, 16, 1);
        p.model.layers = 12;
        p.hierarchy.prefetch = false;
        run_model(&p).unwrap()
    })
}

fn toy_pair() -> &'static Pair {
    static CELL: OnceLock<Pair> = OnceLock::new();
    CELL.get_or_init(|| {
        let mk = |layout| {
            let mut p = RunParams::new(
                ModelConfig::toy(),
                layout,
                AcceleratorModel::new(AcceleratorKind::SystolicArray, 8),
            );
            p.hierarchy.prefetch = true;
            run_model(&p).unwrap()
        };
        Pair { rwma: mk(LayoutChoice::Rwma), bwma: mk(LayoutChoice::Bwma) }
    })
}

/// (gemm %, non-gemm %, conversion %) of a run's total cycles.
fn shares(r: &RunResult) -> (f64, f64, f64) {
    let total = r.total_cycles() as f64;
    let gemm: u64 = Component::ALL
        .iter()
        .filter(|c| c.is_gemm())
        .map(|&c| {
            let t = r.component(c);
            t.compute_cycles + t.memory_cycles
        })
        .sum();
    let conv = {
        let t = r.component(Component::LayoutConversion);
        t.compute_cycles + t.memory_cycles
    };
    (
        100.0 * gemm as f64 / total,
        100.0 * (total - gemm as f64) / total,
        100.0 * conv as f64 / total,
    )
}

// ---------------------------------------------------------------------------
// 1. Tiled multiplication is bit-exact against a naive triple loop.
// ---------------------------------------------------------------------------

#[test]
fn criterion_01_tiled_gemm_is_bit_exact() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xACC_01);
    let mut checked = 0usize;
    for _ in 0..200 {
        let m = rng.gen_range(1..=96);
        let n = rng.gen_range(1..=96);
        let p = rng.gen_range(1..=96);
        let k = *[4usize, 8, 16].choose(&mut rng).unwrap();
        let kind = if rng.gen_bool(0.5) {
            AcceleratorKind::SystolicArray
        } else {
            AcceleratorKind::Simd
        };
        let layout = if rng.gen_bool(0.5) {
            Layout::RowWise
        } else {
            Layout::BlockWise { block_edge: k }
        };
        let mut alloc = AddressAllocator::new(0);
        let fill = |rows: usize, cols: usize, alloc: &mut AddressAllocator, rng: &mut ChaCha8Rng| {
            let mut m = alloc.alloc_matrix(rows, cols, layout, 4);
            for r in 0..rows {
                for c in 0..cols {
                    m.set(r, c, rng.gen_range(-1.0f32..1.0));
                }
            }
            m
        };
        let a = fill(m, n, &mut alloc, &mut rng);
        let b = fill(n, p, &mut alloc, &mut rng);
        let accel = AcceleratorModel::new(kind, k);
        let (c, _) = tiled_gemm(&a, &b, &accel, None, &mut alloc, true, &mut NullSink).unwrap();
        let got = c.to_row_major_vec();
        let want = common::naive_gemm(&a, &b);
        for (i, (g, w)) in got.iter().zip(want.iter()).enumerate() {
            assert_eq!(
                g.to_bits(),
                w.to_bits(),
                "{m}x{n}x{p} k={k} {:?} {:?}: element {i} differs: {g} vs {w}",
                kind,
                layout
            );
        }
        checked += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        1,
        "tiled-gemm-bit-exact",
        checked == 200 && secs < 30.0,
        &format!("{checked}/200 random shape/layout/engine combos identical to the reference loop in {secs:.1}s (limit 30s)"),
    );
}

// ---------------------------------------------------------------------------
// 2. The encoder output is bit-identical across layouts and core counts.
// ---------------------------------------------------------------------------

#[test]
fn criterion_02_output_is_layout_and_core_invariant() {
    let start = Instant::now();
    let mut digests = Vec::new();
    for layout in [LayoutChoice::Rwma, LayoutChoice::Bwma] {
        for cores in [1usize, 2, 4] {
            let mut p = RunParams::new(
                ModelConfig::toy(),
                layout,
                AcceleratorModel::new(AcceleratorKind::SystolicArray, 8),
            );
            p.hierarchy.cores = cores;
            let r = run_model(&p).unwrap();
            digests.push(((layout.name(), cores), r.output.digest()));
        }
    }
    let first = digests[0].1;
    let all_equal = digests.iter().all(|(_, d)| *d == first);
    let secs = start.elapsed().as_secs_f64();
    report(
        2,
        "output-layout-invariance",
        all_equal && secs < 60.0,
        &format!(
            "6 runs (rwma/bwma x 1/2/4 cores) share digest {first:016x} in {secs:.1}s (limit 60s)"
        ),
    );
}

// ---------------------------------------------------------------------------
// 3. Aligned tile loads are one contiguous burst under the block layout and
//    one stride-separated run per row otherwise.
// ---------------------------------------------------------------------------

fn count_runs(addrs: &[u64], stride: u64) -> usize {
    if addrs.is_empty() {
        return 0;
    }
    1 + addrs.windows(2).filter(|w| w[1] != w[0] + stride).count()
}

#[test]
fn criterion_03_blocked_tiles_load_contiguously() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xACC_03);
    let mut checked = 0usize;
    for _ in 0..100 {
        let k = *[8usize, 16].choose(&mut rng).unwrap();
        let rows = k * rng.gen_range(1..=6);
        // Strictly wider than one tile, so row-major runs can never merge
        // (they only do when a tile spans the matrix's full width).
        let cols = k * rng.gen_range(2..=6);
        let mut alloc = AddressAllocator::new(rng.gen_range(0..1024) * 64);
        let bw = alloc.alloc_matrix(rows, cols, Layout::BlockWise { block_edge: k }, 4);
        let rw = alloc.alloc_matrix(rows, cols, Layout::RowWise, 4);
        let tr = rng.gen_range(0..rows / k);
        let tc = rng.gen_range(0..cols / k);

        let bw_addrs = tile_load_trace(&bw, tr * k, tc * k, k).unwrap();
        assert_eq!(bw_addrs.len(), k * k);
        assert_eq!(count_runs(&bw_addrs, 4), 1, "blocked tile must be a single burst");

        let rw_addrs = tile_load_trace(&rw, tr * k, tc * k, k).unwrap();
        assert_eq!(rw_addrs.len(), k * k);
        assert_eq!(count_runs(&rw_addrs, 4), k, "row-major tile is one run per row");
        checked += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        3,
        "tile-load-contiguity",
        checked == 100 && secs < 5.0,
        &format!("{checked}/100 aligned tiles: blocked = 1 burst, row-major = k runs, in {secs:.1}s (limit 5s)"),
    );
}

// ---------------------------------------------------------------------------
// 4. The cache hierarchy matches an independent reference model exactly.
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_cache_matches_reference_model() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xACC_04);
    let mut accesses_total = 0u64;
    for trial in 0..100 {
        let cfg = HierarchyConfig {
            l1: CacheLevelConfig { capacity_bytes: 1024, line_bytes: 64, associativity: 2, hit_latency: 2 },
            l2: CacheLevelConfig { capacity_bytes: 4096, line_bytes: 64, associativity: 4, hit_latency: 20 },
            mem_latency: 100,
            cores: 1,
            prefetch: trial % 2 == 1,
            interleave_chunk: 64,
        };
        let mut h = MemoryHierarchy::new(&cfg).unwrap();
        let mut reference = RefHierarchy::new(&cfg);
        let len = rng.gen_range(500..10_000);
        let mut addr = 0u64;
        let mut burst = 0u32;
        for _ in 0..len {
            if burst == 0 {
                addr = rng.gen_range(0u64..32 * 1024) & !3;
                burst = rng.gen_range(1..20);
            }
            let is_write = rng.gen_bool(0.3);
            let kind = if is_write { AccessKind::Write } else { AccessKind::Read };
            h.access(0, addr, kind);
            reference.access(0, addr, is_write);
            addr += 4;
            burst -= 1;
            accesses_total += 1;
        }
        let snap = h.snapshot();
        let l1 = reference.l1_totals();
        let l2 = reference.l2_stats();
        let same = snap.l1.accesses == l1.accesses
            && snap.l1.hits == l1.hits
            && snap.l1.misses == l1.misses
            && snap.l1.writebacks == l1.writebacks
            && snap.l1.prefetch_fills == l1.prefetch_fills
            && snap.l2.accesses == l2.accesses
            && snap.l2.hits == l2.hits
            && snap.l2.misses == l2.misses
            && snap.l2.writebacks == l2.writebacks
            && snap.l2.prefetch_fills == l2.prefetch_fills
            && snap.core_latency == reference.core_latency;
        assert!(same, "trial {trial} (prefetch={}) diverged from the reference", cfg.prefetch);
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        4,
        "cache-reference-exactness",
        secs < 30.0,
        &format!("100 random traces ({accesses_total} accesses, both prefetch modes): every counter and cycle matched in {secs:.1}s (limit 30s)"),
    );
}

// ---------------------------------------------------------------------------
// 5. The block layout cuts L1 misses by large factors.
// ---------------------------------------------------------------------------

#[test]
fn criterion_05_l1_miss_reduction() {
    let full = pair_k16_c1();
    let toy = toy_pair();
    let full_ratio = full.rwma.cache.l1.misses as f64 / full.bwma.cache.l1.misses as f64;
    let toy_ratio = toy.rwma.cache.l1.misses as f64 / toy.bwma.cache.l1.misses as f64;
    report(
        5,
        "l1-miss-reduction",
        full_ratio >= 4.0 && toy_ratio >= 2.0,
        &format!(
            "full-size rwma/bwma miss ratio {full_ratio:.2}x (>= 4.0 required: {} vs {}), toy ratio {toy_ratio:.2}x (>= 2.0 required)",
            full.rwma.cache.l1.misses, full.bwma.cache.l1.misses
        ),
    );
}

// ---------------------------------------------------------------------------
// 6. End-to-end speedup of the block layout at both kernel sizes.
// ---------------------------------------------------------------------------

#[test]
fn criterion_06_single_core_speedup() {
    let k16 = pair_k16_c1();
    let k8 = pair_k8_c1();
    let s16 = k16.rwma.total_cycles() as f64 / k16.bwma.total_cycles() as f64;
    let s8 = k8.rwma.total_cycles() as f64 / k8.bwma.total_cycles() as f64;
    report(
        6,
        "single-core-speedup",
        s16 >= 1.5 && s8 >= 1.5,
        &format!(
            "rwma/bwma cycle ratio {s16:.3}x at k=16 ({} vs {}) and {s8:.3}x at k=8, both >= 1.5",
            k16.rwma.total_cycles(),
            k16.bwma.total_cycles()
        ),
    );
}

// ---------------------------------------------------------------------------
// 7. Where the cycles go: matrix multiplies dominate, and the row layout is
//    even more multiply-bound than the block layout.
// ---------------------------------------------------------------------------

#[test]
fn criterion_07_cycle_composition() {
    let p = pair_k16_c1();
    let (rw_gemm, rw_other, _) = shares(&p.rwma);
    let (bw_gemm, bw_other, _) = shares(&p.bwma);
    let ok = rw_other < 15.0 && rw_gemm > 50.0 && bw_gemm > 50.0 && bw_other > rw_other;
    report(
        7,
        "cycle-composition",
        ok,
        &format!(
            "non-multiply share rwma {rw_other:.2}% (< 15% required) vs bwma {bw_other:.2}% (must exceed rwma's); multiply share rwma {rw_gemm:.2}% / bwma {bw_gemm:.2}% (> 50% required)"
        ),
    );
}

// ---------------------------------------------------------------------------
// 8. Layout conversion is a negligible one-time cost on a deep stack.
// ---------------------------------------------------------------------------

#[test]
fn criterion_08_conversion_overhead_is_negligible() {
    let r = deep_bwma();
    let (_, _, conv) = shares(r);
    report(
        8,
        "conversion-overhead",
        conv < 1.0,
        &format!(
            "boundary conversions cost {conv:.4}% of a 12-layer block-layout run ({} of {} cycles), < 1% required",
            {
                let t = r.component(Component::LayoutConversion);
                t.compute_cycles + t.memory_cycles
            },
            r.total_cycles()
        ),
    );
}

// ---------------------------------------------------------------------------
// 9. The layout advantage survives multi-core scaling: one block-layout core
//    beats two row-layout cores, and the speedup holds at 1, 2 and 4 cores.
// ---------------------------------------------------------------------------

#[test]
fn criterion_09_multicore_scaling() {
    let c1 = pair_k16_c1();
    let c2 = pair_k16_c2();
    let c4 = pair_k16_c4();
    let bwma1 = c1.bwma.total_cycles();
    let rwma2 = c2.rwma.total_cycles();
    let s1 = c1.rwma.total_cycles() as f64 / c1.bwma.total_cycles() as f64;
    let s2 = c2.rwma.total_cycles() as f64 / c2.bwma.total_cycles() as f64;
    let s4 = c4.rwma.total_cycles() as f64 / c4.bwma.total_cycles() as f64;
    let ok = bwma1 < rwma2 && s1 >= 1.5 && s2 >= 1.5 && s4 >= 1.5;
    report(
        9,
        "multicore-scaling",
        ok,
        &format!(
            "one block-layout core ({bwma1} cycles) beats two row-layout cores ({rwma2}); speedups {s1:.3}x/{s2:.3}x/{s4:.3}x at 1/2/4 cores, all >= 1.5"
        ),
    );
}

// ---------------------------------------------------------------------------
// 10. The non-multiply kernels hold their invariants across a large
//     randomized case count.
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_kernel_invariants_at_scale() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xACC_10);
    let mut cases = 0usize;

    // Softmax rows: outputs in (0, 1], each row sums to 1, argmax preserved.
    for _ in 0..100 {
        let rows = rng.gen_range(2..=8);
        let cols = rng.gen_range(2..=24);
        let mut alloc = AddressAllocator::new(0);
        let mut m = alloc.alloc_matrix(rows, cols, Layout::RowWise, 4);
        for r in 0..rows {
            for c in 0..cols {
                m.set(r, c, rng.gen_range(-6.0f32..6.0));
            }
        }
        let before = m.to_row_major_vec();
        softmax_rows(&mut m, 1.0, true, &mut NullSink);
        for r in 0..rows {
            let mut sum = 0.0f64;
            let mut best_in = 0;
            let mut best_out = 0;
            for c in 0..cols {
                let v = m.get(r, c);
                assert!(v > 0.0 && v <= 1.0, "softmax value {v} out of range");
                sum += v as f64;
                if before[r * cols + c] > before[r * cols + best_in] {
                    best_in = c;
                }
                if m.get(r, c) > m.get(r, best_out) {
                    best_out = c;
                }
            }
            assert!((sum - 1.0).abs() < 1e-5, "row sum {sum}");
            assert_eq!(best_in, best_out, "softmax must preserve the argmax");
            cases += 1;
        }
    }

    // Row normalization: mean ~ 0, variance ~ 1 after standardization.
    for _ in 0..100 {
        let rows = rng.gen_range(2..=8);
        let cols = rng.gen_range(4..=32);
        let mut alloc = AddressAllocator::new(0);
        let mut m = alloc.alloc_matrix(rows, cols, Layout::RowWise, 4);
        for r in 0..rows {
            for c in 0..cols {
                m.set(r, c, rng.gen_range(-2.0f32..2.0));
            }
        }
        let gamma = vec![1.0f32; cols];
        let beta = vec![0.0f32; cols];
        bwsim::kernels::layernorm_rows(&mut m, &gamma, &beta, 1e-12, true, &mut NullSink);
        for r in 0..rows {
            let vals: Vec<f64> = (0..cols).map(|c| m.get(r, c) as f64).collect();
            let mean = vals.iter().sum::<f64>() / cols as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            assert!(mean.abs() < 1e-4, "normalized mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "normalized variance {var}");
            cases += 1;
        }
    }

    // Activations against a float64 reference.
    for _ in 0..50 {
        for act in [Activation::Gelu, Activation::Relu] {
            for _ in 0..8 {
                let x = rng.gen_range(-8.0f32..8.0);
                let y = act.apply(x);
                match act {
                    Activation::Gelu => {
                        let want = common::gelu_f64(x as f64) as f32;
                        assert!((y - want).abs() <= 1e-5 * want.abs().max(1.0), "gelu({x}) = {y}, want {want}");
                    }
                    Activation::Relu => assert_eq!(y, x.max(0.0)),
                }
            }
            cases += 1;
        }
    }

    // Transposing twice is the identity, bit for bit, in both layouts.
    for i in 0..100 {
        let rows = rng.gen_range(1..=24);
        let cols = rng.gen_range(1..=24);
        let layout = if i % 2 == 0 { Layout::RowWise } else { Layout::BlockWise { block_edge: 4 } };
        let mut alloc = AddressAllocator::new(0);
        let mut m = alloc.alloc_matrix(rows, cols, layout, 4);
        for r in 0..rows {
            for c in 0..cols {
                m.set(r, c, rng.gen_range(-1.0f32..1.0));
            }
        }
        let (t, _) = transpose(&m, &mut alloc, true, &mut NullSink).unwrap();
        let (tt, _) = transpose(&t, &mut alloc, true, &mut NullSink).unwrap();
        assert!(m.logical_eq(&tt), "double transpose changed a {rows}x{cols} matrix");
        cases += 1;
    }

    // Residual addition is exact element-wise.
    for i in 0..100 {
        let rows = rng.gen_range(1..=16);
        let cols = rng.gen_range(1..=16);
        let layout = if i % 2 == 0 { Layout::RowWise } else { Layout::BlockWise { block_edge: 8 } };
        let mut alloc = AddressAllocator::new(0);
        let mut a = alloc.alloc_matrix(rows, cols, layout, 4);
        let mut b = alloc.alloc_matrix(rows, cols, layout, 4);
        for r in 0..rows {
            for c in 0..cols {
                a.set(r, c, rng.gen_range(-1.0f32..1.0));
                b.set(r, c, rng.gen_range(-1.0f32..1.0));
            }
        }
        let (out, _) = residual_add(&a, &b, &mut alloc, true, &mut NullSink).unwrap();
        for r in 0..rows {
            for c in 0..cols {
                assert_eq!(out.get(r, c).to_bits(), (a.get(r, c) + b.get(r, c)).to_bits());
            }
        }
        cases += 1;
    }

    let secs = start.elapsed().as_secs_f64();
    report(
        10,
        "kernel-invariants-at-scale",
        cases >= 1000 && secs < 30.0,
        &format!("{cases} randomized kernel cases (softmax, normalization, activations, transpose, residual) in {secs:.1}s (limit 30s)"),
    );
}
