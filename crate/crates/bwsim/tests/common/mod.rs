//! Shared oracles for the integration tests, implemented independently of
//! the crate's internals: a `VecDeque`-based cache hierarchy, a plain triple
//! loop GEMM, and a dense (layout-free) encoder reference.

#![allow(dead_code)]

use std::collections::VecDeque;

use bwsim::cache::HierarchyConfig;
use bwsim::encoder::{seed_input, LayerWeights, RunParams};
use bwsim::kernels::Activation;
use bwsim::layout::{AddressAllocator, Layout, Matrix};

#[derive(Clone, Copy, Default, PartialEq, Eq, Debug)]
pub struct RefStats {
    pub accesses: u64,
    pub hits: u64,
    pub misses: u64,
    pub writebacks: u64,
    pub prefetch_fills: u64,
}

#[derive(Clone, Copy)]
struct Entry {
    line: u64,
    dirty: bool,
    prefetched: bool,
}

/// One cache level as per-set deques ordered least- to most-recently used.
struct RefLevel {
    sets: Vec<VecDeque<Entry>>,
    assoc: usize,
    shift: u32,
    stats: RefStats,
}

enum RefProbe {
    Hit { first_use_of_prefetch: bool },
    Miss,
}

impl RefLevel {
    fn new(capacity: usize, line: usize, assoc: usize) -> Self {
        RefLevel {
            sets: vec![VecDeque::new(); capacity / line / assoc],
            assoc,
            shift: line.trailing_zeros(),
            stats: RefStats::default(),
        }
    }

    fn set_idx(&self, line: u64) -> usize {
        (line % self.sets.len() as u64) as usize
    }

    fn probe(&mut self, line: u64, mark_dirty: bool) -> RefProbe {
        self.stats.accesses += 1;
        let idx = self.set_idx(line);
        let set = &mut self.sets[idx];
        if let Some(pos) = set.iter().position(|e| e.line == line) {
            let mut e = set.remove(pos).unwrap();
            let first_use_of_prefetch = e.prefetched;
            e.prefetched = false;
            e.dirty |= mark_dirty;
            set.push_back(e);
            self.stats.hits += 1;
            RefProbe::Hit { first_use_of_prefetch }
        } else {
            self.stats.misses += 1;
            RefProbe::Miss
        }
    }

    /// Install a line; returns the evicted line if it was dirty.
    fn fill(&mut self, line: u64, dirty: bool, prefetched: bool) -> Option<u64> {
        let idx = self.set_idx(line);
        let set = &mut self.sets[idx];
        let victim = if set.len() == self.assoc {
            let v = set.pop_front().unwrap();
            v.dirty.then_some(v.line)
        } else {
            None
        };
        set.push_back(Entry { line, dirty, prefetched });
        victim
    }

    fn contains(&self, line: u64) -> bool {
        self.sets[self.set_idx(line)].iter().any(|e| e.line == line)
    }
}

/// Independent model of the simulated hierarchy: per-core L1s over a shared
/// L2, write-back and write-allocate everywhere, true LRU, and the same
/// tagged next-line prefetcher.
pub struct RefHierarchy {
    l1: Vec<RefLevel>,
    l2: RefLevel,
    l1_latency: u64,
    l2_latency: u64,
    mem_latency: u64,
    prefetch: bool,
    pub core_latency: Vec<u64>,
}

impl RefHierarchy {
    pub fn new(cfg: &HierarchyConfig) -> Self {
        RefHierarchy {
            l1: (0..cfg.cores)
                .map(|_| RefLevel::new(cfg.l1.capacity_bytes, cfg.l1.line_bytes, cfg.l1.associativity))
                .collect(),
            l2: RefLevel::new(cfg.l2.capacity_bytes, cfg.l2.line_bytes, cfg.l2.associativity),
            l1_latency: cfg.l1.hit_latency,
            l2_latency: cfg.l2.hit_latency,
            mem_latency: cfg.mem_latency,
            prefetch: cfg.prefetch,
            core_latency: vec![0; cfg.cores],
        }
    }

    pub fn access(&mut self, core: usize, addr: u64, is_write: bool) {
        let line = addr >> self.l1[core].shift;
        match self.l1[core].probe(line, is_write) {
            RefProbe::Hit { first_use_of_prefetch } => {
                if first_use_of_prefetch && self.prefetch {
                    self.prefetch_into(core, line + 1);
                }
                self.core_latency[core] += self.l1_latency;
            }
            RefProbe::Miss => {
                let mut latency = self.l1_latency + self.l2_latency;
                let l2_line = addr >> self.l2.shift;
                if let RefProbe::Miss = self.l2.probe(l2_line, false) {
                    latency += self.mem_latency;
                    if self.l2.fill(l2_line, false, false).is_some() {
                        self.l2.stats.writebacks += 1;
                    }
                }
                if let Some(victim) = self.l1[core].fill(line, is_write, false) {
                    self.l1[core].stats.writebacks += 1;
                    self.l2_writeback(victim << self.l1[core].shift);
                }
                if self.prefetch {
                    self.prefetch_into(core, line + 1);
                }
                self.core_latency[core] += latency;
            }
        }
    }

    fn l2_writeback(&mut self, addr: u64) {
        let line = addr >> self.l2.shift;
        if let RefProbe::Miss = self.l2.probe(line, true) {
            if self.l2.fill(line, true, false).is_some() {
                self.l2.stats.writebacks += 1;
            }
        }
    }

    fn prefetch_into(&mut self, core: usize, line: u64) {
        if self.l1[core].contains(line) {
            return;
        }
        let l2_line = (line << self.l1[core].shift) >> self.l2.shift;
        if let RefProbe::Miss = self.l2.probe(l2_line, false) {
            if self.l2.fill(l2_line, false, false).is_some() {
                self.l2.stats.writebacks += 1;
            }
            self.l2.stats.prefetch_fills += 1;
        }
        self.l1[core].stats.prefetch_fills += 1;
        if let Some(victim) = self.l1[core].fill(line, false, true) {
            self.l1[core].stats.writebacks += 1;
            self.l2_writeback(victim << self.l1[core].shift);
        }
    }

    pub fn l1_totals(&self) -> RefStats {
        let mut out = RefStats::default();
        for l in &self.l1 {
            out.accesses += l.stats.accesses;
            out.hits += l.stats.hits;
            out.misses += l.stats.misses;
            out.writebacks += l.stats.writebacks;
            out.prefetch_fills += l.stats.prefetch_fills;
        }
        out
    }

    pub fn l2_stats(&self) -> RefStats {
        self.l2.stats
    }
}

/// Triple-loop GEMM with the same inner accumulation order the simulator
/// promises (ascending k, plain f32 multiply-add).
pub fn naive_gemm(a: &Matrix, b: &Matrix) -> Vec<f32> {
    assert_eq!(a.cols, b.rows);
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

fn mm(a: &[f32], m: usize, n: usize, b: &[f32], p: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * p];
    for i in 0..m {
        for j in 0..p {
            let mut acc = 0.0f32;
            for k in 0..n {
                acc += a[i * n + k] * b[k * p + j];
            }
            out[i * p + j] = acc;
        }
    }
    out
}

fn softmax_rows_dense(s: &mut [f32], rows: usize, cols: usize, scale: f64) {
    for r in 0..rows {
        let row = &mut s[r * cols..(r + 1) * cols];
        let mut max = f64::NEG_INFINITY;
        for &v in row.iter() {
            max = max.max(v as f64 * scale);
        }
        let mut sum = 0.0f64;
        for &v in row.iter() {
            sum += (v as f64 * scale - max).exp();
        }
        for v in row.iter_mut() {
            *v = ((*v as f64 * scale - max).exp() / sum) as f32;
        }
    }
}

fn layernorm_rows_dense(x: &mut [f32], rows: usize, cols: usize, eps: f64) {
    for r in 0..rows {
        let row = &mut x[r * cols..(r + 1) * cols];
        let mut sum = 0.0f64;
        let mut sumsq = 0.0f64;
        for &v in row.iter() {
            sum += v as f64;
            sumsq += (v as f64) * (v as f64);
        }
        let mean = sum / cols as f64;
        let var = (sumsq / cols as f64 - mean * mean).max(0.0) + eps;
        let inv = 1.0 / var.sqrt();
        for v in row.iter_mut() {
            *v = (((*v as f64) - mean) * inv) as f32;
        }
    }
}

/// Dense, layout-free implementation of the whole encoder stack, fed from
/// the same seeded input and weights as the simulator. Tolerance-level
/// oracle: it fixes the algebra and the f64 statistics, not the exact
/// tile-order rounding.
pub fn dense_encoder_reference(p: &RunParams) -> Vec<f32> {
    let m = &p.model;
    let (s, d, f) = (m.seq_len, m.model_dim, m.ff_dim);
    let mut alloc = AddressAllocator::new(0x1000);
    let mut x = seed_input(p, &mut alloc).to_row_major_vec();
    let scale = 1.0 / (m.head_dim as f64).sqrt();

    for layer in 0..m.layers {
        let w = LayerWeights::generate(p, layer, Layout::RowWise, &mut alloc);
        let mut concat = vec![0.0f32; s * d];
        for h in 0..m.heads {
            let wq = w.wq[h].to_row_major_vec();
            let wk = w.wk[h].to_row_major_vec();
            let wv = w.wv[h].to_row_major_vec();
            let q = mm(&x, s, d, &wq, m.head_dim);
            let k = mm(&x, s, d, &wk, m.head_dim);
            let v = mm(&x, s, d, &wv, m.head_dim);
            let mut scores = vec![0.0f32; s * s];
            for i in 0..s {
                for j in 0..s {
                    let mut acc = 0.0f32;
                    for dd in 0..m.head_dim {
                        acc += q[i * m.head_dim + dd] * k[j * m.head_dim + dd];
                    }
                    scores[i * s + j] = acc;
                }
            }
            softmax_rows_dense(&mut scores, s, s, scale);
            let head_out = mm(&scores, s, s, &v, m.head_dim);
            for i in 0..s {
                for dd in 0..m.head_dim {
                    concat[i * d + h * m.head_dim + dd] = head_out[i * m.head_dim + dd];
                }
            }
        }
        let proj = mm(&concat, s, d, &w.w_proj.to_row_major_vec(), d);
        let mut res1: Vec<f32> = x.iter().zip(&proj).map(|(a, b)| a + b).collect();
        layernorm_rows_dense(&mut res1, s, d, 1e-12);
        let mut ff1 = mm(&res1, s, d, &w.w_ff1.to_row_major_vec(), f);
        for v in &mut ff1 {
            *v = p.activation.apply(*v);
        }
        let ff2 = mm(&ff1, s, f, &w.w_ff2.to_row_major_vec(), d);
        let mut res2: Vec<f32> = res1.iter().zip(&ff2).map(|(a, b)| a + b).collect();
        layernorm_rows_dense(&mut res2, s, d, 1e-12);
        x = res2;
    }
    x
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

/// The gelu reference used by kernel tests — tanh approximation evaluated
/// in f64 to double-check the crate's f32 pointwise function.
pub fn gelu_f64(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

pub fn relu_check(x: f32) -> f32 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Convenience: run an activation through the crate to keep reference
/// pipelines bit-comparable where the algebra is shared.
pub fn apply_activation(a: Activation, x: f32) -> f32 {
    a.apply(x)
}
