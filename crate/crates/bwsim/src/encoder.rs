//! Encoder pipeline: executes a BERT-style encoder stack on the modeled
//! accelerator, attributing compute cycles, memory cycles and cache traffic
//! to eleven pipeline components:
//!
//! QKV-GEMM, Transpose, QKT-GEMM, Softmax, AV-GEMM, Projection, AddNorm1,
//! FF1, FF2, AddNorm2 and LayoutConversion.
//!
//! Timing model: components execute one after another with a barrier between
//! them. Within a component, cores run concurrently; its compute cycles and
//! memory cycles are each the maximum over the participating cores, and a
//! run's total is the sum over components of `compute + memory`.
//!
//! Multi-core partitioning: whole attention heads are assigned to cores
//! round-robin; the standalone GEMMs (Projection, FF1, FF2) split by output
//! tile row; the fused residual+layernorm stages split by `K`-row bands.
//! Layout conversions run on core 0. With one core, kernels stream their
//! events straight into the cache hierarchy; with several, each core's
//! events are buffered per component and replayed in a fixed round-robin
//! interleave, so results are reproducible regardless of how the work is
//! actually executed on the host.
//!
//! Numeric results are independent of layout, core count and execution
//! strategy: every kernel walks the logical index space in the same order,
//! and per-core partial results merge into disjoint regions.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::accel::{gemm_tile_rows, scatter_bands, AcceleratorModel, GemmStats};
use crate::cache::{run_trace, CacheSnapshot, HierarchyConfig, LevelStats, LiveSink, MemoryHierarchy};
use crate::error::SimError;
use crate::exec::map_items;
use crate::kernels::{
    self, cost, layernorm_rows_local, residual_band, softmax_rows, transpose_into, Activation,
    KernelStats,
};
use crate::layout::{AddressAllocator, Layout, LayoutChoice, Matrix, MatrixMeta};
use crate::trace::{TraceSink, VecTrace};

pub const LAYERNORM_EPS: f64 = 1e-12;

/// Logical shape of the encoder stack.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    pub seq_len: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ff_dim: usize,
    pub layers: usize,
}

impl ModelConfig {
    /// BERT-base shape: 512 x 768, 12 heads of 64, FF 3072, 12 layers.
    pub fn bert_base() -> Self {
        ModelConfig {
            seq_len: 512,
            model_dim: 768,
            heads: 12,
            head_dim: 64,
            ff_dim: 3072,
            layers: 12,
        }
    }

    /// Down-scaled shape for fast experiments and CI: 64 x 96, 4 heads of
    /// 24, FF 384, one layer.
    pub fn toy() -> Self {
        ModelConfig {
            seq_len: 64,
            model_dim: 96,
            heads: 4,
            head_dim: 24,
            ff_dim: 384,
            layers: 1,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.seq_len == 0
            || self.model_dim == 0
            || self.heads == 0
            || self.head_dim == 0
            || self.ff_dim == 0
            || self.layers == 0
        {
            return Err(SimError::Config("model dimensions must be positive".into()));
        }
        if self.model_dim != self.heads * self.head_dim {
            return Err(SimError::Config(format!(
                "model_dim {} must equal heads {} x head_dim {}",
                self.model_dim, self.heads, self.head_dim
            )));
        }
        Ok(())
    }
}

/// The eleven timed pipeline components, in execution order.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum Component {
    QkvGemm,
    Transpose,
    QktGemm,
    Softmax,
    AvGemm,
    Projection,
    AddNorm1,
    Ff1,
    Ff2,
    AddNorm2,
    LayoutConversion,
}

impl Component {
    pub const ALL: [Component; 11] = [
        Component::QkvGemm,
        Component::Transpose,
        Component::QktGemm,
        Component::Softmax,
        Component::AvGemm,
        Component::Projection,
        Component::AddNorm1,
        Component::Ff1,
        Component::Ff2,
        Component::AddNorm2,
        Component::LayoutConversion,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Component::QkvGemm => "QKV-GEMM",
            Component::Transpose => "Transpose",
            Component::QktGemm => "QKT-GEMM",
            Component::Softmax => "Softmax",
            Component::AvGemm => "AV-GEMM",
            Component::Projection => "Projection",
            Component::AddNorm1 => "AddNorm1",
            Component::Ff1 => "FF1",
            Component::Ff2 => "FF2",
            Component::AddNorm2 => "AddNorm2",
            Component::LayoutConversion => "LayoutConversion",
        }
    }

    pub fn is_gemm(self) -> bool {
        matches!(
            self,
            Component::QkvGemm
                | Component::QktGemm
                | Component::AvGemm
                | Component::Projection
                | Component::Ff1
                | Component::Ff2
        )
    }
}

/// Accumulated timing and cache traffic of one component across the run.
#[derive(Clone, Copy, Default, PartialEq, Eq, Debug)]
pub struct ComponentTiming {
    pub compute_cycles: u64,
    pub memory_cycles: u64,
    pub l1: LevelStats,
    pub l2: LevelStats,
}

/// Everything a run needs.
#[derive(Clone, Debug)]
pub struct RunParams {
    pub model: ModelConfig,
    pub layout: LayoutChoice,
    pub accel: AcceleratorModel,
    pub hierarchy: HierarchyConfig,
    pub seed: u64,
    pub activation: Activation,
    pub elem_width: usize,
    /// When false, kernels emit traces and cost counters but skip the
    /// floating-point math (addresses never depend on values). Used by
    /// timing-only experiments.
    pub compute_values: bool,
    /// Allow rayon to generate per-core work concurrently (identical
    /// results either way).
    pub exec_parallel: bool,
    /// Reject shapes that are not multiples of the kernel size instead of
    /// padding (BlockWise) or running ragged edge tiles (RowWise).
    pub strict_dims: bool,
}

impl RunParams {
    pub fn new(model: ModelConfig, layout: LayoutChoice, accel: AcceleratorModel) -> Self {
        RunParams {
            model,
            layout,
            accel,
            hierarchy: HierarchyConfig::default(),
            seed: 42,
            activation: Activation::Gelu,
            elem_width: 4,
            compute_values: true,
            exec_parallel: true,
            strict_dims: false,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.model.validate()?;
        self.accel.validate()?;
        self.hierarchy.validate()?;
        let k = self.accel.kernel_size;
        if self.model.head_dim % k != 0 {
            return Err(SimError::Config(format!(
                "head_dim {} must be a multiple of the kernel size {k} so each head's \
                 output tiles align with its slice of the concatenated matrix",
                self.model.head_dim
            )));
        }
        if self.strict_dims {
            for (name, dim) in [
                ("seq_len", self.model.seq_len),
                ("model_dim", self.model.model_dim),
                ("ff_dim", self.model.ff_dim),
            ] {
                if dim % k != 0 {
                    return Err(SimError::Config(format!(
                        "strict_dims: {name} {dim} is not a multiple of kernel size {k}"
                    )));
                }
            }
        }
        if self.elem_width == 0 {
            return Err(SimError::Config("element width must be positive".into()));
        }
        Ok(())
    }
}

/// Round-robin assignment of `items` indices to `cores` work lists.
pub fn partition_multicore(items: usize, cores: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::with_capacity(items.div_ceil(cores.max(1))); cores];
    for i in 0..items {
        out[i % cores].push(i);
    }
    out
}

fn sub_seed(seed: u64, layer: usize, slot: u64) -> u64 {
    let mut z = seed
        ^ (layer as u64).wrapping_mul(0x9E3779B97F4A7C15)
        ^ slot.wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Uniform values in [-0.1, 0.1), generated in logical row-major order so the
/// contents are layout-independent for a given seed.
fn random_matrix(
    rows: usize,
    cols: usize,
    layout: Layout,
    elem_width: usize,
    seed: u64,
    alloc: &mut AddressAllocator,
) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (pr, pc) = layout.padded_dims(rows, cols);
    let base = alloc.alloc((pr * pc * elem_width) as u64);
    Matrix::from_fn(rows, cols, layout, base, elem_width, |_, _| {
        rng.gen_range(-0.1f32..0.1)
    })
}

/// Weights of one encoder layer, already arranged in the run's layout (the
/// repack happens ahead of time and is not part of the timed pipeline).
pub struct LayerWeights {
    pub wq: Vec<Matrix>,
    pub wk: Vec<Matrix>,
    pub wv: Vec<Matrix>,
    pub w_proj: Matrix,
    pub w_ff1: Matrix,
    pub w_ff2: Matrix,
    pub gamma1: Vec<f32>,
    pub beta1: Vec<f32>,
    pub gamma2: Vec<f32>,
    pub beta2: Vec<f32>,
}

impl LayerWeights {
    pub fn generate(
        p: &RunParams,
        layer: usize,
        layout: Layout,
        alloc: &mut AddressAllocator,
    ) -> Self {
        let m = &p.model;
        let ew = p.elem_width;
        let mut wq = Vec::with_capacity(m.heads);
        let mut wk = Vec::with_capacity(m.heads);
        let mut wv = Vec::with_capacity(m.heads);
        for h in 0..m.heads {
            let s = (h * 3) as u64;
            wq.push(random_matrix(m.model_dim, m.head_dim, layout, ew, sub_seed(p.seed, layer, s), alloc));
            wk.push(random_matrix(m.model_dim, m.head_dim, layout, ew, sub_seed(p.seed, layer, s + 1), alloc));
            wv.push(random_matrix(m.model_dim, m.head_dim, layout, ew, sub_seed(p.seed, layer, s + 2), alloc));
        }
        let s0 = (m.heads * 3) as u64;
        LayerWeights {
            wq,
            wk,
            wv,
            w_proj: random_matrix(m.model_dim, m.model_dim, layout, ew, sub_seed(p.seed, layer, s0), alloc),
            w_ff1: random_matrix(m.model_dim, m.ff_dim, layout, ew, sub_seed(p.seed, layer, s0 + 1), alloc),
            w_ff2: random_matrix(m.ff_dim, m.model_dim, layout, ew, sub_seed(p.seed, layer, s0 + 2), alloc),
            gamma1: vec![1.0; m.model_dim],
            beta1: vec![0.0; m.model_dim],
            gamma2: vec![1.0; m.model_dim],
            beta2: vec![0.0; m.model_dim],
        }
    }
}

/// Preallocated simulated addresses of one head's private buffers. Workers
/// construct the actual value buffers locally; the addresses stay globally
/// fixed so traces do not depend on the execution strategy.
#[derive(Clone, Copy)]
struct HeadPlan {
    q: u64,
    k: u64,
    v: u64,
    kt: u64,
    scores: u64,
}

fn plan_base(alloc: &mut AddressAllocator, rows: usize, cols: usize, layout: Layout, ew: usize) -> u64 {
    let (pr, pc) = layout.padded_dims(rows, cols);
    alloc.alloc((pr * pc * ew) as u64)
}

struct Engine<'p> {
    p: &'p RunParams,
    k: usize,
    layout: Layout,
    h: MemoryHierarchy,
    alloc: AddressAllocator,
    timings: [ComponentTiming; 11],
    gemm_stats: GemmStats,
    kernel_stats: KernelStats,
}

/// Per-core result of the attention stage: one buffered trace and compute
/// total per sub-component, plus the output bands of every processed head.
struct HeadGroupOut {
    traces: [VecTrace; 5],
    compute: [u64; 5],
    bands: Vec<(usize, Vec<(usize, Vec<f32>)>)>,
    gemm: GemmStats,
    kernel: KernelStats,
}

const ATTN_COMPONENTS: [Component; 5] = [
    Component::QkvGemm,
    Component::Transpose,
    Component::QktGemm,
    Component::Softmax,
    Component::AvGemm,
];

impl<'p> Engine<'p> {
    fn new(p: &'p RunParams) -> Result<Self, SimError> {
        Ok(Engine {
            p,
            k: p.accel.kernel_size,
            layout: p.layout.to_layout(p.accel.kernel_size),
            h: MemoryHierarchy::new(&p.hierarchy)?,
            alloc: AddressAllocator::new(0x1000),
            timings: Default::default(),
            gemm_stats: GemmStats::default(),
            kernel_stats: KernelStats::default(),
        })
    }

    fn cores(&self) -> usize {
        self.h.cores()
    }

    fn add_window(&mut self, comp: Component, compute_cycles: u64, delta: &CacheSnapshot) {
        let t = &mut self.timings[comp.index()];
        t.compute_cycles += compute_cycles;
        t.memory_cycles += delta.memory_cycles();
        t.l1.add(&delta.l1);
        t.l2.add(&delta.l2);
    }

    /// Runs `f` streaming into core 0 and attributes its cycle count plus the
    /// cache-counter delta to `comp`.
    fn window<R>(
        &mut self,
        comp: Component,
        f: impl FnOnce(&mut LiveSink) -> Result<(u64, R), SimError>,
    ) -> Result<R, SimError> {
        let before = self.h.snapshot();
        let result = {
            let mut sink = LiveSink { hierarchy: &mut self.h, core: 0 };
            f(&mut sink)
        };
        let (cycles, r) = result?;
        let delta = self.h.snapshot().delta(&before);
        self.add_window(comp, cycles, &delta);
        Ok(r)
    }

    /// Replays one buffered trace per core and attributes the window to
    /// `comp` with the slowest core's compute cycles.
    fn replay(&mut self, comp: Component, compute_by_core: &[u64], traces: &[VecTrace]) {
        let (delta, _) = run_trace(&mut self.h, traces);
        let compute = compute_by_core.iter().copied().max().unwrap_or(0);
        self.add_window(comp, compute, &delta);
    }

    /// A GEMM component partitioned by output tile row.
    fn gemm_component(
        &mut self,
        comp: Component,
        a: &Matrix,
        b: &Matrix,
        activation: Option<Activation>,
        c: &mut Matrix,
        col_tile_offset: usize,
    ) -> Result<(), SimError> {
        let k = self.k;
        let mt = a.rows.div_ceil(k);
        let compute = self.p.compute_values;
        let accel = self.p.accel;
        let c_meta = c.meta();
        if self.cores() == 1 {
            let rows: Vec<usize> = (0..mt).collect();
            let (bands, stats) = self.window(comp, |sink| {
                let (bands, stats) = gemm_tile_rows(
                    a, b, &accel, activation, &c_meta, col_tile_offset, &rows, compute, sink,
                )?;
                Ok((stats.compute_cycles, (bands, stats)))
            })?;
            self.gemm_stats.add(&stats);
            if compute {
                scatter_bands(c, k, col_tile_offset, &bands);
            }
        } else {
            let parts = partition_multicore(mt, self.cores());
            let nt = a.cols.div_ceil(k);
            let pt = b.cols.div_ceil(k);
            let per_row_events = pt * (nt * 2 + 1) * k * k;
            let results = map_items(parts, self.p.exec_parallel, |rows| {
                let mut trace = VecTrace::with_capacity(rows.len() * per_row_events);
                let out = gemm_tile_rows(
                    a, b, &accel, activation, &c_meta, col_tile_offset, &rows, compute, &mut trace,
                );
                (out, trace)
            });
            let mut compute_by_core = Vec::with_capacity(results.len());
            let mut traces = Vec::with_capacity(results.len());
            let mut all_bands = Vec::new();
            for (out, trace) in results {
                let (bands, stats) = out?;
                compute_by_core.push(stats.compute_cycles);
                self.gemm_stats.add(&stats);
                all_bands.extend(bands);
                traces.push(trace);
            }
            self.replay(comp, &compute_by_core, &traces);
            if compute {
                scatter_bands(c, k, col_tile_offset, &all_bands);
            }
        }
        Ok(())
    }

    /// Fused residual-add + layer norm, partitioned by `K`-row bands. Each
    /// band adds `a + b` into `out`'s addresses in storage order and then
    /// normalizes its rows in place.
    fn addnorm_component(
        &mut self,
        comp: Component,
        a: &Matrix,
        b: &Matrix,
        out: &mut Matrix,
        gamma: &[f32],
        beta: &[f32],
    ) -> Result<(), SimError> {
        let band_rows = self.k;
        let bands_n = a.rows.div_ceil(band_rows);
        let compute = self.p.compute_values;
        let out_meta = out.meta();
        if self.cores() == 1 {
            let bands: Vec<usize> = (0..bands_n).collect();
            let (rows, stats) = self.window(comp, |sink| {
                let (rows, cycles, stats) =
                    addnorm_bands(a, b, &out_meta, gamma, beta, &bands, band_rows, compute, sink);
                Ok((cycles, (rows, stats)))
            })?;
            self.kernel_stats.add(&stats);
            if compute {
                merge_rows(out, rows);
            }
        } else {
            let parts = partition_multicore(bands_n, self.cores());
            let results = map_items(parts, self.p.exec_parallel, |bands| {
                let mut trace = VecTrace::new();
                let (rows, cycles, stats) =
                    addnorm_bands(a, b, &out_meta, gamma, beta, &bands, band_rows, compute, &mut trace);
                (rows, cycles, stats, trace)
            });
            let mut compute_by_core = Vec::new();
            let mut traces = Vec::new();
            let mut all_rows = Vec::new();
            for (rows, cycles, stats, trace) in results {
                compute_by_core.push(cycles);
                self.kernel_stats.add(&stats);
                all_rows.extend(rows);
                traces.push(trace);
            }
            self.replay(comp, &compute_by_core, &traces);
            if compute {
                merge_rows(out, all_rows);
            }
        }
        Ok(())
    }

    /// Multi-head attention: each core owns whole heads and runs their five
    /// sub-stages; head outputs land directly in the head's tile columns of
    /// `concat` (no separate copy pass).
    fn attention(
        &mut self,
        x: &Matrix,
        w: &LayerWeights,
        concat: &mut Matrix,
        plans: &[HeadPlan],
    ) -> Result<(), SimError> {
        let m = &self.p.model;
        let concat_meta = concat.meta();
        if self.cores() == 1 {
            for head in 0..m.heads {
                let bands = self.run_head_streaming(x, w, head, plans[head], &concat_meta)?;
                if self.p.compute_values {
                    scatter_bands(concat, self.k, head * (m.head_dim / self.k), &bands);
                }
            }
        } else {
            let groups = partition_multicore(m.heads, self.cores());
            let ctx = HeadCtx {
                p: self.p,
                layout: self.layout,
                k: self.k,
                concat: concat_meta,
            };
            let results = map_items(groups, self.p.exec_parallel, |heads| {
                run_head_group(&ctx, x, w, plans, &heads)
            });
            let mut outs = Vec::with_capacity(results.len());
            for r in results {
                outs.push(r?);
            }
            for (ci, comp) in ATTN_COMPONENTS.iter().enumerate() {
                let traces: Vec<VecTrace> =
                    outs.iter_mut().map(|o| std::mem::take(&mut o.traces[ci])).collect();
                let compute: Vec<u64> = outs.iter().map(|o| o.compute[ci]).collect();
                self.replay(*comp, &compute, &traces);
            }
            for out in outs {
                self.gemm_stats.add(&out.gemm);
                self.kernel_stats.add(&out.kernel);
                if self.p.compute_values {
                    for (head, bands) in out.bands {
                        scatter_bands(concat, self.k, head * (m.head_dim / self.k), &bands);
                    }
                }
            }
        }
        Ok(())
    }

    /// Single-core path: the five per-head stages run in order, each in its
    /// own attribution window.
    fn run_head_streaming(
        &mut self,
        x: &Matrix,
        w: &LayerWeights,
        head: usize,
        plan: HeadPlan,
        concat_meta: &MatrixMeta,
    ) -> Result<Vec<(usize, Vec<f32>)>, SimError> {
        let ctx = HeadCtx {
            p: self.p,
            layout: self.layout,
            k: self.k,
            concat: *concat_meta,
        };
        let mut gemm_total = GemmStats::default();
        let mut kernel_total = KernelStats::default();

        let bufs = self.window(Component::QkvGemm, |sink| {
            let (bufs, cycles, stats) = head_qkv(&ctx, x, w, head, plan, sink)?;
            gemm_total.add(&stats);
            Ok((cycles, bufs))
        })?;
        let kt = self.window(Component::Transpose, |sink| {
            let (kt, stats) = head_transpose(&ctx, &bufs.k, plan, sink)?;
            kernel_total.add(&stats);
            Ok((stats.compute_cycles, kt))
        })?;
        let mut scores = self.window(Component::QktGemm, |sink| {
            let (scores, cycles, stats) = head_scores(&ctx, &bufs.q, &kt, plan, sink)?;
            gemm_total.add(&stats);
            Ok((cycles, scores))
        })?;
        self.window(Component::Softmax, |sink| {
            let stats = head_softmax(&ctx, &mut scores, sink);
            kernel_total.add(&stats);
            Ok((stats.compute_cycles, ()))
        })?;
        let bands = self.window(Component::AvGemm, |sink| {
            let (bands, cycles, stats) = head_av(&ctx, &scores, &bufs.v, head, sink)?;
            gemm_total.add(&stats);
            Ok((cycles, bands))
        })?;
        self.gemm_stats.add(&gemm_total);
        self.kernel_stats.add(&kernel_total);
        Ok(bands)
    }

    /// Times a layout conversion (always on core 0).
    fn convert_window<R>(
        h: &mut MemoryHierarchy,
        timings: &mut [ComponentTiming; 11],
        f: impl FnOnce(&mut LiveSink) -> Result<(u64, R), SimError>,
    ) -> Result<R, SimError> {
        let before = h.snapshot();
        let result = {
            let mut sink = LiveSink { hierarchy: h, core: 0 };
            f(&mut sink)
        };
        let (cycles, r) = result?;
        let delta = h.snapshot().delta(&before);
        let t = &mut timings[Component::LayoutConversion.index()];
        t.compute_cycles += cycles;
        t.memory_cycles += delta.memory_cycles();
        t.l1.add(&delta.l1);
        t.l2.add(&delta.l2);
        Ok(r)
    }

    fn convert_to_blockwise(&mut self, x: Matrix) -> Result<Matrix, SimError> {
        let k = self.k;
        let alloc = &mut self.alloc;
        let logical = (x.rows * x.cols) as u64;
        Self::convert_window(&mut self.h, &mut self.timings, |sink| {
            let out = x.to_blockwise_traced(k, alloc, sink)?;
            Ok((logical * cost::CONVERT_PER_ELEM, out))
        })
    }

    fn convert_to_rowwise(&mut self, x: Matrix) -> Result<Matrix, SimError> {
        let alloc = &mut self.alloc;
        let logical = (x.rows * x.cols) as u64;
        Self::convert_window(&mut self.h, &mut self.timings, |sink| {
            let out = x.from_blockwise_traced(alloc, sink)?;
            Ok((logical * cost::CONVERT_PER_ELEM, out))
        })
    }
}

/// Shared, immutable context for per-head work.
struct HeadCtx<'p> {
    p: &'p RunParams,
    layout: Layout,
    k: usize,
    concat: MatrixMeta,
}

struct HeadBufs {
    q: Matrix,
    k: Matrix,
    v: Matrix,
}

fn all_tile_rows(rows: usize, k: usize) -> Vec<usize> {
    (0..rows.div_ceil(k)).collect()
}

/// Q = X Wq, K = X Wk, V = X Wv for one head, into the head's planned
/// buffers.
fn head_qkv<S: TraceSink>(
    ctx: &HeadCtx,
    x: &Matrix,
    w: &LayerWeights,
    head: usize,
    plan: HeadPlan,
    sink: &mut S,
) -> Result<(HeadBufs, u64, GemmStats), SimError> {
    let m = &ctx.p.model;
    let ew = ctx.p.elem_width;
    let compute = ctx.p.compute_values;
    let rows = all_tile_rows(m.seq_len, ctx.k);
    let mut total = GemmStats::default();
    let mut make = |wm: &Matrix, base: u64, sink: &mut S| -> Result<Matrix, SimError> {
        let mut out = Matrix::zeros(m.seq_len, m.head_dim, ctx.layout, base, ew);
        let (bands, stats) =
            gemm_tile_rows(x, wm, &ctx.p.accel, None, &out.meta(), 0, &rows, compute, sink)?;
        total.add(&stats);
        if compute {
            scatter_bands(&mut out, ctx.k, 0, &bands);
        }
        Ok(out)
    };
    let q = make(&w.wq[head], plan.q, sink)?;
    let k = make(&w.wk[head], plan.k, sink)?;
    let v = make(&w.wv[head], plan.v, sink)?;
    let cycles = total.compute_cycles;
    Ok((HeadBufs { q, k, v }, cycles, total))
}

fn head_transpose<S: TraceSink>(
    ctx: &HeadCtx,
    k_mat: &Matrix,
    plan: HeadPlan,
    sink: &mut S,
) -> Result<(Matrix, KernelStats), SimError> {
    let m = &ctx.p.model;
    let mut kt = Matrix::zeros(m.head_dim, m.seq_len, ctx.layout, plan.kt, ctx.p.elem_width);
    let stats = transpose_into(k_mat, &mut kt, ctx.p.compute_values, sink)?;
    Ok((kt, stats))
}

fn head_scores<S: TraceSink>(
    ctx: &HeadCtx,
    q: &Matrix,
    kt: &Matrix,
    plan: HeadPlan,
    sink: &mut S,
) -> Result<(Matrix, u64, GemmStats), SimError> {
    let m = &ctx.p.model;
    let compute = ctx.p.compute_values;
    let mut scores =
        Matrix::zeros(m.seq_len, m.seq_len, ctx.layout, plan.scores, ctx.p.elem_width);
    let rows = all_tile_rows(m.seq_len, ctx.k);
    let (bands, stats) =
        gemm_tile_rows(q, kt, &ctx.p.accel, None, &scores.meta(), 0, &rows, compute, sink)?;
    if compute {
        scatter_bands(&mut scores, ctx.k, 0, &bands);
    }
    let cycles = stats.compute_cycles;
    Ok((scores, cycles, stats))
}

fn head_softmax<S: TraceSink>(ctx: &HeadCtx, scores: &mut Matrix, sink: &mut S) -> KernelStats {
    let scale = 1.0 / (ctx.p.model.head_dim as f64).sqrt();
    softmax_rows(scores, scale, ctx.p.compute_values, sink)
}

/// H = softmax(scores) V, stored straight into the head's tile columns of the
/// concatenated output.
fn head_av<S: TraceSink>(
    ctx: &HeadCtx,
    scores: &Matrix,
    v: &Matrix,
    head: usize,
    sink: &mut S,
) -> Result<(Vec<(usize, Vec<f32>)>, u64, GemmStats), SimError> {
    let m = &ctx.p.model;
    let rows = all_tile_rows(m.seq_len, ctx.k);
    let col_tiles = head * (m.head_dim / ctx.k);
    let (bands, stats) = gemm_tile_rows(
        scores,
        v,
        &ctx.p.accel,
        None,
        &ctx.concat,
        col_tiles,
        &rows,
        ctx.p.compute_values,
        sink,
    )?;
    let cycles = stats.compute_cycles;
    Ok((bands, cycles, stats))
}

/// Buffered path: runs a list of whole heads, splitting their events across
/// five per-component traces.
fn run_head_group(
    ctx: &HeadCtx,
    x: &Matrix,
    w: &LayerWeights,
    plans: &[HeadPlan],
    heads: &[usize],
) -> Result<HeadGroupOut, SimError> {
    let mut out = HeadGroupOut {
        traces: Default::default(),
        compute: [0; 5],
        bands: Vec::with_capacity(heads.len()),
        gemm: GemmStats::default(),
        kernel: KernelStats::default(),
    };
    for &head in heads {
        let plan = plans[head];
        let (bufs, cycles, stats) = head_qkv(ctx, x, w, head, plan, &mut out.traces[0])?;
        out.compute[0] += cycles;
        out.gemm.add(&stats);

        let (kt, stats) = head_transpose(ctx, &bufs.k, plan, &mut out.traces[1])?;
        out.compute[1] += stats.compute_cycles;
        out.kernel.add(&stats);

        let (mut scores, cycles, stats) = head_scores(ctx, &bufs.q, &kt, plan, &mut out.traces[2])?;
        out.compute[2] += cycles;
        out.gemm.add(&stats);

        let stats = head_softmax(ctx, &mut scores, &mut out.traces[3]);
        out.compute[3] += stats.compute_cycles;
        out.kernel.add(&stats);

        let (bands, cycles, stats) = head_av(ctx, &scores, &bufs.v, head, &mut out.traces[4])?;
        out.compute[4] += cycles;
        out.gemm.add(&stats);
        out.bands.push((head, bands));
    }
    Ok(out)
}

/// One core's share of a fused residual+norm stage: for each assigned band,
/// add `a + b` in storage order, then layer-normalize the band's rows.
#[allow(clippy::too_many_arguments)]
fn addnorm_bands<S: TraceSink>(
    a: &Matrix,
    b: &Matrix,
    out: &MatrixMeta,
    gamma: &[f32],
    beta: &[f32],
    bands: &[usize],
    band_rows: usize,
    compute: bool,
    sink: &mut S,
) -> (Vec<(usize, Vec<f32>)>, u64, KernelStats) {
    let mut all_rows = Vec::new();
    let mut total = KernelStats::default();
    for &band in bands {
        let (mut rows, stats) = residual_band(a, b, out, band, band_rows, compute, sink);
        total.add(&stats);
        let stats = layernorm_rows_local(&mut rows, out, gamma, beta, LAYERNORM_EPS, compute, sink);
        total.add(&stats);
        all_rows.extend(rows);
    }
    let cycles = total.compute_cycles;
    (all_rows, cycles, total)
}

fn merge_rows(dst: &mut Matrix, rows: Vec<(usize, Vec<f32>)>) {
    for (r, vals) in rows {
        for (c, v) in vals.into_iter().enumerate() {
            dst.set(r, c, v);
        }
    }
}

/// One encoder layer. Returns the layer output (which becomes the next
/// layer's input).
fn encoder_layer(engine: &mut Engine, x: &Matrix, w: &LayerWeights) -> Result<Matrix, SimError> {
    let m = engine.p.model;
    let layout = engine.layout;
    let ew = engine.p.elem_width;

    let plans: Vec<HeadPlan> = (0..m.heads)
        .map(|_| HeadPlan {
            q: plan_base(&mut engine.alloc, m.seq_len, m.head_dim, layout, ew),
            k: plan_base(&mut engine.alloc, m.seq_len, m.head_dim, layout, ew),
            v: plan_base(&mut engine.alloc, m.seq_len, m.head_dim, layout, ew),
            kt: plan_base(&mut engine.alloc, m.head_dim, m.seq_len, layout, ew),
            scores: plan_base(&mut engine.alloc, m.seq_len, m.seq_len, layout, ew),
        })
        .collect();
    let mut concat = engine.alloc.alloc_matrix(m.seq_len, m.model_dim, layout, ew);
    let mut proj_out = engine.alloc.alloc_matrix(m.seq_len, m.model_dim, layout, ew);
    let mut res1 = engine.alloc.alloc_matrix(m.seq_len, m.model_dim, layout, ew);
    let mut ff1_out = engine.alloc.alloc_matrix(m.seq_len, m.ff_dim, layout, ew);
    let mut ff2_out = engine.alloc.alloc_matrix(m.seq_len, m.model_dim, layout, ew);
    let mut res2 = engine.alloc.alloc_matrix(m.seq_len, m.model_dim, layout, ew);

    engine.attention(x, w, &mut concat, &plans)?;
    engine.gemm_component(Component::Projection, &concat, &w.w_proj, None, &mut proj_out, 0)?;
    engine.addnorm_component(Component::AddNorm1, x, &proj_out, &mut res1, &w.gamma1, &w.beta1)?;
    engine.gemm_component(
        Component::Ff1,
        &res1,
        &w.w_ff1,
        Some(engine.p.activation),
        &mut ff1_out,
        0,
    )?;
    engine.gemm_component(Component::Ff2, &ff1_out, &w.w_ff2, None, &mut ff2_out, 0)?;
    engine.addnorm_component(Component::AddNorm2, &res1, &ff2_out, &mut res2, &w.gamma2, &w.beta2)?;
    Ok(res2)
}

/// Result of one full run: per-component timings plus whole-run cache
/// counters and aggregate operation statistics.
pub struct RunResult {
    pub timings: [ComponentTiming; 11],
    pub cache: CacheSnapshot,
    pub gemm: GemmStats,
    pub kernels: KernelStats,
    pub output: Matrix,
}

impl RunResult {
    pub fn total_compute_cycles(&self) -> u64 {
        self.timings.iter().map(|t| t.compute_cycles).sum()
    }

    pub fn total_memory_cycles(&self) -> u64 {
        self.timings.iter().map(|t| t.memory_cycles).sum()
    }

    pub fn total_cycles(&self) -> u64 {
        self.total_compute_cycles() + self.total_memory_cycles()
    }

    pub fn component(&self, c: Component) -> &ComponentTiming {
        &self.timings[c.index()]
    }
}

/// The run's input activations: uniform values derived from the run seed,
/// generated in logical row-major order (and therefore independent of the
/// layout the run will use).
pub fn seed_input(p: &RunParams, alloc: &mut AddressAllocator) -> Matrix {
    random_matrix(
        p.model.seq_len,
        p.model.model_dim,
        Layout::RowWise,
        p.elem_width,
        sub_seed(p.seed, 0, u64::MAX),
        alloc,
    )
}

/// Runs the full encoder stack: seeds the input, optionally repacks it into
/// blocks (timed), pushes it through every layer, and converts the final
/// output back to row-major when running block-wise (timed).
pub fn run_model(p: &RunParams) -> Result<RunResult, SimError> {
    p.validate()?;
    let mut engine = Engine::new(p)?;
    let m = p.model;

    let input = seed_input(p, &mut engine.alloc);
    let mut x = match engine.layout {
        Layout::RowWise => input,
        Layout::BlockWise { .. } => engine.convert_to_blockwise(input)?,
    };
    for layer in 0..m.layers {
        let w = LayerWeights::generate(p, layer, engine.layout, &mut engine.alloc);
        x = encoder_layer(&mut engine, &x, &w)?;
    }
    if matches!(engine.layout, Layout::BlockWise { .. }) {
        x = engine.convert_to_rowwise(x)?;
    }
    Ok(RunResult {
        timings: engine.timings,
        cache: engine.h.snapshot(),
        gemm: engine.gemm_stats,
        kernels: engine.kernel_stats,
        output: x,
    })
}

/// One attention head end to end, as a standalone operation: projects Q/K/V,
/// forms the scaled scores against the transposed keys, applies row softmax
/// and weights the values. Returns the head output and its accelerator
/// compute cycles.
pub fn attention_head<S: TraceSink>(
    x: &Matrix,
    wq: &Matrix,
    wk: &Matrix,
    wv: &Matrix,
    accel: &AcceleratorModel,
    alloc: &mut AddressAllocator,
    compute: bool,
    sink: &mut S,
) -> Result<(Matrix, u64), SimError> {
    if wq.rows != x.cols || wk.rows != x.cols || wv.rows != x.cols {
        return Err(SimError::ShapeMismatch(
            "projection weights must have model_dim rows".into(),
        ));
    }
    let head_dim = wq.cols;
    let seq = x.rows;
    let mut cycles = 0u64;

    let mut proj = |w: &Matrix, sink: &mut S| -> Result<Matrix, SimError> {
        let (out, stats) = crate::accel::tiled_gemm(x, w, accel, None, alloc, compute, sink)?;
        cycles += stats.compute_cycles;
        Ok(out)
    };
    let q = proj(wq, sink)?;
    let k_mat = proj(wk, sink)?;
    let v = proj(wv, sink)?;

    let (kt, tstats) = kernels::transpose(&k_mat, alloc, compute, sink)?;
    cycles += tstats.compute_cycles;

    let (mut scores, sstats) = crate::accel::tiled_gemm(&q, &kt, accel, None, alloc, compute, sink)?;
    cycles += sstats.compute_cycles;

    let scale = 1.0 / (head_dim as f64).sqrt();
    cycles += softmax_rows(&mut scores, scale, compute, sink).compute_cycles;

    let (h, avstats) = crate::accel::tiled_gemm(&scores, &v, accel, None, alloc, compute, sink)?;
    cycles += avstats.compute_cycles;
    debug_assert_eq!(h.rows, seq);
    Ok((h, cycles))
}
