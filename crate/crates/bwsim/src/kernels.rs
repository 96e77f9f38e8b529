//! Non-GEMM transformer kernels: row softmax, layer normalization, transpose
//! and residual addition, plus the activation functions fused into GEMM
//! output tiles.
//!
//! Every kernel walks the logical element grid in a fixed order that does not
//! depend on the storage layout, emits one trace event per element touch, and
//! reports a scalar compute cost from the constants in [`cost`]. Because the
//! traversal order is layout-independent, the numeric results are bit-exact
//! across layouts — only the emitted byte addresses differ.

use crate::error::SimError;
use crate::layout::{Layout, Matrix, MatrixMeta};
use crate::trace::TraceSink;

/// Scalar cost model, in cycles. One fused table used everywhere so reported
/// compute cycles stay comparable across kernels.
pub mod cost {
    pub const ADD: u64 = 1;
    pub const MUL: u64 = 1;
    pub const CMP: u64 = 1;
    pub const COPY: u64 = 1;
    pub const DIV: u64 = 4;
    pub const EXP: u64 = 4;
    pub const SQRT: u64 = 4;

    /// Statistics pass: scale multiply, running-max compare, exponential for
    /// the rescaled running sum, accumulate.
    pub const SOFTMAX_STATS_PER_ELEM: u64 = MUL + CMP + EXP + ADD;
    /// Normalize pass: scale multiply, subtract max, exponential, divide.
    pub const SOFTMAX_NORM_PER_ELEM: u64 = MUL + ADD + EXP + DIV;
    pub const SOFTMAX_PER_ELEM: u64 = SOFTMAX_STATS_PER_ELEM + SOFTMAX_NORM_PER_ELEM;

    /// Statistics pass: sum accumulate plus square-and-accumulate.
    pub const LAYERNORM_STATS_PER_ELEM: u64 = ADD + MUL + ADD;
    /// Normalize pass: center, scale by 1/sigma, gamma multiply, beta add.
    pub const LAYERNORM_NORM_PER_ELEM: u64 = ADD + MUL + MUL + ADD;
    pub const LAYERNORM_PER_ELEM: u64 = LAYERNORM_STATS_PER_ELEM + LAYERNORM_NORM_PER_ELEM;
    /// Once per row: divide and square root for 1/sqrt(var + eps).
    pub const LAYERNORM_PER_ROW: u64 = DIV + SQRT;

    pub const TRANSPOSE_PER_ELEM: u64 = COPY;
    pub const RESIDUAL_PER_ELEM: u64 = ADD;
    pub const CONVERT_PER_ELEM: u64 = COPY;

    /// Tanh-approximation GELU: three multiplies for x^3, scale, add, tanh
    /// (costed like two exponentials is overkill; one exp plus arithmetic).
    pub const GELU_PER_ELEM: u64 = 8;
    pub const RELU_PER_ELEM: u64 = CMP;
}

/// Activation applied in the GEMM output-tile write path (no extra memory
/// traffic: the value is transformed in-register before the store).
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Activation {
    Gelu,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Gelu => {
                const SQRT_2_OVER_PI: f32 = 0.797_884_56;
                let x3 = x * x * x;
                0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x3)).tanh())
            }
            Activation::Relu => x.max(0.0),
        }
    }

    pub fn cycles_per_element(self) -> u64 {
        match self {
            Activation::Gelu => cost::GELU_PER_ELEM,
            Activation::Relu => cost::RELU_PER_ELEM,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Gelu => "gelu",
            Activation::Relu => "relu",
        }
    }
}

/// Element-touch and cycle counters of one kernel invocation.
#[derive(Clone, Copy, Default, PartialEq, Eq, Debug)]
pub struct KernelStats {
    pub element_reads: u64,
    pub element_writes: u64,
    pub compute_cycles: u64,
}

impl KernelStats {
    pub fn add(&mut self, other: &KernelStats) {
        self.element_reads += other.element_reads;
        self.element_writes += other.element_writes;
        self.compute_cycles += other.compute_cycles;
    }
}

/// Row-wise numerically-stable softmax of `scale * m`, in place.
///
/// Two passes per row: a statistics pass reading each element once while
/// tracking the running maximum and the running sum rescaled to it, then a
/// normalize pass that reads each element and writes its softmax value back
/// to the same address. Exactly two reads and one write per element.
///
/// With `compute` off, only the trace and counters are produced (addresses
/// never depend on values).
pub fn softmax_rows<S: TraceSink>(
    m: &mut Matrix,
    scale: f64,
    compute: bool,
    sink: &mut S,
) -> KernelStats {
    let (rows, cols) = (m.rows, m.cols);
    for r in 0..rows {
        let mut max = f64::NEG_INFINITY;
        let mut sum = 0.0f64;
        for c in 0..cols {
            sink.read(m.addr_of(r, c));
            if compute {
                let x = m.get(r, c) as f64 * scale;
                if x > max {
                    // Rescale the partial sum to the new maximum. The first
                    // element takes this branch with exp(-inf) = 0.
                    sum *= (max - x).exp();
                    max = x;
                }
                sum += (x - max).exp();
            }
        }
        for c in 0..cols {
            let addr = m.addr_of(r, c);
            sink.read(addr);
            if compute {
                let x = m.get(r, c) as f64 * scale;
                m.set(r, c, ((x - max).exp() / sum) as f32);
            }
            sink.write(addr);
        }
    }
    let n = (rows * cols) as u64;
    KernelStats {
        element_reads: 2 * n,
        element_writes: n,
        compute_cycles: n * cost::SOFTMAX_PER_ELEM,
    }
}

/// Layer normalization of explicit row buffers destined for the matrix
/// described by `out`. Shared by the public in-place entry point and the
/// fused residual+norm pipeline stage (whose rows live in per-core buffers
/// until the merge).
///
/// Population statistics are accumulated in f64; per element the trace is two
/// reads and one write against the row's addresses in `out`.
pub(crate) fn layernorm_rows_local<S: TraceSink>(
    rows: &mut [(usize, Vec<f32>)],
    out: &MatrixMeta,
    gamma: &[f32],
    beta: &[f32],
    eps: f64,
    compute: bool,
    sink: &mut S,
) -> KernelStats {
    let cols = out.cols;
    assert_eq!(gamma.len(), cols, "gamma length must match column count");
    assert_eq!(beta.len(), cols, "beta length must match column count");
    for (r, vals) in rows.iter_mut() {
        debug_assert_eq!(vals.len(), cols);
        let mut sum = 0.0f64;
        let mut sumsq = 0.0f64;
        for c in 0..cols {
            sink.read(out.addr_of(*r, c));
            if compute {
                let x = vals[c] as f64;
                sum += x;
                sumsq += x * x;
            }
        }
        let n = cols as f64;
        let mean = sum / n;
        let inv = 1.0 / ((sumsq / n - mean * mean).max(0.0) + eps).sqrt();
        for c in 0..cols {
            let addr = out.addr_of(*r, c);
            sink.read(addr);
            if compute {
                let x = vals[c] as f64;
                vals[c] = (gamma[c] as f64 * ((x - mean) * inv) + beta[c] as f64) as f32;
            }
            sink.write(addr);
        }
    }
    let n = (rows.len() * cols) as u64;
    KernelStats {
        element_reads: 2 * n,
        element_writes: n,
        compute_cycles: n * cost::LAYERNORM_PER_ELEM + rows.len() as u64 * cost::LAYERNORM_PER_ROW,
    }
}

/// Row-wise layer normalization in place, with per-column `gamma`/`beta`
/// (the parameter vectors are assumed register/stream resident and are not
/// traced).
pub fn layernorm_rows<S: TraceSink>(
    m: &mut Matrix,
    gamma: &[f32],
    beta: &[f32],
    eps: f64,
    compute: bool,
    sink: &mut S,
) -> KernelStats {
    let meta = m.meta();
    let mut rows: Vec<(usize, Vec<f32>)> = (0..m.rows)
        .map(|r| (r, (0..m.cols).map(|c| m.get(r, c)).collect()))
        .collect();
    let stats = layernorm_rows_local(&mut rows, &meta, gamma, beta, eps, compute, sink);
    if compute {
        for (r, vals) in rows {
            for (c, v) in vals.into_iter().enumerate() {
                m.set(r, c, v);
            }
        }
    }
    stats
}

/// Transposes `src` into `dst` (same layout family, swapped logical shape).
///
/// The destination is walked in storage order, so writes form one ascending
/// address stream; reads gather the source column-wise. Padding slots emit
/// no events.
pub fn transpose_into<S: TraceSink>(
    src: &Matrix,
    dst: &mut Matrix,
    compute: bool,
    sink: &mut S,
) -> Result<KernelStats, SimError> {
    if dst.rows != src.cols || dst.cols != src.rows {
        return Err(SimError::ShapeMismatch(format!(
            "transpose of {}x{} needs a {}x{} destination, got {}x{}",
            src.rows, src.cols, src.cols, src.rows, dst.rows, dst.cols
        )));
    }
    if dst.layout != src.layout {
        return Err(SimError::LayoutMismatch(
            "transpose source and destination must share a layout".into(),
        ));
    }
    let pc = dst.padded_cols();
    let layout = dst.layout;
    let base = dst.base_address;
    let ew = dst.elem_width;
    let (rows, cols) = (dst.rows, dst.cols);
    for off in 0..dst.storage_elems() {
        let (r, c) = layout.coords_of(off, pc);
        if r < rows && c < cols {
            sink.read(src.addr_of(c, r));
            if compute {
                let v = src.get(c, r);
                dst.data_mut()[off] = v;
            }
            sink.write(base + (off * ew) as u64);
        }
    }
    let n = (rows * cols) as u64;
    Ok(KernelStats {
        element_reads: n,
        element_writes: n,
        compute_cycles: n * cost::TRANSPOSE_PER_ELEM,
    })
}

/// Allocating transpose convenience wrapper.
pub fn transpose<S: TraceSink>(
    src: &Matrix,
    alloc: &mut crate::layout::AddressAllocator,
    compute: bool,
    sink: &mut S,
) -> Result<(Matrix, KernelStats), SimError> {
    let mut dst = alloc.alloc_matrix(src.cols, src.rows, src.layout, src.elem_width);
    let stats = transpose_into(src, &mut dst, compute, sink)?;
    Ok((dst, stats))
}

/// One band of `out = a + b`, walked in storage order (bands decompose the
/// storage range contiguously, so running all bands in sequence reproduces a
/// whole-matrix storage-order pass). Returns the computed logical rows for
/// the caller to merge. All three matrices must share shape and layout, so a
/// single storage offset addresses corresponding elements in each.
pub(crate) fn residual_band<S: TraceSink>(
    a: &Matrix,
    b: &Matrix,
    out: &MatrixMeta,
    band: usize,
    band_rows: usize,
    compute: bool,
    sink: &mut S,
) -> (Vec<(usize, Vec<f32>)>, KernelStats) {
    let pc = out.padded_cols;
    let r0 = band * band_rows;
    let r1 = (r0 + band_rows).min(out.rows);
    let (start, end) = match out.layout {
        Layout::RowWise => (r0 * pc, r1 * pc),
        // A band is exactly one block row of storage (band_rows == block
        // edge, enforced by the caller).
        Layout::BlockWise { .. } => (r0 * pc, (r0 + band_rows) * pc),
    };
    let mut rows: Vec<(usize, Vec<f32>)> =
        (r0..r1).map(|r| (r, vec![0.0f32; out.cols])).collect();
    let mut n = 0u64;
    for off in start..end {
        let (r, c) = out.layout.coords_of(off, pc);
        if r < out.rows && c < out.cols {
            let byte = (off * out.elem_width) as u64;
            sink.read(a.base_address + byte);
            sink.read(b.base_address + byte);
            if compute {
                rows[r - r0].1[c] = a.data()[off] + b.data()[off];
            }
            sink.write(out.base_address + byte);
            n += 1;
        }
    }
    let stats = KernelStats {
        element_reads: 2 * n,
        element_writes: n,
        compute_cycles: n * cost::RESIDUAL_PER_ELEM,
    };
    (rows, stats)
}

/// Element-wise `a + b` into a freshly allocated matrix, traversed in storage
/// order (one read of each operand and one write per logical element).
pub fn residual_add<S: TraceSink>(
    a: &Matrix,
    b: &Matrix,
    alloc: &mut crate::layout::AddressAllocator,
    compute: bool,
    sink: &mut S,
) -> Result<(Matrix, KernelStats), SimError> {
    if a.rows != b.rows || a.cols != b.cols {
        return Err(SimError::ShapeMismatch(format!(
            "residual operands differ: {}x{} vs {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    if a.layout != b.layout {
        return Err(SimError::LayoutMismatch(
            "residual operands must share a layout".into(),
        ));
    }
    let mut out = alloc.alloc_matrix(a.rows, a.cols, a.layout, a.elem_width);
    let meta = out.meta();
    let band_rows = a.layout.block_edge().unwrap_or(a.rows);
    let bands = a.rows.div_ceil(band_rows);
    let mut total = KernelStats::default();
    for band in 0..bands {
        let (rows, stats) = residual_band(a, b, &meta, band, band_rows, compute, sink);
        total.add(&stats);
        if compute {
            for (r, vals) in rows {
                for (c, v) in vals.into_iter().enumerate() {
                    out.set(r, c, v);
                }
            }
        }
    }
    Ok((out, total))
}
