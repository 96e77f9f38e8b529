//! Accelerator kernel model and the tiled GEMM built on it.
//!
//! Both modeled accelerators multiply one `K x K` operand tile pair per
//! invocation:
//!
//! * systolic array — weights are preloaded column-by-column (`K` cycles per
//!   weight-tile change), then the result drains in `3K - 2` cycles of
//!   pipelined skew;
//! * SIMD unit — no preload, `K^2` cycles per tile pair (one row of MACs per
//!   cycle across `K` lanes).
//!
//! The GEMM is output-stationary: output tiles are visited one at a time
//! (`i` outer, `j` middle) and the reduction (`k` inner) accumulates into the
//! current output tile. The weight tile therefore changes on every tile pair,
//! and each pair loads one `A` tile and one `B` tile. Output tiles are
//! written exactly once and never read back.

use crate::error::SimError;
use crate::kernels::Activation;
use crate::layout::{Layout, Matrix, MatrixMeta};
use crate::trace::{RecordingSink, TraceSink};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum AcceleratorKind {
    SystolicArray,
    Simd,
}

impl AcceleratorKind {
    pub fn name(self) -> &'static str {
        match self {
            AcceleratorKind::SystolicArray => "sa",
            AcceleratorKind::Simd => "simd",
        }
    }
}

/// Per-tile-pair cycle costs. Derived from the kernel size by default but
/// kept explicit so experiments can pin them.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct CostParams {
    /// Cycles to load a new weight tile (systolic arrays only).
    pub weight_preload_cycles: u64,
    /// Cycles to process one tile pair once weights are resident.
    pub cycles_per_tile_pair: u64,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct AcceleratorModel {
    pub kind: AcceleratorKind,
    pub kernel_size: usize,
    pub cost: CostParams,
}

impl AcceleratorModel {
    pub fn new(kind: AcceleratorKind, kernel_size: usize) -> Self {
        let k = kernel_size as u64;
        let cost = match kind {
            AcceleratorKind::SystolicArray => CostParams {
                weight_preload_cycles: k,
                cycles_per_tile_pair: 3 * k - 2,
            },
            AcceleratorKind::Simd => CostParams {
                weight_preload_cycles: 0,
                cycles_per_tile_pair: k * k,
            },
        };
        AcceleratorModel { kind, kernel_size, cost }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.kernel_size == 0 {
            return Err(SimError::Config("kernel size must be positive".into()));
        }
        Ok(())
    }
}

/// Total accelerator cycles for a run of `tile_pair_ops` tile-pair
/// multiplications during which the weight tile changed
/// `weight_tile_changes` times.
pub fn compute_cycles(accel: &AcceleratorModel, tile_pair_ops: u64, weight_tile_changes: u64) -> u64 {
    weight_tile_changes * accel.cost.weight_preload_cycles
        + tile_pair_ops * accel.cost.cycles_per_tile_pair
}

/// Counters of one GEMM invocation.
#[derive(Clone, Copy, Default, PartialEq, Eq, Debug)]
pub struct GemmStats {
    pub tile_pair_ops: u64,
    pub element_reads_a: u64,
    pub element_reads_b: u64,
    pub element_writes_c: u64,
    /// Always zero in this schedule: output tiles accumulate in-register.
    pub element_reads_c: u64,
    pub compute_cycles: u64,
}

impl GemmStats {
    pub fn add(&mut self, other: &GemmStats) {
        self.tile_pair_ops += other.tile_pair_ops;
        self.element_reads_a += other.element_reads_a;
        self.element_reads_b += other.element_reads_b;
        self.element_writes_c += other.element_writes_c;
        self.element_reads_c += other.element_reads_c;
        self.compute_cycles += other.compute_cycles;
    }
}

/// Emits the load trace of the aligned tile whose top-left element is
/// `(tr*k, tc*k)` and, when `compute` is set, gathers its values into `buf`
/// (dense `k x k` row-major, zero where the tile exceeds the logical shape).
///
/// Under `BlockWise` the tile is one block: `k*k` consecutive addresses
/// including padding slots. Under `RowWise` it is up to `k` runs of up to
/// `k` logical elements each.
fn load_tile<S: TraceSink>(
    m: &Matrix,
    tr: usize,
    tc: usize,
    k: usize,
    buf: &mut [f32],
    compute: bool,
    sink: &mut S,
) -> u64 {
    let ew = m.elem_width as u64;
    match m.layout {
        Layout::BlockWise { block_edge } => {
            debug_assert_eq!(block_edge, k);
            let blocks_per_row = m.padded_cols() / k;
            let start = (tr * blocks_per_row + tc) * k * k;
            let mut addr = m.base_address + start as u64 * ew;
            for _ in 0..k * k {
                sink.read(addr);
                addr += ew;
            }
            if compute {
                buf.copy_from_slice(&m.data()[start..start + k * k]);
            }
            (k * k) as u64
        }
        Layout::RowWise => {
            let r0 = tr * k;
            let c0 = tc * k;
            let rlen = k.min(m.rows - r0);
            let clen = k.min(m.cols - c0);
            if compute && (rlen < k || clen < k) {
                buf.fill(0.0);
            }
            let cols = m.cols;
            for lr in 0..rlen {
                let off = (r0 + lr) * cols + c0;
                let mut addr = m.base_address + off as u64 * ew;
                for _ in 0..clen {
                    sink.read(addr);
                    addr += ew;
                }
                if compute {
                    buf[lr * k..lr * k + clen].copy_from_slice(&m.data()[off..off + clen]);
                }
            }
            (rlen * clen) as u64
        }
    }
}

/// Emits the store trace of output tile `(tr, tc)` of `c`. Mirrors
/// [`load_tile`]'s address pattern with writes; `BlockWise` stores the whole
/// padded block (the accumulator holds zeros there).
fn store_tile_trace<S: TraceSink>(
    c: &MatrixMeta,
    tr: usize,
    tc: usize,
    k: usize,
    sink: &mut S,
) -> u64 {
    let ew = c.elem_width as u64;
    match c.layout {
        Layout::BlockWise { block_edge } => {
            debug_assert_eq!(block_edge, k);
            let blocks_per_row = c.padded_cols / k;
            let start = (tr * blocks_per_row + tc) * k * k;
            let mut addr = c.base_address + start as u64 * ew;
            for _ in 0..k * k {
                sink.write(addr);
                addr += ew;
            }
            (k * k) as u64
        }
        Layout::RowWise => {
            let r0 = tr * k;
            let c0 = tc * k;
            let rlen = k.min(c.rows - r0);
            let clen = k.min(c.cols - c0);
            for lr in 0..rlen {
                let off = (r0 + lr) * c.cols + c0;
                let mut addr = c.base_address + off as u64 * ew;
                for _ in 0..clen {
                    sink.write(addr);
                    addr += ew;
                }
            }
            (rlen * clen) as u64
        }
    }
}

/// The exact byte-address sequence of loading the aligned `k x k` tile at
/// `(r0, c0)`.
pub fn tile_load_trace(m: &Matrix, r0: usize, c0: usize, k: usize) -> Result<Vec<u64>, SimError> {
    if k == 0 || r0 % k != 0 || c0 % k != 0 {
        return Err(SimError::TileAlignment { row: r0, col: c0, k });
    }
    if r0 >= m.rows || c0 >= m.cols {
        return Err(SimError::ShapeMismatch(format!(
            "tile origin ({r0}, {c0}) outside {}x{} matrix",
            m.rows, m.cols
        )));
    }
    if let Layout::BlockWise { block_edge } = m.layout {
        if block_edge != k {
            return Err(SimError::LayoutMismatch(format!(
                "tile size {k} does not match block edge {block_edge}"
            )));
        }
    }
    let mut sink = RecordingSink::new();
    let mut scratch = vec![0.0f32; k * k];
    load_tile(m, r0 / k, c0 / k, k, &mut scratch, false, &mut sink);
    Ok(sink.reads)
}

/// Computes the given output tile-rows of `a * b`, emitting the full
/// load/store trace into `sink` and returning the values as dense logical
/// row bands (`band i` covers logical rows `i*k .. min((i+1)*k, M)` of the
/// product, `b.cols` wide) for the caller to merge into the destination.
///
/// `c_meta` describes the destination the store trace targets. Its column
/// grid may be wider than the product: `c_col_tile_offset` shifts the store
/// tiles right by whole tiles, which is how per-head attention outputs land
/// directly in their slice of the concatenated matrix.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_tile_rows<S: TraceSink>(
    a: &Matrix,
    b: &Matrix,
    accel: &AcceleratorModel,
    activation: Option<Activation>,
    c_meta: &MatrixMeta,
    c_col_tile_offset: usize,
    tile_rows: &[usize],
    compute: bool,
    sink: &mut S,
) -> Result<(Vec<(usize, Vec<f32>)>, GemmStats), SimError> {
    let k = accel.kernel_size;
    let (m_dim, n_dim, p_dim) = (a.rows, a.cols, b.cols);
    if n_dim != b.rows {
        return Err(SimError::ShapeMismatch(format!(
            "gemm operands disagree: {}x{} * {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    if a.layout != b.layout || a.layout != c_meta.layout {
        return Err(SimError::LayoutMismatch(
            "gemm operands and destination must share one layout".into(),
        ));
    }
    if let Some(edge) = a.layout.block_edge() {
        if edge != k {
            return Err(SimError::LayoutMismatch(format!(
                "block edge {edge} does not match kernel size {k}"
            )));
        }
    }
    if c_meta.rows != m_dim || c_col_tile_offset * k + p_dim > c_meta.cols {
        return Err(SimError::ShapeMismatch(format!(
            "destination {}x{} cannot hold a {}x{} product at tile-column offset {}",
            c_meta.rows, c_meta.cols, m_dim, p_dim, c_col_tile_offset
        )));
    }

    let nt = n_dim.div_ceil(k);
    let pt = p_dim.div_ceil(k);

    let mut a_buf = vec![0.0f32; k * k];
    let mut b_buf = vec![0.0f32; k * k];
    let mut acc = vec![0.0f32; k * k];
    let mut stats = GemmStats::default();
    let mut bands = Vec::with_capacity(tile_rows.len());

    for &ti in tile_rows {
        let r0 = ti * k;
        let rlen = k.min(m_dim - r0);
        let mut band = if compute { vec![0.0f32; rlen * p_dim] } else { Vec::new() };
        for tj in 0..pt {
            let c0 = tj * k;
            let clen = k.min(p_dim - c0);
            if compute {
                acc.fill(0.0);
            }
            for tk in 0..nt {
                stats.element_reads_a += load_tile(a, ti, tk, k, &mut a_buf, compute, sink);
                stats.element_reads_b += load_tile(b, tk, tj, k, &mut b_buf, compute, sink);
                stats.tile_pair_ops += 1;
                if compute {
                    let klen = k.min(n_dim - tk * k);
                    for lr in 0..rlen {
                        let arow = &a_buf[lr * k..lr * k + klen];
                        let crow = &mut acc[lr * k..(lr + 1) * k];
                        for (lk, &av) in arow.iter().enumerate() {
                            let brow = &b_buf[lk * k..lk * k + clen];
                            for (lc, &bv) in brow.iter().enumerate() {
                                crow[lc] += av * bv;
                            }
                        }
                    }
                }
            }
            if compute {
                if let Some(act) = activation {
                    for lr in 0..rlen {
                        for lc in 0..clen {
                            acc[lr * k + lc] = act.apply(acc[lr * k + lc]);
                        }
                    }
                }
                for lr in 0..rlen {
                    band[lr * p_dim + c0..lr * p_dim + c0 + clen]
                        .copy_from_slice(&acc[lr * k..lr * k + clen]);
                }
            }
            stats.element_writes_c += store_tile_trace(c_meta, ti, c_col_tile_offset + tj, k, sink);
        }
        bands.push((ti, band));
    }

    // The weight tile changes on every tile pair in this schedule, and the
    // fused activation is costed per produced element.
    stats.compute_cycles = compute_cycles(accel, stats.tile_pair_ops, stats.tile_pair_ops);
    if let Some(act) = activation {
        let produced: u64 = tile_rows
            .iter()
            .map(|&ti| (k.min(m_dim - ti * k) * p_dim) as u64)
            .sum();
        stats.compute_cycles += produced * act.cycles_per_element();
    }

    Ok((bands, stats))
}

/// Output-stationary tiled GEMM: allocates the product matrix, computes every
/// tile row, and emits the complete access trace.
pub fn tiled_gemm<S: TraceSink>(
    a: &Matrix,
    b: &Matrix,
    accel: &AcceleratorModel,
    activation: Option<Activation>,
    alloc: &mut crate::layout::AddressAllocator,
    compute: bool,
    sink: &mut S,
) -> Result<(Matrix, GemmStats), SimError> {
    let mut c = alloc.alloc_matrix(a.rows, b.cols, a.layout, a.elem_width);
    let tile_rows: Vec<usize> = (0..a.rows.div_ceil(accel.kernel_size)).collect();
    let (bands, stats) = gemm_tile_rows(
        a,
        b,
        accel,
        activation,
        &c.meta(),
        0,
        &tile_rows,
        compute,
        sink,
    )?;
    if compute {
        scatter_bands(&mut c, accel.kernel_size, 0, &bands);
    }
    Ok((c, stats))
}

/// Merges the row bands produced by [`gemm_tile_rows`] into `dst`, placing
/// band columns starting at logical column `k * col_tile_offset`.
pub(crate) fn scatter_bands(
    dst: &mut Matrix,
    k: usize,
    col_tile_offset: usize,
    bands: &[(usize, Vec<f32>)],
) {
    let c_base = col_tile_offset * k;
    for (ti, band) in bands {
        if band.is_empty() {
            continue;
        }
        let r0 = ti * k;
        let rlen = k.min(dst.rows - r0);
        let width = band.len() / rlen;
        for lr in 0..rlen {
            for lc in 0..width {
                dst.set(r0 + lr, c_base + lc, band[lr * width + lc]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::AddressAllocator;
    use crate::trace::{CountingSink, NullSink, VecTrace};

    fn filled(rows: usize, cols: usize, layout: Layout, f: impl FnMut(usize, usize) -> f32) -> Matrix {
        Matrix::from_fn(rows, cols, layout, 0, 4, f)
    }

    fn naive(a: &Matrix, b: &Matrix) -> Vec<f32> {
        let mut c = vec![0.0f32; a.rows * b.cols];
        for i in 0..a.rows {
            for j in 0..b.cols {
                let mut sum = 0.0f32;
                for k in 0..a.cols {
                    sum += a.get(i, k) * b.get(k, j);
                }
                c[i * b.cols + j] = sum;
            }
        }
        c
    }

    #[test]
    fn systolic_and_simd_cycle_costs() {
        let sa16 = AcceleratorModel::new(AcceleratorKind::SystolicArray, 16);
        assert_eq!(sa16.cost.weight_preload_cycles, 16);
        assert_eq!(sa16.cost.cycles_per_tile_pair, 46);
        assert_eq!(compute_cycles(&sa16, 1, 1), 62);
        assert_eq!(compute_cycles(&sa16, 512, 512), 512 * 62);

        let simd16 = AcceleratorModel::new(AcceleratorKind::Simd, 16);
        assert_eq!(compute_cycles(&simd16, 1, 1), 256);
        assert_eq!(compute_cycles(&simd16, 0, 0), 0);

        let sa8 = AcceleratorModel::new(AcceleratorKind::SystolicArray, 8);
        assert_eq!(compute_cycles(&sa8, 1, 1), 8 + 22);
    }

    #[test]
    fn tile_load_addresses_rowwise_fragments_blockwise_contiguous() {
        let row = filled(8, 8, Layout::RowWise, |_, _| 0.0);
        let trace = tile_load_trace(&row, 0, 4, 4).unwrap();
        let offs: Vec<u64> = trace.iter().map(|a| a / 4).collect();
        assert_eq!(
            offs,
            vec![4, 5, 6, 7, 12, 13, 14, 15, 20, 21, 22, 23, 28, 29, 30, 31]
        );

        let blk = filled(8, 8, Layout::BlockWise { block_edge: 4 }, |_, _| 0.0);
        let trace = tile_load_trace(&blk, 0, 4, 4).unwrap();
        let offs: Vec<u64> = trace.iter().map(|a| a / 4).collect();
        assert_eq!(offs, (16..32).collect::<Vec<u64>>());
    }

    #[test]
    fn misaligned_tile_is_rejected() {
        let m = filled(8, 8, Layout::RowWise, |_, _| 0.0);
        assert!(matches!(
            tile_load_trace(&m, 2, 0, 4),
            Err(SimError::TileAlignment { .. })
        ));
        assert!(tile_load_trace(&m, 8, 0, 4).is_err());
    }

    #[test]
    fn multiplying_by_identity_preserves_values() {
        for layout in [Layout::RowWise, Layout::BlockWise { block_edge: 4 }] {
            let a = filled(8, 8, layout, |r, c| (r * 8 + c) as f32 * 0.5);
            let id = filled(8, 8, layout, |r, c| if r == c { 1.0 } else { 0.0 });
            let accel = AcceleratorModel::new(AcceleratorKind::SystolicArray, 4);
            let mut alloc = AddressAllocator::new(1 << 20);
            let mut sink = NullSink;
            let (c, stats) = tiled_gemm(&a, &id, &accel, None, &mut alloc, true, &mut sink).unwrap();
            assert!(c.logical_eq(&a));
            assert_eq!(stats.tile_pair_ops, 2 * 2 * 2);
            assert_eq!(stats.element_reads_c, 0);
        }
    }

    #[test]
    fn matches_naive_reference_on_ragged_shapes() {
        let a = filled(5, 7, Layout::RowWise, |r, c| ((r * 7 + c) % 5) as f32 - 2.0);
        let b = filled(7, 3, Layout::RowWise, |r, c| ((r * 3 + c) % 7) as f32 * 0.25);
        let expect = naive(&a, &b);
        let accel = AcceleratorModel::new(AcceleratorKind::Simd, 4);
        let mut alloc = AddressAllocator::new(1 << 20);
        let mut sink = NullSink;
        let (c, _) = tiled_gemm(&a, &b, &accel, None, &mut alloc, true, &mut sink).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                assert_eq!(c.get(i, j), expect[i * 3 + j], "({i},{j})");
            }
        }
    }

    #[test]
    fn layouts_produce_bit_identical_products() {
        let vals_a: Vec<f32> = (0..96).map(|i| ((i * 31 % 13) as f32 - 6.0) * 0.125).collect();
        let vals_b: Vec<f32> = (0..72).map(|i| ((i * 17 % 11) as f32 - 5.0) * 0.25).collect();
        let mut results = Vec::new();
        for layout in [Layout::RowWise, Layout::BlockWise { block_edge: 4 }] {
            let a = filled(12, 8, layout, |r, c| vals_a[r * 8 + c]);
            let b = filled(8, 9, layout, |r, c| vals_b[r * 9 + c]);
            let accel = AcceleratorModel::new(AcceleratorKind::SystolicArray, 4);
            let mut alloc = AddressAllocator::new(1 << 20);
            let mut sink = NullSink;
            let (c, _) = tiled_gemm(&a, &b, &accel, None, &mut alloc, true, &mut sink).unwrap();
            results.push(c);
        }
        assert!(results[0].logical_eq(&results[1]));
    }

    #[test]
    fn trace_counts_match_reported_stats() {
        let a = filled(8, 12, Layout::RowWise, |r, c| (r + c) as f32);
        let b = filled(12, 8, Layout::RowWise, |r, c| (r as f32) - (c as f32));
        let accel = AcceleratorModel::new(AcceleratorKind::SystolicArray, 4);
        let mut alloc = AddressAllocator::new(1 << 20);
        let mut sink = CountingSink::default();
        let (_, stats) = tiled_gemm(&a, &b, &accel, None, &mut alloc, true, &mut sink).unwrap();
        assert_eq!(sink.reads, stats.element_reads_a + stats.element_reads_b);
        assert_eq!(sink.writes, stats.element_writes_c);
        // 2x3x2 tile grid: every pair reads one full tile from each operand.
        assert_eq!(stats.tile_pair_ops, 12);
        assert_eq!(stats.element_reads_a, 12 * 16);
        assert_eq!(stats.element_reads_b, 12 * 16);
        assert_eq!(stats.element_writes_c, 4 * 16);
    }

    #[test]
    fn fused_activation_equals_post_application_and_adds_no_traffic() {
        let a = filled(8, 8, Layout::RowWise, |r, c| ((r * 8 + c) as f32 - 32.0) * 0.1);
        let b = filled(8, 8, Layout::RowWise, |r, c| ((c * 8 + r) as f32 - 30.0) * 0.05);
        let accel = AcceleratorModel::new(AcceleratorKind::SystolicArray, 4);

        let mut alloc = AddressAllocator::new(1 << 20);
        let mut fused_trace = VecTrace::new();
        let (fused, fused_stats) =
            tiled_gemm(&a, &b, &accel, Some(Activation::Gelu), &mut alloc, true, &mut fused_trace)
                .unwrap();

        let mut alloc2 = AddressAllocator::new(1 << 20);
        let mut plain_trace = VecTrace::new();
        let (plain, plain_stats) =
            tiled_gemm(&a, &b, &accel, None, &mut alloc2, true, &mut plain_trace).unwrap();

        assert_eq!(fused_trace.events, plain_trace.events, "fusion must not change the trace");
        for r in 0..8 {
            for c in 0..8 {
                assert_eq!(fused.get(r, c), Activation::Gelu.apply(plain.get(r, c)));
            }
        }
        assert_eq!(
            fused_stats.compute_cycles,
            plain_stats.compute_cycles + 64 * Activation::Gelu.cycles_per_element()
        );
    }

    #[test]
    fn column_tile_offset_shifts_stores_into_a_wider_destination() {
        let a = filled(4, 4, Layout::RowWise, |r, c| (r * 4 + c) as f32);
        let b = filled(4, 4, Layout::RowWise, |r, c| if r == c { 2.0 } else { 0.0 });
        let accel = AcceleratorModel::new(AcceleratorKind::Simd, 4);
        let mut wide = Matrix::zeros(4, 12, Layout::RowWise, 0, 4);
        let mut sink = RecordingSink::new();
        let (bands, _) = gemm_tile_rows(
            &a,
            &b,
            &accel,
            None,
            &wide.meta(),
            2,
            &[0],
            true,
            &mut sink,
        )
        .unwrap();
        scatter_bands(&mut wide, 4, 2, &bands);
        // Values land in columns 8..12.
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(wide.get(r, c + 8), 2.0 * a.get(r, c));
                assert_eq!(wide.get(r, c), 0.0);
            }
        }
        // Store addresses point at the shifted tile.
        assert_eq!(sink.writes[0], wide.meta().addr_of(0, 8));
    }

    #[test]
    fn mixed_layouts_are_rejected() {
        let a = filled(4, 4, Layout::RowWise, |_, _| 1.0);
        let b = filled(4, 4, Layout::BlockWise { block_edge: 4 }, |_, _| 1.0);
        let accel = AcceleratorModel::new(AcceleratorKind::Simd, 4);
        let mut alloc = AddressAllocator::new(1 << 20);
        let mut sink = NullSink;
        assert!(matches!(
            tiled_gemm(&a, &b, &accel, None, &mut alloc, true, &mut sink),
            Err(SimError::LayoutMismatch(_))
        ));
    }

    #[test]
    fn wrong_block_edge_is_rejected() {
        let layout = Layout::BlockWise { block_edge: 8 };
        let a = filled(8, 8, layout, |_, _| 1.0);
        let b = filled(8, 8, layout, |_, _| 1.0);
        let accel = AcceleratorModel::new(AcceleratorKind::SystolicArray, 4);
        let mut alloc = AddressAllocator::new(1 << 20);
        let mut sink = NullSink;
        assert!(tiled_gemm(&a, &b, &accel, None, &mut alloc, true, &mut sink).is_err());
    }
}
