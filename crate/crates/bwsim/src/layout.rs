//! Matrix storage layouts and the address arithmetic they induce.
//!
//! Two arrangements are modeled:
//!
//! * [`Layout::RowWise`] — ordinary row-major storage, no padding.
//! * [`Layout::BlockWise`] — the matrix is cut into `B x B` blocks; blocks are
//!   stored block-row by block-row, and each block is row-major internally.
//!   Dimensions are zero-padded up to multiples of `B`.
//!
//! The block edge `B` is always chosen equal to the accelerator kernel size,
//! so an aligned `K x K` tile occupies one contiguous byte range under
//! `BlockWise` while the same tile under `RowWise` is `K` separate runs of
//! `K` elements. That contiguity difference is the whole point of the
//! simulator.

use crate::error::SimError;
use crate::trace::{TraceSink, VecTrace};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Layout {
    RowWise,
    BlockWise { block_edge: usize },
}

impl Layout {
    /// Storage dimensions for a logical `rows x cols` matrix: `RowWise`
    /// stores exactly the logical shape, `BlockWise` pads both dimensions up
    /// to the next multiple of the block edge.
    pub fn padded_dims(&self, rows: usize, cols: usize) -> (usize, usize) {
        match *self {
            Layout::RowWise => (rows, cols),
            Layout::BlockWise { block_edge } => {
                (round_up(rows, block_edge), round_up(cols, block_edge))
            }
        }
    }

    /// Element offset (in elements, not bytes) of logical position `(r, c)`
    /// within the storage of a matrix whose padded column count is
    /// `padded_cols`.
    #[inline]
    pub fn offset(&self, r: usize, c: usize, padded_cols: usize) -> usize {
        match *self {
            Layout::RowWise => r * padded_cols + c,
            Layout::BlockWise { block_edge: b } => {
                let blocks_per_row = padded_cols / b;
                let block = (r / b) * blocks_per_row + c / b;
                block * b * b + (r % b) * b + (c % b)
            }
        }
    }

    /// Inverse of [`Layout::offset`]: the logical (possibly padding)
    /// coordinates stored at element offset `off`.
    #[inline]
    pub fn coords_of(&self, off: usize, padded_cols: usize) -> (usize, usize) {
        match *self {
            Layout::RowWise => (off / padded_cols, off % padded_cols),
            Layout::BlockWise { block_edge: b } => {
                let blocks_per_row = padded_cols / b;
                let block = off / (b * b);
                let within = off % (b * b);
                let r = (block / blocks_per_row) * b + within / b;
                let c = (block % blocks_per_row) * b + within % b;
                (r, c)
            }
        }
    }

    pub fn block_edge(&self) -> Option<usize> {
        match *self {
            Layout::RowWise => None,
            Layout::BlockWise { block_edge } => Some(block_edge),
        }
    }
}

fn round_up(n: usize, to: usize) -> usize {
    n.div_ceil(to) * to
}

/// Which of the two arrangements a whole run uses. The concrete block edge is
/// only known once the accelerator kernel size is fixed.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum LayoutChoice {
    Rwma,
    Bwma,
}

impl LayoutChoice {
    pub fn to_layout(self, kernel_size: usize) -> Layout {
        match self {
            LayoutChoice::Rwma => Layout::RowWise,
            LayoutChoice::Bwma => Layout::BlockWise { block_edge: kernel_size },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LayoutChoice::Rwma => "rwma",
            LayoutChoice::Bwma => "bwma",
        }
    }
}

/// Address-generation metadata of a matrix, detached from its values. Lets
/// worker threads compute store addresses for a shared destination without
/// borrowing it.
#[derive(Clone, Copy, Debug)]
pub struct MatrixMeta {
    pub rows: usize,
    pub cols: usize,
    pub padded_rows: usize,
    pub padded_cols: usize,
    pub layout: Layout,
    pub elem_width: usize,
    pub base_address: u64,
}

impl MatrixMeta {
    #[inline]
    pub fn offset_of(&self, r: usize, c: usize) -> usize {
        self.layout.offset(r, c, self.padded_cols)
    }

    #[inline]
    pub fn addr_of_offset(&self, off: usize) -> u64 {
        self.base_address + (off * self.elem_width) as u64
    }

    #[inline]
    pub fn addr_of(&self, r: usize, c: usize) -> u64 {
        self.addr_of_offset(self.offset_of(r, c))
    }

    pub fn storage_elems(&self) -> usize {
        self.padded_rows * self.padded_cols
    }

    pub fn storage_bytes(&self) -> u64 {
        (self.storage_elems() * self.elem_width) as u64
    }
}

/// A dense matrix of `f32` values stored under one of the two arrangements,
/// placed at a fixed base byte address of the simulated address space.
#[derive(Clone, Debug)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub layout: Layout,
    pub elem_width: usize,
    pub base_address: u64,
    padded_rows: usize,
    padded_cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    /// An all-zero matrix. Padding slots (BlockWise only) are part of `data`
    /// and stay zero unless explicitly written.
    pub fn zeros(rows: usize, cols: usize, layout: Layout, base_address: u64, elem_width: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        if let Layout::BlockWise { block_edge } = layout {
            assert!(block_edge > 0, "block edge must be positive");
        }
        let (padded_rows, padded_cols) = layout.padded_dims(rows, cols);
        Matrix {
            rows,
            cols,
            layout,
            elem_width,
            base_address,
            padded_rows,
            padded_cols,
            data: vec![0.0; padded_rows * padded_cols],
        }
    }

    /// Builds a matrix by evaluating `f` at every logical position, in
    /// row-major logical order (independent of the storage layout).
    pub fn from_fn(
        rows: usize,
        cols: usize,
        layout: Layout,
        base_address: u64,
        elem_width: usize,
        mut f: impl FnMut(usize, usize) -> f32,
    ) -> Self {
        let mut m = Self::zeros(rows, cols, layout, base_address, elem_width);
        for r in 0..rows {
            for c in 0..cols {
                let off = m.offset_of(r, c);
                m.data[off] = f(r, c);
            }
        }
        m
    }

    pub fn meta(&self) -> MatrixMeta {
        MatrixMeta {
            rows: self.rows,
            cols: self.cols,
            padded_rows: self.padded_rows,
            padded_cols: self.padded_cols,
            layout: self.layout,
            elem_width: self.elem_width,
            base_address: self.base_address,
        }
    }

    pub fn padded_rows(&self) -> usize {
        self.padded_rows
    }

    pub fn padded_cols(&self) -> usize {
        self.padded_cols
    }

    pub fn storage_elems(&self) -> usize {
        self.data.len()
    }

    pub fn storage_bytes(&self) -> u64 {
        (self.data.len() * self.elem_width) as u64
    }

    /// Element offset of logical position `(r, c)` in storage order.
    ///
    /// Panics if the position is outside the logical bounds.
    #[inline]
    pub fn offset_of(&self, r: usize, c: usize) -> usize {
        assert!(
            r < self.rows && c < self.cols,
            "index ({r}, {c}) out of range for {}x{} matrix",
            self.rows,
            self.cols
        );
        self.layout.offset(r, c, self.padded_cols)
    }

    /// Byte address of logical position `(r, c)`.
    #[inline]
    pub fn addr_of(&self, r: usize, c: usize) -> u64 {
        self.base_address + (self.offset_of(r, c) * self.elem_width) as u64
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[self.offset_of(r, c)]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        let off = self.offset_of(r, c);
        self.data[off] = v;
    }

    /// Raw storage including padding slots, in storage order.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Bit-exact equality over the logical domain (ignores padding and
    /// addresses).
    pub fn logical_eq(&self, other: &Matrix) -> bool {
        if self.rows != other.rows || self.cols != other.cols {
            return false;
        }
        for r in 0..self.rows {
            for c in 0..self.cols {
                if self.get(r, c).to_bits() != other.get(r, c).to_bits() {
                    return false;
                }
            }
        }
        true
    }

    /// Logical values flattened row-major; layout-independent.
    pub fn to_row_major_vec(&self) -> Vec<f32> {
        let mut v = Vec::with_capacity(self.rows * self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                v.push(self.get(r, c));
            }
        }
        v
    }

    /// FNV-1a digest over the logical element bit patterns in row-major
    /// order. Identical digests mean bit-identical logical contents.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for r in 0..self.rows {
            for c in 0..self.cols {
                for byte in self.get(r, c).to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }

    pub fn digest_hex(&self) -> String {
        format!("{:016x}", self.digest())
    }

    /// Repacks into `BlockWise { block_edge }` without emitting a trace
    /// (used for weight preparation outside the timed region).
    pub fn to_blockwise(&self, block_edge: usize, alloc: &mut AddressAllocator) -> Result<Matrix, SimError> {
        let mut sink = crate::trace::NullSink;
        self.to_blockwise_traced(block_edge, alloc, &mut sink)
    }

    /// Repacks into `BlockWise { block_edge }`, writing destination storage
    /// in strictly ascending address order. Each logical element emits a read
    /// of its source address followed by a write of its destination address;
    /// padding slots emit only the zero-fill write.
    pub fn to_blockwise_traced<S: TraceSink>(
        &self,
        block_edge: usize,
        alloc: &mut AddressAllocator,
        sink: &mut S,
    ) -> Result<Matrix, SimError> {
        if self.layout != Layout::RowWise {
            return Err(SimError::LayoutMismatch(
                "to_blockwise expects a RowWise source".into(),
            ));
        }
        if block_edge == 0 {
            return Err(SimError::Config("block edge must be positive".into()));
        }
        let layout = Layout::BlockWise { block_edge };
        let (pr, pc) = layout.padded_dims(self.rows, self.cols);
        let base = alloc.alloc((pr * pc * self.elem_width) as u64);
        let mut out = Matrix::zeros(self.rows, self.cols, layout, base, self.elem_width);
        for off in 0..pr * pc {
            let (r, c) = layout.coords_of(off, pc);
            if r < self.rows && c < self.cols {
                sink.read(self.addr_of(r, c));
                out.data[off] = self.get(r, c);
            }
            sink.write(base + (off * self.elem_width) as u64);
        }
        Ok(out)
    }

    /// Inverse repack to `RowWise` without a trace.
    pub fn from_blockwise(&self, alloc: &mut AddressAllocator) -> Result<Matrix, SimError> {
        let mut sink = crate::trace::NullSink;
        self.from_blockwise_traced(alloc, &mut sink)
    }

    /// Repacks a `BlockWise` matrix into `RowWise`, writing the destination
    /// in ascending address order (reads hop between blocks, writes are
    /// sequential). Padding slots of the source are never read.
    pub fn from_blockwise_traced<S: TraceSink>(
        &self,
        alloc: &mut AddressAllocator,
        sink: &mut S,
    ) -> Result<Matrix, SimError> {
        if self.layout == Layout::RowWise {
            return Err(SimError::LayoutMismatch(
                "from_blockwise expects a BlockWise source".into(),
            ));
        }
        let base = alloc.alloc((self.rows * self.cols * self.elem_width) as u64);
        let mut out = Matrix::zeros(self.rows, self.cols, Layout::RowWise, base, self.elem_width);
        for off in 0..self.rows * self.cols {
            let (r, c) = (off / self.cols, off % self.cols);
            sink.read(self.addr_of(r, c));
            out.data[off] = self.get(r, c);
            sink.write(base + (off * self.elem_width) as u64);
        }
        Ok(out)
    }
}

/// Direction of a layout conversion, for [`conversion_access_trace`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ConversionDirection {
    /// RowWise source repacked into blocks of the given edge.
    ToBlockWise { block_edge: usize },
    /// BlockWise source flattened back to row-major.
    ToRowWise,
}

/// The exact event sequence a layout conversion of `m` would emit. The
/// destination is placed at the first 64-byte-aligned address after `m`'s
/// storage, which is where the pipeline puts conversion outputs too.
pub fn conversion_access_trace(m: &Matrix, dir: ConversionDirection) -> Result<VecTrace, SimError> {
    let mut alloc = AddressAllocator::new(m.base_address + m.storage_bytes());
    let mut t = VecTrace::new();
    match dir {
        ConversionDirection::ToBlockWise { block_edge } => {
            m.to_blockwise_traced(block_edge, &mut alloc, &mut t)?;
        }
        ConversionDirection::ToRowWise => {
            m.from_blockwise_traced(&mut alloc, &mut t)?;
        }
    }
    Ok(t)
}

/// Bump allocator for the simulated address space. Every allocation is
/// aligned to a cache-line-sized (64-byte) boundary so distinct matrices
/// never share a line.
#[derive(Clone, Debug)]
pub struct AddressAllocator {
    next: u64,
}

pub const ALLOC_ALIGN: u64 = 64;

impl AddressAllocator {
    pub fn new(start: u64) -> Self {
        AddressAllocator { next: align_up(start, ALLOC_ALIGN) }
    }

    pub fn alloc(&mut self, bytes: u64) -> u64 {
        let base = self.next;
        self.next = align_up(base + bytes.max(1), ALLOC_ALIGN);
        base
    }

    /// Allocates storage for a `rows x cols` matrix under `layout` and
    /// returns it zero-initialized.
    pub fn alloc_matrix(&mut self, rows: usize, cols: usize, layout: Layout, elem_width: usize) -> Matrix {
        let (pr, pc) = layout.padded_dims(rows, cols);
        let base = self.alloc((pr * pc * elem_width) as u64);
        Matrix::zeros(rows, cols, layout, base, elem_width)
    }

    pub fn watermark(&self) -> u64 {
        self.next
    }
}

fn align_up(v: u64, align: u64) -> u64 {
    v.div_ceil(align) * align
}
