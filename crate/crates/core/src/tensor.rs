//! Numeric buffers with live-byte accounting, and the dense row-major matrix
//! type used by the classifier.
//!
//! Every [`Buffer`] allocated while a [`MemoryTracker`] is installed on the
//! current thread (see [`MemoryTracker::install`]) is charged to that tracker
//! until it is dropped. The tracker keeps a high-water mark, which is what the
//! benchmarks report as peak tensor bytes.

use std::cell::RefCell;
use std::fmt;
use std::ops::{Deref, DerefMut};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

#[derive(Debug, Default)]
pub struct MemoryTracker {
    live: AtomicUsize,
    peak: AtomicUsize,
    allocations: AtomicUsize,
}

thread_local! {
    static CURRENT: RefCell<Option<Arc<MemoryTracker>>> = const { RefCell::new(None) };
}

impl MemoryTracker {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    /// Install `tracker` on the current thread until the guard drops.
    pub fn install(tracker: &Arc<MemoryTracker>) -> TrackerGuard {
        let prev = CURRENT.with(|c| c.replace(Some(Arc::clone(tracker))));
        TrackerGuard { prev }
    }

    /// The tracker installed on the current thread, if any.
    pub fn current() -> Option<Arc<MemoryTracker>> {
        CURRENT.with(|c| c.borrow().clone())
    }

    pub fn live_bytes(&self) -> usize {
        self.live.load(Ordering::Relaxed)
    }

    pub fn peak_bytes(&self) -> usize {
        self.peak.load(Ordering::Relaxed)
    }

    pub fn allocations(&self) -> usize {
        self.allocations.load(Ordering::Relaxed)
    }

    /// Restart the high-water mark from the current live total.
    pub fn reset_peak(&self) {
        self.peak.store(self.live_bytes(), Ordering::Relaxed);
    }

    fn charge(&self, bytes: usize) {
        let now = self.live.fetch_add(bytes, Ordering::Relaxed) + bytes;
        self.peak.fetch_max(now, Ordering::Relaxed);
        self.allocations.fetch_add(1, Ordering::Relaxed);
    }

    fn release(&self, bytes: usize) {
        self.live.fetch_sub(bytes, Ordering::Relaxed);
    }
}

pub struct TrackerGuard {
    prev: Option<Arc<MemoryTracker>>,
}

impl Drop for TrackerGuard {
    fn drop(&mut self) {
        let prev = self.prev.take();
        CURRENT.with(|c| *c.borrow_mut() = prev);
    }
}

/// A tracked `f64` buffer.
pub struct Buffer {
    data: Vec<f64>,
    tracker: Option<Arc<MemoryTracker>>,
}

impl Buffer {
    pub fn from_vec(data: Vec<f64>) -> Self {
        let tracker = MemoryTracker::current();
        if let Some(t) = &tracker {
            t.charge(data.len() * std::mem::size_of::<f64>());
        }
        Self { data, tracker }
    }

    pub fn zeros(len: usize) -> Self {
        Self::from_vec(vec![0.0; len])
    }

    pub fn filled(len: usize, value: f64) -> Self {
        Self::from_vec(vec![value; len])
    }

    pub fn from_slice(data: &[f64]) -> Self {
        Self::from_vec(data.to_vec())
    }

    pub fn byte_len(&self) -> usize {
        self.data.len() * std::mem::size_of::<f64>()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Bitwise equality (distinguishes `-0.0` from `0.0`).
    pub fn bits_eq(&self, other: &Buffer) -> bool {
        self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl Drop for Buffer {
    fn drop(&mut self) {
        if let Some(t) = &self.tracker {
            t.release(self.byte_len());
        }
    }
}

impl Clone for Buffer {
    fn clone(&self) -> Self {
        Self::from_slice(&self.data)
    }
}

impl Deref for Buffer {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.data
    }
}

impl DerefMut for Buffer {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

impl PartialEq for Buffer {
    fn eq(&self, other: &Self) -> bool {
        self.data == other.data
    }
}

impl fmt::Debug for Buffer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.data.iter()).finish()
    }
}

/// Dense row-major matrix.
#[derive(Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Buffer,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: Buffer::zeros(rows * cols),
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: Buffer::filled(rows * cols, value),
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "Mat::from_vec length");
        Self {
            rows,
            cols,
            data: Buffer::from_vec(data),
        }
    }

    pub fn zeros_like(other: &Mat) -> Self {
        Self::zeros(other.rows, other.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn bits_eq(&self, other: &Mat) -> bool {
        self.shape() == other.shape() && self.data.bits_eq(&other.data)
    }

    /// `self += other`
    pub fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(other.as_slice()) {
            *a += b;
        }
    }

    /// Add `bias` (length `cols`) to every row.
    pub fn add_row_vector(&mut self, bias: &[f64]) {
        debug_assert_eq!(bias.len(), self.cols);
        for row in self.data.chunks_exact_mut(self.cols) {
            for (x, b) in row.iter_mut().zip(bias) {
                *x += b;
            }
        }
    }

    /// Accumulate the column sums of `self` into `out`.
    pub fn sum_rows_into(&self, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.cols);
        for row in self.data.chunks_exact(self.cols) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
    }
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Mat({}x{}) {:?}", self.rows, self.cols, self.data)
    }
}

/// A strided read-only view used as a gemm operand.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> View<'a> {
    pub fn of(m: &'a Mat) -> Self {
        Self {
            data: m.as_slice(),
            rows: m.rows,
            cols: m.cols,
            row_stride: m.cols,
            col_stride: 1,
        }
    }

    /// Columns `[c0, c0 + width)` of a row-major matrix.
    pub fn cols_of(m: &'a Mat, c0: usize, width: usize) -> Self {
        assert!(c0 + width <= m.cols);
        Self {
            data: &m.as_slice()[c0..],
            rows: m.rows,
            cols: width,
            row_stride: m.cols,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn max_offset(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride
        }
    }
}

/// A strided mutable gemm destination.
pub(crate) struct ViewMut<'a> {
    pub data: &'a mut [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
}

impl<'a> ViewMut<'a> {
    pub fn of(m: &'a mut Mat) -> Self {
        let (rows, cols) = m.shape();
        Self {
            data: m.as_mut_slice(),
            rows,
            cols,
            row_stride: cols,
        }
    }

    pub fn cols_of(m: &'a mut Mat, c0: usize, width: usize) -> Self {
        let (rows, cols) = m.shape();
        assert!(c0 + width <= cols);
        Self {
            data: &mut m.as_mut_slice()[c0..],
            rows,
            cols: width,
            row_stride: cols,
        }
    }
}

/// `c = alpha * a * b + beta * c`
pub(crate) fn gemm(alpha: f64, a: View<'_>, b: View<'_>, beta: f64, c: ViewMut<'_>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!((a.rows, b.cols), (c.rows, c.cols), "gemm output shape");
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    assert!(a.rows == 0 || a.cols == 0 || a.max_offset() < a.data.len());
    assert!(b.rows == 0 || b.cols == 0 || b.max_offset() < b.data.len());
    assert!((c.rows - 1) * c.row_stride + c.cols - 1 < c.data.len());
    // SAFETY: every index touched by dgemm lies within the bounds checked above.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.data.as_mut_ptr(),
            c.row_stride as isize,
            1,
        );
    }
}

/// `a * b` as a new matrix.
pub(crate) fn matmul(a: View<'_>, b: View<'_>) -> Mat {
    let mut out = Mat::zeros(a.rows, b.cols);
    gemm(1.0, a, b, 0.0, ViewMut::of(&mut out));
    out
}
