//! Dense matrix products over row-major slices.
//!
//! Large products go through `matrixmultiply`'s packed GEMM; tiny ones use a
//! plain triple loop. Both paths have a fixed summation order for a given
//! shape, so results are reproducible run to run.

const SMALL_PRODUCT: usize = 2048;

/// Strided matrix operand: element `(i, j)` lives at `i * row_stride + j * col_stride`.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> View<'a> {
    pub fn row_major(data: &'a [f64], cols: usize) -> Self {
        View { data, row_stride: cols, col_stride: 1 }
    }

    /// Transposed view of a row-major `rows x cols` buffer.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        View { data, row_stride: 1, col_stride: cols }
    }

    #[inline]
    fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.row_stride + j * self.col_stride]
    }
}

/// `out (m x n) += a (m x k) * b (k x n)`, `out` row-major.
pub(crate) fn gemm_acc(m: usize, k: usize, n: usize, a: View<'_>, b: View<'_>, out: &mut [f64]) {
    assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(a.data.len() > (m - 1) * a.row_stride + (k - 1) * a.col_stride);
    assert!(b.data.len() > (k - 1) * b.row_stride + (n - 1) * b.col_stride);
    if m * k * n <= SMALL_PRODUCT {
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a.get(i, p);
                for (j, o) in row.iter_mut().enumerate() {
                    *o += aip * b.get(p, j);
                }
            }
        }
        return;
    }
    // SAFETY: every stride/extent pair below addresses only elements inside the
    // slices; callers pass buffers sized for (m x k), (k x n) and (m x n).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
