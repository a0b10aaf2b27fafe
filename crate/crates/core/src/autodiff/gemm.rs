//! Thin safe wrapper over `matrixmultiply::dgemm` with explicit strides.

/// Strided view of a row-major buffer as an `rows x cols` matrix.
#[derive(Clone, Copy, Debug)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> View<'a> {
    pub fn dense(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            offset: 0,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// Column block `[col0, col0 + width)` of a dense `rows x total_cols` buffer.
    pub fn columns(data: &'a [f64], rows: usize, total_cols: usize, col0: usize, width: usize) -> Self {
        Self {
            data,
            offset: col0,
            rows,
            cols: width,
            row_stride: total_cols,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
            ..self
        }
    }

    fn max_index(&self) -> usize {
        self.offset + (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride
    }
}

/// Mutable strided destination.
pub(crate) struct ViewMut<'a> {
    pub data: &'a mut [f64],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
}

impl<'a> ViewMut<'a> {
    pub fn dense(data: &'a mut [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            offset: 0,
            rows,
            cols,
            row_stride: cols,
        }
    }

    pub fn columns(data: &'a mut [f64], rows: usize, total_cols: usize, col0: usize, width: usize) -> Self {
        Self {
            data,
            offset: col0,
            rows,
            cols: width,
            row_stride: total_cols,
        }
    }
}

/// `c = alpha * a @ b + beta * c`.
pub(crate) fn gemm(alpha: f64, a: View<'_>, b: View<'_>, beta: f64, c: ViewMut<'_>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(a.rows, c.rows, "gemm output rows");
    assert_eq!(b.cols, c.cols, "gemm output cols");
    if a.rows == 0 || b.cols == 0 {
        return;
    }
    if a.cols == 0 {
        // Empty contraction: c = beta * c.
        for r in 0..c.rows {
            for col in 0..c.cols {
                let idx = c.offset + r * c.row_stride + col;
                c.data[idx] *= beta;
            }
        }
        return;
    }
    assert!(a.max_index() < a.data.len(), "gemm lhs view out of bounds");
    assert!(b.max_index() < b.data.len(), "gemm rhs view out of bounds");
    assert!(
        c.offset + (c.rows - 1) * c.row_stride + c.cols - 1 < c.data.len(),
        "gemm output view out of bounds"
    );
    // SAFETY: every index touched by dgemm lies inside the bounds asserted above,
    // and `c` is a unique borrow so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr().add(b.offset),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.row_stride as isize,
            1,
        );
    }
}
