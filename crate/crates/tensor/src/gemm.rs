//! Thin strided wrapper over `matrixmultiply::sgemm`.

/// Strided view of a row-major matrix.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f32],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f32], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    pub fn strided(
        data: &'a [f32],
        rows: usize,
        cols: usize,
        row_stride: usize,
        col_stride: usize,
    ) -> Self {
        Self {
            data,
            rows,
            cols,
            row_stride,
            col_stride,
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
        (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride
    }
}

/// `out = beta * out + a @ b`, where `out` is a strided `a.rows x b.cols` matrix.
pub(crate) fn gemm(a: Mat, b: Mat, beta: f32, out: &mut [f32], out_rs: usize, out_cs: usize) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert!(a.max_offset() < a.data.len() && b.max_offset() < b.data.len());
    assert!((a.rows - 1) * out_rs + (b.cols - 1) * out_cs < out.len());
    // SAFETY: bounds of every strided view were checked above.
    unsafe {
        matrixmultiply::sgemm(
            a.rows,
            a.cols,
            b.cols,
            1.0,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            out.as_mut_ptr(),
            out_rs as isize,
            out_cs as isize,
        );
    }
}
