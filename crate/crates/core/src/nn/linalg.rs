//! Thin GEMM wrapper over `matrixmultiply`.

/// Row-major matrix operand with an optional transpose.
#[derive(Clone, Copy)]
pub struct Mat<'a> {
    pub data: &'a [f32],
    pub rows: usize,
    pub cols: usize,
    /// Row stride of the underlying storage (elements).
    pub ld: usize,
    pub trans: bool,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f32], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            ld: cols,
            trans: false,
        }
    }

    /// Sub-block of columns `[col0, col0 + width)` of a row-major matrix.
    pub fn cols_slice(data: &'a [f32], rows: usize, ld: usize, col0: usize, width: usize) -> Self {
        Self {
            data: &data[col0..],
            rows,
            cols: width,
            ld,
            trans: false,
        }
    }

    pub fn t(mut self) -> Self {
        self.trans = !self.trans;
        self
    }

    fn logical(&self) -> (usize, usize) {
        if self.trans {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.trans {
            (1, self.ld as isize)
        } else {
            (self.ld as isize, 1)
        }
    }
}

/// `c = alpha * a @ b + beta * c`, with `c` row-major using row stride `ldc`.
pub fn gemm(alpha: f32, a: Mat<'_>, b: Mat<'_>, beta: f32, c: &mut [f32], ldc: usize) {
    let (m, k) = a.logical();
    let (k2, n) = b.logical();
    assert_eq!(k, k2, "gemm inner dimension mismatch");
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= (m - 1) * ldc + n, "gemm output too small");
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    check_extent(&a);
    check_extent(&b);
    // SAFETY: all three operands were bounds-checked against their logical
    // shapes and strides above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

fn check_extent(m: &Mat<'_>) {
    if m.rows == 0 || m.cols == 0 {
        return;
    }
    let need = (m.rows - 1) * m.ld + m.cols;
    assert!(m.data.len() >= need, "gemm operand out of bounds");
}

/// Allocating `a @ b`.
pub fn matmul(a: Mat<'_>, b: Mat<'_>) -> Vec<f32> {
    let (m, _) = a.logical();
    let (_, n) = b.logical();
    let mut out = vec![0.0; m * n];
    gemm(1.0, a, b, 0.0, &mut out, n);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0f64;
                for p in 0..k {
                    s += a[i * k + p] as f64 * b[p * n + j] as f64;
                }
                c[i * n + j] = s as f32;
            }
        }
        c
    }

    #[test]
    fn matches_naive_with_transposes() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32 * 0.11).cos()).collect();
        let want = naive(&a, &b, m, k, n);
        let got = matmul(Mat::new(&a, m, k), Mat::new(&b, k, n));
        for (x, y) in got.iter().zip(&want) {
            assert!((x - y).abs() < 1e-5);
        }
        // (b^T)^T == b
        let bt: Vec<f32> = (0..n * k).map(|i| b[(i % k) * n + i / k]).collect();
        let got = matmul(Mat::new(&a, m, k), Mat::new(&bt, n, k).t());
        for (x, y) in got.iter().zip(&want) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn column_slices() {
        // a is 2x4; take columns 1..3
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let id = [1.0, 0.0, 0.0, 1.0];
        let got = matmul(Mat::cols_slice(&a, 2, 4, 1, 2), Mat::new(&id, 2, 2));
        assert_eq!(got, vec![2.0, 3.0, 6.0, 7.0]);
    }
}
