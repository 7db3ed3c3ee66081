//! Thin safe wrapper over `matrixmultiply::dgemm`.

/// A row/column-strided view used to describe one GEMM operand.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl Layout {
    pub fn row_major(rows: usize, cols: usize) -> Self {
        Layout { rows, cols, rs: cols as isize, cs: 1 }
    }

    /// Transposed view of a row-major `rows x cols` buffer.
    pub fn transposed(rows: usize, cols: usize) -> Self {
        Layout { rows: cols, cols: rows, rs: 1, cs: cols as isize }
    }

    fn max_offset(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return 0;
        }
        (self.rows - 1) * self.rs as usize + (self.cols - 1) * self.cs as usize
    }
}

/// `c = beta * c + a * b`.
pub(crate) fn gemm(a: &[f64], la: Layout, b: &[f64], lb: Layout, beta: f64, c: &mut [f64], lc: Layout) {
    assert_eq!(la.cols, lb.rows, "gemm inner dims");
    assert_eq!(la.rows, lc.rows, "gemm output rows");
    assert_eq!(lb.cols, lc.cols, "gemm output cols");
    let (m, k, n) = (la.rows, la.cols, lb.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for r in 0..m {
            for q in 0..n {
                let idx = r * lc.rs as usize + q * lc.cs as usize;
                c[idx] *= beta;
            }
        }
        return;
    }
    assert!(la.max_offset() < a.len(), "gemm lhs out of bounds");
    assert!(lb.max_offset() < b.len(), "gemm rhs out of bounds");
    assert!(lc.max_offset() < c.len(), "gemm out out of bounds");
    // SAFETY: every operand access stays within the offsets checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.rs,
            la.cs,
            b.as_ptr(),
            lb.rs,
            lb.cs,
            beta,
            c.as_mut_ptr(),
            lc.rs,
            lc.cs,
        );
    }
}

/// `out[r][p] = x[r] . m[p]` for a `[rows, n]` x and a row-major `[P, n]`
/// matrix. Streams `m` once; meant for few rows against a large matrix,
/// where packing it for GEMM would cost more than the product.
pub(crate) fn rows_dot_matrix_rows(x: &[f64], rows: usize, m: &[f64], n: usize, out: &mut [f64]) {
    let p_count = if n == 0 { 0 } else { m.len() / n };
    for (p, mrow) in m.chunks_exact(n.max(1)).take(p_count).enumerate() {
        for r in 0..rows {
            out[r * p_count + p] = dot(&x[r * n..(r + 1) * n], mrow);
        }
    }
}

/// `out[r] += sum_p g[r][p] * m[p]` for a `[rows, P]` g and row-major `[P, n]`
/// matrix, streaming `m` once.
pub(crate) fn rows_times_matrix(g: &[f64], rows: usize, m: &[f64], n: usize, out: &mut [f64]) {
    let p_count = if n == 0 { 0 } else { m.len() / n };
    for (p, mrow) in m.chunks_exact(n.max(1)).take(p_count).enumerate() {
        for r in 0..rows {
            let c = g[r * p_count + p];
            if c != 0.0 {
                for (o, v) in out[r * n..(r + 1) * n].iter_mut().zip(mrow) {
                    *o += c * v;
                }
            }
        }
    }
}

/// Dot product with four independent accumulators so it vectorises.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}
