//! Dense row-major f64 matrices and the handful of kernels the transformer
//! needs. Products go through `matrixmultiply`, which is single-threaded and
//! therefore bitwise reproducible.

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length does not match shape");
        Mat { rows, cols, data }
    }

    pub fn zeros_like(other: &Mat) -> Self {
        Self::zeros(other.rows, other.cols)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.fill(v);
    }

    pub fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    /// Adds a `1 x cols` row vector to every row.
    pub fn add_row_broadcast(&mut self, bias: &Mat) {
        debug_assert_eq!(bias.rows, 1);
        debug_assert_eq!(bias.cols, self.cols);
        for r in 0..self.rows {
            for (a, b) in self.row_mut(r).iter_mut().zip(&bias.data) {
                *a += b;
            }
        }
    }

    /// Accumulates the column sums of `self` into the row vector `out`.
    pub fn col_sums_into(&self, out: &mut Mat) {
        debug_assert_eq!(out.cols, self.cols);
        for r in 0..self.rows {
            for (o, v) in out.data.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
    }

    /// Copies columns `start..start + width` into a new matrix.
    pub fn cols_slice(&self, start: usize, width: usize) -> Mat {
        let mut out = Mat::zeros(self.rows, width);
        for r in 0..self.rows {
            out.row_mut(r)
                .copy_from_slice(&self.row(r)[start..start + width]);
        }
        out
    }

    /// Writes `src` into columns `start..start + src.cols`.
    pub fn set_cols(&mut self, start: usize, src: &Mat) {
        for r in 0..self.rows {
            self.row_mut(r)[start..start + src.cols].copy_from_slice(src.row(r));
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

#[derive(Clone, Copy)]
struct Layout {
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

fn layout(m: &Mat, transposed: bool) -> Layout {
    if transposed {
        Layout {
            rows: m.cols,
            cols: m.rows,
            rs: 1,
            cs: m.cols as isize,
        }
    } else {
        Layout {
            rows: m.rows,
            cols: m.cols,
            rs: m.cols as isize,
            cs: 1,
        }
    }
}

/// `c = beta * c + op(a) * op(b)` where `op` optionally transposes.
pub fn gemm(a: &Mat, ta: bool, b: &Mat, tb: bool, beta: f64, c: &mut Mat) {
    let la = layout(a, ta);
    let lb = layout(b, tb);
    assert_eq!(la.cols, lb.rows, "inner dimensions differ");
    assert_eq!((c.rows, c.cols), (la.rows, lb.cols), "output shape differs");
    if la.rows == 0 || lb.cols == 0 {
        return;
    }
    if la.cols == 0 {
        c.scale(beta);
        return;
    }
    // SAFETY: the layouts describe in-bounds strided views of `a`, `b` and
    // `c`, and `c` does not alias the inputs because it is borrowed mutably.
    unsafe {
        matrixmultiply::dgemm(
            la.rows,
            la.cols,
            lb.cols,
            1.0,
            a.data.as_ptr(),
            la.rs,
            la.cs,
            b.data.as_ptr(),
            lb.rs,
            lb.cs,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

/// `a * b`
pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let mut c = Mat::zeros(a.rows, b.cols);
    gemm(a, false, b, false, 0.0, &mut c);
    c
}

/// `a * b^T`
pub fn matmul_nt(a: &Mat, b: &Mat) -> Mat {
    let mut c = Mat::zeros(a.rows, b.rows);
    gemm(a, false, b, true, 0.0, &mut c);
    c
}

/// `a^T * b`
pub fn matmul_tn(a: &Mat, b: &Mat) -> Mat {
    let mut c = Mat::zeros(a.cols, b.cols);
    gemm(a, true, b, false, 0.0, &mut c);
    c
}

/// In-place numerically stable softmax over one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `log(sum(exp(row)))`
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(row);
    row.iter().map(|v| v - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Mat, b: &Mat) -> Mat {
        let mut c = Mat::zeros(a.rows, b.cols);
        for i in 0..a.rows {
            for j in 0..b.cols {
                let mut s = 0.0;
                for k in 0..a.cols {
                    s += a.data[i * a.cols + k] * b.data[k * b.cols + j];
                }
                c.data[i * c.cols + j] = s;
            }
        }
        c
    }

    fn transpose(a: &Mat) -> Mat {
        let mut t = Mat::zeros(a.cols, a.rows);
        for i in 0..a.rows {
            for j in 0..a.cols {
                t.data[j * a.rows + i] = a.data[i * a.cols + j];
            }
        }
        t
    }

    fn seq(rows: usize, cols: usize, k: f64) -> Mat {
        Mat::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|i| ((i as f64) * k).sin()).collect(),
        )
    }

    fn close(a: &Mat, b: &Mat) -> bool {
        a.shape() == b.shape()
            && a.data
                .iter()
                .zip(&b.data)
                .all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn products_match_naive() {
        let a = seq(3, 5, 0.7);
        let b = seq(5, 4, 1.3);
        let bt = transpose(&b);
        let at = transpose(&a);
        assert!(close(&matmul(&a, &b), &naive(&a, &b)));
        assert!(close(&matmul_nt(&a, &bt), &naive(&a, &b)));
        assert!(close(&matmul_tn(&at, &b), &naive(&a, &b)));
        let mut c = naive(&a, &b);
        gemm(&a, false, &b, false, 1.0, &mut c);
        let mut twice = naive(&a, &b);
        twice.scale(2.0);
        assert!(close(&c, &twice));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut r = vec![1000.0, 999.0, -5.0, 0.0];
        softmax_in_place(&mut r);
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let ls = log_softmax(&[0.0, 0.0, 0.0, 0.0]);
        assert!((ls[0] + 4f64.ln()).abs() < 1e-15);
    }
}
