// SPDX-License-Identifier: MIT OR Apache-2.0

//! Row-major dense matrices and the handful of BLAS-style kernels the model needs.

use serde::{Deserialize, Serialize};

/// Dense row-major `f64` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "Mat::from_vec shape");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn view(&self) -> View<'_> {
        View {
            data: &self.data,
            offset: 0,
            rows: self.rows,
            cols: self.cols,
            rs: self.cols as isize,
            cs: 1,
        }
    }

    /// Columns `[start, start + width)` as a strided view.
    pub fn cols_view(&self, start: usize, width: usize) -> View<'_> {
        debug_assert!(start + width <= self.cols);
        View {
            data: &self.data,
            offset: start,
            rows: self.rows,
            cols: width,
            rs: self.cols as isize,
            cs: 1,
        }
    }

    pub fn view_mut(&mut self) -> ViewMut<'_> {
        let (rows, cols) = (self.rows, self.cols);
        ViewMut {
            data: &mut self.data,
            offset: 0,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub fn cols_view_mut(&mut self, start: usize, width: usize) -> ViewMut<'_> {
        let (rows, cols) = (self.rows, self.cols);
        debug_assert!(start + width <= cols);
        ViewMut {
            data: &mut self.data,
            offset: start,
            rows,
            cols: width,
            rs: cols as isize,
            cs: 1,
        }
    }
}

/// Borrowed strided matrix.
#[derive(Clone, Copy)]
pub struct View<'a> {
    data: &'a [f64],
    offset: usize,
    pub rows: usize,
    pub cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a> View<'a> {
    /// Contiguous row-major block `data[offset..offset + rows * cols]`.
    pub fn block(data: &'a [f64], offset: usize, rows: usize, cols: usize) -> View<'a> {
        assert!(offset + rows * cols <= data.len(), "block out of bounds");
        View {
            data,
            offset,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    /// Transposed view (no copy).
    pub fn t(self) -> View<'a> {
        View {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    pub fn row_slice(data: &'a [f64]) -> View<'a> {
        View {
            data,
            offset: 0,
            rows: 1,
            cols: data.len(),
            rs: data.len() as isize,
            cs: 1,
        }
    }
}

pub struct ViewMut<'a> {
    data: &'a mut [f64],
    offset: usize,
    pub rows: usize,
    pub cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a> ViewMut<'a> {
    pub fn block(data: &'a mut [f64], offset: usize, rows: usize, cols: usize) -> ViewMut<'a> {
        assert!(offset + rows * cols <= data.len(), "block out of bounds");
        ViewMut {
            data,
            offset,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub fn row_slice(data: &'a mut [f64]) -> ViewMut<'a> {
        let n = data.len();
        ViewMut {
            data,
            offset: 0,
            rows: 1,
            cols: n,
            rs: n as isize,
            cs: 1,
        }
    }
}

/// `c = alpha * a @ b + beta * c`.
pub fn gemm(alpha: f64, a: View<'_>, b: View<'_>, beta: f64, c: ViewMut<'_>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(a.rows, c.rows, "gemm output rows");
    assert_eq!(b.cols, c.cols, "gemm output cols");
    if a.rows == 0 || b.cols == 0 {
        return;
    }
    if a.cols == 0 {
        // matrixmultiply handles k = 0 by scaling c, but keep it explicit.
        for r in 0..c.rows {
            for col in 0..c.cols {
                let idx = c.offset as isize + r as isize * c.rs + col as isize * c.cs;
                c.data[idx as usize] *= beta;
            }
        }
        return;
    }
    check_bounds(a.data.len(), a.offset, a.rows, a.cols, a.rs, a.cs);
    check_bounds(b.data.len(), b.offset, b.rows, b.cols, b.rs, b.cs);
    check_bounds(c.data.len(), c.offset, c.rows, c.cols, c.rs, c.cs);
    // SAFETY: every view was bounds-checked above against its backing slice, and
    // `c` is an exclusive borrow so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs,
            a.cs,
            b.data.as_ptr().add(b.offset),
            b.rs,
            b.cs,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs,
            c.cs,
        );
    }
}

fn check_bounds(len: usize, offset: usize, rows: usize, cols: usize, rs: isize, cs: isize) {
    assert!(rs >= 0 && cs >= 0, "negative strides unsupported");
    let last = offset + (rows - 1) * rs as usize + (cols - 1) * cs as usize;
    assert!(last < len, "view out of bounds");
}

/// `a @ b` into a fresh matrix.
pub fn matmul(a: View<'_>, b: View<'_>) -> Mat {
    let mut out = Mat::zeros(a.rows, b.cols);
    gemm(1.0, a, b, 0.0, out.view_mut());
    out
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn add_assign(y: &mut [f64], x: &[f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += xi;
    }
}

pub fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

/// Numerically stable softmax of a slice.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return vec![f64::NAN; x.len()];
    }
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Mat, b: &Mat) -> Mat {
        let mut out = Mat::zeros(a.rows, b.cols);
        for i in 0..a.rows {
            for j in 0..b.cols {
                let mut s = 0.0;
                for k in 0..a.cols {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    fn seq(rows: usize, cols: usize, start: f64) -> Mat {
        Mat::from_vec(
            rows,
            cols,
            (0..rows * cols)
                .map(|i| start + 0.37 * i as f64 - 0.01 * (i * i) as f64)
                .collect(),
        )
    }

    #[test]
    fn gemm_matches_naive_with_transposes_and_column_views() {
        let a = seq(5, 7, 0.3);
        let b = seq(7, 4, -1.0);
        let got = matmul(a.view(), b.view());
        let want = naive(&a, &b);
        for (x, y) in got.data.iter().zip(&want.data) {
            assert!((x - y).abs() < 1e-9);
        }

        let at = seq(7, 5, 0.1);
        let got = matmul(at.view().t(), b.view());
        let mut a_from_t = Mat::zeros(5, 7);
        for i in 0..5 {
            for k in 0..7 {
                a_from_t.set(i, k, at.get(k, i));
            }
        }
        let want = naive(&a_from_t, &b);
        for (x, y) in got.data.iter().zip(&want.data) {
            assert!((x - y).abs() < 1e-9);
        }

        let wide = seq(7, 12, 2.0);
        let got = matmul(a.view(), wide.cols_view(4, 3));
        let mut sub = Mat::zeros(7, 3);
        for k in 0..7 {
            for j in 0..3 {
                sub.set(k, j, wide.get(k, 4 + j));
            }
        }
        let want = naive(&a, &sub);
        for (x, y) in got.data.iter().zip(&want.data) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_is_normalized_and_handles_neg_infinity() {
        let p = softmax(&[0.0, f64::NEG_INFINITY, 1.0_f64.ln()]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(p[1], 0.0);
    }
}
