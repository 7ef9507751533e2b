//! Small dense helpers on top of faer.

use faer::linalg::matmul::matmul;
use faer::{Accum, Mat, MatRef, Par};

/// `lhs · rhs` on the calling thread.
pub fn mul(lhs: MatRef<'_, f64>, rhs: MatRef<'_, f64>) -> Mat<f64> {
    let mut out = Mat::zeros(lhs.nrows(), rhs.ncols());
    matmul(out.as_mut(), Accum::Replace, lhs, rhs, 1.0, Par::Seq);
    out
}

/// max |AᵀA − I|.
pub fn orthogonality_defect(a: MatRef<'_, f64>) -> f64 {
    let gram = mul(a.transpose(), a);
    let mut worst = 0.0f64;
    for j in 0..gram.ncols() {
        for i in 0..gram.nrows() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((gram[(i, j)] - target).abs());
        }
    }
    worst
}

pub fn max_abs_diff(a: MatRef<'_, f64>, b: MatRef<'_, f64>) -> f64 {
    assert_eq!((a.nrows(), a.ncols()), (b.nrows(), b.ncols()));
    let mut worst = 0.0f64;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            worst = worst.max((a[(i, j)] - b[(i, j)]).abs());
        }
    }
    worst
}

pub fn frobenius(a: MatRef<'_, f64>) -> f64 {
    a.norm_l2()
}

/// Row-major copy of the entries.
pub fn to_row_major(a: MatRef<'_, f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.nrows() * a.ncols());
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            out.push(a[(i, j)]);
        }
    }
    out
}

pub fn from_row_major(rows: usize, cols: usize, data: &[f64]) -> Mat<f64> {
    assert_eq!(data.len(), rows * cols);
    Mat::from_fn(rows, cols, |i, j| data[i * cols + j])
}

pub fn is_finite(a: MatRef<'_, f64>) -> bool {
    (0..a.ncols()).all(|j| (0..a.nrows()).all(|i| a[(i, j)].is_finite()))
}

/// Applies `f` to every entry of `dst` paired with the same entry of `src`.
pub fn zip_apply(dst: &mut Mat<f64>, src: MatRef<'_, f64>, mut f: impl FnMut(&mut f64, f64)) {
    assert_eq!((dst.nrows(), dst.ncols()), (src.nrows(), src.ncols()));
    for j in 0..dst.ncols() {
        for i in 0..dst.nrows() {
            f(&mut dst[(i, j)], src[(i, j)]);
        }
    }
}
