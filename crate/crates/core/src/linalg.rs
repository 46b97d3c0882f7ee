//! Small dense kernels shared by the embedding and scoring paths.
//!
//! Dot products use a fixed eight-lane accumulation pattern: the summation
//! order depends only on the vector length, so results are identical no
//! matter how rows are distributed across threads.

use nalgebra::DMatrix;
use rayon::prelude::*;

const LANES: usize = 8;

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    reduce_lanes(acc) + tail
}

/// Mixed-precision variant for gallery rows stored as `f32`.
#[inline]
pub fn dot_f32(a: &[f32], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..LANES {
            acc[l] += x[l] as f64 * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += *x as f64 * y;
    }
    reduce_lanes(acc) + tail
}

#[inline]
fn reduce_lanes(acc: [f64; LANES]) -> f64 {
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]))
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `rows · x` for a row-major matrix, parallel over rows.
pub fn par_matvec(rows: &[f64], ncols: usize, x: &[f64]) -> Vec<f64> {
    assert_eq!(x.len(), ncols);
    rows.par_chunks(ncols).map(|r| dot(r, x)).collect()
}

/// Sequential `rows · x`, for small matrices where thread dispatch costs more than it saves.
pub fn matvec(rows: &[f64], ncols: usize, x: &[f64]) -> Vec<f64> {
    assert_eq!(x.len(), ncols);
    rows.chunks_exact(ncols).map(|r| dot(r, x)).collect()
}

/// Row-major copy of a nalgebra matrix.
pub fn to_row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        out.extend(m.row(i).iter().copied());
    }
    out
}

pub fn from_row_major(nrows: usize, ncols: usize, data: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(nrows, ncols, data)
}

/// Symmetrizes in place: `(A + Aᵀ) / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let mut inv = m.clone().cholesky()?.inverse();
    symmetrize(&mut inv);
    Some(inv)
}

/// `ln |M|` of a symmetric positive definite matrix.
pub fn spd_log_det(m: &DMatrix<f64>) -> Option<f64> {
    let chol = m.clone().cholesky()?;
    Some(2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}
