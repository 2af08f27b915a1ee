//! Row-major dense kernels shared by forward and backward passes.
//!
//! Everything is expressed as accumulating `out += a . b` products over
//! contiguous rows: the inner loop runs along the columns of `b` and `out`,
//! which the compiler auto-vectorizes without needing float reassociation.
//! Transposed operands are materialized once and fed through the same kernel;
//! at the matrix sizes used here the copy is far cheaper than strided access.

use crate::scalar::Scalar;

/// `out += a · b` with `a: m×k`, `b: k×n`, `out: m×n`, all row-major.
pub fn gemm_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += aik * bv;
            }
        }
    }
}

/// `out = transpose(a)` with `a: rows×cols`, `out: cols×rows`.
pub fn transpose_into<T: Scalar>(a: &[T], rows: usize, cols: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), rows * cols);
    debug_assert_eq!(out.len(), rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
}

pub fn transposed<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    transpose_into(a, rows, cols, &mut out);
    out
}

/// `out[j] += sum over rows of a[.., j]` for `a: m×n` (bias backward).
pub fn col_sum_acc<T: Scalar>(a: &[T], out: &mut [T], m: usize, n: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(out.len(), n);
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for (o, &v) in out.iter_mut().zip(arow.iter()) {
            *o += v;
        }
    }
}

/// `out += x*s` elementwise.
pub fn axpy<T: Scalar>(s: T, x: &[T], out: &mut [T]) {
    debug_assert_eq!(x.len(), out.len());
    for (o, &v) in out.iter_mut().zip(x.iter()) {
        *o += s * v;
    }
}
