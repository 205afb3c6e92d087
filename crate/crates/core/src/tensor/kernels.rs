//! Dense row-major kernels. Loop orders keep the innermost loop contiguous so
//! the compiler can vectorize it; zero entries of the left operand are skipped
//! (inputs such as colored digit images are mostly zeros).

use crate::scalar::Scalar;

/// `c[m,n] += a[m,k] * b[k,n]`
pub(crate) fn gemm_nn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == S::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += a_ip * bj;
            }
        }
    }
}

/// `c[k,n] += a[m,k]^T * g[m,n]`
pub(crate) fn gemm_tn<S: Scalar>(a: &[S], g: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for p in 0..m {
        let a_row = &a[p * k..(p + 1) * k];
        let g_row = &g[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            if a_pi == S::zero() {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cj, &gj) in c_row.iter_mut().zip(g_row) {
                *cj += a_pi * gj;
            }
        }
    }
}

/// `c[m,k] += g[m,n] * b[k,n]^T`
pub(crate) fn gemm_nt<S: Scalar>(g: &[S], b: &[S], c: &mut [S], m: usize, n: usize, k: usize) {
    let bt = transpose(b, k, n);
    gemm_nn(g, &bt, c, m, n, k);
}

pub(crate) fn transpose<S: Scalar>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Row-major strides of `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        s[d] = acc;
        acc *= shape[d];
    }
    s
}

/// Strides of `shape` viewed inside the (right-aligned) `out` shape, zero on
/// broadcast dimensions.
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let offset = out.len() - shape.len();
    (0..out.len())
        .map(|d| {
            if d < offset {
                0
            } else {
                let sd = d - offset;
                if shape[sd] == 1 && out[d] != 1 {
                    0
                } else {
                    own[sd]
                }
            }
        })
        .collect()
}

/// Visits every element of `out_shape` in row-major order, passing the
/// matching offsets into two operands described by their broadcast strides.
pub(crate) fn for_each_broadcast<F: FnMut(usize, usize, usize)>(
    out_shape: &[usize],
    a_strides: &[usize],
    b_strides: &[usize],
    mut f: F,
) {
    let total: usize = out_shape.iter().product();
    if total == 0 {
        return;
    }
    let rank = out_shape.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for linear in 0..total {
        f(linear, oa, ob);
        // odometer increment
        let mut d = rank;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            oa += a_strides[d];
            ob += b_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            oa -= a_strides[d] * out_shape[d];
            ob -= b_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}
