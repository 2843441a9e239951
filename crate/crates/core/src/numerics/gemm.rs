//! Dense matrix multiply with a fixed reduction order.
//!
//! Every output element is accumulated from zero, sequentially over the
//! shared dimension, in index order. The register-blocked kernel vectorizes
//! across output columns only, so the per-element summation order is the
//! same as the naive triple loop and results do not depend on `m` or on how
//! rows are partitioned between callers.

use super::tensor::Scalar;

const MR: usize = 4;
const NR: usize = 16;

/// `C = A · B` with `A: m×k`, `B: k×n`, all row-major.
pub fn matmul<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    matmul_into(a, b, &mut c, m, k, n);
    c
}

/// Overwrites `c` with `A · B`.
pub fn matmul_into<F: Scalar>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k, "lhs size");
    assert_eq!(b.len(), k * n, "rhs size");
    assert_eq!(c.len(), m * n, "out size");
    gemm_core(a, b, c, m, k, n, false);
}

/// With `accumulate`, running sums start from the current contents of `c`.
fn gemm_core<F: Scalar>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize, accumulate: bool) {
    let n_full = n - n % NR;
    let m_full = m - m % MR;
    let mut i = 0;
    while i < m_full {
        let mut j = 0;
        while j < n_full {
            block_kernel(a, b, c, i, j, k, n, accumulate);
            j += NR;
        }
        if n_full < n {
            edge(a, b, c, (i, i + MR), (n_full, n), k, n, accumulate);
        }
        i += MR;
    }
    if m_full < m {
        edge(a, b, c, (m_full, m), (0, n), k, n, accumulate);
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn block_kernel<F: Scalar>(
    a: &[F],
    b: &[F],
    c: &mut [F],
    i: usize,
    j: usize,
    k: usize,
    n: usize,
    accumulate: bool,
) {
    let mut acc = [[F::zero(); NR]; MR];
    if accumulate {
        for (r, row) in acc.iter_mut().enumerate() {
            row.copy_from_slice(&c[(i + r) * n + j..(i + r) * n + j + NR]);
        }
    }
    let a0 = &a[i * k..(i + 1) * k];
    let a1 = &a[(i + 1) * k..(i + 2) * k];
    let a2 = &a[(i + 2) * k..(i + 3) * k];
    let a3 = &a[(i + 3) * k..(i + 4) * k];
    for p in 0..k {
        let brow: &[F; NR] = b[p * n + j..p * n + j + NR].try_into().unwrap();
        let (x0, x1, x2, x3) = (a0[p], a1[p], a2[p], a3[p]);
        for q in 0..NR {
            acc[0][q] += x0 * brow[q];
            acc[1][q] += x1 * brow[q];
            acc[2][q] += x2 * brow[q];
            acc[3][q] += x3 * brow[q];
        }
    }
    for (r, row) in acc.iter().enumerate() {
        c[(i + r) * n + j..(i + r) * n + j + NR].copy_from_slice(row);
    }
}

#[allow(clippy::too_many_arguments)]
fn edge<F: Scalar>(
    a: &[F],
    b: &[F],
    c: &mut [F],
    (i0, i1): (usize, usize),
    (j0, j1): (usize, usize),
    k: usize,
    n: usize,
    accumulate: bool,
) {
    let w = j1 - j0;
    let mut acc = vec![F::zero(); w];
    for i in i0..i1 {
        if accumulate {
            acc.copy_from_slice(&c[i * n + j0..i * n + j1]);
        } else {
            acc.iter_mut().for_each(|v| *v = F::zero());
        }
        let arow = &a[i * k..(i + 1) * k];
        for (p, &x) in arow.iter().enumerate() {
            let brow = &b[p * n + j0..p * n + j1];
            for (s, &bv) in acc.iter_mut().zip(brow) {
                *s += x * bv;
            }
        }
        c[i * n + j0..i * n + j1].copy_from_slice(&acc);
    }
}

/// Row-major transpose of an `r×c` matrix.
pub fn transpose<F: Scalar>(x: &[F], r: usize, c: usize) -> Vec<F> {
    assert_eq!(x.len(), r * c);
    const B: usize = 32;
    let mut out = vec![F::zero(); r * c];
    for i0 in (0..r).step_by(B) {
        for j0 in (0..c).step_by(B) {
            for i in i0..(i0 + B).min(r) {
                for j in j0..(j0 + B).min(c) {
                    out[j * r + i] = x[i * c + j];
                }
            }
        }
    }
    out
}

/// `Aᵀ · B` with `A: k×m`, `B: k×n`. Same per-element order as [`matmul`]:
/// the shared dimension is walked in cache-sized chunks, and each chunk
/// resumes the running sums left by the previous one.
pub fn matmul_tn<F: Scalar>(a: &[F], b: &[F], k: usize, m: usize, n: usize) -> Vec<F> {
    assert_eq!(a.len(), k * m, "lhs size");
    assert_eq!(b.len(), k * n, "rhs size");
    const KC: usize = 256;
    let mut c = vec![F::zero(); m * n];
    for p0 in (0..k).step_by(KC) {
        let p1 = (p0 + KC).min(k);
        let at = transpose(&a[p0 * m..p1 * m], p1 - p0, m);
        gemm_core(&at, &b[p0 * n..p1 * n], &mut c, m, p1 - p0, n, true);
    }
    c
}

/// `A · Bᵀ` with `A: m×k`, `B: n×k`.
pub fn matmul_nt<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let bt = transpose(b, n, k);
    matmul(a, &bt, m, k, n)
}
