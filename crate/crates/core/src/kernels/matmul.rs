use rayon::prelude::*;

use crate::tensor::Real;

/// Batched `C[b] = A[b] · B[b]` with `A: [m, k]`, `B: [k, p]`.
pub fn matmul<T: Real>(a: &[T], b: &[T], batch: usize, m: usize, k: usize, p: usize) -> Vec<T> {
    let mut c = vec![T::zero(); batch * m * p];
    if m * p == 0 {
        return c;
    }
    c.par_chunks_mut(m * p).enumerate().for_each(|(bi, cb)| {
        let ab = &a[bi * m * k..][..m * k];
        let bb = &b[bi * k * p..][..k * p];
        for i in 0..m {
            let crow = &mut cb[i * p..(i + 1) * p];
            for kk in 0..k {
                let av = ab[i * k + kk];
                if av == T::zero() {
                    continue;
                }
                for (cv, &bv) in crow.iter_mut().zip(&bb[kk * p..(kk + 1) * p]) {
                    *cv = *cv + av * bv;
                }
            }
        }
    });
    c
}

/// Batched `C[b] = A[b] · B[b]ᵀ` with `A: [m, k]`, `B: [p, k]`.
pub fn matmul_nt<T: Real>(a: &[T], b: &[T], batch: usize, m: usize, k: usize, p: usize) -> Vec<T> {
    let mut c = vec![T::zero(); batch * m * p];
    if m * p == 0 {
        return c;
    }
    c.par_chunks_mut(m * p).enumerate().for_each(|(bi, cb)| {
        let ab = &a[bi * m * k..][..m * k];
        let bb = &b[bi * p * k..][..p * k];
        for i in 0..m {
            let arow = &ab[i * k..(i + 1) * k];
            for j in 0..p {
                let brow = &bb[j * k..(j + 1) * k];
                cb[i * p + j] = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
            }
        }
    });
    c
}

/// Batched `C[b] = A[b]ᵀ · B[b]` with `A: [k, m]`, `B: [k, p]`.
pub fn matmul_tn<T: Real>(a: &[T], b: &[T], batch: usize, m: usize, k: usize, p: usize) -> Vec<T> {
    let mut c = vec![T::zero(); batch * m * p];
    if m * p == 0 {
        return c;
    }
    c.par_chunks_mut(m * p).enumerate().for_each(|(bi, cb)| {
        let ab = &a[bi * k * m..][..k * m];
        let bb = &b[bi * k * p..][..k * p];
        for kk in 0..k {
            let brow = &bb[kk * p..(kk + 1) * p];
            for i in 0..m {
                let av = ab[kk * m + i];
                if av == T::zero() {
                    continue;
                }
                for (cv, &bv) in cb[i * p..(i + 1) * p].iter_mut().zip(brow) {
                    *cv = *cv + av * bv;
                }
            }
        }
    });
    c
}
