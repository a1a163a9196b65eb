//! Row-major single-precision matrix products.
//!
//! Every output element is reduced in a fixed order regardless of how rows
//! are distributed over threads, so results are bitwise reproducible.

use rayon::prelude::*;

/// Work (multiply-adds) below which the kernels stay on the calling thread.
const PAR_THRESHOLD: usize = 1 << 20;
const COL_BLOCK: usize = 512;

fn parallel_rows(m: usize, work: usize) -> Option<usize> {
    let threads = rayon::current_num_threads();
    if threads <= 1 || work < PAR_THRESHOLD || m < 2 {
        return None;
    }
    Some(m.div_ceil(threads * 2).max(1))
}

/// `c[m x n] += a[m x k] * b[k x n]`
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    match parallel_rows(m, m * k * n) {
        Some(rows) => c
            .par_chunks_mut(rows * n)
            .enumerate()
            .for_each(|(t, chunk)| {
                let r0 = t * rows;
                let r = chunk.len() / n;
                nn_rows(&a[r0 * k..(r0 + r) * k], r, k, n, b, chunk);
            }),
        None => nn_rows(a, m, k, n, b, c),
    }
}

fn nn_rows(a: &[f32], m: usize, k: usize, n: usize, b: &[f32], c: &mut [f32]) {
    let mut j0 = 0;
    while j0 < n {
        let j1 = (j0 + COL_BLOCK).min(n);
        let mut i = 0;
        while i + 4 <= m {
            let (c0, rest) = c[i * n..(i + 4) * n].split_at_mut(n);
            let (c1, rest) = rest.split_at_mut(n);
            let (c2, c3) = rest.split_at_mut(n);
            let (c0, c1, c2, c3) = (&mut c0[j0..j1], &mut c1[j0..j1], &mut c2[j0..j1], &mut c3[j0..j1]);
            for p in 0..k {
                let a0 = a[i * k + p];
                let a1 = a[(i + 1) * k + p];
                let a2 = a[(i + 2) * k + p];
                let a3 = a[(i + 3) * k + p];
                let brow = &b[p * n + j0..p * n + j1];
                for ((((x0, x1), x2), x3), &bv) in c0
                    .iter_mut()
                    .zip(c1.iter_mut())
                    .zip(c2.iter_mut())
                    .zip(c3.iter_mut())
                    .zip(brow)
                {
                    *x0 += a0 * bv;
                    *x1 += a1 * bv;
                    *x2 += a2 * bv;
                    *x3 += a3 * bv;
                }
            }
            i += 4;
        }
        while i < m {
            let crow = &mut c[i * n + j0..i * n + j1];
            for p in 0..k {
                let av = a[i * k + p];
                let brow = &b[p * n + j0..p * n + j1];
                for (x, &bv) in crow.iter_mut().zip(brow) {
                    *x += av * bv;
                }
            }
            i += 1;
        }
        j0 = j1;
    }
}

/// `c[m x n] += a^T * b` with `a` stored as `k x m`.
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // Transposing `a` (small: weights) lets the nn kernel do the work.
    let mut at = vec![0.0f32; m * k];
    for p in 0..k {
        for i in 0..m {
            at[i * k + p] = a[p * m + i];
        }
    }
    gemm_nn(m, k, n, &at, b, c);
}

/// `c[m x n] += a * b^T` with `b` stored as `n x k`.
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let body = |i: usize, crow: &mut [f32]| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, x) in crow.iter_mut().enumerate() {
            *x += dot(arow, &b[j * k..(j + 1) * k]);
        }
    };
    match parallel_rows(m, m * k * n) {
        Some(_) => c
            .par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, crow)| body(i, crow)),
        None => c.chunks_mut(n).enumerate().for_each(|(i, crow)| body(i, crow)),
    }
}

/// Dot product with eight interleaved partial sums, combined in a fixed order.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for (ca, cb) in a.chunks_exact(8).zip(b.chunks_exact(8)) {
        for l in 0..8 {
            acc[l] += ca[l] * cb[l];
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(m: usize, k: usize, n: usize, a: &[f32], b: &[f32]) -> Vec<f64> {
        let mut c = vec![0.0f64; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] as f64 * b[p * n + j] as f64;
                }
            }
        }
        c
    }

    fn rand_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f32> {
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn transpose(x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
        let mut t = vec![0.0; x.len()];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = x[r * cols + c];
            }
        }
        t
    }

    #[test]
    fn all_layouts_match_naive_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(m, k, n) in &[(1, 1, 1), (5, 7, 3), (9, 17, 600), (4, 4, 4), (13, 2, 1030)] {
            let a = rand_vec(&mut rng, m * k);
            let b = rand_vec(&mut rng, k * n);
            let want = naive(m, k, n, &a, &b);
            let check = |c: &[f32]| {
                for (x, y) in c.iter().zip(&want) {
                    assert!((*x as f64 - y).abs() < 1e-4 * (1.0 + y.abs()), "{x} vs {y}");
                }
            };
            let mut c = vec![0.0; m * n];
            gemm_nn(m, k, n, &a, &b, &mut c);
            check(&c);
            let mut c = vec![0.0; m * n];
            gemm_tn(m, k, n, &transpose(&a, m, k), &b, &mut c);
            check(&c);
            let mut c = vec![0.0; m * n];
            gemm_nt(m, k, n, &a, &transpose(&b, k, n), &mut c);
            check(&c);
        }
    }
}
