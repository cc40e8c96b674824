//! Hot loops shared by the tape ops. Everything here accumulates each output
//! element in a fixed sequential order over the contraction index, so results
//! are bitwise reproducible regardless of thread count.

use crate::real::Real;
use rayon::prelude::*;

/// Rows handled per parallel task in `mm_nn`. Each task owns a disjoint
/// slice of `c`, and per-element accumulation order does not depend on the
/// split, so parallelism never changes the result.
const ROW_TASK: usize = 32;

/// c[m,n] = a[m,k] * b[k,n], row-major, c overwritten.
///
/// Four output rows share every load of a `b` row, which is what lets the
/// inner loop turn into wide FMA streams.
pub fn mm_nn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let work = m * k * n;
    if work > 1 << 16 && rayon::current_num_threads() > 1 {
        c.par_chunks_mut(ROW_TASK * n).enumerate().for_each(|(task, c_chunk)| {
            let i0 = task * ROW_TASK;
            let rows = c_chunk.len() / n;
            mm_nn_block(&a[i0 * k..(i0 + rows) * k], b, c_chunk, rows, k, n);
        });
    } else {
        mm_nn_block(a, b, c, m, k, n);
    }
}

/// Columns per register tile in the 4-row micro-kernel. 4 rows x 64 columns
/// of f32 accumulators fit in the AVX-512 register file.
const JT: usize = 64;

fn mm_nn_block<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let mut i = 0;
    while i + 4 <= m {
        let (c0, rest) = c[i * n..].split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, rest) = rest.split_at_mut(n);
        let c3 = &mut rest[..n];
        let a0 = &a[i * k..(i + 1) * k];
        let a1 = &a[(i + 1) * k..(i + 2) * k];
        let a2 = &a[(i + 2) * k..(i + 3) * k];
        let a3 = &a[(i + 3) * k..(i + 4) * k];
        let mut j0 = 0;
        while j0 + JT <= n {
            // Accumulators live in registers for the whole contraction; each
            // output element still sums over kk in strictly increasing order.
            let mut acc0 = [T::zero(); JT];
            let mut acc1 = [T::zero(); JT];
            let mut acc2 = [T::zero(); JT];
            let mut acc3 = [T::zero(); JT];
            for kk in 0..k {
                let (v0, v1, v2, v3) = (a0[kk], a1[kk], a2[kk], a3[kk]);
                let brow = &b[kk * n + j0..kk * n + j0 + JT];
                for jj in 0..JT {
                    let bv = brow[jj];
                    acc0[jj] = acc0[jj] + v0 * bv;
                    acc1[jj] = acc1[jj] + v1 * bv;
                    acc2[jj] = acc2[jj] + v2 * bv;
                    acc3[jj] = acc3[jj] + v3 * bv;
                }
            }
            c0[j0..j0 + JT].copy_from_slice(&acc0);
            c1[j0..j0 + JT].copy_from_slice(&acc1);
            c2[j0..j0 + JT].copy_from_slice(&acc2);
            c3[j0..j0 + JT].copy_from_slice(&acc3);
            j0 += JT;
        }
        if j0 < n {
            let jt = n - j0;
            c0[j0..].fill(T::zero());
            c1[j0..].fill(T::zero());
            c2[j0..].fill(T::zero());
            c3[j0..].fill(T::zero());
            for kk in 0..k {
                let (v0, v1, v2, v3) = (a0[kk], a1[kk], a2[kk], a3[kk]);
                let brow = &b[kk * n + j0..kk * n + j0 + jt];
                for jj in 0..jt {
                    let bv = brow[jj];
                    c0[j0 + jj] = c0[j0 + jj] + v0 * bv;
                    c1[j0 + jj] = c1[j0 + jj] + v1 * bv;
                    c2[j0 + jj] = c2[j0 + jj] + v2 * bv;
                    c3[j0 + jj] = c3[j0 + jj] + v3 * bv;
                }
            }
        }
        i += 4;
    }
    while i < m {
        let crow = &mut c[i * n..(i + 1) * n];
        crow.fill(T::zero());
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
        i += 1;
    }
}

/// out[n,m] = transpose of x[m,n].
pub fn transpose<T: Real>(x: &[T], m: usize, n: usize, out: &mut [T]) {
    assert_eq!(x.len(), m * n);
    assert_eq!(out.len(), m * n);
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
}

pub fn transposed<T: Real>(x: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    transpose(x, m, n, &mut out);
    out
}

/// Branch-free rational tanh (Eigen-style minimax on [-9, 9], ~1e-7 abs
/// error), written so the compiler can vectorize elementwise loops — libm
/// tanh is scalar-only and dominates GELU cost otherwise.
pub fn fast_tanh<T: Real>(x: T) -> T {
    let c = |v: f64| T::from_f64_lossy(v);
    let nine = c(9.0);
    let x = if x > nine {
        nine
    } else if x < -nine {
        -nine
    } else {
        x
    };
    let x2 = x * x;
    let mut p = c(-2.760_768_477_423_55e-16);
    p = p * x2 + c(2.000_187_904_824_77e-13);
    p = p * x2 + c(-8.604_671_522_137_35e-11);
    p = p * x2 + c(5.122_297_090_371_14e-8);
    p = p * x2 + c(1.485_722_357_179_79e-5);
    p = p * x2 + c(6.372_619_288_754_36e-4);
    p = p * x2 + c(4.893_524_558_917_86e-3);
    p = p * x;
    let mut q = c(1.198_258_394_667_02e-6);
    q = q * x2 + c(1.185_347_056_866_54e-4);
    q = q * x2 + c(2.268_434_632_439e-3);
    q = q * x2 + c(4.893_525_185_543_85e-3);
    p / q
}

/// Numerically stable in-place softmax over each row of `x`.
pub fn softmax_rows<T: Real>(x: &mut [T], rows: usize, cols: usize) {
    for r in 0..rows {
        let row = &mut x[r * cols..(r + 1) * cols];
        let mut max = row[0];
        for &v in row.iter() {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        let inv = T::one() / sum;
        for v in row.iter_mut() {
            *v = *v * inv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn blocked_matches_naive() {
        for &(m, k, n) in &[(1, 1, 1), (3, 5, 2), (4, 4, 4), (7, 9, 11), (13, 6, 8)] {
            let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.7).sin()).collect();
            let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.3).cos()).collect();
            let mut c = vec![0.0; m * n];
            mm_nn(&a, &b, &mut c, m, k, n);
            let want = naive_mm(&a, &b, m, k, n);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn transpose_roundtrip() {
        let x: Vec<f32> = (0..12).map(|i| i as f32).collect();
        let xt = transposed(&x, 3, 4);
        let back = transposed(&xt, 4, 3);
        assert_eq!(x, back);
    }

    #[test]
    fn fast_tanh_tracks_libm() {
        let mut worst = 0.0f64;
        for i in -2000..=2000 {
            let x = i as f64 * 0.006; // covers [-12, 12] incl. the clamp
            let got = fast_tanh(x);
            let want = x.tanh();
            worst = worst.max((got - want).abs());
        }
        assert!(worst < 2e-7, "max abs error {worst}");
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut x = vec![1.0f64, 2.0, 3.0, -1.0, 0.0, 1.0];
        softmax_rows(&mut x, 2, 3);
        assert!((x[0] + x[1] + x[2] - 1.0).abs() < 1e-12);
        assert!((x[3] + x[4] + x[5] - 1.0).abs() < 1e-12);
    }
}
