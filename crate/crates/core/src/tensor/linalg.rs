//! Dense row-major f64 matrix kernels.
//!
//! All kernels *accumulate* into the output (`c += ...`); callers zero the
//! buffer when they want a plain product. Register-tiled inner loops keep a
//! 2x16 accumulator block live across the reduction dimension, which the
//! compiler turns into FMA vector code when AVX2 is available. Each output
//! element is reduced strictly in index order, so results are deterministic
//! for a given build and feature path.

use std::sync::OnceLock;

fn avx2_available() -> bool {
    static AVX2: OnceLock<bool> = OnceLock::new();
    *AVX2.get_or_init(|| {
        #[cfg(target_arch = "x86_64")]
        {
            std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
        }
        #[cfg(not(target_arch = "x86_64"))]
        {
            false
        }
    })
}

const IT: usize = 2;
const JT: usize = 16;

/// c[m x n] += a[m x k] * b[k x n]
#[inline(always)]
fn matmul_acc_inner(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut i = 0;
    while i + IT <= m {
        let mut j = 0;
        while j + JT <= n {
            let mut acc = [[0.0f64; JT]; IT];
            for p in 0..k {
                let bj = &b[p * n + j..p * n + j + JT];
                for (ii, row) in acc.iter_mut().enumerate() {
                    let av = a[(i + ii) * k + p];
                    for jj in 0..JT {
                        row[jj] += av * bj[jj];
                    }
                }
            }
            for (ii, row) in acc.iter().enumerate() {
                let crow = &mut c[(i + ii) * n + j..(i + ii) * n + j + JT];
                for jj in 0..JT {
                    crow[jj] += row[jj];
                }
            }
            j += JT;
        }
        while j < n {
            for ii in 0..IT {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[(i + ii) * k + p] * b[p * n + j];
                }
                c[(i + ii) * n + j] += s;
            }
            j += 1;
        }
        i += IT;
    }
    while i < m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] += s;
        }
        i += 1;
    }
}

/// c[k x n] += a^T * b, where a is m x k and b is m x n.
#[inline(always)]
fn matmul_at_b_acc_inner(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    let mut p = 0;
    while p + IT <= k {
        let mut j = 0;
        while j + JT <= n {
            let mut acc = [[0.0f64; JT]; IT];
            for i in 0..m {
                let bj = &b[i * n + j..i * n + j + JT];
                for (pp, row) in acc.iter_mut().enumerate() {
                    let av = a[i * k + p + pp];
                    for jj in 0..JT {
                        row[jj] += av * bj[jj];
                    }
                }
            }
            for (pp, row) in acc.iter().enumerate() {
                let crow = &mut c[(p + pp) * n + j..(p + pp) * n + j + JT];
                for jj in 0..JT {
                    crow[jj] += row[jj];
                }
            }
            j += JT;
        }
        while j < n {
            for pp in 0..IT {
                let mut s = 0.0;
                for i in 0..m {
                    s += a[i * k + p + pp] * b[i * n + j];
                }
                c[(p + pp) * n + j] += s;
            }
            j += 1;
        }
        p += IT;
    }
    while p < k {
        for j in 0..n {
            let mut s = 0.0;
            for i in 0..m {
                s += a[i * k + p] * b[i * n + j];
            }
            c[p * n + j] += s;
        }
        p += 1;
    }
}

/// c[m x n] += a * b^T, where a is m x k and b is n x k.
#[inline(always)]
fn matmul_a_bt_acc_inner(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    // Dot products of contiguous rows; tile 4 b-rows against 2 a-rows.
    const JB: usize = 4;
    let mut i = 0;
    while i + IT <= m {
        let mut j = 0;
        while j + JB <= n {
            let mut acc = [[0.0f64; JB]; IT];
            for p in 0..k {
                for (ii, row) in acc.iter_mut().enumerate() {
                    let av = a[(i + ii) * k + p];
                    for jj in 0..JB {
                        row[jj] += av * b[(j + jj) * k + p];
                    }
                }
            }
            for (ii, row) in acc.iter().enumerate() {
                for jj in 0..JB {
                    c[(i + ii) * n + j + jj] += row[jj];
                }
            }
            j += JB;
        }
        while j < n {
            for ii in 0..IT {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[(i + ii) * k + p] * b[j * k + p];
                }
                c[(i + ii) * n + j] += s;
            }
            j += 1;
        }
        i += IT;
    }
    while i < m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[j * k + p];
            }
            c[i * n + j] += s;
        }
        i += 1;
    }
}

macro_rules! dispatch {
    ($name:ident, $inner:ident) => {
        #[cfg(target_arch = "x86_64")]
        #[target_feature(enable = "avx2,fma")]
        unsafe fn $name(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
            $inner(c, a, b, m, k, n)
        }
    };
}

dispatch!(matmul_acc_avx2, matmul_acc_inner);
dispatch!(matmul_at_b_acc_avx2, matmul_at_b_acc_inner);
dispatch!(matmul_a_bt_acc_avx2, matmul_a_bt_acc_inner);

pub fn matmul_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    #[cfg(target_arch = "x86_64")]
    if avx2_available() {
        // Safety: feature presence checked at runtime.
        unsafe { matmul_acc_avx2(c, a, b, m, k, n) };
        return;
    }
    matmul_acc_inner(c, a, b, m, k, n)
}

pub fn matmul_at_b_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    #[cfg(target_arch = "x86_64")]
    if avx2_available() {
        // Safety: feature presence checked at runtime.
        unsafe { matmul_at_b_acc_avx2(c, a, b, m, k, n) };
        return;
    }
    matmul_at_b_acc_inner(c, a, b, m, k, n)
}

pub fn matmul_a_bt_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    #[cfg(target_arch = "x86_64")]
    if avx2_available() {
        // Safety: feature presence checked at runtime.
        unsafe { matmul_a_bt_acc_avx2(c, a, b, m, k, n) };
        return;
    }
    matmul_a_bt_acc_inner(c, a, b, m, k, n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
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

    fn fill(len: usize, mul: f64) -> Vec<f64> {
        (0..len).map(|i| ((i * 2654435761 % 1000) as f64 - 500.0) * mul).collect()
    }

    fn assert_same(got: &[f64], want: &[f64]) {
        for (x, y) in got.iter().zip(want) {
            assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn kernels_match_naive_reference() {
        for &(m, k, n) in &[(1, 1, 1), (2, 3, 4), (10, 96, 96), (7, 17, 33), (5, 1024, 64), (3, 4, 2)] {
            let a = fill(m * k, 1e-3);
            let b = fill(k * n, 2e-3);
            let mut c = vec![0.0; m * n];
            matmul_acc(&mut c, &a, &b, m, k, n);
            assert_same(&c, &naive(&a, &b, m, k, n));

            // c[p][j] = sum_i a[i][p] * b2[i][j], a: m x k, b2: m x n
            let b2 = fill(m * n, 2e-3);
            let mut c2 = vec![0.0; k * n];
            matmul_at_b_acc(&mut c2, &a, &b2, m, k, n);
            let mut want2 = vec![0.0; k * n];
            for p in 0..k {
                for j in 0..n {
                    for i in 0..m {
                        want2[p * n + j] += a[i * k + p] * b2[i * n + j];
                    }
                }
            }
            assert_same(&c2, &want2);

            // c[i][j] = sum_p a[i][p] * bt[j][p], bt: n x k
            let bt = fill(n * k, 2e-3);
            let mut c3 = vec![0.0; m * n];
            matmul_a_bt_acc(&mut c3, &a, &bt, m, k, n);
            let mut want3 = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    for p in 0..k {
                        want3[i * n + j] += a[i * k + p] * bt[j * k + p];
                    }
                }
            }
            assert_same(&c3, &want3);
        }
    }

    #[test]
    fn accumulates_instead_of_overwriting() {
        let a = [1.0, 2.0];
        let b = [3.0, 4.0];
        let mut c = [10.0];
        matmul_acc(&mut c, &a, &b, 1, 2, 1);
        assert_eq!(c[0], 10.0 + 11.0);
    }
}
