//! Inner loops shared by forward and backward matmul paths.
//!
//! All kernels accumulate into `out` so backward passes can add into an
//! existing gradient buffer without a temporary.

/// out[m,n] += a[m,k] · b[k,n]
pub(crate) fn matmul_acc(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row.iter()) {
                *o += a_ip * b_pj;
            }
        }
    }
}

/// out[m,n] += a[m,k] · b[n,k]ᵀ
pub(crate) fn matmul_a_bt_acc(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f32;
            for (&x, &y) in a_row.iter().zip(b_row.iter()) {
                acc += x * y;
            }
            *o += acc;
        }
    }
}

/// out[k,n] += a[m,k]ᵀ · g[m,n]
pub(crate) fn matmul_at_b_acc(a: &[f32], g: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let g_row = &g[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &g_ij) in out_row.iter_mut().zip(g_row.iter()) {
                *o += a_ip * g_ij;
            }
        }
    }
}

/// Numerically stable softmax over one contiguous row, in place.
pub(crate) fn softmax_row(row: &mut [f32]) {
    let mut max = f32::NEG_INFINITY;
    for &x in row.iter() {
        if x > max {
            max = x;
        }
    }
    let mut sum = 0.0f32;
    for x in row.iter_mut() {
        let e = crate::fmath::exp(*x - max);
        *x = e;
        sum += e;
    }
    let inv = 1.0 / sum;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;

    fn naive(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[i * k + p] * b[p * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    #[test]
    fn matmul_matches_naive_small_dims() {
        let mut next = 0.37f32;
        let mut gen = || {
            next = (next * 37.0 + 11.0) % 7.0 - 3.0;
            next
        };
        for m in 1..=4 {
            for k in 1..=4 {
                for n in 1..=4 {
                    let a: Vec<f32> = (0..m * k).map(|_| gen()).collect();
                    let b: Vec<f32> = (0..k * n).map(|_| gen()).collect();
                    let want = naive(&a, &b, m, k, n);

                    let mut out = vec![0.0; m * n];
                    matmul_acc(&a, &b, &mut out, m, k, n);
                    assert_eq!(out, want, "matmul_acc {m}x{k}x{n}");

                    // a · bᵀ with b stored transposed must agree.
                    let mut bt = vec![0.0; k * n];
                    for p in 0..k {
                        for j in 0..n {
                            bt[j * k + p] = b[p * n + j];
                        }
                    }
                    let mut out2 = vec![0.0; m * n];
                    matmul_a_bt_acc(&a, &bt, &mut out2, m, k, n);
                    for (x, y) in out2.iter().zip(want.iter()) {
                        assert!((x - y).abs() < 1e-5, "matmul_a_bt_acc {m}x{k}x{n}");
                    }

                    // aᵀ · g computed by the kernel vs naive on explicit aᵀ.
                    let g: Vec<f32> = (0..m * n).map(|_| gen()).collect();
                    let mut at = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            at[p * m + i] = a[i * k + p];
                        }
                    }
                    let want_atg = naive(&at, &g, k, m, n);
                    let mut out3 = vec![0.0; k * n];
                    matmul_at_b_acc(&a, &g, &mut out3, m, k, n);
                    for (x, y) in out3.iter().zip(want_atg.iter()) {
                        assert!((x - y).abs() < 1e-5, "matmul_at_b_acc {m}x{k}x{n}");
                    }
                }
            }
        }
    }

    #[test]
    fn kernels_accumulate() {
        let a = [1.0, 2.0];
        let b = [3.0, 4.0];
        let mut out = [10.0f32];
        matmul_acc(&a, &b, &mut out, 1, 2, 1);
        assert_eq!(out[0], 10.0 + 11.0);
    }

    #[test]
    fn softmax_row_normalizes() {
        let mut row = [1.0f32, 2.0, 3.0];
        softmax_row(&mut row);
        let sum: f32 = row.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert!(row[2] > row[1] && row[1] > row[0]);
        // Shift invariance: softmax(x + c) == softmax(x).
        let mut shifted = [1001.0f32, 1002.0, 1003.0];
        softmax_row(&mut shifted);
        for (a, b) in row.iter().zip(shifted.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
