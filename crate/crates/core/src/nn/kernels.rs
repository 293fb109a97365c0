//! Dense row-major kernels used by the autodiff tape.
//!
//! Every output element of [`matmul`] accumulates over the shared dimension
//! in a fixed order and never mixes rows, so a row's result does not depend
//! on how many other rows are batched with it. Cached rollout ELBOs rely on
//! this to be reproducible bit-for-bit when re-evaluated in a different batch.

/// `a[n,k] @ b[k,m] -> [n,m]`
pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    let mut c = vec![0.0; n * m];
    for (a_row, c_row) in a.chunks_exact(k).zip(c.chunks_exact_mut(m)) {
        for (&a_ik, b_row) in a_row.iter().zip(b.chunks_exact(m)) {
            if a_ik == 0.0 {
                continue;
            }
            for (c_j, &b_j) in c_row.iter_mut().zip(b_row) {
                *c_j += a_ik * b_j;
            }
        }
    }
    c
}

/// `a[n,k]^T @ g[n,m] -> [k,m]`, accumulated into `out`.
pub fn matmul_at_b_acc(a: &[f64], g: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), k * m);
    for (a_row, g_row) in a.chunks_exact(k).zip(g.chunks_exact(m)).take(n) {
        for (&a_ik, out_row) in a_row.iter().zip(out.chunks_exact_mut(m)) {
            if a_ik == 0.0 {
                continue;
            }
            for (o, &gj) in out_row.iter_mut().zip(g_row) {
                *o += a_ik * gj;
            }
        }
    }
}

/// `g[n,m] @ b[k,m]^T -> [n,k]`, accumulated into `out`.
pub fn matmul_a_bt_acc(g: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    let bt = transpose(b, k, m);
    let prod = matmul(g, &bt, n, m, k);
    for (o, p) in out.iter_mut().zip(prod) {
        *o += p;
    }
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

/// Numerically stable `log(sum(exp(xs)))`; `-inf` for an empty or all `-inf` slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044_715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044_715 * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044_715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        assert_eq!(matmul(&a, &b, 2, 3, 2), vec![4.0, 5.0, 10.0, 11.0]);
    }

    #[test]
    fn matmul_rows_independent_of_batch() {
        let a: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..12).map(|i| (i as f64 * 1.3).cos()).collect();
        let full = matmul(&a, &b, 3, 4, 3);
        let last = matmul(&a[8..], &b, 1, 4, 3);
        assert_eq!(&full[6..], &last[..]);
    }

    #[test]
    fn transposed_products_agree_with_plain_matmul() {
        let a: Vec<f64> = (0..6).map(|i| i as f64 - 2.5).collect();
        let g: Vec<f64> = (0..8).map(|i| (i as f64).sqrt()).collect();
        // a[2,3]^T @ g[2,4]
        let mut out = vec![0.0; 12];
        matmul_at_b_acc(&a, &g, 2, 3, 4, &mut out);
        let expect = matmul(&transpose(&a, 2, 3), &g, 3, 2, 4);
        assert_eq!(out, expect);

        let b: Vec<f64> = (0..12).map(|i| 0.1 * i as f64).collect(); // [3,4]
        let mut out = vec![0.0; 6];
        matmul_a_bt_acc(&g, &b, 2, 3, 4, &mut out);
        let expect = matmul(&g, &transpose(&b, 3, 4), 2, 4, 3);
        assert_eq!(out, expect);
    }

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.2] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn lse_handles_extremes() {
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }
}
