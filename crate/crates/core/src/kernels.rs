//! Raw dense kernels. Every reduction runs in a fixed ascending index order so
//! results are bit-reproducible and independent of what else shares a batch.

/// `out += a · b` with `a: m×k`, `b: k×n`, `out: m×n`.
///
/// Row `i` of the output depends only on row `i` of `a`, and each output
/// element accumulates its `k` products in ascending order.
pub fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    // four output rows at a time share each load of a `b` row
    let mut i = 0;
    while i + 4 <= m {
        let (o0, rest) = out[i * n..(i + 4) * n].split_at_mut(n);
        let (o1, rest) = rest.split_at_mut(n);
        let (o2, o3) = rest.split_at_mut(n);
        for p in 0..k {
            let (x0, x1, x2, x3) = (a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]);
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                let bj = b_row[j];
                o0[j] += x0 * bj;
                o1[j] += x1 * bj;
                o2[j] += x2 * bj;
                o3[j] += x3 * bj;
            }
        }
        i += 4;
    }
    for i in i..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * b_pj;
            }
        }
    }
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    matmul_acc(a, b, m, k, n, &mut out);
    out
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// `aᵀ · b` with `a: m×k`, `b: m×n`, giving `k×n`; accumulates over `m` in order.
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &b_ij) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * b_ij;
            }
        }
    }
    out
}

/// `a · bᵀ` with `a: m×k`, `b: n×k`, giving `m×n`.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let bt = transpose(b, n, k);
    matmul(a, &bt, m, k, n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn kernels_agree_with_scalar_loop() {
        let a: Vec<f64> = (0..12).map(|v| (v as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..20).map(|v| (v as f64 * 0.11).cos()).collect();
        // Same summation order as the scalar loop, so equality is exact.
        assert_eq!(matmul(&a, &b, 3, 4, 5), naive(&a, &b, 3, 4, 5));
        let at = transpose(&a, 3, 4);
        assert_eq!(matmul_tn(&at, &b, 4, 3, 5).len(), 15);
        assert_eq!(matmul_tn(&a, &a, 3, 4, 4), naive(&at, &a, 4, 3, 4));
        let bt = transpose(&b, 4, 5);
        assert_eq!(matmul_nt(&a, &bt, 3, 4, 5), naive(&a, &b, 3, 4, 5));
    }
}
