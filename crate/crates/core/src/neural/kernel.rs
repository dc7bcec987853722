//! Math kernels shared by the taped forward, the no-grad forward, and the
//! incremental sampling session.
//!
//! Sharing matters for more than code size: PPO assumes the log-prob a
//! sampler records equals the log-prob the training tape recomputes, and
//! the KV-cache session must reproduce the full forward bit for bit. Both
//! hold only if every path evaluates the same expressions in the same
//! order, which is what these kernels pin down. Row-parallel loops go
//! through [`crate::par`], so results never depend on thread count.

use super::tensor::Scalar;
use crate::par;

/// Below this many multiply-adds a matmul stays sequential.
const PARALLEL_FLOPS: usize = 1 << 14;

/// Canonical dot product: ascending index order.
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::ZERO;
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `a [m,k] · b [k,n] -> [m,n]`.
pub fn matmul_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![T::ZERO; m * n];
    let parallel = m >= 4 && m * k * n >= PARALLEL_FLOPS;
    par::for_each_chunk_mut(&mut out, n, parallel, |i, row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bkj) in row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    });
    out
}

/// `a [m,k] · b^T` where `b` is stored `[n,k]` -> `[m,n]`. Each output
/// element is one [`dot`] of two contiguous rows.
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![T::ZERO; m * n];
    let parallel = m >= 4 && m * k * n >= PARALLEL_FLOPS;
    par::for_each_chunk_mut(&mut out, n, parallel, |i, row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            *o = dot(a_row, &b[j * k..(j + 1) * k]);
        }
    });
    out
}

/// `a^T · b` where `a` is stored `[k,m]`, `b` is `[k,n]` -> `[m,n]`.
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![T::ZERO; m * n];
    let parallel = m >= 4 && m * k * n >= PARALLEL_FLOPS;
    par::for_each_chunk_mut(&mut out, n, parallel, |i, row| {
        for kk in 0..k {
            let aki = a[kk * m + i];
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bkj) in row.iter_mut().zip(b_row) {
                *o += aki * bkj;
            }
        }
    });
    out
}

pub const LN_EPS: f64 = 1e-5;

/// Per-row layer norm over `[m,n]`. Returns the output plus the
/// normalized rows and inverse stddevs the backward pass needs.
pub fn layernorm_rows<T: Scalar>(
    x: &[T],
    gain: &[T],
    bias: &[T],
    m: usize,
    n: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    debug_assert_eq!(x.len(), m * n);
    debug_assert_eq!(gain.len(), n);
    debug_assert_eq!(bias.len(), n);
    let eps = T::from_f64(LN_EPS);
    let inv_n = T::ONE / T::from_f64(n as f64);
    let mut y = vec![T::ZERO; m * n];
    let mut xhat = vec![T::ZERO; m * n];
    let mut inv_std = vec![T::ZERO; m];
    for i in 0..m {
        let row = &x[i * n..(i + 1) * n];
        let mut mean = T::ZERO;
        for &v in row {
            mean += v;
        }
        mean *= inv_n;
        let mut var = T::ZERO;
        for &v in row {
            let d = v - mean;
            var += d * d;
        }
        var *= inv_n;
        let istd = T::ONE / (var + eps).sqrt();
        inv_std[i] = istd;
        for j in 0..n {
            let h = (row[j] - mean) * istd;
            xhat[i * n + j] = h;
            y[i * n + j] = h * gain[j] + bias[j];
        }
    }
    (y, xhat, inv_std)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// Tanh-approximated GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::ONE + u.tanh())
}

/// Derivative of [`gelu`].
pub fn gelu_prime<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::ONE + three * a * x * x);
    half * (T::ONE + t) + half * x * (T::ONE - t * t) * du
}

/// Stable softmax over one row, in place.
pub fn softmax_inplace<T: Scalar>(row: &mut [T]) {
    let mut m = row[0];
    for &v in row.iter() {
        m = m.max_s(v);
    }
    let mut sum = T::ZERO;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    let inv = T::ONE / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Causal softmax over a square score matrix `[t,t]`: row `i` normalizes
/// over columns `0..=i` only and is exactly zero past the diagonal, so no
/// probability mass can reach future positions.
pub fn softmax_causal<T: Scalar>(x: &[T], t: usize) -> Vec<T> {
    debug_assert_eq!(x.len(), t * t);
    let mut y = x.to_vec();
    for i in 0..t {
        let row = &mut y[i * t..(i + 1) * t];
        softmax_inplace(&mut row[..=i]);
        for v in &mut row[i + 1..] {
            *v = T::ZERO;
        }
    }
    y
}

/// Row-wise softmax over `[m,n]`.
pub fn softmax_rows<T: Scalar>(x: &[T], m: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(x.len(), m * n);
    let mut y = x.to_vec();
    for i in 0..m {
        softmax_inplace(&mut y[i * n..(i + 1) * n]);
    }
    y
}

/// Stable `log softmax(row)[target]`.
pub fn log_prob_of<T: Scalar>(row: &[T], target: usize) -> T {
    debug_assert!(target < row.len());
    let mut m = row[0];
    for &v in row.iter() {
        m = m.max_s(v);
    }
    let mut sum = T::ZERO;
    for &v in row.iter() {
        sum += (v - m).exp();
    }
    row[target] - m - sum.ln()
}

/// Numerically stable binary cross-entropy on a logit:
/// `max(x,0) - x*y + ln(1 + exp(-|x|))`.
pub fn bce_with_logit<T: Scalar>(x: T, y: T) -> T {
    x.max_s(T::ZERO) - x * y + (T::ONE + (-x.abs()).exp()).ln()
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_nn_matches_hand_values() {
        // [[1,2],[3,4]] x [[5,6],[7,8]] = [[19,22],[43,50]]
        let c = matmul_nn::<f64>(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], 2, 2, 2);
        assert_eq!(c, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_variants_agree_on_transposed_layouts() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // [2,3]
        let b = [7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0]; // [3,2]
        let nn = matmul_nn(&a, &b, 2, 3, 2);
        // b^T stored [2,3]
        let bt = [7.0f64, 9.0, 11.0, 8.0, 10.0, 12.0];
        assert_eq!(matmul_nt(&a, &bt, 2, 3, 2), nn);
        // a^T stored [3,2]
        let at = [1.0f64, 4.0, 2.0, 5.0, 3.0, 6.0];
        assert_eq!(matmul_tn(&at, &b, 2, 3, 2), nn);
    }

    #[test]
    fn large_matmul_is_thread_count_independent() {
        // Big enough to cross the parallel threshold.
        let m = 64;
        let k = 32;
        let n = 16;
        let a: Vec<f32> = (0..m * k).map(|i| ((i * 37 + 11) % 101) as f32 / 50.0 - 1.0).collect();
        let b: Vec<f32> = (0..n * k).map(|i| ((i * 53 + 7) % 89) as f32 / 44.0 - 1.0).collect();
        let fast = matmul_nt(&a, &b, m, k, n);
        let mut slow = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                slow[i * n + j] = dot(&a[i * k..(i + 1) * k], &b[j * k..(j + 1) * k]);
            }
        }
        assert_eq!(fast, slow, "parallel and sequential row order must agree bitwise");
    }

    #[test]
    fn causal_softmax_rows_are_proper_and_strictly_causal() {
        let t = 4;
        let x: Vec<f64> = (0..t * t).map(|i| (i as f64) * 0.3 - 1.0).collect();
        let y = softmax_causal(&x, t);
        for i in 0..t {
            let row = &y[i * t..(i + 1) * t];
            let sum: f64 = row[..=i].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(row[i + 1..].iter().all(|&v| v == 0.0));
            assert!(row[..=i].iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn log_prob_matches_naive_formula() {
        let row = [0.5f64, -1.25, 3.0, 0.0, 2.25];
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        for (t, &v) in row.iter().enumerate() {
            let naive = (v.exp() / z).ln();
            assert!((log_prob_of(&row, t) - naive).abs() < 1e-12);
        }
        // Large logits overflow the naive formula but not the stable one.
        let big = [1000.0f64, 999.0];
        assert!((log_prob_of(&big, 0) - (1.0f64.exp() / (1.0f64.exp() + 1.0)).ln()).abs() < 1e-9);
    }

    #[test]
    fn layernorm_rows_are_standardized() {
        let x = [1.0f64, 2.0, 3.0, 4.0, -2.0, 0.0, 2.0, 4.0];
        let gain = [1.0f64; 4];
        let bias = [0.0f64; 4];
        let (y, xhat, inv_std) = layernorm_rows(&x, &gain, &bias, 2, 4);
        assert_eq!(y, xhat);
        for i in 0..2 {
            let row = &y[i * 4..(i + 1) * 4];
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4, "unit variance up to eps, got {var}");
            assert!(inv_std[i] > 0.0);
        }
    }

    #[test]
    fn gelu_prime_matches_finite_differences() {
        let h = 1e-6;
        for &x in &[-3.0f64, -1.0, -0.1, 0.0, 0.1, 1.0, 3.0] {
            let num = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_prime(x) - num).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn bce_is_stable_and_correct() {
        for &(x, y) in &[(0.0f64, 1.0), (2.0, 0.0), (-3.0, 1.0), (700.0, 0.0), (-700.0, 1.0)] {
            let loss = bce_with_logit(x, y);
            assert!(loss.is_finite());
            if x.abs() < 20.0 {
                let p = sigmoid(x);
                let naive = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
                assert!((loss - naive).abs() < 1e-9);
            }
        }
        assert!(bce_with_logit(700.0f64, 0.0) > 600.0);
    }
}
