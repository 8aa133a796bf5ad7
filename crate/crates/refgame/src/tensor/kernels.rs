//! Raw row-major matrix kernels. No shape checking here; callers validate.

use crate::scalar::Scalar;

/// `a` is m*k, `b` is k*n, result is m*n.
pub fn matmul<S: Scalar>(a: &[S], m: usize, k: usize, b: &[S], n: usize) -> Vec<S> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// `a` is m*k, `b` is n*k, result is `a * b^T`, m*n.
pub fn matmul_tb<S: Scalar>(a: &[S], m: usize, k: usize, b: &[S], n: usize) -> Vec<S> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc = acc + x * y;
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// `a` is m*k, `b` is m*n, result is `a^T * b`, k*n.
pub fn matmul_ta<S: Scalar>(a: &[S], m: usize, k: usize, b: &[S], n: usize) -> Vec<S> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    let mut out = vec![S::zero(); k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// Numerically stable softmax of one contiguous slice, written in place.
pub fn softmax_slice<S: Scalar>(x: &mut [S]) {
    let mut max = S::neg_infinity();
    for &v in x.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = S::zero();
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in x.iter_mut() {
        *v = *v / sum;
    }
}

/// Softmax of an r*c matrix along `axis` (1 normalizes each row, 0 each
/// column).
pub fn softmax_axis<S: Scalar>(x: &[S], rows: usize, cols: usize, axis: usize) -> Vec<S> {
    debug_assert_eq!(x.len(), rows * cols);
    debug_assert!(axis < 2);
    let mut out = x.to_vec();
    if axis == 1 {
        for r in 0..rows {
            softmax_slice(&mut out[r * cols..(r + 1) * cols]);
        }
    } else {
        for c in 0..cols {
            let mut col: Vec<S> = (0..rows).map(|r| x[r * cols + c]).collect();
            softmax_slice(&mut col);
            for (r, v) in col.into_iter().enumerate() {
                out[r * cols + c] = v;
            }
        }
    }
    out
}

const GELU_C: f64 = 0.044_715;

/// Gaussian error linear unit, tanh approximation:
/// `0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 x^3)))`.
pub fn gelu<S: Scalar>(x: S) -> S {
    let half = S::from_real(0.5);
    let c = S::from_real(GELU_C);
    let k = S::from_real((2.0 / std::f64::consts::PI).sqrt());
    let inner = k * (x + c * x * x * x);
    half * x * (S::one() + inner.tanh())
}

/// Derivative of the tanh-approximated gelu.
pub fn gelu_grad<S: Scalar>(x: S) -> S {
    let half = S::from_real(0.5);
    let c = S::from_real(GELU_C);
    let three_c = S::from_real(3.0 * GELU_C);
    let k = S::from_real((2.0 / std::f64::consts::PI).sqrt());
    let inner = k * (x + c * x * x * x);
    let t = inner.tanh();
    let sech2 = S::one() - t * t;
    half * (S::one() + t) + half * x * sech2 * k * (S::one() + three_c * x * x)
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

/// Biased per-row mean and variance of an r*c matrix.
pub fn row_moments<S: Scalar>(x: &[S], cols: usize, row: usize) -> (S, S) {
    let slice = &x[row * cols..(row + 1) * cols];
    let n = S::from_usize_exact(cols);
    let mut mean = S::zero();
    for &v in slice {
        mean = mean + v;
    }
    mean = mean / n;
    let mut var = S::zero();
    for &v in slice {
        let d = v - mean;
        var = var + d * d;
    }
    (mean, var / n)
}
