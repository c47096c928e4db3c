//! Raw dense kernels shared by the forward ops and the backward pass.
//!
//! Every reduction accumulates in f64 regardless of the storage scalar, so
//! the f32 pipeline stays numerically close to its f64 instantiation.

use crate::scalar::Scalar;

/// C[m×n] = A[m×k] · B[k×n]
pub fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut acc = vec![0.0f64; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut acc[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            let aik = aik.as_f64();
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += aik * bv.as_f64();
            }
        }
    }
    acc.into_iter().map(S::from_f64).collect()
}

/// C[m×n] = A[m×k] · B[n×k]ᵀ
pub fn matmul_a_bt<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f64;
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                acc += av.as_f64() * bv.as_f64();
            }
            out.push(S::from_f64(acc));
        }
    }
    out
}

/// C[m×n] = A[k×m]ᵀ · B[k×n]
pub fn matmul_at_b<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut acc = vec![0.0f64; m * n];
    for kk in 0..k {
        let arow = &a[kk * m..(kk + 1) * m];
        let brow = &b[kk * n..(kk + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let av = av.as_f64();
            let orow = &mut acc[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv.as_f64();
            }
        }
    }
    acc.into_iter().map(S::from_f64).collect()
}

pub fn transpose<S: Scalar>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Row-wise softmax with max-shift; row sums are exact in f64 before rounding.
pub fn softmax_rows<S: Scalar>(x: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(x.len());
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let max = row
            .iter()
            .map(|v| v.as_f64())
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| S::from_f64(e / sum)));
    }
    out
}

/// Row-wise log-softmax (same shift, log-domain output).
pub fn log_softmax_rows<S: Scalar>(x: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(x.len());
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let max = row
            .iter()
            .map(|v| v.as_f64())
            .fold(f64::NEG_INFINITY, f64::max);
        let log_sum: f64 = row
            .iter()
            .map(|v| (v.as_f64() - max).exp())
            .sum::<f64>()
            .ln();
        out.extend(
            row.iter()
                .map(|v| S::from_f64(v.as_f64() - max - log_sum)),
        );
    }
    out
}

/// Per-vector mean/variance over the last dimension, f64 accumulation.
pub fn layer_norm<S: Scalar>(
    x: &[S],
    gamma: &[S],
    beta: &[S],
    dim: usize,
    eps: f64,
) -> Vec<S> {
    let rows = x.len() / dim;
    let mut out = Vec::with_capacity(x.len());
    for r in 0..rows {
        let row = &x[r * dim..(r + 1) * dim];
        let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / dim as f64;
        let var = row
            .iter()
            .map(|v| {
                let d = v.as_f64() - mean;
                d * d
            })
            .sum::<f64>()
            / dim as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..dim {
            let xhat = (row[j].as_f64() - mean) * inv;
            out.push(S::from_f64(xhat * gamma[j].as_f64() + beta[j].as_f64()));
        }
    }
    out
}

pub const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh())
}

pub fn gelu_derivative(v: f64) -> f64 {
    let u = GELU_C * (v + GELU_A * v * v * v);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v)
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Per-row L2 norms in f64.
pub fn row_norms<S: Scalar>(x: &[S], rows: usize, cols: usize) -> Vec<f64> {
    (0..rows)
        .map(|r| {
            x[r * cols..(r + 1) * cols]
                .iter()
                .map(|v| {
                    let f = v.as_f64();
                    f * f
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}
