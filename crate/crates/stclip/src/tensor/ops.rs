//! Forward operations. Each op validates shapes, computes its value through
//! the shared kernels, and records enough provenance for the backward pass.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{fmt_shape, kernels, Tensor};

pub(crate) enum Op<S: Scalar> {
    Add(Tensor<S>, Tensor<S>),
    Sub(Tensor<S>, Tensor<S>),
    Mul(Tensor<S>, Tensor<S>),
    /// Multiply by a compile-time constant.
    Scale(Tensor<S>, f64),
    /// x[r×c] + bias[c] per row.
    AddRowBroadcast(Tensor<S>, Tensor<S>),
    /// x[r×c] ⊙ gate[c] per row.
    MulRowBroadcast(Tensor<S>, Tensor<S>),
    /// x ⊙ s where s is a one-element tensor.
    ScaleByScalar(Tensor<S>, Tensor<S>),
    Matmul(Tensor<S>, Tensor<S>),
    Transpose(Tensor<S>),
    Reshape(Tensor<S>),
    Gather {
        input: Tensor<S>,
        indices: Arc<Vec<usize>>,
    },
    ConcatRows(Vec<Tensor<S>>),
    SoftmaxRows(Tensor<S>),
    LogSoftmaxRows(Tensor<S>),
    LayerNorm {
        x: Tensor<S>,
        gamma: Tensor<S>,
        beta: Tensor<S>,
        eps: f64,
    },
    Gelu(Tensor<S>),
    Sigmoid(Tensor<S>),
    Exp(Tensor<S>),
    MeanRows(Tensor<S>),
    MeanAll(Tensor<S>),
    SumAll(Tensor<S>),
    L2NormalizeRows(Tensor<S>),
    BceWithLogits {
        logits: Tensor<S>,
        targets: Arc<Vec<f64>>,
    },
}

impl<S: Scalar> Op<S> {
    pub(crate) fn inputs(&self) -> Vec<&Tensor<S>> {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::Scale(a, _) => vec![a],
            Op::AddRowBroadcast(a, b)
            | Op::MulRowBroadcast(a, b)
            | Op::ScaleByScalar(a, b)
            | Op::Matmul(a, b) => vec![a, b],
            Op::Transpose(a) | Op::Reshape(a) => vec![a],
            Op::Gather { input, .. } => vec![input],
            Op::ConcatRows(parts) => parts.iter().collect(),
            Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::Gelu(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::MeanRows(a)
            | Op::MeanAll(a)
            | Op::SumAll(a)
            | Op::L2NormalizeRows(a) => vec![a],
            Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::BceWithLogits { logits, .. } => vec![logits],
        }
    }
}

fn same_shape<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dim(format!(
            "{what}: shape {} does not match shape {}",
            fmt_shape(a.shape()),
            fmt_shape(b.shape())
        )));
    }
    Ok(())
}

impl<S: Scalar> Tensor<S> {
    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        same_shape(self, other, "add")?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::Add(self.clone(), other.clone()),
        ))
    }

    pub fn sub(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        same_shape(self, other, "sub")?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::Sub(self.clone(), other.clone()),
        ))
    }

    pub fn mul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        same_shape(self, other, "mul")?;
        let data = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a * b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::Mul(self.clone(), other.clone()),
        ))
    }

    pub fn scale(&self, c: f64) -> Tensor<S> {
        let data = self
            .data()
            .iter()
            .map(|&a| S::from_f64(a.as_f64() * c))
            .collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Scale(self.clone(), c))
    }

    /// Add a vector to every row of a 2-D tensor.
    pub fn add_row_broadcast(&self, bias: &Tensor<S>) -> Result<Tensor<S>> {
        let (rows, cols) = self.expect_2d("add_row_broadcast")?;
        if bias.shape() != [cols] {
            return Err(Error::Dim(format!(
                "add_row_broadcast: bias shape {} does not match row width {cols}",
                fmt_shape(bias.shape())
            )));
        }
        let mut data = Vec::with_capacity(self.numel());
        for r in 0..rows {
            for j in 0..cols {
                data.push(self.data()[r * cols + j] + bias.data()[j]);
            }
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::AddRowBroadcast(self.clone(), bias.clone()),
        ))
    }

    /// Multiply every row of a 2-D tensor elementwise by a vector.
    pub fn mul_row_broadcast(&self, gate: &Tensor<S>) -> Result<Tensor<S>> {
        let (rows, cols) = self.expect_2d("mul_row_broadcast")?;
        if gate.shape() != [cols] {
            return Err(Error::Dim(format!(
                "mul_row_broadcast: gate shape {} does not match row width {cols}",
                fmt_shape(gate.shape())
            )));
        }
        let mut data = Vec::with_capacity(self.numel());
        for r in 0..rows {
            for j in 0..cols {
                data.push(self.data()[r * cols + j] * gate.data()[j]);
            }
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::MulRowBroadcast(self.clone(), gate.clone()),
        ))
    }

    /// Multiply by a learnable one-element tensor.
    pub fn scale_by(&self, s: &Tensor<S>) -> Result<Tensor<S>> {
        if s.numel() != 1 {
            return Err(Error::Dim(format!(
                "scale_by expects a one-element tensor, got shape {}",
                fmt_shape(s.shape())
            )));
        }
        let sv = s.data()[0];
        let data = self.data().iter().map(|&a| a * sv).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::ScaleByScalar(self.clone(), s.clone()),
        ))
    }

    pub fn matmul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let (m, k) = self.expect_2d("matmul")?;
        let (k2, n) = other.expect_2d("matmul")?;
        if k != k2 {
            return Err(Error::Dim(format!(
                "matmul: lhs shape {} incompatible with rhs shape {}",
                fmt_shape(self.shape()),
                fmt_shape(other.shape())
            )));
        }
        let data = kernels::matmul(self.data(), other.data(), m, k, n);
        Ok(Tensor::from_op(
            vec![m, n],
            data,
            Op::Matmul(self.clone(), other.clone()),
        ))
    }

    pub fn transpose(&self) -> Result<Tensor<S>> {
        let (rows, cols) = self.expect_2d("transpose")?;
        let data = kernels::transpose(self.data(), rows, cols);
        Ok(Tensor::from_op(
            vec![cols, rows],
            data,
            Op::Transpose(self.clone()),
        ))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor<S>> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Dim(format!(
                "reshape: cannot view shape {} as {}",
                fmt_shape(self.shape()),
                fmt_shape(&shape)
            )));
        }
        Ok(Tensor::from_op(
            shape,
            self.data().to_vec(),
            Op::Reshape(self.clone()),
        ))
    }

    /// View a vector as a single-row matrix.
    pub fn as_row(&self) -> Result<Tensor<S>> {
        self.reshape(vec![1, self.numel()])
    }

    /// Arbitrary element gather; `indices` address the flat input buffer.
    pub fn gather(&self, indices: Arc<Vec<usize>>, shape: Vec<usize>) -> Result<Tensor<S>> {
        let numel: usize = shape.iter().product();
        if numel != indices.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Dim(format!(
                "gather: output shape {} does not match {} indices",
                fmt_shape(&shape),
                indices.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.numel()) {
            return Err(Error::Dim(format!(
                "gather: index {bad} out of range for {} elements",
                self.numel()
            )));
        }
        let data = indices.iter().map(|&i| self.data()[i]).collect();
        Ok(Tensor::from_op(
            shape,
            data,
            Op::Gather {
                input: self.clone(),
                indices,
            },
        ))
    }

    /// Rows `start..start+len` of a 2-D tensor.
    pub fn row_slice(&self, start: usize, len: usize) -> Result<Tensor<S>> {
        let (rows, cols) = self.expect_2d("row_slice")?;
        if len == 0 || start + len > rows {
            return Err(Error::Dim(format!(
                "row_slice: rows {start}..{} out of range for {rows} rows",
                start + len
            )));
        }
        let indices: Vec<usize> = (start * cols..(start + len) * cols).collect();
        self.gather(Arc::new(indices), vec![len, cols])
    }

    /// A selection of whole rows, in the given order.
    pub fn select_rows(&self, rows_idx: &[usize]) -> Result<Tensor<S>> {
        let (rows, cols) = self.expect_2d("select_rows")?;
        if rows_idx.is_empty() {
            return Err(Error::Dim("select_rows: empty row selection".into()));
        }
        if let Some(&bad) = rows_idx.iter().find(|&&r| r >= rows) {
            return Err(Error::Dim(format!(
                "select_rows: row {bad} out of range for {rows} rows"
            )));
        }
        let mut indices = Vec::with_capacity(rows_idx.len() * cols);
        for &r in rows_idx {
            indices.extend(r * cols..(r + 1) * cols);
        }
        self.gather(Arc::new(indices), vec![rows_idx.len(), cols])
    }

    /// Columns `start..start+len` of a 2-D tensor.
    pub fn col_slice(&self, start: usize, len: usize) -> Result<Tensor<S>> {
        let (rows, cols) = self.expect_2d("col_slice")?;
        if len == 0 || start + len > cols {
            return Err(Error::Dim(format!(
                "col_slice: cols {start}..{} out of range for {cols} cols",
                start + len
            )));
        }
        let mut indices = Vec::with_capacity(rows * len);
        for r in 0..rows {
            indices.extend(r * cols + start..r * cols + start + len);
        }
        self.gather(Arc::new(indices), vec![rows, len])
    }

    /// Stack 2-D tensors with equal widths along the row axis.
    pub fn concat_rows(parts: &[Tensor<S>]) -> Result<Tensor<S>> {
        if parts.is_empty() {
            return Err(Error::Dim("concat_rows: no tensors given".into()));
        }
        let (_, cols) = parts[0].expect_2d("concat_rows")?;
        let mut rows = 0;
        for p in parts {
            let (r, c) = p.expect_2d("concat_rows")?;
            if c != cols {
                return Err(Error::Dim(format!(
                    "concat_rows: width {c} does not match width {cols}"
                )));
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            data.extend_from_slice(p.data());
        }
        Ok(Tensor::from_op(
            vec![rows, cols],
            data,
            Op::ConcatRows(parts.to_vec()),
        ))
    }

    /// Stack 2-D tensors with equal heights along the column axis.
    pub fn concat_cols(parts: &[Tensor<S>]) -> Result<Tensor<S>> {
        let transposed: Vec<Tensor<S>> = parts
            .iter()
            .map(|p| p.transpose())
            .collect::<Result<_>>()?;
        Tensor::concat_rows(&transposed)?.transpose()
    }

    pub fn softmax_rows(&self) -> Result<Tensor<S>> {
        let (rows, cols) = self.expect_2d("softmax_rows")?;
        let data = kernels::softmax_rows(self.data(), rows, cols);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::SoftmaxRows(self.clone()),
        ))
    }

    pub fn log_softmax_rows(&self) -> Result<Tensor<S>> {
        let (rows, cols) = self.expect_2d("log_softmax_rows")?;
        let data = kernels::log_softmax_rows(self.data(), rows, cols);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::LogSoftmaxRows(self.clone()),
        ))
    }

    /// Normalize the last dimension to zero mean / unit variance, then apply
    /// the affine transform `gamma * xhat + beta`.
    pub fn layer_norm(&self, gamma: &Tensor<S>, beta: &Tensor<S>, eps: f64) -> Result<Tensor<S>> {
        let dim = self.cols();
        if gamma.shape() != [dim] || beta.shape() != [dim] {
            return Err(Error::Dim(format!(
                "layer_norm: gamma {} / beta {} do not match last dimension {dim}",
                fmt_shape(gamma.shape()),
                fmt_shape(beta.shape())
            )));
        }
        let data = kernels::layer_norm(self.data(), gamma.data(), beta.data(), dim, eps);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::LayerNorm {
                x: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                eps,
            },
        ))
    }

    pub fn gelu(&self) -> Tensor<S> {
        let data = self
            .data()
            .iter()
            .map(|&v| S::from_f64(kernels::gelu(v.as_f64())))
            .collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Gelu(self.clone()))
    }

    pub fn sigmoid(&self) -> Tensor<S> {
        let data = self
            .data()
            .iter()
            .map(|&v| S::from_f64(kernels::sigmoid(v.as_f64())))
            .collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Sigmoid(self.clone()))
    }

    pub fn exp(&self) -> Tensor<S> {
        let data = self
            .data()
            .iter()
            .map(|&v| S::from_f64(v.as_f64().exp()))
            .collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Exp(self.clone()))
    }

    /// Column means of a 2-D tensor.
    pub fn mean_rows(&self) -> Result<Tensor<S>> {
        let (rows, cols) = self.expect_2d("mean_rows")?;
        let mut acc = vec![0.0f64; cols];
        for r in 0..rows {
            for j in 0..cols {
                acc[j] += self.data()[r * cols + j].as_f64();
            }
        }
        let data = acc
            .into_iter()
            .map(|v| S::from_f64(v / rows as f64))
            .collect();
        Ok(Tensor::from_op(
            vec![cols],
            data,
            Op::MeanRows(self.clone()),
        ))
    }

    pub fn mean_all(&self) -> Tensor<S> {
        let sum: f64 = self.data().iter().map(|v| v.as_f64()).sum();
        Tensor::from_op(
            vec![1],
            vec![S::from_f64(sum / self.numel() as f64)],
            Op::MeanAll(self.clone()),
        )
    }

    pub fn sum_all(&self) -> Tensor<S> {
        let sum: f64 = self.data().iter().map(|v| v.as_f64()).sum();
        Tensor::from_op(vec![1], vec![S::from_f64(sum)], Op::SumAll(self.clone()))
    }

    /// Scale each row of a 2-D tensor to unit L2 norm.
    pub fn l2_normalize_rows(&self) -> Result<Tensor<S>> {
        let (rows, cols) = self.expect_2d("l2_normalize_rows")?;
        let norms = kernels::row_norms(self.data(), rows, cols);
        let mut data = Vec::with_capacity(self.numel());
        for r in 0..rows {
            let inv = 1.0 / norms[r].max(1e-30);
            for j in 0..cols {
                data.push(S::from_f64(self.data()[r * cols + j].as_f64() * inv));
            }
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::L2NormalizeRows(self.clone()),
        ))
    }

    /// Mean binary cross-entropy over all entries, computed from logits.
    pub fn bce_with_logits(&self, targets: &[f64]) -> Result<Tensor<S>> {
        if targets.len() != self.numel() {
            return Err(Error::Dim(format!(
                "bce_with_logits: {} targets for {} logits",
                targets.len(),
                self.numel()
            )));
        }
        let mut acc = 0.0f64;
        for (&z, &t) in self.data().iter().zip(targets.iter()) {
            let z = z.as_f64();
            acc += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
        }
        let mean = acc / self.numel() as f64;
        Ok(Tensor::from_op(
            vec![1],
            vec![S::from_f64(mean)],
            Op::BceWithLogits {
                logits: self.clone(),
                targets: Arc::new(targets.to_vec()),
            },
        ))
    }
}
