//! Reverse-mode differentiation. Gradients accumulate into a [`GradStore`]
//! owned by the caller; tensor nodes are never touched. All backward
//! arithmetic runs in f64 so the f32 pipeline's analytic gradients stay close
//! to the true derivative.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::kernels;
use super::ops::Op;
use super::{Tensor, TensorId};

/// Gradient buffers produced by one backward pass.
pub struct GradStore<S: Scalar> {
    grads: HashMap<TensorId, Vec<f64>>,
    _marker: std::marker::PhantomData<S>,
}

impl<S: Scalar> GradStore<S> {
    fn new() -> Self {
        GradStore {
            grads: HashMap::new(),
            _marker: std::marker::PhantomData,
        }
    }

    pub fn contains(&self, t: &Tensor<S>) -> bool {
        self.grads.contains_key(&t.id())
    }

    /// Raw f64 gradient buffer for a tensor, if one was produced.
    pub fn grad_f64(&self, t: &Tensor<S>) -> Option<&[f64]> {
        self.grads.get(&t.id()).map(|v| v.as_slice())
    }

    /// Gradient at the tensor's own precision.
    pub fn grad(&self, t: &Tensor<S>) -> Option<Tensor<S>> {
        self.grads.get(&t.id()).map(|g| {
            Tensor::from_vec(
                t.shape().to_vec(),
                g.iter().map(|&v| S::from_f64(v)).collect(),
            )
            .expect("gradient shape matches tensor shape")
        })
    }
}

impl<S: Scalar> Tensor<S> {
    /// Backpropagate from this tensor, seeding its gradient with ones
    /// (i.e. differentiate the sum of its elements).
    pub fn backward(&self) -> Result<GradStore<S>> {
        let mut store = GradStore::new();
        if !self.is_tracked() {
            return Ok(store);
        }

        // Reachable tracked nodes; ids increase from inputs to outputs, so a
        // descending id order is a valid reverse-topological order.
        let mut nodes: Vec<Tensor<S>> = Vec::new();
        let mut seen: HashSet<TensorId> = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(node) = stack.pop() {
            if !seen.insert(node.id()) {
                continue;
            }
            if let Some(op) = node.op() {
                for input in op.inputs() {
                    if input.is_tracked() && !seen.contains(&input.id()) {
                        stack.push(input.clone());
                    }
                }
            }
            nodes.push(node);
        }
        nodes.sort_by(|a, b| b.id().cmp(&a.id()));

        store
            .grads
            .insert(self.id(), vec![1.0f64; self.numel()]);

        for node in &nodes {
            let op = match node.op() {
                Some(op) => op,
                None => continue,
            };
            let grad = match store.grads.get(&node.id()) {
                Some(g) => g.clone(),
                None => continue,
            };
            if grad.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(
                    "backward produced a non-finite gradient".into(),
                ));
            }
            backprop_op(node, op, &grad, &mut store.grads);
        }
        Ok(store)
    }
}

fn accumulate(grads: &mut HashMap<TensorId, Vec<f64>>, id: TensorId, numel: usize, add: &[f64]) {
    let buf = grads.entry(id).or_insert_with(|| vec![0.0; numel]);
    for (b, &a) in buf.iter_mut().zip(add.iter()) {
        *b += a;
    }
}

fn backprop_op<S: Scalar>(
    node: &Tensor<S>,
    op: &Op<S>,
    grad: &[f64],
    grads: &mut HashMap<TensorId, Vec<f64>>,
) {
    // Skips inputs outside the tracked subgraph; their gradients are never read.
    let push = |grads: &mut HashMap<TensorId, Vec<f64>>, t: &Tensor<S>, g: &[f64]| {
        if t.is_tracked() {
            accumulate(grads, t.id(), t.numel(), g);
        }
    };

    match op {
        Op::Add(a, b) => {
            push(grads, a, grad);
            push(grads, b, grad);
        }
        Op::Sub(a, b) => {
            push(grads, a, grad);
            let neg: Vec<f64> = grad.iter().map(|&g| -g).collect();
            push(grads, b, &neg);
        }
        Op::Mul(a, b) => {
            if a.is_tracked() {
                let bv = b.data_f64();
                let ga: Vec<f64> = grad.iter().zip(bv.iter()).map(|(&g, &v)| g * v).collect();
                push(grads, a, &ga);
            }
            if b.is_tracked() {
                let av = a.data_f64();
                let gb: Vec<f64> = grad.iter().zip(av.iter()).map(|(&g, &v)| g * v).collect();
                push(grads, b, &gb);
            }
        }
        Op::Scale(a, c) => {
            let ga: Vec<f64> = grad.iter().map(|&g| g * c).collect();
            push(grads, a, &ga);
        }
        Op::AddRowBroadcast(x, bias) => {
            push(grads, x, grad);
            if bias.is_tracked() {
                let cols = bias.numel();
                let rows = x.numel() / cols;
                let mut gb = vec![0.0; cols];
                for r in 0..rows {
                    for j in 0..cols {
                        gb[j] += grad[r * cols + j];
                    }
                }
                push(grads, bias, &gb);
            }
        }
        Op::MulRowBroadcast(x, gate) => {
            let cols = gate.numel();
            let rows = x.numel() / cols;
            if x.is_tracked() {
                let gv = gate.data_f64();
                let mut gx = Vec::with_capacity(x.numel());
                for r in 0..rows {
                    for j in 0..cols {
                        gx.push(grad[r * cols + j] * gv[j]);
                    }
                }
                push(grads, x, &gx);
            }
            if gate.is_tracked() {
                let xv = x.data_f64();
                let mut gg = vec![0.0; cols];
                for r in 0..rows {
                    for j in 0..cols {
                        gg[j] += grad[r * cols + j] * xv[r * cols + j];
                    }
                }
                push(grads, gate, &gg);
            }
        }
        Op::ScaleByScalar(x, s) => {
            let sv = s.data()[0].as_f64();
            if x.is_tracked() {
                let gx: Vec<f64> = grad.iter().map(|&g| g * sv).collect();
                push(grads, x, &gx);
            }
            if s.is_tracked() {
                let xv = x.data_f64();
                let gs: f64 = grad.iter().zip(xv.iter()).map(|(&g, &v)| g * v).sum();
                push(grads, s, &[gs]);
            }
        }
        Op::Matmul(a, b) => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            if a.is_tracked() {
                let bv = b.data_f64();
                let ga = kernels::matmul_a_bt(grad, &bv, m, n, k);
                push(grads, a, &ga);
            }
            if b.is_tracked() {
                let av = a.data_f64();
                let gb = kernels::matmul_at_b(&av, grad, k, m, n);
                push(grads, b, &gb);
            }
        }
        Op::Transpose(a) => {
            let (rows, cols) = (node.shape()[0], node.shape()[1]);
            let ga = kernels::transpose(grad, rows, cols);
            push(grads, a, &ga);
        }
        Op::Reshape(a) => {
            push(grads, a, grad);
        }
        Op::Gather { input, indices } => {
            if input.is_tracked() {
                let mut gi = vec![0.0; input.numel()];
                for (pos, &src) in indices.iter().enumerate() {
                    gi[src] += grad[pos];
                }
                push(grads, input, &gi);
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let n = p.numel();
                if p.is_tracked() {
                    push(grads, p, &grad[offset..offset + n]);
                }
                offset += n;
            }
        }
        Op::SoftmaxRows(x) => {
            let cols = node.shape()[1];
            let rows = node.shape()[0];
            let y = node.data_f64();
            let mut gx = Vec::with_capacity(y.len());
            for r in 0..rows {
                let yr = &y[r * cols..(r + 1) * cols];
                let gr = &grad[r * cols..(r + 1) * cols];
                let dot: f64 = yr.iter().zip(gr.iter()).map(|(&a, &b)| a * b).sum();
                gx.extend(yr.iter().zip(gr.iter()).map(|(&yv, &gv)| yv * (gv - dot)));
            }
            push(grads, x, &gx);
        }
        Op::LogSoftmaxRows(x) => {
            let cols = node.shape()[1];
            let rows = node.shape()[0];
            let y = node.data_f64();
            let mut gx = Vec::with_capacity(y.len());
            for r in 0..rows {
                let yr = &y[r * cols..(r + 1) * cols];
                let gr = &grad[r * cols..(r + 1) * cols];
                let gsum: f64 = gr.iter().sum();
                gx.extend(
                    yr.iter()
                        .zip(gr.iter())
                        .map(|(&yv, &gv)| gv - yv.exp() * gsum),
                );
            }
            push(grads, x, &gx);
        }
        Op::LayerNorm { x, gamma, beta, eps } => {
            let dim = gamma.numel();
            let rows = x.numel() / dim;
            let xv = x.data_f64();
            let gv = gamma.data_f64();
            let mut gx = vec![0.0; x.numel()];
            let mut ggamma = vec![0.0; dim];
            let mut gbeta = vec![0.0; dim];
            for r in 0..rows {
                let xr = &xv[r * dim..(r + 1) * dim];
                let gr = &grad[r * dim..(r + 1) * dim];
                let mean = xr.iter().sum::<f64>() / dim as f64;
                let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
                let inv = 1.0 / (var + eps).sqrt();
                let xhat: Vec<f64> = xr.iter().map(|&v| (v - mean) * inv).collect();
                for j in 0..dim {
                    ggamma[j] += gr[j] * xhat[j];
                    gbeta[j] += gr[j];
                }
                let dxhat: Vec<f64> = gr.iter().zip(gv.iter()).map(|(&g, &w)| g * w).collect();
                let m1 = dxhat.iter().sum::<f64>() / dim as f64;
                let m2 = dxhat
                    .iter()
                    .zip(xhat.iter())
                    .map(|(&d, &h)| d * h)
                    .sum::<f64>()
                    / dim as f64;
                for j in 0..dim {
                    gx[r * dim + j] = inv * (dxhat[j] - m1 - xhat[j] * m2);
                }
            }
            push(grads, x, &gx);
            push(grads, gamma, &ggamma);
            push(grads, beta, &gbeta);
        }
        Op::Gelu(x) => {
            let xv = x.data_f64();
            let gx: Vec<f64> = grad
                .iter()
                .zip(xv.iter())
                .map(|(&g, &v)| g * kernels::gelu_derivative(v))
                .collect();
            push(grads, x, &gx);
        }
        Op::Sigmoid(x) => {
            let y = node.data_f64();
            let gx: Vec<f64> = grad
                .iter()
                .zip(y.iter())
                .map(|(&g, &yv)| g * yv * (1.0 - yv))
                .collect();
            push(grads, x, &gx);
        }
        Op::Exp(x) => {
            let y = node.data_f64();
            let gx: Vec<f64> = grad
                .iter()
                .zip(y.iter())
                .map(|(&g, &yv)| g * yv)
                .collect();
            push(grads, x, &gx);
        }
        Op::MeanRows(x) => {
            let cols = node.numel();
            let rows = x.numel() / cols;
            let inv = 1.0 / rows as f64;
            let mut gx = Vec::with_capacity(x.numel());
            for _ in 0..rows {
                gx.extend(grad.iter().map(|&g| g * inv));
            }
            push(grads, x, &gx);
        }
        Op::MeanAll(x) => {
            let inv = 1.0 / x.numel() as f64;
            let gx = vec![grad[0] * inv; x.numel()];
            push(grads, x, &gx);
        }
        Op::SumAll(x) => {
            let gx = vec![grad[0]; x.numel()];
            push(grads, x, &gx);
        }
        Op::L2NormalizeRows(x) => {
            let (rows, cols) = (node.shape()[0], node.shape()[1]);
            let xv = x.data_f64();
            let y = node.data_f64();
            let mut gx = Vec::with_capacity(x.numel());
            for r in 0..rows {
                let xr = &xv[r * cols..(r + 1) * cols];
                let yr = &y[r * cols..(r + 1) * cols];
                let gr = &grad[r * cols..(r + 1) * cols];
                let norm = xr.iter().map(|&v| v * v).sum::<f64>().sqrt().max(1e-30);
                let dot: f64 = yr.iter().zip(gr.iter()).map(|(&a, &b)| a * b).sum();
                gx.extend(
                    gr.iter()
                        .zip(yr.iter())
                        .map(|(&g, &yv)| (g - yv * dot) / norm),
                );
            }
            push(grads, x, &gx);
        }
        Op::BceWithLogits { logits, targets } => {
            let inv = 1.0 / logits.numel() as f64;
            let zv = logits.data_f64();
            let gx: Vec<f64> = zv
                .iter()
                .zip(targets.iter())
                .map(|(&z, &t)| grad[0] * (kernels::sigmoid(z) - t) * inv)
                .collect();
            push(grads, logits, &gx);
        }
    }
}
