//! Finite-difference verification of reverse-mode gradients.
//!
//! The loss is written once over the generic scalar: reverse mode runs at the
//! f32 storage precision while the central differences are evaluated on an
//! f64 instantiation of the same computation, with the step applied in f64.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::store::ParamStore;
use crate::tensor::Tensor;

/// A deterministic scalar-valued map over a parameter store, evaluable at any
/// storage precision.
pub trait ScalarLoss {
    fn loss<S: Scalar>(&self, params: &ParamStore<S>) -> Result<Tensor<S>>;
}

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    /// max_i |analytic_i - numeric_i| / max(‖analytic‖∞, ‖numeric‖∞, 1e-3)
    pub rel_err: f64,
    pub abs_err: f64,
    pub grad_inf_norm: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    /// Frozen parameters, excluded from the comparison.
    pub skipped: Vec<String>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_err).fold(0.0, f64::max)
    }

    pub fn entry(&self, name: &str) -> Option<&GradCheckEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

/// Compare reverse-mode gradients against central finite differences for every
/// trainable parameter in the store.
pub fn grad_check<F: ScalarLoss>(
    f: &F,
    params: &ParamStore<f32>,
    step: f64,
) -> Result<GradCheckReport> {
    if step <= 0.0 {
        return Err(Error::Config(format!("grad_check step must be > 0, got {step}")));
    }

    let loss = f.loss::<f32>(params)?;
    if loss.numel() != 1 {
        return Err(Error::Dim(format!(
            "grad_check expects a scalar loss, got {} elements",
            loss.numel()
        )));
    }
    if !loss.is_finite() {
        return Err(Error::Numeric("grad_check: loss is not finite".into()));
    }
    let grads = loss.backward()?;

    let mut params64 = params.cast::<f64>();
    let mut report = GradCheckReport::default();

    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        if params.is_frozen(&name)? {
            report.skipped.push(name);
            continue;
        }
        let tensor32 = params.get(&name)?;
        let shape = tensor32.shape().to_vec();
        let analytic: Vec<f64> = match grads.grad_f64(&tensor32) {
            Some(g) => g.to_vec(),
            None => vec![0.0; tensor32.numel()],
        };

        let base = params64.get(&name)?.data().to_vec();
        let mut numeric = Vec::with_capacity(base.len());
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += step;
            params64.set(&name, Tensor::from_vec(shape.clone(), plus)?)?;
            let f_plus = f.loss::<f64>(&params64)?.item();

            let mut minus = base.clone();
            minus[i] -= step;
            params64.set(&name, Tensor::from_vec(shape.clone(), minus)?)?;
            let f_minus = f.loss::<f64>(&params64)?.item();

            if !f_plus.is_finite() || !f_minus.is_finite() {
                return Err(Error::Numeric(format!(
                    "grad_check: non-finite loss while perturbing '{name}'"
                )));
            }
            numeric.push((f_plus - f_minus) / (2.0 * step));
        }
        params64.set(&name, Tensor::from_vec(shape, base)?)?;

        let a_norm = analytic.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let n_norm = numeric.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let abs_err = analytic
            .iter()
            .zip(numeric.iter())
            .map(|(&a, &n)| (a - n).abs())
            .fold(0.0, f64::max);
        let rel_err = abs_err / a_norm.max(n_norm).max(1e-3);
        report.entries.push(GradCheckEntry {
            name,
            rel_err,
            abs_err,
            grad_inf_norm: a_norm,
        });
    }
    Ok(report)
}
