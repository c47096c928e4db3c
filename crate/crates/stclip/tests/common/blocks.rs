//! `ScalarLoss` probes for every trainable block: each loss is a random
//! linear functional of the block output, evaluable at any precision, so the
//! finite-difference oracle can re-run it at f64.

#![allow(dead_code)]

use stclip::error::Result;
use stclip::gradcheck::ScalarLoss;
use stclip::model;
use stclip::nn;
use stclip::scalar::Scalar;
use stclip::store::ParamStore;
use stclip::tensor::Tensor;
use stclip::model::ClassifyMode;
use stclip::train::{detection_loss, LossTargets};
use stclip::RngStream;

pub fn tensor_from<S: Scalar>(shape: Vec<usize>, data: &[f64]) -> Tensor<S> {
    Tensor::from_vec(shape, data.iter().map(|&v| S::from_f64(v)).collect()).unwrap()
}

pub fn random_data(shape: &[usize], stream: &RngStream, std: f64) -> Vec<f64> {
    let mut draws = stream.draws();
    (0..shape.iter().product::<usize>())
        .map(|_| draws.normal(0.0, std))
        .collect()
}

fn probe_sum<S: Scalar>(out: &Tensor<S>, probe: &[f64]) -> Result<Tensor<S>> {
    let p = tensor_from::<S>(out.shape().to_vec(), probe);
    Ok(out.mul(&p)?.sum_all())
}

/// Which block (or primitive) the loss exercises. Parameters live in the
/// store under the prefixes used by the library's `register_*` helpers.
pub enum BlockLoss {
    /// MHSA under "attn.*"; probes both the output and the importance map.
    Mhsa {
        heads: usize,
        input: (Vec<usize>, Vec<f64>),
        probe: Vec<f64>,
    },
    /// Cross-attention under "attn.*".
    Cross {
        heads: usize,
        q: (Vec<usize>, Vec<f64>),
        kv: (Vec<usize>, Vec<f64>),
        probe: Vec<f64>,
    },
    /// Plain FFN under "ffn.*".
    Ffn {
        input: (Vec<usize>, Vec<f64>),
        probe: Vec<f64>,
    },
    /// LoRA FFN under "ffn.*" (factors included).
    LoraFfn {
        input: (Vec<usize>, Vec<f64>),
        probe: Vec<f64>,
    },
    /// LayerNorm under "ln.*".
    LayerNorm {
        input: (Vec<usize>, Vec<f64>),
        probe: Vec<f64>,
    },
    /// Person adapter under "adapter.*".
    Adapter {
        input: (Vec<usize>, Vec<f64>),
        probe: Vec<f64>,
    },
    /// Temporal module under "temporal.*".
    Temporal {
        heads: usize,
        frames: Vec<(Vec<usize>, Vec<f64>)>,
        probe: Vec<f64>,
    },
    /// Prompting layer 0 under "prompt.layer0.*" (rho included).
    Prompt {
        heads: usize,
        f_t: (Vec<usize>, Vec<f64>),
        f_i: (Vec<usize>, Vec<f64>),
        probe: Vec<f64>,
    },
    /// Cross-entropy detection loss on logits = input · W ("w" trainable).
    LossSingle {
        input: (Vec<usize>, Vec<f64>),
        targets: Vec<usize>,
    },
    /// BCE detection loss on logits = input · W ("w" trainable).
    LossMulti {
        input: (Vec<usize>, Vec<f64>),
        targets: Vec<Vec<usize>>,
    },
    /// Primitive: probe · (a·b) with both operands trainable ("a", "b").
    Matmul,
    /// Primitive: probe · softmax_rows(x), "x" trainable.
    Softmax { probe: Vec<f64> },
    /// Primitive: probe · (a ⊙ b + a + b).
    ElementwiseAddMul { probe: Vec<f64> },
    /// Primitive: probe · mean_rows(x) + mean_all(x).
    MeanPool { probe: Vec<f64> },
    /// Primitive: concat rows of a and b, slice an interior window, gather.
    ConcatSlice { probe: Vec<f64> },
}

impl ScalarLoss for BlockLoss {
    fn loss<S: Scalar>(&self, params: &ParamStore<S>) -> Result<Tensor<S>> {
        match self {
            BlockLoss::Mhsa { heads, input, probe } => {
                let x = tensor_from::<S>(input.0.clone(), &input.1);
                let p = nn::mhsa_from_store(params, "attn", *heads)?;
                let (y, m) = nn::mhsa_forward(&x, &p)?;
                let y_term = probe_sum(&y, &probe[..y.numel()])?;
                // The importance map is on the differentiable path too.
                let m_term = m.values.sum_all().scale(0.25);
                y_term.add(&m_term)
            }
            BlockLoss::Cross { heads, q, kv, probe } => {
                let qt = tensor_from::<S>(q.0.clone(), &q.1);
                let kvt = tensor_from::<S>(kv.0.clone(), &kv.1);
                let p = nn::mhsa_from_store(params, "attn", *heads)?;
                probe_sum(&nn::cross_attention(&qt, &kvt, &p)?, probe)
            }
            BlockLoss::Ffn { input, probe } => {
                let x = tensor_from::<S>(input.0.clone(), &input.1);
                let p = nn::ffn_from_store(params, "ffn")?;
                probe_sum(&nn::ffn_forward(&x, &p)?, probe)
            }
            BlockLoss::LoraFfn { input, probe } => {
                let x = tensor_from::<S>(input.0.clone(), &input.1);
                let p = nn::lora_ffn_from_store(params, "ffn")?;
                probe_sum(&nn::lora_ffn_forward(&x, &p)?, probe)
            }
            BlockLoss::LayerNorm { input, probe } => {
                let x = tensor_from::<S>(input.0.clone(), &input.1);
                let p = nn::ln_from_store(params, "ln")?;
                probe_sum(&p.forward(&x)?, probe)
            }
            BlockLoss::Adapter { input, probe } => {
                let x = tensor_from::<S>(input.0.clone(), &input.1);
                let out = model::person_adapter(&x, params)?;
                probe_sum(&out.tokens, probe)
            }
            BlockLoss::Temporal { heads, frames, probe } => {
                let fs: Vec<Tensor<S>> = frames
                    .iter()
                    .map(|(shape, data)| tensor_from::<S>(shape.clone(), data))
                    .collect();
                let ctx = model::temporal_model(&fs, params, *heads)?;
                probe_sum(&ctx.tokens, probe)
            }
            BlockLoss::Prompt { heads, f_t, f_i, probe } => {
                let ft = tensor_from::<S>(f_t.0.clone(), &f_t.1);
                let fi = tensor_from::<S>(f_i.0.clone(), &f_i.1);
                let p = model::prompt_layer_from_store(params, 0, *heads)?;
                probe_sum(&model::context_prompt_layer(&ft, &fi, &p)?, probe)
            }
            BlockLoss::LossSingle { input, targets } => {
                let x = tensor_from::<S>(input.0.clone(), &input.1);
                let logits = x.matmul(&params.get("w")?)?;
                detection_loss(
                    &logits,
                    &LossTargets::Single(targets.clone()),
                    ClassifyMode::Single,
                )
            }
            BlockLoss::LossMulti { input, targets } => {
                let x = tensor_from::<S>(input.0.clone(), &input.1);
                let logits = x.matmul(&params.get("w")?)?;
                detection_loss(
                    &logits,
                    &LossTargets::Multi(targets.clone()),
                    ClassifyMode::Multi,
                )
            }
            BlockLoss::Matmul => {
                let a = params.get("a")?;
                let b = params.get("b")?;
                Ok(a.matmul(&b)?.sum_all())
            }
            BlockLoss::Softmax { probe } => {
                let x = params.get("x")?;
                probe_sum(&x.softmax_rows()?, probe)
            }
            BlockLoss::ElementwiseAddMul { probe } => {
                let a = params.get("a")?;
                let b = params.get("b")?;
                probe_sum(&a.mul(&b)?.add(&a.add(&b)?)?, probe)
            }
            BlockLoss::MeanPool { probe } => {
                let x = params.get("x")?;
                let pooled = x.mean_rows()?;
                probe_sum(&pooled, probe)?.add(&x.mean_all())
            }
            BlockLoss::ConcatSlice { probe } => {
                let a = params.get("a")?;
                let b = params.get("b")?;
                let joined = Tensor::concat_rows(&[a.clone(), b.clone()])?;
                let window = joined.row_slice(1, joined.rows() - 2)?;
                let cols = window.col_slice(1, window.cols() - 1)?;
                probe_sum(&cols, probe)
            }
        }
    }
}
