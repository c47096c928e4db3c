//! Transformer building blocks: multi-head self-attention with exposed
//! attention maps, cross-attention, FFN, LoRA-augmented FFN, layer norm
//! parameters, and patch embedding.
//!
//! Blocks are pure functions over parameter structs; the structs are thin
//! bundles of tensors that live in a [`ParamStore`](crate::store::ParamStore)
//! under dotted names (`register_*` creates them, `*_from_store` fetches
//! them).

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::store::ParamStore;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// Head-averaged attention map; every row is a probability vector.
pub struct ImportanceMatrix<S: Scalar> {
    pub values: Tensor<S>,
}

impl<S: Scalar> ImportanceMatrix<S> {
    pub fn token_count(&self) -> usize {
        self.values.shape()[0]
    }

    /// One row as f64 scores.
    pub fn row(&self, r: usize) -> Vec<f64> {
        let c = self.values.cols();
        self.values.data()[r * c..(r + 1) * c]
            .iter()
            .map(|v| v.as_f64())
            .collect()
    }
}

pub struct MhsaParams<S: Scalar> {
    pub num_heads: usize,
    pub w_q: Tensor<S>,
    pub b_q: Tensor<S>,
    pub w_k: Tensor<S>,
    pub b_k: Tensor<S>,
    pub w_v: Tensor<S>,
    pub b_v: Tensor<S>,
    pub w_o: Tensor<S>,
    pub b_o: Tensor<S>,
}

impl<S: Scalar> MhsaParams<S> {
    pub fn dim(&self) -> usize {
        self.w_q.shape()[0]
    }

    fn head_dim(&self) -> Result<usize> {
        let d = self.dim();
        if self.num_heads == 0 || d % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "attention width {d} is not divisible by {} heads",
                self.num_heads
            )));
        }
        Ok(d / self.num_heads)
    }
}

pub struct LnParams<S: Scalar> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
}

impl<S: Scalar> LnParams<S> {
    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        x.layer_norm(&self.gamma, &self.beta, LN_EPS)
    }
}

pub struct FfnParams<S: Scalar> {
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
}

pub struct LoraFactors<S: Scalar> {
    pub a: Tensor<S>,
    pub b: Tensor<S>,
}

pub struct LoraFfnParams<S: Scalar> {
    pub ffn: FfnParams<S>,
    pub lora1: LoraFactors<S>,
    pub lora2: LoraFactors<S>,
    pub rank: usize,
    pub alpha: f64,
}

pub struct PatchEmbedParams<S: Scalar> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

/// Multi-head self-attention over a `[C×D]` sequence. Returns the projected
/// output (no residual) together with the head-averaged attention map.
pub fn mhsa_forward<S: Scalar>(
    x: &Tensor<S>,
    p: &MhsaParams<S>,
) -> Result<(Tensor<S>, ImportanceMatrix<S>)> {
    x.validate_finite("mhsa_forward input")?;
    let (out, maps) = attention(x, x, p)?;
    let mut avg = maps[0].scale(1.0 / p.num_heads as f64);
    for m in &maps[1..] {
        avg = avg.add(&m.scale(1.0 / p.num_heads as f64))?;
    }
    Ok((out, ImportanceMatrix { values: avg }))
}

/// Cross-attention: queries from `q_in`, keys/values from `kv_in`.
pub fn cross_attention<S: Scalar>(
    q_in: &Tensor<S>,
    kv_in: &Tensor<S>,
    p: &MhsaParams<S>,
) -> Result<Tensor<S>> {
    let (out, _) = attention(q_in, kv_in, p)?;
    Ok(out)
}

fn attention<S: Scalar>(
    q_in: &Tensor<S>,
    kv_in: &Tensor<S>,
    p: &MhsaParams<S>,
) -> Result<(Tensor<S>, Vec<Tensor<S>>)> {
    let head_dim = p.head_dim()?;
    let q = q_in.matmul(&p.w_q)?.add_row_broadcast(&p.b_q)?;
    let k = kv_in.matmul(&p.w_k)?.add_row_broadcast(&p.b_k)?;
    let v = kv_in.matmul(&p.w_v)?.add_row_broadcast(&p.b_v)?;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let mut head_outs = Vec::with_capacity(p.num_heads);
    let mut head_maps = Vec::with_capacity(p.num_heads);
    for h in 0..p.num_heads {
        let qh = q.col_slice(h * head_dim, head_dim)?;
        let kh = k.col_slice(h * head_dim, head_dim)?;
        let vh = v.col_slice(h * head_dim, head_dim)?;
        let logits = qh.matmul(&kh.transpose()?)?.scale(scale);
        let attn = logits.softmax_rows()?;
        head_outs.push(attn.matmul(&vh)?);
        head_maps.push(attn);
    }
    let merged = Tensor::concat_cols(&head_outs)?;
    let out = merged.matmul(&p.w_o)?.add_row_broadcast(&p.b_o)?;
    Ok((out, head_maps))
}

/// Two-layer FFN with GELU; no residual.
pub fn ffn_forward<S: Scalar>(x: &Tensor<S>, p: &FfnParams<S>) -> Result<Tensor<S>> {
    let h = x.matmul(&p.w1)?.add_row_broadcast(&p.b1)?.gelu();
    h.matmul(&p.w2)?.add_row_broadcast(&p.b2)
}

/// FFN whose two linear layers carry additive low-rank deltas:
/// `(W + (alpha/r)·A·B)·x + bias`, computed as `W·x + (alpha/r)·(x·A)·B`.
pub fn lora_ffn_forward<S: Scalar>(x: &Tensor<S>, p: &LoraFfnParams<S>) -> Result<Tensor<S>> {
    if p.rank < 1 {
        return Err(Error::Config("LoRA rank must be at least 1".into()));
    }
    let scaling = p.alpha / p.rank as f64;
    let h_base = x.matmul(&p.ffn.w1)?.add_row_broadcast(&p.ffn.b1)?;
    let h_delta = x.matmul(&p.lora1.a)?.matmul(&p.lora1.b)?.scale(scaling);
    let h = h_base.add(&h_delta)?.gelu();
    let y_base = h.matmul(&p.ffn.w2)?.add_row_broadcast(&p.ffn.b2)?;
    let y_delta = h.matmul(&p.lora2.a)?.matmul(&p.lora2.b)?.scale(scaling);
    y_base.add(&y_delta)
}

/// Split an `[H×W×3]` image into `P×P` patches (row-major over the patch
/// grid) and map each flattened patch through a shared linear projection.
/// Class-token concatenation and positional encoding are the caller's
/// business.
pub fn patch_embed<S: Scalar>(
    image: &Tensor<S>,
    patch_size: usize,
    proj: &PatchEmbedParams<S>,
) -> Result<Tensor<S>> {
    if image.ndim() != 3 || image.shape()[2] != 3 {
        return Err(Error::Dim(format!(
            "patch_embed expects an [H, W, 3] image, got {:?}",
            image.shape()
        )));
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::Dim(format!(
            "patch_embed: image {h}x{w} not divisible by patch size {patch_size}"
        )));
    }
    let gh = h / patch_size;
    let gw = w / patch_size;
    let patch_len = patch_size * patch_size * 3;
    let mut indices = Vec::with_capacity(gh * gw * patch_len);
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..patch_size {
                for px in 0..patch_size {
                    let y = gy * patch_size + py;
                    let x = gx * patch_size + px;
                    let base = (y * w + x) * 3;
                    indices.extend([base, base + 1, base + 2]);
                }
            }
        }
    }
    let patches = image.gather(std::sync::Arc::new(indices), vec![gh * gw, patch_len])?;
    patches.matmul(&proj.weight)?.add_row_broadcast(&proj.bias)
}

// ── ParamStore registration and retrieval ──────────────────────────────────

fn init_normal<S: Scalar>(
    store: &mut ParamStore<S>,
    stream: &RngStream,
    name: &str,
    shape: Vec<usize>,
    std: f64,
) -> Result<()> {
    let mut draws = stream.derive_str(name).draws();
    store.insert(name, Tensor::randn(shape, &mut draws, std)?)
}

fn init_zeros<S: Scalar>(store: &mut ParamStore<S>, name: &str, shape: Vec<usize>) -> Result<()> {
    store.insert(name, Tensor::zeros(shape)?)
}

pub fn register_mhsa<S: Scalar>(
    store: &mut ParamStore<S>,
    stream: &RngStream,
    prefix: &str,
    dim: usize,
    num_heads: usize,
    zero_out_proj: bool,
) -> Result<()> {
    if num_heads == 0 || dim % num_heads != 0 {
        return Err(Error::Config(format!(
            "attention width {dim} is not divisible by {num_heads} heads"
        )));
    }
    let std = 1.0 / (dim as f64).sqrt();
    for part in ["w_q", "w_k", "w_v"] {
        init_normal(store, stream, &format!("{prefix}.{part}"), vec![dim, dim], std)?;
    }
    if zero_out_proj {
        init_zeros(store, &format!("{prefix}.w_o"), vec![dim, dim])?;
    } else {
        init_normal(store, stream, &format!("{prefix}.w_o"), vec![dim, dim], std)?;
    }
    for part in ["b_q", "b_k", "b_v", "b_o"] {
        init_zeros(store, &format!("{prefix}.{part}"), vec![dim])?;
    }
    Ok(())
}

pub fn mhsa_from_store<S: Scalar>(
    store: &ParamStore<S>,
    prefix: &str,
    num_heads: usize,
) -> Result<MhsaParams<S>> {
    Ok(MhsaParams {
        num_heads,
        w_q: store.get(&format!("{prefix}.w_q"))?,
        b_q: store.get(&format!("{prefix}.b_q"))?,
        w_k: store.get(&format!("{prefix}.w_k"))?,
        b_k: store.get(&format!("{prefix}.b_k"))?,
        w_v: store.get(&format!("{prefix}.w_v"))?,
        b_v: store.get(&format!("{prefix}.b_v"))?,
        w_o: store.get(&format!("{prefix}.w_o"))?,
        b_o: store.get(&format!("{prefix}.b_o"))?,
    })
}

pub fn register_ln<S: Scalar>(store: &mut ParamStore<S>, prefix: &str, dim: usize) -> Result<()> {
    store.insert(&format!("{prefix}.gamma"), Tensor::full(vec![dim], S::one())?)?;
    init_zeros(store, &format!("{prefix}.beta"), vec![dim])
}

pub fn ln_from_store<S: Scalar>(store: &ParamStore<S>, prefix: &str) -> Result<LnParams<S>> {
    Ok(LnParams {
        gamma: store.get(&format!("{prefix}.gamma"))?,
        beta: store.get(&format!("{prefix}.beta"))?,
    })
}

/// `zero_second_layer` gives an FFN whose output is exactly zero at init
/// (used by additive adapters).
pub fn register_ffn<S: Scalar>(
    store: &mut ParamStore<S>,
    stream: &RngStream,
    prefix: &str,
    dim: usize,
    hidden: usize,
    zero_second_layer: bool,
) -> Result<()> {
    init_normal(
        store,
        stream,
        &format!("{prefix}.w1"),
        vec![dim, hidden],
        1.0 / (dim as f64).sqrt(),
    )?;
    init_zeros(store, &format!("{prefix}.b1"), vec![hidden])?;
    if zero_second_layer {
        init_zeros(store, &format!("{prefix}.w2"), vec![hidden, dim])?;
    } else {
        init_normal(
            store,
            stream,
            &format!("{prefix}.w2"),
            vec![hidden, dim],
            1.0 / (hidden as f64).sqrt(),
        )?;
    }
    init_zeros(store, &format!("{prefix}.b2"), vec![dim])
}

pub fn ffn_from_store<S: Scalar>(store: &ParamStore<S>, prefix: &str) -> Result<FfnParams<S>> {
    Ok(FfnParams {
        w1: store.get(&format!("{prefix}.w1"))?,
        b1: store.get(&format!("{prefix}.b1"))?,
        w2: store.get(&format!("{prefix}.w2"))?,
        b2: store.get(&format!("{prefix}.b2"))?,
    })
}

/// Add low-rank factors (`A` random, `B` zero) beside an existing FFN.
pub fn register_lora<S: Scalar>(
    store: &mut ParamStore<S>,
    stream: &RngStream,
    prefix: &str,
    dim: usize,
    hidden: usize,
    rank: usize,
) -> Result<()> {
    if rank < 1 {
        return Err(Error::Config("LoRA rank must be at least 1".into()));
    }
    init_normal(store, stream, &format!("{prefix}.lora_a1"), vec![dim, rank], 0.02)?;
    init_zeros(store, &format!("{prefix}.lora_b1"), vec![rank, hidden])?;
    init_normal(store, stream, &format!("{prefix}.lora_a2"), vec![hidden, rank], 0.02)?;
    init_zeros(store, &format!("{prefix}.lora_b2"), vec![rank, dim])
}

/// Rank is read off the factor shapes; alpha follows the `alpha = rank`
/// convention, i.e. the delta scale is independent of the rank choice.
pub fn lora_ffn_from_store<S: Scalar>(
    store: &ParamStore<S>,
    prefix: &str,
) -> Result<LoraFfnParams<S>> {
    let a1 = store.get(&format!("{prefix}.lora_a1"))?;
    let rank = a1.shape()[1];
    Ok(LoraFfnParams {
        ffn: ffn_from_store(store, prefix)?,
        lora1: LoraFactors {
            a: a1,
            b: store.get(&format!("{prefix}.lora_b1"))?,
        },
        lora2: LoraFactors {
            a: store.get(&format!("{prefix}.lora_a2"))?,
            b: store.get(&format!("{prefix}.lora_b2"))?,
        },
        rank,
        alpha: rank as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    type T = Tensor<f32>;

    fn mhsa_params(dim: usize, heads: usize, seed: u64) -> MhsaParams<f32> {
        let mut store = ParamStore::new();
        register_mhsa(&mut store, &RngStream::new(seed, 0), "attn", dim, heads, false).unwrap();
        mhsa_from_store(&store, "attn", heads).unwrap()
    }

    #[test]
    fn single_token_attention_is_value_projection() {
        let p = mhsa_params(8, 2, 1);
        let x = T::from_vec(vec![1, 8], (0..8).map(|i| i as f32 * 0.1).collect()).unwrap();
        let (y, m) = mhsa_forward(&x, &p).unwrap();
        assert_eq!(m.values.shape(), &[1, 1]);
        assert!((m.values.data()[0] - 1.0).abs() < 1e-6);
        let v = x.matmul(&p.w_v).unwrap().add_row_broadcast(&p.b_v).unwrap();
        let expect = v.matmul(&p.w_o).unwrap().add_row_broadcast(&p.b_o).unwrap();
        for (a, b) in y.data().iter().zip(expect.data().iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_query_key_gives_uniform_importance() {
        let mut p = mhsa_params(8, 2, 2);
        p.w_q = T::zeros(vec![8, 8]).unwrap();
        p.w_k = T::zeros(vec![8, 8]).unwrap();
        let mut d = RngStream::new(3, 0).draws();
        let x = T::randn(vec![5, 8], &mut d, 1.0).unwrap();
        let (_, m) = mhsa_forward(&x, &p).unwrap();
        for v in m.values.data() {
            assert!((v - 0.2).abs() < 1e-6, "expected uniform 1/5, got {v}");
        }
    }

    #[test]
    fn importance_rows_sum_to_one() {
        let p = mhsa_params(16, 4, 4);
        let mut d = RngStream::new(5, 0).draws();
        let x = T::randn(vec![6, 16], &mut d, 2.0).unwrap();
        let (_, m) = mhsa_forward(&x, &p).unwrap();
        for r in 0..6 {
            let sum: f64 = m.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn indivisible_heads_is_config_error() {
        let p = mhsa_params(8, 2, 6);
        let p_bad = MhsaParams { num_heads: 3, ..p };
        let x = T::zeros(vec![2, 8]).unwrap();
        assert!(matches!(mhsa_forward(&x, &p_bad), Err(Error::Config(_))));
    }

    #[test]
    fn cross_attention_single_key_broadcasts_value() {
        let p = mhsa_params(8, 2, 7);
        let mut d = RngStream::new(8, 0).draws();
        let q_in = T::randn(vec![4, 8], &mut d, 1.0).unwrap();
        let kv = T::randn(vec![1, 8], &mut d, 1.0).unwrap();
        let out = cross_attention(&q_in, &kv, &p).unwrap();
        let v = kv.matmul(&p.w_v).unwrap().add_row_broadcast(&p.b_v).unwrap();
        let expect = v.matmul(&p.w_o).unwrap().add_row_broadcast(&p.b_o).unwrap();
        for r in 0..4 {
            for j in 0..8 {
                assert!((out.data()[r * 8 + j] - expect.data()[j]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn cross_attention_zero_out_proj_gives_zeros() {
        let mut p = mhsa_params(8, 2, 9);
        p.w_o = T::zeros(vec![8, 8]).unwrap();
        p.b_o = T::zeros(vec![8]).unwrap();
        let mut d = RngStream::new(10, 0).draws();
        let q_in = T::randn(vec![3, 8], &mut d, 1.0).unwrap();
        let kv = T::randn(vec![2, 8], &mut d, 1.0).unwrap();
        let out = cross_attention(&q_in, &kv, &p).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ffn_zero_second_layer_outputs_zero() {
        let mut store = ParamStore::new();
        register_ffn(&mut store, &RngStream::new(1, 0), "ffn", 8, 32, true).unwrap();
        let p = ffn_from_store(&store, "ffn").unwrap();
        let mut d = RngStream::new(2, 0).draws();
        let x = T::randn(vec![3, 8], &mut d, 1.0).unwrap();
        let y = ffn_forward(&x, &p).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ffn_fixes_origin() {
        let mut store = ParamStore::new();
        register_ffn(&mut store, &RngStream::new(3, 0), "ffn", 8, 32, false).unwrap();
        let p = ffn_from_store(&store, "ffn").unwrap();
        let x = T::zeros(vec![2, 8]).unwrap();
        let y = ffn_forward(&x, &p).unwrap();
        // GELU(0) = 0 and biases are zero at init.
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lora_zero_b_equals_plain_ffn_bitwise() {
        let stream = RngStream::new(5, 0);
        let mut store = ParamStore::new();
        register_ffn(&mut store, &stream, "ffn", 8, 32, false).unwrap();
        register_lora(&mut store, &stream, "ffn", 8, 32, 8).unwrap();
        let plain = ffn_from_store(&store, "ffn").unwrap();
        let lora = lora_ffn_from_store(&store, "ffn").unwrap();
        let mut d = RngStream::new(6, 0).draws();
        let x = T::randn(vec![4, 8], &mut d, 1.0).unwrap();
        let y_plain = ffn_forward(&x, &plain).unwrap();
        let y_lora = lora_ffn_forward(&x, &lora).unwrap();
        assert!(y_plain.bit_eq(&y_lora));
    }

    #[test]
    fn lora_rank_zero_is_config_error() {
        let stream = RngStream::new(5, 0);
        let mut store = ParamStore::<f32>::new();
        register_ffn(&mut store, &stream, "ffn", 8, 32, false).unwrap();
        assert!(matches!(
            register_lora(&mut store, &stream, "ffn", 8, 32, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn patch_embed_token_count() {
        let mut d = RngStream::new(1, 0).draws();
        let proj = PatchEmbedParams {
            weight: T::randn(vec![16 * 16 * 3, 8], &mut d, 0.02).unwrap(),
            bias: T::zeros(vec![8]).unwrap(),
        };
        let image = T::zeros(vec![32, 32, 3]).unwrap();
        let tokens = patch_embed(&image, 16, &proj).unwrap();
        assert_eq!(tokens.shape(), &[4, 8]);
    }

    #[test]
    fn patch_embed_zero_image_zero_bias_gives_zero_tokens() {
        let mut d = RngStream::new(2, 0).draws();
        let proj = PatchEmbedParams {
            weight: T::randn(vec![8 * 8 * 3, 4], &mut d, 0.02).unwrap(),
            bias: T::zeros(vec![4]).unwrap(),
        };
        let image = T::zeros(vec![16, 16, 3]).unwrap();
        let tokens = patch_embed(&image, 8, &proj).unwrap();
        assert!(tokens.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patch_embed_indivisible_is_dimension_error() {
        let mut d = RngStream::new(2, 0).draws();
        let proj = PatchEmbedParams {
            weight: T::randn(vec![75, 4], &mut d, 0.02).unwrap(),
            bias: T::zeros(vec![4]).unwrap(),
        };
        let image = T::zeros(vec![15, 15, 3]).unwrap();
        assert!(matches!(patch_embed(&image, 8, &proj), Err(Error::Dim(_))));
    }

    #[test]
    fn basis_patch_selects_weight_row() {
        let mut d = RngStream::new(9, 0).draws();
        let proj = PatchEmbedParams {
            weight: T::randn(vec![4 * 4 * 3, 6], &mut d, 1.0).unwrap(),
            bias: T::zeros(vec![6]).unwrap(),
        };
        let mut img = vec![0.0f32; 4 * 4 * 3];
        let flat_idx = (4 + 2) * 3 + 1; // y=1, x=2, channel=1
        img[flat_idx] = 1.0;
        let image = T::from_vec(vec![4, 4, 3], img).unwrap();
        let tokens = patch_embed(&image, 4, &proj).unwrap();
        for j in 0..6 {
            let expect = proj.weight.data()[flat_idx * 6 + j];
            assert!((tokens.data()[j] - expect).abs() < 1e-6);
        }
    }
}
