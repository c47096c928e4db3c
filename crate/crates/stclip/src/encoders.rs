//! Image and text encoders plus the desk-scale contrastive pretraining that
//! stands in for web-scale pretraining: a ViT-style image tower and a
//! transformer text tower aligned in a joint space by a symmetric
//! cross-entropy over cosine-similarity logits with a learnable temperature.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{self, ImportanceMatrix, PatchEmbedParams};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::store::ParamStore;
use crate::tensor::autograd::GradStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageEncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub joint_dim: usize,
}

impl Default for ImageEncoderConfig {
    fn default() -> Self {
        ImageEncoderConfig {
            image_size: 32,
            patch_size: 8,
            width: 64,
            layers: 4,
            heads: 4,
            joint_dim: 64,
        }
    }
}

impl ImageEncoderConfig {
    pub fn patch_count(&self) -> usize {
        (self.image_size / self.patch_size) * (self.image_size / self.patch_size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub context_len: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub joint_dim: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        TextEncoderConfig {
            context_len: 16,
            width: 64,
            layers: 2,
            heads: 4,
            joint_dim: 64,
        }
    }
}

impl TextEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "text width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.context_len < 3 {
            return Err(Error::Config("context length must fit BOS/EOS".into()));
        }
        Ok(())
    }
}

// ── Word-level vocabulary ───────────────────────────────────────────────────

pub const PAD_TOKEN: &str = "<pad>";
pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";

/// Lowercased word-level vocabulary; splits on anything that is not
/// alphanumeric.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    pub words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

pub fn word_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

impl Vocab {
    /// Build from a corpus; word ids are assigned in sorted order after the
    /// three specials, so the result is independent of corpus order.
    pub fn build<I: IntoIterator<Item = T>, T: AsRef<str>>(corpus: I) -> Vocab {
        let mut set: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();
        for text in corpus {
            set.extend(word_tokens(text.as_ref()));
        }
        let mut words = vec![
            PAD_TOKEN.to_string(),
            BOS_TOKEN.to_string(),
            EOS_TOKEN.to_string(),
        ];
        words.extend(set);
        let mut vocab = Vocab {
            words,
            index: HashMap::new(),
        };
        vocab.rebuild_index();
        vocab
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn bos(&self) -> usize {
        1
    }

    pub fn eos(&self) -> usize {
        2
    }

    /// `[BOS, words..., EOS]`, failing on unknown words or overflow.
    pub fn encode(&self, text: &str, context_len: usize) -> Result<Vec<usize>> {
        let mut ids = vec![self.bos()];
        for word in word_tokens(text) {
            match self.index.get(&word) {
                Some(&id) => ids.push(id),
                None => {
                    return Err(Error::Input(format!(
                        "word '{word}' of '{text}' is not in the vocabulary"
                    )))
                }
            }
        }
        ids.push(self.eos());
        if ids.len() > context_len {
            return Err(Error::Input(format!(
                "'{text}' needs {} tokens, context length is {context_len}",
                ids.len()
            )));
        }
        Ok(ids)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Vocab> {
        let mut vocab: Vocab = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        vocab.rebuild_index();
        Ok(vocab)
    }
}

// ── Parameter layout ────────────────────────────────────────────────────────

/// Register freshly initialized image+text towers (no LoRA; detection
/// training inserts those) plus the contrastive temperature.
pub fn register_encoders<S: Scalar>(
    store: &mut ParamStore<S>,
    stream: &RngStream,
    image_cfg: &ImageEncoderConfig,
    text_cfg: &TextEncoderConfig,
    vocab: &Vocab,
) -> Result<()> {
    image_cfg.validate()?;
    text_cfg.validate()?;
    let d = image_cfg.width;
    let patch_len = image_cfg.patch_size * image_cfg.patch_size * 3;
    let n = image_cfg.patch_count();

    let normal = |store: &mut ParamStore<S>, name: &str, shape: Vec<usize>, std: f64| {
        let mut draws = stream.derive_str(name).draws();
        store.insert(name, Tensor::randn(shape, &mut draws, std)?)
    };

    normal(store, "image.patch_embed.weight", vec![patch_len, d], 0.02)?;
    store.insert("image.patch_embed.bias", Tensor::zeros(vec![d])?)?;
    normal(store, "image.cls_token", vec![1, d], 0.02)?;
    normal(store, "image.pos_embed", vec![n + 1, d], 0.01)?;
    for layer in 0..image_cfg.layers {
        let p = format!("image.layer{layer}");
        nn::register_ln(store, &format!("{p}.ln1"), d)?;
        nn::register_mhsa(store, stream, &format!("{p}.attn"), d, image_cfg.heads, false)?;
        nn::register_ln(store, &format!("{p}.ln2"), d)?;
        nn::register_ffn(store, stream, &format!("{p}.ffn"), d, 4 * d, false)?;
    }
    normal(
        store,
        "image.proj",
        vec![d, image_cfg.joint_dim],
        1.0 / (d as f64).sqrt(),
    )?;

    let dt = text_cfg.width;
    normal(store, "text.token_embed", vec![vocab.len(), dt], 0.02)?;
    normal(store, "text.pos_embed", vec![text_cfg.context_len, dt], 0.01)?;
    for layer in 0..text_cfg.layers {
        let p = format!("text.layer{layer}");
        nn::register_ln(store, &format!("{p}.ln1"), dt)?;
        nn::register_mhsa(store, stream, &format!("{p}.attn"), dt, text_cfg.heads, false)?;
        nn::register_ln(store, &format!("{p}.ln2"), dt)?;
        nn::register_ffn(store, stream, &format!("{p}.ffn"), dt, 4 * dt, false)?;
    }
    normal(
        store,
        "text.proj",
        vec![dt, text_cfg.joint_dim],
        1.0 / (dt as f64).sqrt(),
    )?;

    // CLIP-style learnable temperature, stored as a log-scale.
    store.insert(
        "logit_scale",
        Tensor::from_vec(vec![1], vec![S::from_f64((1.0f64 / 0.07).ln())])?,
    )?;
    Ok(())
}

/// Add per-layer low-rank factors to the image tower's FFNs.
pub fn register_image_lora<S: Scalar>(
    store: &mut ParamStore<S>,
    stream: &RngStream,
    image_cfg: &ImageEncoderConfig,
    rank: usize,
) -> Result<()> {
    let d = image_cfg.width;
    for layer in 0..image_cfg.layers {
        nn::register_lora(store, stream, &format!("image.layer{layer}.ffn"), d, 4 * d, rank)?;
    }
    Ok(())
}

pub fn has_image_lora<S: Scalar>(store: &ParamStore<S>) -> bool {
    store.contains("image.layer0.ffn.lora_a1")
}

/// One pre-LN encoder layer: `x + MHSA(LN1(x))`, then `x + FFN(LN2(x))`,
/// using the LoRA-augmented FFN when factors are present in the store.
/// Returns the layer output and the head-averaged attention map.
pub fn image_layer_forward<S: Scalar>(
    store: &ParamStore<S>,
    cfg: &ImageEncoderConfig,
    layer: usize,
    x: &Tensor<S>,
) -> Result<(Tensor<S>, ImportanceMatrix<S>)> {
    let prefix = format!("image.layer{layer}");
    let ln1 = nn::ln_from_store(store, &format!("{prefix}.ln1"))?;
    let attn = nn::mhsa_from_store(store, &format!("{prefix}.attn"), cfg.heads)?;
    let (attn_out, importance) = nn::mhsa_forward(&ln1.forward(x)?, &attn)?;
    let x = x.add(&attn_out)?;

    let ln2 = nn::ln_from_store(store, &format!("{prefix}.ln2"))?;
    let h = ln2.forward(&x)?;
    let ffn_out = if store.contains(&format!("{prefix}.ffn.lora_a1")) {
        let lora = nn::lora_ffn_from_store(store, &format!("{prefix}.ffn"))?;
        nn::lora_ffn_forward(&h, &lora)?
    } else {
        let ffn = nn::ffn_from_store(store, &format!("{prefix}.ffn"))?;
        nn::ffn_forward(&h, &ffn)?
    };
    Ok((x.add(&ffn_out)?, importance))
}

/// Embed an image into the token sequence `[cls, patches] + positions`.
pub fn image_tokens<S: Scalar>(
    image: &Tensor<S>,
    store: &ParamStore<S>,
    cfg: &ImageEncoderConfig,
) -> Result<Tensor<S>> {
    if image.shape() != [cfg.image_size, cfg.image_size, 3] {
        return Err(Error::Dim(format!(
            "encode_image: image shape {:?} does not match config size {}",
            image.shape(),
            cfg.image_size
        )));
    }
    let proj = PatchEmbedParams {
        weight: store.get("image.patch_embed.weight")?,
        bias: store.get("image.patch_embed.bias")?,
    };
    let patches = nn::patch_embed(image, cfg.patch_size, &proj)?;
    let cls = store.get("image.cls_token")?;
    let x = Tensor::concat_rows(&[cls, patches])?;
    x.add(&store.get("image.pos_embed")?)
}

/// Patch tokens of a raw frame (no cls token, no positions); the temporal
/// stage consumes these.
pub fn frame_patch_tokens<S: Scalar>(
    image: &Tensor<S>,
    store: &ParamStore<S>,
    cfg: &ImageEncoderConfig,
) -> Result<Tensor<S>> {
    if image.shape() != [cfg.image_size, cfg.image_size, 3] {
        return Err(Error::Dim(format!(
            "frame_patch_tokens: image shape {:?} does not match config size {}",
            image.shape(),
            cfg.image_size
        )));
    }
    let proj = PatchEmbedParams {
        weight: store.get("image.patch_embed.weight")?,
        bias: store.get("image.patch_embed.bias")?,
    };
    nn::patch_embed(image, cfg.patch_size, &proj)
}

/// Full image tower. Returns the cls feature of the last layer (width D) and
/// its unit-normalized joint-space projection.
pub fn encode_image<S: Scalar>(
    image: &Tensor<S>,
    store: &ParamStore<S>,
    cfg: &ImageEncoderConfig,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let mut x = image_tokens(image, store, cfg)?;
    for layer in 0..cfg.layers {
        x = image_layer_forward(store, cfg, layer, &x)?.0;
    }
    let cls = x.row_slice(0, 1)?;
    let projected = cls.matmul(&store.get("image.proj")?)?.l2_normalize_rows()?;
    Ok((
        cls.reshape(vec![cfg.width])?,
        projected.reshape(vec![cfg.joint_dim])?,
    ))
}

/// Encode texts to unit-normalized joint-space rows via the EOS position of
/// the last layer.
pub fn encode_text<S: Scalar>(
    texts: &[String],
    store: &ParamStore<S>,
    cfg: &TextEncoderConfig,
    vocab: &Vocab,
) -> Result<Tensor<S>> {
    if texts.is_empty() {
        return Err(Error::Input("encode_text: no texts given".into()));
    }
    let token_embed = store.get("text.token_embed")?;
    let pos_embed = store.get("text.pos_embed")?;
    let mut rows = Vec::with_capacity(texts.len());
    for text in texts {
        let ids = vocab.encode(text, cfg.context_len)?;
        let emb = token_embed.select_rows(&ids)?;
        let pos = pos_embed.row_slice(0, ids.len())?;
        let mut x = emb.add(&pos)?;
        for layer in 0..cfg.layers {
            let prefix = format!("text.layer{layer}");
            let ln1 = nn::ln_from_store(store, &format!("{prefix}.ln1"))?;
            let attn = nn::mhsa_from_store(store, &format!("{prefix}.attn"), cfg.heads)?;
            let (attn_out, _) = nn::mhsa_forward(&ln1.forward(&x)?, &attn)?;
            x = x.add(&attn_out)?;
            let ln2 = nn::ln_from_store(store, &format!("{prefix}.ln2"))?;
            let ffn = nn::ffn_from_store(store, &format!("{prefix}.ffn"))?;
            x = x.add(&nn::ffn_forward(&ln2.forward(&x)?, &ffn)?)?;
        }
        rows.push(x.row_slice(ids.len() - 1, 1)?);
    }
    Tensor::concat_rows(&rows)?
        .matmul(&store.get("text.proj")?)?
        .l2_normalize_rows()
}

/// Label features for a class list: plain `encode_text` of the names, or the
/// caption-template ensemble when `ensemble` is set (synthetic vocabulary).
pub fn class_label_features<S: Scalar>(
    classes: &[String],
    store: &ParamStore<S>,
    cfg: &TextEncoderConfig,
    vocab: &Vocab,
    ensemble: bool,
) -> Result<Tensor<S>> {
    if ensemble {
        // Templates with words outside the corpus vocabulary are dropped;
        // the bare class name is the fallback when none survive.
        let groups: Vec<Vec<String>> = classes
            .iter()
            .map(|c| {
                let usable: Vec<String> = crate::data::synth::caption_templates(c)
                    .into_iter()
                    .filter(|t| vocab.encode(t, cfg.context_len).is_ok())
                    .collect();
                if usable.is_empty() {
                    vec![c.clone()]
                } else {
                    usable
                }
            })
            .collect();
        encode_text_ensemble(&groups, store, cfg, vocab)
    } else {
        encode_text(classes, store, cfg, vocab)
    }
}

/// One feature row per group: the unit-normalized mean of the group members'
/// text features (prompt ensembling).
pub fn encode_text_ensemble<S: Scalar>(
    groups: &[Vec<String>],
    store: &ParamStore<S>,
    cfg: &TextEncoderConfig,
    vocab: &Vocab,
) -> Result<Tensor<S>> {
    let mut rows = Vec::with_capacity(groups.len());
    for group in groups {
        let feats = encode_text(group, store, cfg, vocab)?;
        rows.push(feats.mean_rows()?.as_row()?);
    }
    Tensor::concat_rows(&rows)?.l2_normalize_rows()
}

// ── Contrastive pretraining ─────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 2000,
            batch_size: 16,
            lr: 2e-3,
            seed: 0,
            log_every: 100,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CorpusPair {
    pub image: Image,
    pub caption: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainLogEntry {
    pub step: usize,
    pub loss: f64,
}

/// Symmetric cross-entropy over temperature-scaled cosine similarities for
/// one batch of already-encoded features.
pub fn contrastive_loss<S: Scalar>(
    image_feats: &Tensor<S>,
    text_feats: &Tensor<S>,
    logit_scale: &Tensor<S>,
) -> Result<Tensor<S>> {
    let (b, _) = image_feats.expect_2d("contrastive_loss")?;
    if b < 2 {
        return Err(Error::Config(format!(
            "contrastive loss needs a batch of at least 2, got {b}"
        )));
    }
    let scale = logit_scale.exp();
    let logits = image_feats
        .matmul(&text_feats.transpose()?)?
        .scale_by(&scale)?;
    let diag: Vec<usize> = (0..b).map(|i| i * b + i).collect();
    let diag = std::sync::Arc::new(diag);
    let ce_rows = logits
        .log_softmax_rows()?
        .gather(diag.clone(), vec![b])?
        .mean_all()
        .scale(-1.0);
    let ce_cols = logits
        .transpose()?
        .log_softmax_rows()?
        .gather(diag, vec![b])?
        .mean_all()
        .scale(-1.0);
    Ok(ce_rows.add(&ce_cols)?.scale(0.5))
}

/// Train both towers on image-caption pairs; the returned store has every
/// entry flagged frozen, ready for detection training to unfreeze its own
/// modules. Also returns the corpus vocabulary and the loss curve.
pub fn contrastive_pretrain(
    corpus: &[CorpusPair],
    image_cfg: &ImageEncoderConfig,
    text_cfg: &TextEncoderConfig,
    hyper: &PretrainConfig,
) -> Result<(ParamStore<f32>, Vocab, Vec<PretrainLogEntry>)> {
    if hyper.batch_size < 2 {
        return Err(Error::Config(format!(
            "pretraining batch size must be at least 2, got {}",
            hyper.batch_size
        )));
    }
    if corpus.len() < hyper.batch_size {
        return Err(Error::Config(format!(
            "corpus of {} pairs is smaller than one batch of {}",
            corpus.len(),
            hyper.batch_size
        )));
    }
    let vocab = Vocab::build(corpus.iter().map(|p| p.caption.as_str()));
    let stream = RngStream::new(hyper.seed, 0);
    let mut store: ParamStore<f32> = ParamStore::new();
    register_encoders(&mut store, &stream.derive_str("init"), image_cfg, text_cfg, &vocab)?;

    let images: Vec<Tensor<f32>> = corpus
        .iter()
        .map(|p| p.image.to_tensor())
        .collect::<Result<_>>()?;

    let mut adam = AdamState::new();
    let mut log = Vec::new();
    for step in 0..hyper.steps {
        let mut draws = stream.derive_str("batch").derive(step as u64).draws();
        let batch: Vec<usize> = (0..hyper.batch_size)
            .map(|_| draws.below(corpus.len()))
            .collect();

        let img_rows: Vec<Tensor<f32>> = batch
            .iter()
            .map(|&i| {
                let (_, projected) = encode_image(&images[i], &store, image_cfg)?;
                projected.as_row()
            })
            .collect::<Result<_>>()?;
        let img_feats = Tensor::concat_rows(&img_rows)?;
        let captions: Vec<String> = batch.iter().map(|&i| corpus[i].caption.clone()).collect();
        let txt_feats = encode_text(&captions, &store, text_cfg, &vocab)?;

        let loss = contrastive_loss(&img_feats, &txt_feats, &store.get("logit_scale")?)?;
        loss.validate_finite("pretraining loss")?;
        let grads = loss.backward()?;
        adam.step(&mut store, &grads, hyper.lr);

        if step % hyper.log_every == 0 || step + 1 == hyper.steps {
            log.push(PretrainLogEntry {
                step,
                loss: loss.item() as f64,
            });
        }
    }
    store.apply_freeze(|_| true);
    Ok((store, vocab, log))
}

/// Mean diagonal cosine minus mean off-diagonal cosine over up to
/// `n_sample` corpus pairs; the alignment figure of merit for pretraining.
pub fn alignment_margin(
    corpus: &[CorpusPair],
    store: &ParamStore<f32>,
    image_cfg: &ImageEncoderConfig,
    text_cfg: &TextEncoderConfig,
    vocab: &Vocab,
    n_sample: usize,
) -> Result<f64> {
    let n = corpus.len().min(n_sample);
    if n < 2 {
        return Err(Error::Input("alignment margin needs at least 2 pairs".into()));
    }
    let mut img_rows = Vec::with_capacity(n);
    let mut captions = Vec::with_capacity(n);
    for pair in corpus.iter().take(n) {
        let (_, projected) = encode_image(&pair.image.to_tensor()?, store, image_cfg)?;
        img_rows.push(projected.as_row()?);
        captions.push(pair.caption.clone());
    }
    let img = Tensor::concat_rows(&img_rows)?;
    let txt = encode_text(&captions, store, text_cfg, vocab)?;
    let sims = img.matmul(&txt.transpose()?)?;
    let mut diag = 0.0f64;
    let mut off = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let v = sims.data()[i * n + j].as_f64();
            if i == j {
                diag += v;
            } else {
                off += v;
            }
        }
    }
    Ok(diag / n as f64 - off / (n as f64 * (n as f64 - 1.0)))
}

/// Adam over the unfrozen entries of a store, state keyed by name.
struct AdamState {
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
    t: u64,
}

impl AdamState {
    fn new() -> Self {
        AdamState {
            m: HashMap::new(),
            v: HashMap::new(),
            t: 0,
        }
    }

    fn step(&mut self, store: &mut ParamStore<f32>, grads: &GradStore<f32>, lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let names: Vec<String> = store.names().map(str::to_string).collect();
        for name in names {
            if store.is_frozen(&name).unwrap_or(true) {
                continue;
            }
            let tensor = store.get(&name).expect("name exists");
            let Some(g) = grads.grad_f64(&tensor) else {
                continue;
            };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let bias1 = 1.0 - B1.powi(self.t as i32);
            let bias2 = 1.0 - B2.powi(self.t as i32);
            let updated: Vec<f32> = tensor
                .data()
                .iter()
                .enumerate()
                .map(|(i, &p)| {
                    m[i] = B1 * m[i] + (1.0 - B1) * g[i];
                    v[i] = B2 * v[i] + (1.0 - B2) * g[i] * g[i];
                    let mhat = m[i] / bias1;
                    let vhat = v[i] / bias2;
                    (p as f64 - lr * mhat / (vhat.sqrt() + EPS)) as f32
                })
                .collect();
            store
                .set(&name, Tensor::from_vec(tensor.shape().to_vec(), updated).unwrap())
                .expect("shape preserved");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfgs() -> (ImageEncoderConfig, TextEncoderConfig) {
        (
            ImageEncoderConfig {
                image_size: 16,
                patch_size: 8,
                width: 16,
                layers: 2,
                heads: 2,
                joint_dim: 16,
            },
            TextEncoderConfig {
                context_len: 12,
                width: 16,
                layers: 1,
                heads: 2,
                joint_dim: 16,
            },
        )
    }

    fn tiny_store(seed: u64) -> (ParamStore<f32>, Vocab, ImageEncoderConfig, TextEncoderConfig) {
        let (icfg, tcfg) = tiny_cfgs();
        let vocab = Vocab::build(["a red circle that is move-right", "bounce flash"]);
        let mut store = ParamStore::new();
        register_encoders(&mut store, &RngStream::new(seed, 0), &icfg, &tcfg, &vocab).unwrap();
        (store, vocab, icfg, tcfg)
    }

    fn random_image(seed: u64, size: usize) -> Tensor<f32> {
        let mut d = RngStream::new(seed, 7).draws();
        Tensor::rand_uniform(vec![size, size, 3], &mut d, -1.0, 1.0).unwrap()
    }

    #[test]
    fn projected_feature_has_unit_norm() {
        let (store, _, icfg, _) = tiny_store(1);
        let (_, projected) = encode_image(&random_image(2, 16), &store, &icfg).unwrap();
        let norm: f64 = projected.data().iter().map(|&v| (v as f64) * (v as f64)).sum();
        assert!((norm.sqrt() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn identical_images_give_bitwise_identical_features() {
        let (store, _, icfg, _) = tiny_store(2);
        let img = random_image(3, 16);
        let (a_cls, a_proj) = encode_image(&img, &store, &icfg).unwrap();
        let (b_cls, b_proj) = encode_image(&img, &store, &icfg).unwrap();
        assert!(a_cls.bit_eq(&b_cls));
        assert!(a_proj.bit_eq(&b_proj));
    }

    #[test]
    fn zero_layer_encoder_returns_positioned_cls() {
        let (mut icfg, tcfg) = tiny_cfgs();
        icfg.layers = 0;
        let vocab = Vocab::build(["x"]);
        let mut store = ParamStore::new();
        register_encoders(&mut store, &RngStream::new(4, 0), &icfg, &tcfg, &vocab).unwrap();
        let (cls, _) = encode_image(&random_image(5, 16), &store, &icfg).unwrap();
        let cls_token = store.get("image.cls_token").unwrap();
        let pos = store.get("image.pos_embed").unwrap();
        for j in 0..icfg.width {
            let expect = cls_token.data()[j] + pos.data()[j];
            assert_eq!(cls.data()[j], expect);
        }
    }

    #[test]
    fn shuffled_patch_positions_change_the_feature() {
        // Positions must matter; otherwise the positional encoding is dead.
        let (store, _, icfg, _) = tiny_store(6);
        let img = random_image(7, 16);
        let (_, base) = encode_image(&img, &store, &icfg).unwrap();
        // Swap two 8x8 patches of the image: identical bag of patches,
        // different positions.
        let mut data = img.data().to_vec();
        for y in 0..8 {
            for x in 0..8 {
                for c in 0..3 {
                    let a = (y * 16 + x) * 3 + c;
                    let b = (y * 16 + (x + 8)) * 3 + c;
                    data.swap(a, b);
                }
            }
        }
        let swapped = Tensor::from_vec(vec![16, 16, 3], data).unwrap();
        let (_, other) = encode_image(&swapped, &store, &icfg).unwrap();
        assert!(!base.bit_eq(&other));
    }

    #[test]
    fn text_rows_are_unit_and_deterministic_and_row_independent() {
        let (store, vocab, _, tcfg) = tiny_store(8);
        let names = vec!["move-right".to_string(), "bounce".to_string()];
        let a = encode_text(&names, &store, &tcfg, &vocab).unwrap();
        let b = encode_text(&names, &store, &tcfg, &vocab).unwrap();
        assert!(a.bit_eq(&b));
        for r in 0..2 {
            let norm: f64 = a.data()[r * 16..(r + 1) * 16]
                .iter()
                .map(|&v| (v as f64) * (v as f64))
                .sum();
            assert!((norm.sqrt() - 1.0).abs() < 1e-5);
        }
        // Permuting names permutes rows identically.
        let swapped = vec![names[1].clone(), names[0].clone()];
        let c = encode_text(&swapped, &store, &tcfg, &vocab).unwrap();
        assert!(a.row_slice(0, 1).unwrap().bit_eq(&c.row_slice(1, 1).unwrap()));
        assert!(a.row_slice(1, 1).unwrap().bit_eq(&c.row_slice(0, 1).unwrap()));
    }

    #[test]
    fn unknown_word_is_input_error() {
        let (store, vocab, _, tcfg) = tiny_store(9);
        let err = encode_text(&["warp".to_string()], &store, &tcfg, &vocab).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn over_length_text_is_input_error_naming_the_class() {
        let vocab = Vocab::build(["a b c d e f g h i j k l m n"]);
        let err = vocab.encode("a b c d e f g h i j k l m n", 8).unwrap_err();
        match err {
            Error::Input(msg) => assert!(msg.contains("a b c d")),
            other => panic!("expected input error, got {other:?}"),
        }
    }

    #[test]
    fn batch_of_one_is_rejected() {
        let corpus: Vec<CorpusPair> = (0..4)
            .map(|i| CorpusPair {
                image: Image::new(16, 16),
                caption: format!("shape {i}"),
            })
            .collect();
        let (icfg, tcfg) = tiny_cfgs();
        let hyper = PretrainConfig {
            steps: 1,
            batch_size: 1,
            ..PretrainConfig::default()
        };
        assert!(matches!(
            contrastive_pretrain(&corpus, &icfg, &tcfg, &hyper),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn perfectly_aligned_logits_give_near_zero_loss() {
        // Large positive diagonal, large negative off-diagonal.
        let b = 4;
        let mut eye = Vec::with_capacity(b * b);
        for i in 0..b {
            for j in 0..b {
                eye.push(if i == j { 1.0f32 } else { -1.0 });
            }
        }
        // Identity-like unit features reproduce these cosines directly.
        let img = Tensor::from_vec(vec![b, b], eye.clone()).unwrap().l2_normalize_rows().unwrap();
        let txt = Tensor::eye(b);
        let scale = Tensor::from_vec(vec![1], vec![(100.0f32).ln()]).unwrap();
        let loss = contrastive_loss(&img, &txt, &scale).unwrap();
        assert!(loss.item() < 1e-3, "loss = {}", loss.item());
    }

    #[test]
    fn vocab_roundtrip_preserves_ids() {
        let vocab = Vocab::build(["red circle", "blue square"]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.json");
        vocab.save(&path).unwrap();
        let loaded = Vocab::load(&path).unwrap();
        assert_eq!(vocab.words, loaded.words);
        assert_eq!(
            vocab.encode("red square", 8).unwrap(),
            loaded.encode("red square", 8).unwrap()
        );
    }
}
