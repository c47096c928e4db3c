//! The mechanism stack: temporal modeling over frame tokens, person feature
//! adaptation, joint person-context interaction through the frozen encoder
//! layers, interest-token spotting from head-averaged attention, per-layer
//! context prompting of label features, and cosine-similarity classification.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::data::ClipSample;
use crate::encoders::{self, ImageEncoderConfig};
use crate::error::{Error, Result};
use crate::image::crop_person;
use crate::nn::{self, ImportanceMatrix};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::store::ParamStore;
use crate::tensor::Tensor;

/// How label features are shared across the persons of a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptMode {
    /// All context tokens prompt one label set shared by every person.
    Shared,
    /// Each person's interest tokens prompt a personal label set.
    PerPerson,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifyMode {
    Single,
    Multi,
}

/// Ablation switches for the trainable additions.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ModelToggles {
    /// Person adapter on person features (off: raw encoder features).
    pub adapter: bool,
    /// Temporal MHSA (off: plain average pooling over frames).
    pub temporal: bool,
    /// Prompting after every encoder layer (off: last layer only).
    pub prompting_every_layer: bool,
    /// Interest-token spotting, i.e. per-person prompting (off: shared).
    pub its: bool,
}

impl Default for ModelToggles {
    fn default() -> Self {
        ModelToggles {
            adapter: true,
            temporal: true,
            prompting_every_layer: true,
            its: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Total frames per clip (the clip is centered on the keyframe).
    pub t_frames: usize,
    pub stride: usize,
    /// Interest tokens per person; clamped to the context size when larger.
    pub k_interest: usize,
    /// Softmax temperature for cosine scores.
    pub temperature: f64,
    pub prompt_heads: usize,
    /// Person crops are expanded by this fraction of the box size on every
    /// side before encoding, so nearby context stays visible in the crop.
    pub crop_margin: f64,
    pub toggles: ModelToggles,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            t_frames: 4,
            stride: 1,
            k_interest: 100,
            temperature: 0.01,
            prompt_heads: 4,
            crop_margin: 0.5,
            toggles: ModelToggles::default(),
        }
    }
}

impl ModelConfig {
    pub fn prompt_mode(&self) -> PromptMode {
        if self.toggles.its {
            PromptMode::PerPerson
        } else {
            PromptMode::Shared
        }
    }
}

/// Patch-position tokens after temporal fusion.
pub struct ContextTokens<S: Scalar> {
    pub tokens: Tensor<S>,
    pub frame_count: usize,
}

/// Adapted per-person features, row order matching the box order.
pub struct PersonTokens<S: Scalar> {
    pub tokens: Tensor<S>,
}

/// Prompted label features returned by the interaction.
pub enum LabelFeatures<S: Scalar> {
    Shared(Tensor<S>),
    PerPerson(Vec<Tensor<S>>),
}

impl<S: Scalar> LabelFeatures<S> {
    pub fn num_labels(&self) -> usize {
        match self {
            LabelFeatures::Shared(t) => t.rows(),
            LabelFeatures::PerPerson(v) => v[0].rows(),
        }
    }

    pub fn for_person(&self, b: usize) -> &Tensor<S> {
        match self {
            LabelFeatures::Shared(t) => t,
            LabelFeatures::PerPerson(v) => &v[b],
        }
    }
}

// ── Parameter layout ────────────────────────────────────────────────────────

/// Register the trainable additions: temporal module, person adapter, person
/// slot embedding, interest-token projector, and one prompting block per
/// encoder layer. Gates (`rho`), the adapter output layer, and the temporal
/// attention output projection start at zero, so the freshly initialized
/// model collapses to the frozen baseline.
pub fn register_model<S: Scalar>(
    store: &mut ParamStore<S>,
    stream: &RngStream,
    image_cfg: &ImageEncoderConfig,
    cfg: &ModelConfig,
) -> Result<()> {
    let d = image_cfg.width;
    let joint = image_cfg.joint_dim;
    if joint % cfg.prompt_heads != 0 {
        return Err(Error::Config(format!(
            "joint dim {joint} not divisible by {} prompt heads",
            cfg.prompt_heads
        )));
    }
    let mut draws = stream.derive_str("temporal.e_temp").draws();
    store.insert(
        "temporal.e_temp",
        Tensor::randn(vec![cfg.t_frames, d], &mut draws, 0.01)?,
    )?;
    nn::register_ln(store, "temporal.ln", d)?;
    nn::register_mhsa(store, stream, "temporal.attn", d, image_cfg.heads, true)?;

    nn::register_ln(store, "adapter.ln", d)?;
    nn::register_ffn(store, stream, "adapter.ffn", d, 4 * d, true)?;

    store.insert("person_slot", Tensor::zeros(vec![d])?)?;

    let mut draws = stream.derive_str("prompt.projector.weight").draws();
    store.insert(
        "prompt.projector.weight",
        Tensor::randn(vec![d, joint], &mut draws, 1.0 / (d as f64).sqrt())?,
    )?;
    store.insert("prompt.projector.bias", Tensor::zeros(vec![joint])?)?;
    for layer in 0..image_cfg.layers {
        let p = format!("prompt.layer{layer}");
        nn::register_mhsa(store, stream, &format!("{p}.ca"), joint, cfg.prompt_heads, false)?;
        nn::register_ffn(store, stream, &format!("{p}.ffn"), joint, 4 * joint, false)?;
        store.insert(&format!("{p}.rho"), Tensor::zeros(vec![joint])?)?;
    }
    Ok(())
}

// ── Temporal modeling ───────────────────────────────────────────────────────

/// Fuse `T` frames of patch tokens per position: add the temporal encoding,
/// self-attend along the frame axis, then mean-pool over frames.
pub fn temporal_model<S: Scalar>(
    frames: &[Tensor<S>],
    store: &ParamStore<S>,
    heads: usize,
) -> Result<ContextTokens<S>> {
    if frames.is_empty() {
        return Err(Error::Input("temporal_model: no frames given".into()));
    }
    let (n, d) = frames[0].expect_2d("temporal_model")?;
    for f in frames {
        if f.shape() != frames[0].shape() {
            return Err(Error::Dim(
                "temporal_model: frames disagree on token shape".into(),
            ));
        }
    }
    let e_temp = store.get("temporal.e_temp")?;
    if e_temp.shape() != [frames.len(), d] {
        return Err(Error::Dim(format!(
            "temporal encoding covers {} frames, clip has {}",
            e_temp.shape()[0],
            frames.len()
        )));
    }
    let ln = nn::ln_from_store(store, "temporal.ln")?;
    let attn = nn::mhsa_from_store(store, "temporal.attn", heads)?;

    let mut fused = Vec::with_capacity(n);
    for pos in 0..n {
        let rows: Vec<Tensor<S>> = frames
            .iter()
            .map(|f| f.row_slice(pos, 1))
            .collect::<Result<_>>()?;
        let z = Tensor::concat_rows(&rows)?;
        let zbar = z.add(&e_temp)?;
        let (attn_out, _) = nn::mhsa_forward(&ln.forward(&zbar)?, &attn)?;
        let zhat = zbar.add(&attn_out)?;
        fused.push(zhat.mean_rows()?.as_row()?);
    }
    Ok(ContextTokens {
        tokens: Tensor::concat_rows(&fused)?,
        frame_count: frames.len(),
    })
}

/// Ablation path: plain per-position average over frames, no temporal
/// encoding, no attention.
pub fn average_pool_context<S: Scalar>(frames: &[Tensor<S>]) -> Result<ContextTokens<S>> {
    if frames.is_empty() {
        return Err(Error::Input("average_pool_context: no frames given".into()));
    }
    let mut acc = frames[0].clone();
    for f in &frames[1..] {
        acc = acc.add(f)?;
    }
    Ok(ContextTokens {
        tokens: acc.scale(1.0 / frames.len() as f64),
        frame_count: frames.len(),
    })
}

// ── Person adapter ──────────────────────────────────────────────────────────

/// `P + FFN(LN(P))`; the FFN output layer is zero at init, so freshly
/// initialized adapters are exact identities.
pub fn person_adapter<S: Scalar>(
    p: &Tensor<S>,
    store: &ParamStore<S>,
) -> Result<PersonTokens<S>> {
    let ln = nn::ln_from_store(store, "adapter.ln")?;
    let ffn = nn::ffn_from_store(store, "adapter.ffn")?;
    let delta = nn::ffn_forward(&ln.forward(p)?, &ffn)?;
    Ok(PersonTokens {
        tokens: p.add(&delta)?,
    })
}

// ── Interest token spotting ─────────────────────────────────────────────────

/// Columns of the context range with the largest importance for
/// `person_row`, ties broken toward the lower column index; the result is
/// sorted ascending and contains all context columns when `k` exceeds the
/// range.
pub fn spot_interest_tokens<S: Scalar>(
    m: &ImportanceMatrix<S>,
    person_row: usize,
    context_cols: Range<usize>,
    k: usize,
) -> Result<Vec<usize>> {
    if k < 1 {
        return Err(Error::Config("interest token count must be >= 1".into()));
    }
    if context_cols.is_empty() {
        return Err(Error::Input("spot_interest_tokens: empty context range".into()));
    }
    let rows = m.values.rows();
    let cols = m.values.cols();
    if person_row >= rows || context_cols.end > cols {
        return Err(Error::Dim(format!(
            "spot_interest_tokens: row {person_row} / cols {context_cols:?} out of range for a {rows}x{cols} map"
        )));
    }
    let row = m.row(person_row);
    let mut candidates: Vec<usize> = context_cols.collect();
    candidates.sort_by(|&a, &b| {
        row[b]
            .partial_cmp(&row[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    candidates.truncate(k.min(candidates.len()));
    candidates.sort_unstable();
    Ok(candidates)
}

// ── Context prompting ───────────────────────────────────────────────────────

pub struct PromptLayerParams<S: Scalar> {
    pub ca: nn::MhsaParams<S>,
    pub ffn: nn::FfnParams<S>,
    pub rho: Tensor<S>,
}

pub fn prompt_layer_from_store<S: Scalar>(
    store: &ParamStore<S>,
    layer: usize,
    prompt_heads: usize,
) -> Result<PromptLayerParams<S>> {
    let p = format!("prompt.layer{layer}");
    Ok(PromptLayerParams {
        ca: nn::mhsa_from_store(store, &format!("{p}.ca"), prompt_heads)?,
        ffn: nn::ffn_from_store(store, &format!("{p}.ffn"))?,
        rho: store.get(&format!("{p}.rho"))?,
    })
}

/// One prompting step over a single person's label features:
/// `F̄ = F_T + CA(F_T, F_I)`, `F̂ = F̄ + FFN(F̄)`, `F̃ = F_T + ρ ⊙ F̂`.
pub fn context_prompt_layer<S: Scalar>(
    f_t: &Tensor<S>,
    f_i: &Tensor<S>,
    p: &PromptLayerParams<S>,
) -> Result<Tensor<S>> {
    if f_i.rows() == 0 {
        return Err(Error::EmptyContext(
            "context_prompt_layer: no prompting tokens".into(),
        ));
    }
    let fbar = f_t.add(&nn::cross_attention(f_t, f_i, &p.ca)?)?;
    let fhat = fbar.add(&nn::ffn_forward(&fbar, &p.ffn)?)?;
    f_t.add(&fhat.mul_row_broadcast(&p.rho)?)
}

// ── Person-context interaction ──────────────────────────────────────────────

/// Per-layer introspection data captured during a traced forward.
pub struct LayerTrace {
    pub layer: usize,
    /// Per person: selected interest columns, absolute within the sequence.
    pub interest: Vec<Vec<usize>>,
    /// Per person: importance scores over the context columns.
    pub importance_rows: Vec<Vec<f64>>,
    /// Label features after this layer's prompting (person 0 in per-person
    /// mode), row-major `[N_L × joint]`; `None` when this layer does not
    /// prompt.
    pub label_features: Option<Vec<Vec<f64>>>,
}

pub struct InteractionTrace {
    pub layers: Vec<LayerTrace>,
    pub k_effective: usize,
}

fn warn_once_k_clamped(k: usize, n: usize) {
    static ONCE: std::sync::Once = std::sync::Once::new();
    ONCE.call_once(|| {
        eprintln!(
            "note: interest token count {k} exceeds the {n} available context tokens; clamping to {n}"
        );
    });
}

/// Run the joint `[persons; context]` sequence through the frozen-plus-LoRA
/// encoder layers. At every layer the head-averaged attention selects each
/// person's interest tokens, and the layer output prompts the label features
/// (per person, or once for all in shared mode). Returns unit-normalized
/// joint-space person features and prompted, unit-normalized label features.
pub fn interaction_forward<S: Scalar>(
    store: &ParamStore<S>,
    image_cfg: &ImageEncoderConfig,
    cfg: &ModelConfig,
    persons: &PersonTokens<S>,
    ctx: &ContextTokens<S>,
    labels: &Tensor<S>,
    mode: PromptMode,
) -> Result<(Tensor<S>, LabelFeatures<S>)> {
    let (out, labels, _) = interaction_forward_traced(store, image_cfg, cfg, persons, ctx, labels, mode, false)?;
    Ok((out, labels))
}

#[allow(clippy::too_many_arguments)]
pub fn interaction_forward_traced<S: Scalar>(
    store: &ParamStore<S>,
    image_cfg: &ImageEncoderConfig,
    cfg: &ModelConfig,
    persons: &PersonTokens<S>,
    ctx: &ContextTokens<S>,
    labels: &Tensor<S>,
    mode: PromptMode,
    capture: bool,
) -> Result<(Tensor<S>, LabelFeatures<S>, InteractionTrace)> {
    if cfg.k_interest < 1 {
        return Err(Error::Config("interest token count must be >= 1".into()));
    }
    let (b, d) = persons.tokens.expect_2d("interaction_forward persons")?;
    let (n, d_ctx) = ctx.tokens.expect_2d("interaction_forward context")?;
    if d != d_ctx {
        return Err(Error::Dim(format!(
            "person width {d} does not match context width {d_ctx}"
        )));
    }
    labels.expect_2d("interaction_forward labels")?;
    if b == 0 && mode == PromptMode::PerPerson {
        return Err(Error::Input(
            "per-person prompting needs at least one person".into(),
        ));
    }

    let k_eff = if cfg.k_interest > n {
        warn_once_k_clamped(cfg.k_interest, n);
        n
    } else {
        cfg.k_interest
    };

    // Person rows get a learned slot embedding so attention can tell them
    // from patch-position context tokens.
    let slot = store.get("person_slot")?;
    let person_rows = persons.tokens.add_row_broadcast(&slot)?;
    let mut seq = Tensor::concat_rows(&[person_rows, ctx.tokens.clone()])?;

    let proj_w = store.get("prompt.projector.weight")?;
    let proj_b = store.get("prompt.projector.bias")?;

    let mut shared_labels = labels.clone();
    let mut person_labels: Vec<Tensor<S>> = match mode {
        PromptMode::Shared => Vec::new(),
        PromptMode::PerPerson => vec![labels.clone(); b],
    };

    let context_range = b..b + n;
    let mut trace = InteractionTrace {
        layers: Vec::new(),
        k_effective: k_eff,
    };

    for layer in 0..image_cfg.layers {
        let (next, importance) = encoders::image_layer_forward(store, image_cfg, layer, &seq)?;
        seq = next;

        let interest: Vec<Vec<usize>> = (0..b)
            .map(|p| spot_interest_tokens(&importance, p, context_range.clone(), k_eff))
            .collect::<Result<_>>()?;

        let prompts_here = cfg.toggles.prompting_every_layer || layer + 1 == image_cfg.layers;
        let mut label_snapshot = None;
        if prompts_here {
            let params = prompt_layer_from_store(store, layer, cfg.prompt_heads)?;
            match mode {
                PromptMode::Shared => {
                    let ctx_tokens = seq.row_slice(context_range.start, n)?;
                    let f_i = ctx_tokens.matmul(&proj_w)?.add_row_broadcast(&proj_b)?;
                    shared_labels = context_prompt_layer(&shared_labels, &f_i, &params)?;
                    if capture {
                        label_snapshot = Some(rows_f64(&shared_labels));
                    }
                }
                PromptMode::PerPerson => {
                    for (p, labels_p) in person_labels.iter_mut().enumerate() {
                        let tokens = seq.select_rows(&interest[p])?;
                        let f_i = tokens.matmul(&proj_w)?.add_row_broadcast(&proj_b)?;
                        *labels_p = context_prompt_layer(labels_p, &f_i, &params)?;
                    }
                    if capture {
                        label_snapshot = Some(rows_f64(&person_labels[0]));
                    }
                }
            }
        }

        if capture {
            trace.layers.push(LayerTrace {
                layer,
                importance_rows: (0..b)
                    .map(|p| {
                        let row = importance.row(p);
                        row[context_range.clone()].to_vec()
                    })
                    .collect(),
                interest,
                label_features: label_snapshot,
            });
        }
    }

    let person_out = seq
        .row_slice(0, b)?
        .matmul(&store.get("image.proj")?)?
        .l2_normalize_rows()?;

    let label_out = match mode {
        PromptMode::Shared => LabelFeatures::Shared(shared_labels.l2_normalize_rows()?),
        PromptMode::PerPerson => LabelFeatures::PerPerson(
            person_labels
                .into_iter()
                .map(|t| t.l2_normalize_rows())
                .collect::<Result<_>>()?,
        ),
    };
    Ok((person_out, label_out, trace))
}

fn rows_f64<S: Scalar>(t: &Tensor<S>) -> Vec<Vec<f64>> {
    let (rows, cols) = (t.rows(), t.cols());
    (0..rows)
        .map(|r| {
            t.data()[r * cols..(r + 1) * cols]
                .iter()
                .map(|v| v.as_f64())
                .collect()
        })
        .collect()
}

/// The frozen-encoder reference path: raw person features and context tokens
/// through the base encoder layers (ignoring LoRA factors), no adapter, no
/// slot embedding, no prompting. The zero-initialized full model must agree
/// with this within float noise.
pub fn frozen_baseline_forward<S: Scalar>(
    store: &ParamStore<S>,
    image_cfg: &ImageEncoderConfig,
    raw_persons: &Tensor<S>,
    ctx: &ContextTokens<S>,
) -> Result<Tensor<S>> {
    let mut seq = Tensor::concat_rows(&[raw_persons.clone(), ctx.tokens.clone()])?;
    let b = raw_persons.rows();
    for layer in 0..image_cfg.layers {
        let prefix = format!("image.layer{layer}");
        let ln1 = nn::ln_from_store(store, &format!("{prefix}.ln1"))?;
        let attn = nn::mhsa_from_store(store, &format!("{prefix}.attn"), image_cfg.heads)?;
        let (attn_out, _) = nn::mhsa_forward(&ln1.forward(&seq)?, &attn)?;
        seq = seq.add(&attn_out)?;
        let ln2 = nn::ln_from_store(store, &format!("{prefix}.ln2"))?;
        let ffn = nn::ffn_from_store(store, &format!("{prefix}.ffn"))?;
        seq = seq.add(&nn::ffn_forward(&ln2.forward(&seq)?, &ffn)?)?;
    }
    seq.row_slice(0, b)?
        .matmul(&store.get("image.proj")?)?
        .l2_normalize_rows()
}

// ── Classification ──────────────────────────────────────────────────────────

/// Temperature-scaled cosine logits per (person, label).
pub fn similarity_logits<S: Scalar>(
    person_out: &Tensor<S>,
    label_out: &LabelFeatures<S>,
    temperature: f64,
) -> Result<Tensor<S>> {
    if temperature <= 0.0 {
        return Err(Error::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let (b, _) = person_out.expect_2d("similarity_logits")?;
    let logits = match label_out {
        LabelFeatures::Shared(labels) => person_out.matmul(&labels.transpose()?)?,
        LabelFeatures::PerPerson(per) => {
            if per.len() != b {
                return Err(Error::Dim(format!(
                    "{b} persons but {} label blocks",
                    per.len()
                )));
            }
            let rows: Vec<Tensor<S>> = (0..b)
                .map(|p| person_out.row_slice(p, 1)?.matmul(&per[p].transpose()?))
                .collect::<Result<_>>()?;
            Tensor::concat_rows(&rows)?
        }
    };
    Ok(logits.scale(1.0 / temperature))
}

/// Per-person class scores: softmax over labels in single-label mode,
/// elementwise sigmoid in multi-label mode.
pub fn classify<S: Scalar>(
    person_out: &Tensor<S>,
    label_out: &LabelFeatures<S>,
    temperature: f64,
    mode: ClassifyMode,
) -> Result<Tensor<S>> {
    let logits = similarity_logits(person_out, label_out, temperature)?;
    match mode {
        ClassifyMode::Single => logits.softmax_rows(),
        ClassifyMode::Multi => Ok(logits.sigmoid()),
    }
}

// ── Whole-sample forward ────────────────────────────────────────────────────

/// Grow a box by `margin` times its size on every side.
pub fn expand_box(b: crate::image::Box2D, margin: f64) -> crate::image::Box2D {
    let dx = b.width() * margin;
    let dy = b.height() * margin;
    crate::image::Box2D::new(b.x1 - dx, b.y1 - dy, b.x2 + dx, b.y2 + dy)
}

/// Everything the loss or the detector needs from one clip.
pub struct SampleForward<S: Scalar> {
    /// `[B × N_L]` temperature-scaled cosine logits.
    pub logits: Tensor<S>,
    pub person_out: Tensor<S>,
    pub label_out: LabelFeatures<S>,
    pub trace: InteractionTrace,
}

/// Full pipeline for one [`ClipSample`]: patch tokens of the clip frames,
/// temporal fusion (or average pooling), person crops through the image
/// tower plus adapter, then the interaction stack.
pub fn forward_sample<S: Scalar>(
    store: &ParamStore<S>,
    image_cfg: &ImageEncoderConfig,
    cfg: &ModelConfig,
    sample: &ClipSample,
    label_feats: &Tensor<S>,
    capture: bool,
) -> Result<SampleForward<S>> {
    if sample.frames.len() != cfg.t_frames {
        return Err(Error::Input(format!(
            "clip has {} frames, config expects {}",
            sample.frames.len(),
            cfg.t_frames
        )));
    }
    let frame_tokens: Vec<Tensor<S>> = sample
        .frames
        .iter()
        .map(|img| {
            encoders::frame_patch_tokens(&img.to_tensor()?.cast::<S>(), store, image_cfg)
        })
        .collect::<Result<_>>()?;
    let ctx = if cfg.toggles.temporal {
        temporal_model(&frame_tokens, store, image_cfg.heads)?
    } else {
        average_pool_context(&frame_tokens)?
    };

    let mut person_rows = Vec::with_capacity(sample.boxes.len());
    for bbox in &sample.boxes {
        let bbox = expand_box(*bbox, cfg.crop_margin);
        let crop = crop_person(&sample.keyframe, bbox, image_cfg.image_size)?;
        let (cls, _) = encoders::encode_image(&crop.cast::<S>(), store, image_cfg)?;
        person_rows.push(cls.as_row()?);
    }
    let raw_persons = Tensor::concat_rows(&person_rows)?;
    let persons = if cfg.toggles.adapter {
        person_adapter(&raw_persons, store)?
    } else {
        PersonTokens {
            tokens: raw_persons,
        }
    };

    let (person_out, label_out, trace) = interaction_forward_traced(
        store,
        image_cfg,
        cfg,
        &persons,
        &ctx,
        label_feats,
        cfg.prompt_mode(),
        capture,
    )?;
    let logits = similarity_logits(&person_out, &label_out, cfg.temperature)?;
    Ok(SampleForward {
        logits,
        person_out,
        label_out,
        trace,
    })
}

// ── Introspection artifacts ─────────────────────────────────────────────────

/// One introspection record, emitted per (video, frame, person, layer).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IntrospectRecord {
    pub video_id: String,
    pub frame_idx: u64,
    pub person: usize,
    pub layer: usize,
    /// Interest columns relative to the context block.
    pub interest_indices: Vec<usize>,
    pub importance_row: Vec<f64>,
    pub top_label: String,
    pub score: f64,
}

/// Render an importance row over `N` context tokens as a grayscale grid
/// (one `cell_px`² block per patch position), normalized by the row maximum.
pub fn write_importance_pgm(
    path: &std::path::Path,
    importance_row: &[f64],
    grid_w: usize,
    cell_px: usize,
) -> Result<()> {
    if importance_row.is_empty() || importance_row.len() % grid_w != 0 {
        return Err(Error::Dim(format!(
            "importance row of {} values does not fill a width-{grid_w} grid",
            importance_row.len()
        )));
    }
    let grid_h = importance_row.len() / grid_w;
    let max = importance_row.iter().cloned().fold(f64::MIN, f64::max);
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let (w, h) = (grid_w * cell_px, grid_h * cell_px);
    let mut gray = vec![0.0f32; w * h];
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            let v = (importance_row[gy * grid_w + gx] * scale) as f32;
            for py in 0..cell_px {
                for px in 0..cell_px {
                    gray[(gy * cell_px + py) * w + gx * cell_px + px] = v;
                }
            }
        }
    }
    crate::image::write_pgm(path, w, h, &gray)
}

/// Project feature rows to their top-2 principal components. Deterministic
/// sign convention: the first loading with magnitude above 1e-9 is positive.
pub fn pca_2d(rows: &[Vec<f64>]) -> Result<Vec<(f64, f64)>> {
    if rows.len() < 2 {
        return Err(Error::Input("pca_2d needs at least 2 rows".into()));
    }
    let d = rows[0].len();
    let n = rows.len();
    let mut mean = vec![0.0f64; d];
    for row in rows {
        if row.len() != d {
            return Err(Error::Dim("pca_2d: ragged rows".into()));
        }
        for (m, &v) in mean.iter_mut().zip(row.iter()) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|row| row.iter().zip(mean.iter()).map(|(&v, &m)| v - m).collect())
        .collect();
    let mut cov = vec![0.0f64; d * d];
    for row in &centered {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += row[i] * row[j];
            }
        }
    }
    for v in &mut cov {
        *v /= (n - 1).max(1) as f64;
    }

    let v1 = top_eigenvector(&cov, d);
    let l1 = quad_form(&cov, &v1, d);
    let mut deflated = cov.clone();
    for i in 0..d {
        for j in 0..d {
            deflated[i * d + j] -= l1 * v1[i] * v1[j];
        }
    }
    let v2 = top_eigenvector(&deflated, d);

    Ok(centered
        .iter()
        .map(|row| {
            let x = row.iter().zip(v1.iter()).map(|(&a, &b)| a * b).sum();
            let y = row.iter().zip(v2.iter()).map(|(&a, &b)| a * b).sum();
            (x, y)
        })
        .collect())
}

fn top_eigenvector(matrix: &[f64], d: usize) -> Vec<f64> {
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    for _ in 0..500 {
        let mut next = vec![0.0f64; d];
        for i in 0..d {
            let row = &matrix[i * d..(i + 1) * d];
            next[i] = row.iter().zip(v.iter()).map(|(&a, &b)| a * b).sum();
        }
        let norm: f64 = next.iter().map(|&x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            break;
        }
        for x in &mut next {
            *x /= norm;
        }
        v = next;
    }
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-9) {
        if *first < 0.0 {
            for x in &mut v {
                *x = -*x;
            }
        }
    }
    v
}

fn quad_form(matrix: &[f64], v: &[f64], d: usize) -> f64 {
    let mut acc = 0.0;
    for i in 0..d {
        for j in 0..d {
            acc += v[i] * matrix[i * d + j] * v[j];
        }
    }
    acc
}
