//! Detection training: freeze mask over the pretrained store, cross-entropy /
//! binary cross-entropy losses on cosine logits, SGD with linear warmup, and
//! deterministic batch assembly from manifests.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{sample_clip, ClipSample, LabelSplit, VideoManifest};
use crate::encoders::{self, ImageEncoderConfig, TextEncoderConfig, Vocab};
use crate::error::{Error, Result};
use crate::model::{self, ClassifyMode, ModelConfig, ModelToggles};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::store::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_iters: usize,
    pub warmup_factor: f64,
    pub mode: ClassifyMode,
    pub k_interest: usize,
    pub lora_rank: usize,
    pub t_frames: usize,
    pub stride: usize,
    pub toggles: ModelToggles,
    /// Ensemble label features over caption templates (synthetic classes).
    pub prompt_ensemble: bool,
    /// Temperature of the training loss logits.
    pub loss_temperature: f64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    /// SGD momentum; plain SGD when 0.
    pub momentum: f64,
}

impl TrainConfig {
    /// Published schedule for J-HMDB/UCF-style runs: 3K iterations, batch 8,
    /// base lr 2.5e-4, 800 warmup iterations at factor 0.25, SGD.
    pub fn jhmdb_paper() -> Self {
        TrainConfig {
            iterations: 3000,
            batch_size: 8,
            base_lr: 2.5e-4,
            warmup_iters: 800,
            warmup_factor: 0.25,
            mode: ClassifyMode::Single,
            k_interest: 100,
            lora_rank: 8,
            t_frames: 4,
            stride: 1,
            toggles: ModelToggles::default(),
            prompt_ensemble: false,
            loss_temperature: 0.01,
            checkpoint_every: 0,
            momentum: 0.0,
        }
    }

    /// Published AVA-style schedule: 20K iterations at base lr 4e-4 with 2000
    /// warmup iterations, multi-label scoring, per-person interest tokens.
    pub fn ava_paper() -> Self {
        TrainConfig {
            iterations: 20000,
            base_lr: 4e-4,
            warmup_iters: 2000,
            mode: ClassifyMode::Multi,
            toggles: ModelToggles {
                its: true,
                ..ModelToggles::default()
            },
            ..TrainConfig::jhmdb_paper()
        }
    }

    /// The paper's schedule shape at one tenth length, for synthetic data.
    pub fn desk_default() -> Self {
        TrainConfig {
            iterations: 300,
            warmup_iters: 80,
            prompt_ensemble: true,
            ..TrainConfig::jhmdb_paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_iters > self.iterations {
            return Err(Error::Config(format!(
                "warmup_iters {} exceeds iterations {}",
                self.warmup_iters, self.iterations
            )));
        }
        if self.base_lr <= 0.0 || self.warmup_factor <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.lora_rank < 1 {
            return Err(Error::Config("LoRA rank must be >= 1".into()));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            t_frames: self.t_frames,
            stride: self.stride,
            k_interest: self.k_interest,
            temperature: self.loss_temperature,
            toggles: self.toggles,
            ..ModelConfig::default()
        }
    }
}

// ── Freeze mask ─────────────────────────────────────────────────────────────

/// Partition of parameter names into frozen pretrained weights and trainable
/// add-on modules.
pub struct FreezeMask;

impl FreezeMask {
    /// True when the parameter stays at its pretrained value during
    /// detection training. Encoder towers and the contrastive temperature
    /// are frozen; LoRA factors, the temporal module, the adapter, the
    /// person slot, and the prompting stack are trainable.
    pub fn frozen(name: &str) -> bool {
        if name.contains(".lora_") {
            return false;
        }
        name.starts_with("image.") || name.starts_with("text.") || name == "logit_scale"
    }

    pub fn trainable(name: &str) -> bool {
        !Self::frozen(name)
    }
}

// ── Losses ──────────────────────────────────────────────────────────────────

/// Classification targets aligned with the score rows.
#[derive(Debug, Clone)]
pub enum LossTargets {
    /// One class index per person.
    Single(Vec<usize>),
    /// A set of class indices per person.
    Multi(Vec<Vec<usize>>),
}

/// Cross-entropy (single) or mean binary cross-entropy (multi) over cosine
/// logits of shape `[B × N_L]`.
pub fn detection_loss<S: Scalar>(
    scores: &Tensor<S>,
    targets: &LossTargets,
    mode: ClassifyMode,
) -> Result<Tensor<S>> {
    let (b, n_labels) = scores.expect_2d("detection_loss")?;
    match (targets, mode) {
        (LossTargets::Single(t), ClassifyMode::Single) => {
            if t.len() != b {
                return Err(Error::Dim(format!(
                    "{} targets for {b} persons",
                    t.len()
                )));
            }
            if let Some(&bad) = t.iter().find(|&&c| c >= n_labels) {
                return Err(Error::Input(format!(
                    "target class {bad} outside the {n_labels}-label set"
                )));
            }
            let flat: Vec<usize> = t.iter().enumerate().map(|(i, &c)| i * n_labels + c).collect();
            Ok(scores
                .log_softmax_rows()?
                .gather(std::sync::Arc::new(flat), vec![b])?
                .mean_all()
                .scale(-1.0))
        }
        (LossTargets::Multi(sets), ClassifyMode::Multi) => {
            if sets.len() != b {
                return Err(Error::Dim(format!(
                    "{} target sets for {b} persons",
                    sets.len()
                )));
            }
            let mut hot = vec![0.0f64; b * n_labels];
            for (i, set) in sets.iter().enumerate() {
                for &c in set {
                    if c >= n_labels {
                        return Err(Error::Input(format!(
                            "target class {c} outside the {n_labels}-label set"
                        )));
                    }
                    hot[i * n_labels + c] = 1.0;
                }
            }
            scores.bce_with_logits(&hot)
        }
        _ => Err(Error::Input(
            "loss targets do not match the classification mode".into(),
        )),
    }
}

// ── Schedule ────────────────────────────────────────────────────────────────

/// Linear ramp from `warmup_factor * base_lr` at iteration 0 to `base_lr` at
/// `warmup_iters`, constant afterward.
pub fn lr_at(iter: usize, cfg: &TrainConfig) -> f64 {
    if iter >= cfg.warmup_iters {
        cfg.base_lr
    } else {
        let progress = iter as f64 / cfg.warmup_iters as f64;
        cfg.base_lr * (cfg.warmup_factor + (1.0 - cfg.warmup_factor) * progress)
    }
}

// ── Training loop ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsEntry {
    pub iter: usize,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

pub fn write_metrics(path: &Path, entries: &[MetricsEntry]) -> Result<()> {
    use std::io::Write;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut file = std::fs::File::create(path)?;
    for e in entries {
        serde_json::to_writer(&mut file, e)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

/// Everything `train_detection` needs beyond the store.
pub struct TrainInputs<'a> {
    pub manifests: &'a [VideoManifest],
    pub frames_root: &'a Path,
    pub split: &'a LabelSplit,
    pub vocab: &'a Vocab,
    pub image_cfg: &'a ImageEncoderConfig,
    pub text_cfg: &'a TextEncoderConfig,
}

/// Keyframes whose persons carry at least one seen-class label.
fn seen_keyframes(manifests: &[VideoManifest], split: &LabelSplit) -> Vec<(usize, usize)> {
    let seen = split.seen_set();
    let mut out = Vec::new();
    for (vi, m) in manifests.iter().enumerate() {
        for (fi, frame) in m.frames.iter().enumerate() {
            let ok = frame
                .persons
                .iter()
                .any(|p| p.labels.iter().any(|l| seen.contains(l)));
            if ok {
                out.push((vi, fi));
            }
        }
    }
    out
}

/// Restrict a clip to persons that carry at least one seen-class label.
fn restrict_to_seen(sample: ClipSample, seen: &std::collections::BTreeSet<String>) -> ClipSample {
    let keep: Vec<usize> = (0..sample.boxes.len())
        .filter(|&i| sample.labels[i].iter().any(|l| seen.contains(l)))
        .collect();
    ClipSample {
        boxes: keep.iter().map(|&i| sample.boxes[i]).collect(),
        labels: keep.iter().map(|&i| sample.labels[i].clone()).collect(),
        detector_scores: keep.iter().map(|&i| sample.detector_scores[i]).collect(),
        ..sample
    }
}

/// SGD detection training over the trainable modules of a pretrained store.
/// The store is extended with LoRA factors and model parameters when absent,
/// the freeze mask is applied, and only seen-class samples are used.
pub fn train_detection(
    mut store: ParamStore<f32>,
    inputs: &TrainInputs,
    cfg: &TrainConfig,
    seed: u64,
    checkpoint_dir: Option<&Path>,
) -> Result<(ParamStore<f32>, Vec<MetricsEntry>)> {
    cfg.validate()?;
    if inputs.split.seen.is_empty() {
        return Err(Error::Config("split has no seen classes".into()));
    }
    let keyframes = seen_keyframes(inputs.manifests, inputs.split);
    if keyframes.is_empty() {
        return Err(Error::Config(
            "manifests contain no seen-class samples".into(),
        ));
    }

    let stream = RngStream::new(seed, 0);
    if !encoders::has_image_lora(&store) {
        encoders::register_image_lora(
            &mut store,
            &stream.derive_str("lora-init"),
            inputs.image_cfg,
            cfg.lora_rank,
        )?;
    }
    let model_cfg = cfg.model_config();
    if !store.contains("temporal.e_temp") {
        model::register_model(
            &mut store,
            &stream.derive_str("model-init"),
            inputs.image_cfg,
            &model_cfg,
        )?;
    }
    store.apply_freeze(FreezeMask::frozen);

    // Text tower is frozen; seen-class features are constants.
    let seen_classes = inputs.split.seen.clone();
    let label_feats = encoders::class_label_features(
        &seen_classes,
        &store,
        inputs.text_cfg,
        inputs.vocab,
        cfg.prompt_ensemble,
    )?
    .detach();
    let class_index: std::collections::BTreeMap<&str, usize> = seen_classes
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    let seen_set = inputs.split.seen_set();

    let mut velocity: std::collections::HashMap<String, Vec<f64>> = std::collections::HashMap::new();
    let mut metrics = Vec::with_capacity(cfg.iterations);
    let started = std::time::Instant::now();

    for iter in 0..cfg.iterations {
        let mut draws = stream.derive_str("batch").derive(iter as u64).draws();
        let mut sample_losses = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let (vi, fi) = keyframes[draws.below(keyframes.len())];
            let clip = sample_clip(
                &inputs.manifests[vi],
                fi,
                cfg.t_frames,
                cfg.stride,
                inputs.frames_root,
            )?
            .expect("seen keyframes have person boxes");
            let clip = restrict_to_seen(clip, &seen_set);
            let fwd = model::forward_sample(&store, inputs.image_cfg, &model_cfg, &clip, &label_feats, false)?;
            let targets = match cfg.mode {
                ClassifyMode::Single => LossTargets::Single(
                    clip.labels
                        .iter()
                        .map(|ls| {
                            ls.iter()
                                .find_map(|l| class_index.get(l.as_str()).copied())
                                .expect("restricted persons have a seen label")
                        })
                        .collect(),
                ),
                ClassifyMode::Multi => LossTargets::Multi(
                    clip.labels
                        .iter()
                        .map(|ls| {
                            ls.iter()
                                .filter_map(|l| class_index.get(l.as_str()).copied())
                                .collect()
                        })
                        .collect(),
                ),
            };
            sample_losses.push(detection_loss(&fwd.logits, &targets, cfg.mode)?);
        }
        let mut total = sample_losses[0].clone();
        for l in &sample_losses[1..] {
            total = total.add(l)?;
        }
        let loss = total.scale(1.0 / cfg.batch_size as f64);
        loss.validate_finite("detection loss")?;

        let grads = loss.backward()?;
        let lr = lr_at(iter, cfg);
        if cfg.momentum > 0.0 {
            momentum_step(&mut store, &grads, lr, cfg.momentum, &mut velocity);
        } else {
            store.sgd_step(&grads, lr);
        }

        metrics.push(MetricsEntry {
            iter,
            loss: loss.item() as f64,
            lr,
            wall_ms: started.elapsed().as_millis() as u64,
        });

        if let (Some(dir), true) = (checkpoint_dir, cfg.checkpoint_every > 0) {
            if (iter + 1) % cfg.checkpoint_every == 0 {
                crate::store::save_checkpoint(&store, &dir.join(format!("iter{:06}.stck", iter + 1)))?;
            }
        }
    }
    Ok((store, metrics))
}

fn momentum_step(
    store: &mut ParamStore<f32>,
    grads: &crate::tensor::autograd::GradStore<f32>,
    lr: f64,
    momentum: f64,
    velocity: &mut std::collections::HashMap<String, Vec<f64>>,
) {
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        if store.is_frozen(&name).unwrap_or(true) {
            continue;
        }
        let tensor = store.get(&name).expect("name exists");
        let Some(g) = grads.grad_f64(&tensor) else {
            continue;
        };
        let vel = velocity
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        let updated: Vec<f32> = tensor
            .data()
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                vel[i] = momentum * vel[i] + g[i];
                (p as f64 - lr * vel[i]) as f32
            })
            .collect();
        store
            .set(&name, Tensor::from_vec(tensor.shape().to_vec(), updated).unwrap())
            .expect("shape preserved");
    }
}
