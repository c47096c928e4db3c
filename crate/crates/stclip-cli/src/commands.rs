//! Implementations of the CLI subcommands.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use stclip::data::synth::{read_captions, synth_generate, write_synth_output, SynthConfig};
use stclip::data::{gen_splits, read_manifests, read_split, write_splits};
use stclip::encoders::{
    contrastive_pretrain, CorpusPair, ImageEncoderConfig, PretrainConfig, TextEncoderConfig,
    Vocab,
};
use stclip::error::Error;
use stclip::eval::{
    frame_map, infer_detections, read_results, write_report, write_results, InferenceInputs,
    InferenceOptions,
};
use stclip::image::Image;
use stclip::model::{self, ClassifyMode, ModelConfig};
use stclip::store::{load_checkpoint, save_checkpoint};
use stclip::train::{train_detection, write_metrics, TrainConfig, TrainInputs};
use stclip::Result;

use crate::manifest::RunManifest;
use crate::CommonArgs;

fn load_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<(T, serde_json::Value)> {
    if !path.exists() {
        // Surfaced by main as the CONFIG_NOT_FOUND error code.
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("config file {} does not exist", path.display()),
        )));
    }
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let config: T = serde_json::from_value(value.clone())
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok((config, value))
}

// ── pretrain ────────────────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct PretrainCommandConfig {
    /// Directory containing `captions.jsonl` and the referenced frames.
    corpus_dir: PathBuf,
    #[serde(default)]
    image: ImageEncoderConfig,
    #[serde(default)]
    text: TextEncoderConfig,
    #[serde(default)]
    hyper: PretrainConfig,
}

pub fn pretrain(args: &CommonArgs) -> Result<()> {
    let (config, resolved) = load_config::<PretrainCommandConfig>(&args.config)?;
    let mut manifest = RunManifest::new("pretrain", args.seed, &args.out, resolved);
    manifest.hash_input(&args.config)?;
    let captions_path = config.corpus_dir.join("captions.jsonl");
    manifest.hash_input(&captions_path)?;

    let records = read_captions(&captions_path)?;
    if records.is_empty() {
        return Err(Error::Input("caption corpus is empty".into()));
    }
    let corpus: Vec<CorpusPair> = records
        .iter()
        .map(|r| {
            Ok(CorpusPair {
                image: Image::read(&config.corpus_dir.join(&r.image))?,
                caption: r.caption.clone(),
            })
        })
        .collect::<Result<_>>()?;

    let hyper = PretrainConfig {
        seed: args.seed,
        ..config.hyper
    };
    let (store, vocab, log) = contrastive_pretrain(&corpus, &config.image, &config.text, &hyper)?;

    std::fs::create_dir_all(&args.out)?;
    save_checkpoint(&store, &args.out.join("checkpoint.stck"))?;
    vocab.save(&args.out.join("vocab.json"))?;
    let mut file = std::fs::File::create(args.out.join("pretrain_log.jsonl"))?;
    use std::io::Write;
    for entry in &log {
        serde_json::to_writer(&mut file, entry)?;
        file.write_all(b"\n")?;
    }
    manifest.write(&args.out)?;
    println!(
        "pretrained {} steps; final loss {:.4}",
        hyper.steps,
        log.last().map(|e| e.loss).unwrap_or(f64::NAN)
    );
    Ok(())
}

// ── synth ───────────────────────────────────────────────────────────────────

pub fn synth(args: &CommonArgs) -> Result<()> {
    let (config, resolved) = load_config::<SynthConfig>(&args.config)?;
    let mut manifest = RunManifest::new("synth", args.seed, &args.out, resolved);
    manifest.hash_input(&args.config)?;

    let output = synth_generate(&config, args.seed)?;
    write_synth_output(&args.out, &output)?;
    manifest.write(&args.out)?;
    let frames: usize = output.videos.iter().map(|v| v.frames.len()).sum();
    println!("wrote {} videos ({frames} frames) to {}", output.videos.len(), args.out.display());
    Ok(())
}

// ── splits ──────────────────────────────────────────────────────────────────

pub fn splits(classes_arg: &str, n: usize, frac: f64, seed: u64, out: &Path) -> Result<()> {
    let classes: Vec<String> = match classes_arg.parse::<usize>() {
        Ok(count) => (0..count).map(|i| format!("class{i:02}")).collect(),
        Err(_) => {
            let path = Path::new(classes_arg);
            if !path.exists() {
                return Err(Error::Input(format!(
                    "--classes '{classes_arg}' is neither a count nor an existing file"
                )));
            }
            serde_json::from_str(&std::fs::read_to_string(path)?)?
        }
    };
    let splits = gen_splits(&classes, n, frac, seed)?;
    std::fs::create_dir_all(out)?;
    write_splits(&out.join("splits.jsonl"), &splits)?;
    for split in &splits {
        std::fs::write(
            out.join(format!("{}.json", split.split_id)),
            serde_json::to_string_pretty(split)?,
        )?;
    }
    let mut manifest = RunManifest::new(
        "splits",
        seed,
        out,
        serde_json::json!({"classes": classes, "n": n, "frac": frac}),
    );
    if let Err(_e) = classes_arg.parse::<usize>() {
        manifest.hash_input(Path::new(classes_arg))?;
    }
    manifest.write(out)?;
    println!("wrote {} splits to {}", splits.len(), out.display());
    Ok(())
}

// ── train ───────────────────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct TrainCommandConfig {
    manifests: PathBuf,
    frames_root: PathBuf,
    split: PathBuf,
    checkpoint: PathBuf,
    vocab: PathBuf,
    #[serde(default)]
    image: ImageEncoderConfig,
    #[serde(default)]
    text: TextEncoderConfig,
    #[serde(default = "TrainConfig::desk_default")]
    train: TrainConfig,
}

pub fn train(args: &CommonArgs) -> Result<()> {
    let (config, resolved) = load_config::<TrainCommandConfig>(&args.config)?;
    let mut manifest = RunManifest::new("train", args.seed, &args.out, resolved);
    for path in [
        &args.config,
        &config.manifests,
        &config.split,
        &config.checkpoint,
        &config.vocab,
    ] {
        manifest.hash_input(path)?;
    }

    let manifests = read_manifests(&config.manifests)?;
    let split = read_split(&config.split)?;
    let vocab = Vocab::load(&config.vocab)?;
    let loaded = load_checkpoint::<f32>(&config.checkpoint, None)?;

    let inputs = TrainInputs {
        manifests: &manifests,
        frames_root: &config.frames_root,
        split: &split,
        vocab: &vocab,
        image_cfg: &config.image,
        text_cfg: &config.text,
    };
    let ckpt_dir = args.out.join("checkpoints");
    let (trained, metrics) = train_detection(
        loaded.store,
        &inputs,
        &config.train,
        args.seed,
        Some(&ckpt_dir),
    )?;

    std::fs::create_dir_all(&args.out)?;
    save_checkpoint(&trained, &args.out.join("checkpoint.stck"))?;
    write_metrics(&args.out.join("metrics.jsonl"), &metrics)?;
    manifest.write(&args.out)?;
    println!(
        "trained {} iterations; loss {:.4} -> {:.4}",
        config.train.iterations,
        metrics.first().map(|m| m.loss).unwrap_or(f64::NAN),
        metrics.last().map(|m| m.loss).unwrap_or(f64::NAN)
    );
    Ok(())
}

// ── eval ────────────────────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct EvalCommandConfig {
    manifests: PathBuf,
    split: PathBuf,
    /// Needed unless `results_in` is given.
    #[serde(default)]
    frames_root: Option<PathBuf>,
    #[serde(default)]
    checkpoint: Option<PathBuf>,
    #[serde(default)]
    vocab: Option<PathBuf>,
    /// JSON array with the full label set scored at inference time.
    #[serde(default)]
    classes: Option<PathBuf>,
    #[serde(default)]
    image: ImageEncoderConfig,
    #[serde(default)]
    text: TextEncoderConfig,
    #[serde(default)]
    options: InferenceOptions,
    /// Score this results file instead of running inference.
    #[serde(default)]
    results_in: Option<PathBuf>,
    #[serde(default = "default_iou")]
    iou_thresh: f64,
}

fn default_iou() -> f64 {
    0.5
}

pub fn eval(args: &CommonArgs) -> Result<()> {
    let (config, resolved) = load_config::<EvalCommandConfig>(&args.config)?;
    let mut manifest = RunManifest::new("eval", args.seed, &args.out, resolved);
    manifest.hash_input(&args.config)?;
    manifest.hash_input(&config.manifests)?;
    manifest.hash_input(&config.split)?;

    let manifests = read_manifests(&config.manifests)?;
    let split = read_split(&config.split)?;

    let results = match &config.results_in {
        Some(path) => {
            manifest.hash_input(path)?;
            read_results(path)?
        }
        None => {
            let missing = |what: &str| {
                Error::Config(format!("eval without results_in needs '{what}' in the config"))
            };
            let checkpoint = config.checkpoint.as_ref().ok_or_else(|| missing("checkpoint"))?;
            let vocab_path = config.vocab.as_ref().ok_or_else(|| missing("vocab"))?;
            let classes_path = config.classes.as_ref().ok_or_else(|| missing("classes"))?;
            let frames_root = config.frames_root.as_ref().ok_or_else(|| missing("frames_root"))?;
            manifest.hash_input(checkpoint)?;
            manifest.hash_input(vocab_path)?;
            manifest.hash_input(classes_path)?;

            let loaded = load_checkpoint::<f32>(checkpoint, None)?;
            let vocab = Vocab::load(vocab_path)?;
            let classes: Vec<String> =
                serde_json::from_str(&std::fs::read_to_string(classes_path)?)?;
            let inputs = InferenceInputs {
                store: &loaded.store,
                image_cfg: &config.image,
                text_cfg: &config.text,
                vocab: &vocab,
                classes: &classes,
                manifests: &manifests,
                frames_root,
            };
            let results = infer_detections(&inputs, &config.options)?;
            write_results(&args.out.join("results.jsonl"), &results)?;
            results
        }
    };

    let report = frame_map(&results, &manifests, &split, config.iou_thresh)?;
    std::fs::create_dir_all(&args.out)?;
    write_report(&args.out.join("report.json"), &report)?;
    manifest.write(&args.out)?;
    println!("unseen mAP@{:.2}: {:.4}", config.iou_thresh, report.map);
    Ok(())
}

// ── introspect ──────────────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct IntrospectCommandConfig {
    manifests: PathBuf,
    frames_root: PathBuf,
    checkpoint: PathBuf,
    vocab: PathBuf,
    classes: PathBuf,
    #[serde(default)]
    image: ImageEncoderConfig,
    #[serde(default)]
    text: TextEncoderConfig,
    #[serde(default)]
    model: ModelConfig,
    #[serde(default)]
    mode: Option<ClassifyMode>,
    #[serde(default)]
    prompt_ensemble: bool,
    #[serde(default = "default_max_videos")]
    max_videos: usize,
    #[serde(default = "default_max_frames")]
    max_frames_per_video: usize,
    #[serde(default = "default_cell_px")]
    cell_px: usize,
}

fn default_max_videos() -> usize {
    4
}
fn default_max_frames() -> usize {
    2
}
fn default_cell_px() -> usize {
    16
}

#[derive(Serialize)]
struct PcaRecord {
    video_id: String,
    frame_idx: u64,
    person: usize,
    layer: usize,
    labels: Vec<String>,
    coords: Vec<(f64, f64)>,
}

pub fn introspect(args: &CommonArgs) -> Result<()> {
    let (config, resolved) = load_config::<IntrospectCommandConfig>(&args.config)?;
    let mut manifest = RunManifest::new("introspect", args.seed, &args.out, resolved);
    for path in [&args.config, &config.manifests, &config.checkpoint, &config.vocab, &config.classes] {
        manifest.hash_input(path)?;
    }

    let manifests = read_manifests(&config.manifests)?;
    let loaded = load_checkpoint::<f32>(&config.checkpoint, None)?;
    let store = loaded.store;
    let vocab = Vocab::load(&config.vocab)?;
    let classes: Vec<String> = serde_json::from_str(&std::fs::read_to_string(&config.classes)?)?;
    let label_feats = stclip::encoders::class_label_features(
        &classes,
        &store,
        &config.text,
        &vocab,
        config.prompt_ensemble,
    )?
    .detach();
    let mode = config.mode.unwrap_or(ClassifyMode::Single);
    let grid_w = config.image.image_size / config.image.patch_size;

    std::fs::create_dir_all(&args.out)?;
    let mut records = std::fs::File::create(args.out.join("introspect.jsonl"))?;
    let mut pca_file = std::fs::File::create(args.out.join("pca.jsonl"))?;
    use std::io::Write;

    for m in manifests.iter().take(config.max_videos) {
        for fi in 0..m.frames.len().min(config.max_frames_per_video) {
            let Some(clip) = stclip::data::sample_clip(
                m,
                fi,
                config.model.t_frames,
                config.model.stride,
                &config.frames_root,
            )?
            else {
                continue;
            };
            let fwd = model::forward_sample(
                &store,
                &config.image,
                &config.model,
                &clip,
                &label_feats,
                true,
            )?;
            let scores = model::classify(
                &fwd.person_out,
                &fwd.label_out,
                config.model.temperature,
                mode,
            )?;
            let b = clip.boxes.len();
            let n_l = classes.len();
            for layer_trace in &fwd.trace.layers {
                for p in 0..b {
                    let row = &scores.data()[p * n_l..(p + 1) * n_l];
                    let top = row
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .map(|(i, &s)| (i, s))
                        .unwrap();
                    let record = model::IntrospectRecord {
                        video_id: m.video_id.clone(),
                        frame_idx: clip.frame_idx,
                        person: p,
                        layer: layer_trace.layer,
                        interest_indices: layer_trace.interest[p]
                            .iter()
                            .map(|&i| i - b)
                            .collect(),
                        importance_row: layer_trace.importance_rows[p].clone(),
                        top_label: classes[top.0].clone(),
                        score: top.1 as f64,
                    };
                    serde_json::to_writer(&mut records, &record)?;
                    records.write_all(b"\n")?;
                    model::write_importance_pgm(
                        &args.out.join(format!(
                            "pgm/{}_f{}_p{}_l{}.pgm",
                            m.video_id, clip.frame_idx, p, layer_trace.layer
                        )),
                        &layer_trace.importance_rows[p],
                        grid_w,
                        config.cell_px,
                    )?;
                }
                if let Some(features) = &layer_trace.label_features {
                    let coords = model::pca_2d(features)?;
                    let pca_record = PcaRecord {
                        video_id: m.video_id.clone(),
                        frame_idx: clip.frame_idx,
                        person: 0,
                        layer: layer_trace.layer,
                        labels: classes.clone(),
                        coords,
                    };
                    serde_json::to_writer(&mut pca_file, &pca_record)?;
                    pca_file.write_all(b"\n")?;
                }
            }
        }
    }
    manifest.write(&args.out)?;
    println!("introspection artifacts written to {}", args.out.display());
    Ok(())
}
