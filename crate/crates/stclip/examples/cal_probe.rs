//! Calibration probe with a cached pretraining stage.
//! `cal_probe prep <dir>`: synth corpora + 2k-step pretrain, saved to <dir>.
//! `cal_probe arm <dir> <lr> <iters> [rank]`: train + evaluate one arm.
//! `cal_probe frozen <dir>`: evaluate the untrained zero-init pipeline.

use stclip::data::synth::{synth_generate, write_synth_output, SynthConfig};
use stclip::data::{gen_splits, read_manifests, read_split, write_splits, LabelSplit};
use stclip::encoders::*;
use stclip::eval::*;
use stclip::model::{register_model, ClassifyMode};
use stclip::store::{load_checkpoint, save_checkpoint};
use stclip::train::*;
use stclip::RngStream;
use std::path::Path;

fn eval_store(
    store: &stclip::ParamStore,
    cfg: &TrainConfig,
    dir: &Path,
    vocab: &Vocab,
    classes: &[String],
    split: &LabelSplit,
) -> (f64, f64) {
    let icfg = ImageEncoderConfig::default();
    let tcfg = TextEncoderConfig::default();
    let eval_manifests = read_manifests(&dir.join("eval/manifests.jsonl")).unwrap();
    let inputs = InferenceInputs {
        store,
        image_cfg: &icfg,
        text_cfg: &tcfg,
        vocab,
        classes,
        manifests: &eval_manifests,
        frames_root: &dir.join("eval"),
    };
    let mut best = (0.0, 0.0);
    for (label, center) in [("multi@1", false), ("centered", true)] {
        let mut model = cfg.model_config();
        model.temperature = 1.0;
        if center { model.temperature = 0.2; }
        let opts = InferenceOptions {
            model,
            mode: ClassifyMode::Multi,
            soft_vote: false,
            detector_margin: None,
            prompt_ensemble: true,
            center_scores: center,
        };
        let results = infer_detections(&inputs, &opts).unwrap();
        let report = frame_map(&results, &eval_manifests, split, 0.5).unwrap();
        println!("  [{label}] unseen {:.4} seen {:.4} per-class {:?}",
            report.map, report.seen_map.unwrap_or(0.0), report.per_class_ap);
        if report.map > best.0 { best = (report.map, report.seen_map.unwrap_or(0.0)); }
    }
    best
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args[1].as_str();
    let dir = std::path::PathBuf::from(&args[2]);

    match mode {
        "prep" | "prep2" => {
            let (n_pre, n_train, n_eval) = if mode == "prep2" { (160, 96, 48) } else { (96, 72, 36) };
            std::fs::create_dir_all(&dir).unwrap();
            let pre = synth_generate(
                &SynthConfig { num_videos: n_pre, frames_per_video: 8, ..SynthConfig::default() },
                42,
            )
            .unwrap();
            let mut corpus = Vec::new();
            for v in &pre.videos {
                for (c, img) in v.captions.iter().zip(v.caption_images.iter()) {
                    corpus.push(CorpusPair { image: img.clone(), caption: c.caption.clone() });
                }
            }
            let train_out = synth_generate(
                &SynthConfig { num_videos: n_train, frames_per_video: 8, ..SynthConfig::default() },
                43,
            )
            .unwrap();
            write_synth_output(&dir.join("train"), &train_out).unwrap();
            let eval_out = synth_generate(
                &SynthConfig { num_videos: n_eval, frames_per_video: 8, ..SynthConfig::default() },
                44,
            )
            .unwrap();
            write_synth_output(&dir.join("eval"), &eval_out).unwrap();

            let icfg = ImageEncoderConfig::default();
            let tcfg = TextEncoderConfig::default();
            let (store, vocab, _) = contrastive_pretrain(
                &corpus,
                &icfg,
                &tcfg,
                &PretrainConfig { steps: 2000, batch_size: 16, lr: 2e-3, seed: 0, log_every: 500 },
            )
            .unwrap();
            println!(
                "margin {:.3}",
                alignment_margin(&corpus, &store, &icfg, &tcfg, &vocab, 64).unwrap()
            );
            save_checkpoint(&store, &dir.join("pretrained.stck")).unwrap();
            vocab.save(&dir.join("vocab.json")).unwrap();
            let splits = gen_splits(&pre.classes, 4, 0.25, 7).unwrap();
            write_splits(&dir.join("splits.jsonl"), &splits).unwrap();
            std::fs::write(
                dir.join("split1.json"),
                serde_json::to_string(&splits[0]).unwrap(),
            )
            .unwrap();
            std::fs::write(
                dir.join("classes.json"),
                serde_json::to_string(&pre.classes).unwrap(),
            )
            .unwrap();
            println!("prep done: {}", dir.display());
        }
        "arm" => {
            let lr: f64 = args[3].parse().unwrap();
            let iters: usize = args[4].parse().unwrap();
            let rank: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(8);
            let loss_temp: f64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(0.01);
            let stride: usize = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(1);
            let store = load_checkpoint::<f32>(&dir.join("pretrained.stck"), None).unwrap().store;
            let vocab = Vocab::load(&dir.join("vocab.json")).unwrap();
            let classes: Vec<String> =
                serde_json::from_str(&std::fs::read_to_string(dir.join("classes.json")).unwrap())
                    .unwrap();
            let split = read_split(&dir.join("split1.json")).unwrap();
            let manifests = read_manifests(&dir.join("train/manifests.jsonl")).unwrap();
            let cfg = TrainConfig {
                iterations: iters,
                warmup_iters: (iters / 4).max(1),
                base_lr: lr,
                lora_rank: rank,
                loss_temperature: loss_temp,
                stride,
                ..TrainConfig::desk_default()
            };
            let icfg = ImageEncoderConfig::default();
            let tcfg = TextEncoderConfig::default();
            let t0 = std::time::Instant::now();
            let (trained, metrics) = train_detection(
                store,
                &TrainInputs {
                    manifests: &manifests,
                    frames_root: &dir.join("train"),
                    split: &split,
                    vocab: &vocab,
                    image_cfg: &icfg,
                    text_cfg: &tcfg,
                },
                &cfg,
                5,
                None,
            )
            .unwrap();
            let (unseen, seen) = eval_store(&trained, &cfg, &dir, &vocab, &classes, &split);
            println!(
                "arm lr={lr} iters={iters} rank={rank}: unseen {unseen:.4} seen {seen:.4} loss {:.2}->{:.2} [{:.0}s]",
                metrics.first().unwrap().loss,
                metrics.last().unwrap().loss,
                t0.elapsed().as_secs_f64()
            );
        }
        "frozen" => {
            let mut store = load_checkpoint::<f32>(&dir.join("pretrained.stck"), None)
                .unwrap()
                .store;
            let vocab = Vocab::load(&dir.join("vocab.json")).unwrap();
            let classes: Vec<String> =
                serde_json::from_str(&std::fs::read_to_string(dir.join("classes.json")).unwrap())
                    .unwrap();
            let split = read_split(&dir.join("split1.json")).unwrap();
            let cfg = TrainConfig::desk_default();
            let icfg = ImageEncoderConfig::default();
            let stream = RngStream::new(5, 0);
            register_image_lora(&mut store, &stream.derive(1), &icfg, cfg.lora_rank).unwrap();
            register_model(&mut store, &stream.derive(2), &icfg, &cfg.model_config()).unwrap();
            let (unseen, seen) = eval_store(&store, &cfg, &dir, &vocab, &classes, &split);
            println!("frozen zero-init: unseen {unseen:.4} seen {seen:.4}");
        }
        other => panic!("unknown mode {other}"),
    }
}
