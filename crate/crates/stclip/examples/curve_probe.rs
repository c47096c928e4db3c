//! Transfer-vs-iterations curve: train once with periodic checkpoints, then
//! evaluate unseen mAP at every checkpoint.
//! Usage: curve_probe <pretrain_steps> <train_iters> <ckpt_every> <lr>

use stclip::data::synth::{synth_generate, write_synth_output, SynthConfig};
use stclip::data::{gen_splits, read_manifests};
use stclip::encoders::*;
use stclip::eval::*;
use stclip::model::ClassifyMode;
use stclip::store::load_checkpoint;
use stclip::train::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let pretrain_steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(600);
    let train_iters: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(300);
    let every: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(50);
    let lr: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(2.5e-4);

    let dir = tempfile::tempdir().unwrap();
    let pre = synth_generate(&SynthConfig { num_videos: 96, frames_per_video: 8, ..SynthConfig::default() }, 42).unwrap();
    let mut corpus = Vec::new();
    for v in &pre.videos {
        for (c, img) in v.captions.iter().zip(v.caption_images.iter()) {
            corpus.push(CorpusPair { image: img.clone(), caption: c.caption.clone() });
        }
    }
    let train_out = synth_generate(&SynthConfig { num_videos: 72, frames_per_video: 8, ..SynthConfig::default() }, 43).unwrap();
    write_synth_output(&dir.path().join("train"), &train_out).unwrap();
    let eval_out = synth_generate(&SynthConfig { num_videos: 36, frames_per_video: 8, ..SynthConfig::default() }, 44).unwrap();
    write_synth_output(&dir.path().join("eval"), &eval_out).unwrap();

    let icfg = ImageEncoderConfig::default();
    let tcfg = TextEncoderConfig::default();
    let (store, vocab, _) = contrastive_pretrain(
        &corpus, &icfg, &tcfg,
        &PretrainConfig { steps: pretrain_steps, batch_size: 16, lr: 2e-3, seed: 0, log_every: 500 },
    ).unwrap();
    println!("pretrained {pretrain_steps} steps; margin {:.3}",
        alignment_margin(&corpus, &store, &icfg, &tcfg, &vocab, 64).unwrap());

    let classes = pre.classes.clone();
    let split = gen_splits(&classes, 4, 0.25, 7).unwrap().remove(0);
    let manifests = read_manifests(&dir.path().join("train/manifests.jsonl")).unwrap();
    let eval_manifests = read_manifests(&dir.path().join("eval/manifests.jsonl")).unwrap();

    let cfg = TrainConfig {
        iterations: train_iters,
        warmup_iters: 80.min(train_iters / 2),
        base_lr: lr,
        checkpoint_every: every,
        ..TrainConfig::desk_default()
    };
    let ckpt_dir = dir.path().join("ckpts");
    let (_trained, metrics) = train_detection(
        store,
        &TrainInputs {
            manifests: &manifests,
            frames_root: &dir.path().join("train"),
            split: &split,
            vocab: &vocab,
            image_cfg: &icfg,
            text_cfg: &tcfg,
        },
        &cfg,
        5,
        Some(&ckpt_dir),
    ).unwrap();

    // Random baseline.
    let mut baseline = 0.0;
    for seed in 0..20u64 {
        let mut draws = stclip::RngStream::new(1000 + seed, 0).draws();
        let mut rand_results = Vec::new();
        for m in &eval_manifests {
            for f in &m.frames {
                for p in &f.persons {
                    for class in &classes {
                        rand_results.push(DetectionResult {
                            video_id: m.video_id.clone(), frame_idx: f.frame_idx,
                            bbox: p.bbox, class: class.clone(), score: draws.unit_f64(),
                        });
                    }
                }
            }
        }
        baseline += frame_map(&rand_results, &eval_manifests, &split, 0.5).unwrap().map;
    }
    baseline /= 20.0;
    println!("random baseline: {baseline:.4}");

    let mut entries: Vec<_> = std::fs::read_dir(&ckpt_dir).unwrap().map(|e| e.unwrap().path()).collect();
    entries.sort();
    for path in entries {
        let loaded = load_checkpoint::<f32>(&path, None).unwrap();
        let inputs = InferenceInputs {
            store: &loaded.store, image_cfg: &icfg, text_cfg: &tcfg, vocab: &vocab,
            classes: &classes, manifests: &eval_manifests, frames_root: &dir.path().join("eval"),
        };
        for (mode, temp) in [
            (ClassifyMode::Single, 1.0),
            (ClassifyMode::Single, 0.3),
            (ClassifyMode::Single, 0.1),
            (ClassifyMode::Multi, 1.0),
        ] {
            let mut model = cfg.model_config();
            model.temperature = temp;
            let opts = InferenceOptions {
                model, mode, soft_vote: false,
                detector_margin: None, prompt_ensemble: true,
            };
            let results = infer_detections(&inputs, &opts).unwrap();
            let report = frame_map(&results, &eval_manifests, &split, 0.5).unwrap();
            println!("{} {mode:?}@{temp}: unseen {:.4} ({:.2}x) seen {:.4}",
                path.file_name().unwrap().to_string_lossy(), report.map, report.map / baseline,
                report.seen_map.unwrap_or(0.0));
        }
    }
    let lossf = metrics.first().unwrap().loss;
    let lossl = metrics.last().unwrap().loss;
    println!("loss {lossf:.3} -> {lossl:.3}");
}
