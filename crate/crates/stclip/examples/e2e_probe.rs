//! End-to-end probe: pretrain -> split -> detection train -> zero-shot eval.
//! Usage: e2e_probe <pretrain_steps> <train_iters>

use stclip::data::synth::{synth_generate, write_synth_output, SynthConfig};
use stclip::data::{gen_splits, read_manifests};
use stclip::encoders::*;
use stclip::eval::*;
use stclip::model::ClassifyMode;
use stclip::train::*;
use stclip::RngStream;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let pretrain_steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(2000);
    let train_iters: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(300);
    let train_lr: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(2.5e-4);
    let t_total = std::time::Instant::now();

    let dir = tempfile::tempdir().unwrap();

    // Corpora.
    let pretrain_cfg = SynthConfig { num_videos: 96, frames_per_video: 8, ..SynthConfig::default() };
    let pre = synth_generate(&pretrain_cfg, 42).unwrap();
    let mut corpus = Vec::new();
    for v in &pre.videos {
        for (c, img) in v.captions.iter().zip(v.caption_images.iter()) {
            corpus.push(CorpusPair { image: img.clone(), caption: c.caption.clone() });
        }
    }
    let train_cfg_synth = SynthConfig { num_videos: 72, frames_per_video: 8, ..SynthConfig::default() };
    let train_out = synth_generate(&train_cfg_synth, 43).unwrap();
    write_synth_output(&dir.path().join("train"), &train_out).unwrap();
    let eval_cfg_synth = SynthConfig { num_videos: 36, frames_per_video: 8, ..SynthConfig::default() };
    let eval_out = synth_generate(&eval_cfg_synth, 44).unwrap();
    write_synth_output(&dir.path().join("eval"), &eval_out).unwrap();
    println!("[{:.1}s] corpora ready ({} caption pairs)", t_total.elapsed().as_secs_f64(), corpus.len());

    // Pretrain.
    let icfg = ImageEncoderConfig::default();
    let tcfg = TextEncoderConfig::default();
    let hyper = PretrainConfig { steps: pretrain_steps, batch_size: 16, lr: 2e-3, seed: 0, log_every: 200 };
    let t0 = std::time::Instant::now();
    let (store, vocab, log) = contrastive_pretrain(&corpus, &icfg, &tcfg, &hyper).unwrap();
    println!("[{:.1}s] pretrain {} steps in {:.1}s, last loss {:.3}",
        t_total.elapsed().as_secs_f64(), pretrain_steps, t0.elapsed().as_secs_f64(), log.last().unwrap().loss);
    let margin = alignment_margin(&corpus, &store, &icfg, &tcfg, &vocab, 64).unwrap();
    println!("margin: {margin:.4}");

    // Split: 12 classes, 0.25 -> 3 unseen.
    let classes = pre.classes.clone();
    let split = gen_splits(&classes, 4, 0.25, 7).unwrap().remove(0);
    println!("unseen: {:?}", split.unseen);

    // Detection training.
    let manifests = read_manifests(&dir.path().join("train/manifests.jsonl")).unwrap();
    let cfg = TrainConfig { iterations: train_iters, warmup_iters: (train_iters / 4).max(1), base_lr: train_lr, ..TrainConfig::desk_default() };
    let inputs = TrainInputs {
        manifests: &manifests,
        frames_root: &dir.path().join("train"),
        split: &split,
        vocab: &vocab,
        image_cfg: &icfg,
        text_cfg: &tcfg,
    };
    let t0 = std::time::Instant::now();
    let (trained, metrics) = train_detection(store, &inputs, &cfg, 5, None).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!("[{:.1}s] train {} iters in {:.1}s ({:.3} s/iter); loss {:.4} -> {:.4}",
        t_total.elapsed().as_secs_f64(), train_iters, dt, dt / train_iters as f64,
        metrics.first().unwrap().loss, metrics.last().unwrap().loss);
    let early: f64 = metrics.iter().take(10).map(|m| m.loss).sum::<f64>() / 10.0;
    let late: f64 = metrics.iter().rev().take(10).map(|m| m.loss).sum::<f64>() / 10.0;
    println!("loss mean first10 {:.4} last10 {:.4} (ratio {:.3})", early, late, late / early);

    // Zero-shot eval on fresh videos with GT boxes.
    let eval_manifests = read_manifests(&dir.path().join("eval/manifests.jsonl")).unwrap();
    let infer_inputs = InferenceInputs {
        store: &trained,
        image_cfg: &icfg,
        text_cfg: &tcfg,
        vocab: &vocab,
        classes: &classes,
        manifests: &eval_manifests,
        frames_root: &dir.path().join("eval"),
    };
    let t0 = std::time::Instant::now();
    let mut report = None;
    for mode in [ClassifyMode::Multi, ClassifyMode::Single] {
        let opts = InferenceOptions {
            model: cfg.model_config(),
            mode,
            soft_vote: false,
            detector_margin: None,
            prompt_ensemble: true,
        };
        let results = infer_detections(&infer_inputs, &opts).unwrap();
        let r = frame_map(&results, &eval_manifests, &split, 0.5).unwrap();
        println!("[{:.1}s] eval ({mode:?}): unseen mAP {:.4}, per-class {:?}",
            t_total.elapsed().as_secs_f64(), r.map, r.per_class_ap);
        println!("  seen mAP {:?} per-class {:?}", r.seen_map, r.seen_per_class_ap);
        if report.is_none() { report = Some(r); }
    }
    let report = report.unwrap();
    let _ = t0;

    // Random baseline: uniform scores on GT boxes, averaged over 20 seeds.
    let mut baseline_sum = 0.0;
    for seed in 0..20u64 {
        let mut draws = RngStream::new(1000 + seed, 0).draws();
        let mut rand_results = Vec::new();
        for m in &eval_manifests {
            for f in &m.frames {
                for p in &f.persons {
                    for class in &classes {
                        rand_results.push(DetectionResult {
                            video_id: m.video_id.clone(),
                            frame_idx: f.frame_idx,
                            bbox: p.bbox,
                            class: class.clone(),
                            score: draws.unit_f64(),
                        });
                    }
                }
            }
        }
        baseline_sum += frame_map(&rand_results, &eval_manifests, &split, 0.5).unwrap().map;
    }
    let baseline = baseline_sum / 20.0;
    println!("random baseline mAP: {:.4}; model/baseline ratio: {:.2}", baseline, report.map / baseline);
    println!("TOTAL {:.1}s", t_total.elapsed().as_secs_f64());
}
