//! Quick probe: pretraining throughput and alignment margin.
//! Usage: pretrain_probe <steps> [batch] [lr]

use stclip::data::synth::{synth_generate, SynthConfig};
use stclip::encoders::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(100);
    let batch: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(16);
    let lr: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(2e-3);

    let config = SynthConfig {
        num_videos: 96,
        frames_per_video: 8,
        ..SynthConfig::default()
    };
    let out = synth_generate(&config, 42).unwrap();
    let mut corpus = Vec::new();
    for v in &out.videos {
        for (c, img) in v.captions.iter().zip(v.caption_images.iter()) {
            corpus.push(CorpusPair { image: img.clone(), caption: c.caption.clone() });
        }
    }
    println!("corpus: {} pairs", corpus.len());

    let icfg = ImageEncoderConfig::default();
    let tcfg = TextEncoderConfig::default();
    let hyper = PretrainConfig { steps, batch_size: batch, lr, seed: 0, log_every: (steps / 10).max(1) };

    let t0 = std::time::Instant::now();
    let (store, vocab, log) = contrastive_pretrain(&corpus, &icfg, &tcfg, &hyper).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!("steps {} in {:.1}s ({:.3} s/step)", steps, dt, dt / steps as f64);
    for e in &log {
        println!("  step {:4}  loss {:.4}", e.step, e.loss);
    }
    let margin = alignment_margin(&corpus, &store, &icfg, &tcfg, &vocab, 64).unwrap();
    println!("alignment margin (64 pairs): {:.4}", margin);

    // Also: class-name retrieval accuracy from person crops is the real signal.
    let classes: Vec<String> = out.classes.clone();
    let txt = encode_text(&classes, &store, &tcfg, &vocab).unwrap();
    let mut correct = 0usize;
    let mut total = 0usize;
    for v in out.videos.iter().take(48) {
        let frame = &v.frames[4];
        let label = &v.manifest.frames[4].persons[0].labels[0];
        let (_, proj) = encode_image(&frame.to_tensor().unwrap(), &store, &icfg).unwrap();
        let sims = proj.as_row().unwrap().matmul(&txt.transpose().unwrap()).unwrap();
        let arg = sims
            .data()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        if &classes[arg] == label {
            correct += 1;
        }
        total += 1;
    }
    println!("frame->class retrieval: {}/{}", correct, total);
}
