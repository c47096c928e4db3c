//! Small-scale wiring tests over the training and inference drivers.

mod common;

use stclip::data::synth::{synth_generate, write_synth_output, SynthConfig};
use stclip::data::LabelSplit;
use stclip::encoders::{register_encoders, ImageEncoderConfig, TextEncoderConfig, Vocab};
use stclip::eval::{infer_detections, InferenceInputs, InferenceOptions};
use stclip::model::{ClassifyMode, ModelToggles};
use stclip::store::ParamStore;
use stclip::train::{train_detection, FreezeMask, TrainConfig, TrainInputs};
use stclip::RngStream;

fn tiny_setup(
    dir: &std::path::Path,
) -> (
    ParamStore<f32>,
    Vocab,
    ImageEncoderConfig,
    TextEncoderConfig,
    Vec<stclip::data::VideoManifest>,
    Vec<String>,
) {
    let classes = vec![
        "move-right".to_string(),
        "move-left".to_string(),
        "bounce".to_string(),
        "flash".to_string(),
    ];
    let out = synth_generate(
        &SynthConfig {
            num_videos: 8,
            frames_per_video: 4,
            classes: classes.clone(),
            ..SynthConfig::default()
        },
        13,
    )
    .unwrap();
    write_synth_output(dir, &out).unwrap();
    let manifests = out.videos.iter().map(|v| v.manifest.clone()).collect();

    let icfg = ImageEncoderConfig {
        image_size: 32,
        patch_size: 8,
        width: 32,
        layers: 2,
        heads: 4,
        joint_dim: 32,
    };
    let tcfg = TextEncoderConfig {
        context_len: 16,
        width: 32,
        layers: 1,
        heads: 4,
        joint_dim: 32,
    };
    let captions: Vec<String> = out
        .videos
        .iter()
        .flat_map(|v| v.captions.iter().map(|c| c.caption.clone()))
        .collect();
    let vocab = Vocab::build(captions.iter());
    let mut store = ParamStore::new();
    register_encoders(&mut store, &RngStream::new(3, 0), &icfg, &tcfg, &vocab).unwrap();
    store.apply_freeze(|_| true);
    (store, vocab, icfg, tcfg, manifests, classes)
}

fn tiny_train_cfg() -> TrainConfig {
    TrainConfig {
        iterations: 2,
        batch_size: 2,
        base_lr: 1e-4,
        warmup_iters: 1,
        warmup_factor: 0.25,
        mode: ClassifyMode::Single,
        k_interest: 100,
        lora_rank: 2,
        t_frames: 2,
        stride: 1,
        toggles: ModelToggles::default(),
        prompt_ensemble: true,
        checkpoint_every: 0,
        momentum: 0.0,
    }
}

#[test]
fn training_freezes_encoders_and_is_seed_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (store, vocab, icfg, tcfg, manifests, classes) = tiny_setup(dir.path());
    let split = LabelSplit {
        split_id: "t".into(),
        seen: classes[..3].to_vec(),
        unseen: classes[3..].to_vec(),
    };
    let inputs = TrainInputs {
        manifests: &manifests,
        frames_root: dir.path(),
        split: &split,
        vocab: &vocab,
        image_cfg: &icfg,
        text_cfg: &tcfg,
    };
    let cfg = tiny_train_cfg();
    let before = store.checksums();
    let (trained_a, metrics) = train_detection(store.clone(), &inputs, &cfg, 9, None).unwrap();
    let (trained_b, _) = train_detection(store.clone(), &inputs, &cfg, 9, None).unwrap();

    assert_eq!(metrics.len(), 2);
    let after = trained_a.checksums();
    for (name, crc) in &before {
        if FreezeMask::frozen(name) {
            assert_eq!(after.get(name), Some(crc), "frozen '{name}' changed");
        }
    }
    // Trainable additions were registered.
    assert!(trained_a.contains("image.layer0.ffn.lora_a1"));
    assert!(trained_a.contains("prompt.layer0.rho"));

    // Identical seeds give byte-identical results.
    for (name, tensor, _) in trained_a.iter() {
        assert!(
            tensor.bit_eq(&trained_b.get(name).unwrap()),
            "'{name}' differs between identically seeded runs"
        );
    }

    // A different seed produces a different trajectory.
    let (trained_c, _) = train_detection(store, &inputs, &cfg, 10, None).unwrap();
    let any_diff = trained_a
        .iter()
        .any(|(name, t, _)| !t.bit_eq(&trained_c.get(name).unwrap()));
    assert!(any_diff, "different seeds should differ somewhere");
}

#[test]
fn training_without_seen_samples_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let (store, vocab, icfg, tcfg, manifests, _) = tiny_setup(dir.path());
    let split = LabelSplit {
        split_id: "t".into(),
        seen: vec!["grow".into()], // tokenizes, but never generated
        unseen: vec![],
    };
    let inputs = TrainInputs {
        manifests: &manifests,
        frames_root: dir.path(),
        split: &split,
        vocab: &vocab,
        image_cfg: &icfg,
        text_cfg: &tcfg,
    };
    let err = train_detection(store, &inputs, &tiny_train_cfg(), 1, None)
        .map(|_| ())
        .unwrap_err();
    assert!(matches!(err, stclip::Error::Config(_)));
}

#[test]
fn soft_vote_inference_assigns_one_class_per_video() {
    let dir = tempfile::tempdir().unwrap();
    let (store, vocab, icfg, tcfg, manifests, classes) = tiny_setup(dir.path());
    let split = LabelSplit {
        split_id: "t".into(),
        seen: classes[..3].to_vec(),
        unseen: classes[3..].to_vec(),
    };
    let inputs = TrainInputs {
        manifests: &manifests,
        frames_root: dir.path(),
        split: &split,
        vocab: &vocab,
        image_cfg: &icfg,
        text_cfg: &tcfg,
    };
    let cfg = tiny_train_cfg();
    let (trained, _) = train_detection(store, &inputs, &cfg, 9, None).unwrap();

    let infer_inputs = InferenceInputs {
        store: &trained,
        image_cfg: &icfg,
        text_cfg: &tcfg,
        vocab: &vocab,
        classes: &classes,
        manifests: &manifests,
        frames_root: dir.path(),
    };
    let mut model = cfg.model_config();
    model.temperature = 1.0;
    let opts = InferenceOptions {
        model,
        mode: ClassifyMode::Single,
        soft_vote: true,
        detector_margin: None,
        prompt_ensemble: true,
    };
    let results = infer_detections(&infer_inputs, &opts).unwrap();
    assert!(!results.is_empty());
    let mut per_video: std::collections::BTreeMap<&str, Vec<&stclip::eval::DetectionResult>> =
        Default::default();
    for r in &results {
        per_video.entry(&r.video_id).or_default().push(r);
    }
    for (video, dets) in per_video {
        let class = &dets[0].class;
        let score = dets[0].score;
        assert!(
            dets.iter().all(|d| &d.class == class && d.score == score),
            "video {video} mixes classes under soft voting"
        );
    }
}
