//! Implementation-vs-oracle comparisons: attention, temporal fusion, LoRA
//! dense merge, the single-layer interaction stack, and the PR computation.

mod common;

use common::{
    brute_force_ap, full_sort_topk, max_abs_diff_tensor, naive_attention, naive_ffn,
    naive_layer_norm, naive_lora_ffn_dense_merge, naive_temporal, random_instance, Mat, NaiveFfn,
    NaiveMhsa, OracleDet, OracleGt,
};
use stclip::data::LabelSplit;
use stclip::encoders::{register_encoders, ImageEncoderConfig, TextEncoderConfig, Vocab};
use stclip::eval::{average_precision, frame_map, ClassDetection, ClassGroundTruth, DetectionResult};
use stclip::model::{
    self, interaction_forward_traced, register_model, ContextTokens, ModelConfig, ModelToggles,
    PersonTokens, PromptMode,
};
use stclip::nn;
use stclip::store::ParamStore;
use stclip::tensor::Tensor;
use stclip::RngStream;

type T = Tensor<f32>;

fn randn(shape: Vec<usize>, seed: u64, std: f64) -> T {
    let mut d = RngStream::new(seed, 100).draws();
    T::randn(shape, &mut d, std).unwrap()
}

#[test]
fn mhsa_matches_naive_oracle_within_1e5() {
    for seed in 0..10u64 {
        let dim = 16;
        let heads = [1, 2, 4][(seed % 3) as usize];
        let tokens = 1 + (seed % 7) as usize;
        let mut store = ParamStore::<f32>::new();
        nn::register_mhsa(&mut store, &RngStream::new(seed, 1), "attn", dim, heads, false)
            .unwrap();
        let p = nn::mhsa_from_store(&store, "attn", heads).unwrap();
        let x = randn(vec![tokens, dim], seed + 50, 1.0);
        let (y, m) = nn::mhsa_forward(&x, &p).unwrap();
        let (y_ref, m_ref) = naive_attention(&Mat::from_tensor(&x), &Mat::from_tensor(&x),
            &NaiveMhsa::from_params(&p));
        assert!(max_abs_diff_tensor(&y, &y_ref) < 1e-5, "seed {seed}");
        assert!(max_abs_diff_tensor(&m.values, &m_ref) < 1e-5, "seed {seed}");
    }
}

#[test]
fn cross_attention_matches_naive_oracle_within_1e5() {
    for seed in 0..10u64 {
        let dim = 16;
        let heads = 2;
        let nq = 1 + (seed % 6) as usize;
        let nk = 1 + ((seed * 7 + 1) % 3) as usize;
        let mut store = ParamStore::<f32>::new();
        nn::register_mhsa(&mut store, &RngStream::new(seed, 2), "attn", dim, heads, false)
            .unwrap();
        let p = nn::mhsa_from_store(&store, "attn", heads).unwrap();
        let q = randn(vec![nq, dim], seed + 60, 1.0);
        let kv = randn(vec![nk, dim], seed + 70, 1.0);
        let y = nn::cross_attention(&q, &kv, &p).unwrap();
        let (y_ref, _) = naive_attention(
            &Mat::from_tensor(&q),
            &Mat::from_tensor(&kv),
            &NaiveMhsa::from_params(&p),
        );
        assert!(max_abs_diff_tensor(&y, &y_ref) < 1e-5, "seed {seed}");
    }
}

#[test]
fn cross_attention_is_invariant_to_key_value_permutation() {
    let dim = 16;
    let mut store = ParamStore::<f32>::new();
    nn::register_mhsa(&mut store, &RngStream::new(3, 3), "attn", dim, 4, false).unwrap();
    let p = nn::mhsa_from_store(&store, "attn", 4).unwrap();
    let q = randn(vec![5, dim], 80, 1.0);
    let kv = randn(vec![4, dim], 81, 1.0);
    let base = nn::cross_attention(&q, &kv, &p).unwrap();
    let permuted_kv = kv.select_rows(&[2, 0, 3, 1]).unwrap();
    let permuted = nn::cross_attention(&q, &permuted_kv, &p).unwrap();
    for (a, b) in base.data().iter().zip(permuted.data().iter()) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn temporal_model_matches_per_position_oracle() {
    // T=3 frames, N=2 positions, random weights.
    let dim = 16;
    let heads = 2;
    let icfg = ImageEncoderConfig {
        image_size: 16,
        patch_size: 8,
        width: dim,
        layers: 1,
        heads,
        joint_dim: dim,
    };
    let mcfg = ModelConfig {
        t_frames: 3,
        prompt_heads: 2,
        ..ModelConfig::default()
    };
    let mut store = ParamStore::<f32>::new();
    let vocab = Vocab::build(["x"]);
    register_encoders(
        &mut store,
        &RngStream::new(4, 0),
        &icfg,
        &TextEncoderConfig {
            width: dim,
            layers: 1,
            heads,
            joint_dim: dim,
            context_len: 8,
        },
        &vocab,
    )
    .unwrap();
    register_model(&mut store, &RngStream::new(5, 0), &icfg, &mcfg).unwrap();
    // Randomize the zero-initialized output projection so the oracle test
    // exercises a nontrivial attention path.
    let mut d = RngStream::new(6, 0).draws();
    store
        .set("temporal.attn.w_o", T::randn(vec![dim, dim], &mut d, 0.3).unwrap())
        .unwrap();

    let frames: Vec<T> = (0..3).map(|i| randn(vec![2, dim], 90 + i, 1.0)).collect();
    let ctx = model::temporal_model(&frames, &store, heads).unwrap();

    let attn = NaiveMhsa::from_params(&nn::mhsa_from_store(&store, "temporal.attn", heads).unwrap());
    let ln = nn::ln_from_store(&store, "temporal.ln").unwrap();
    let gamma: Vec<f64> = ln.gamma.data().iter().map(|&v| v as f64).collect();
    let beta: Vec<f64> = ln.beta.data().iter().map(|&v| v as f64).collect();
    let frames_ref: Vec<Mat> = frames.iter().map(Mat::from_tensor).collect();
    let e_temp = Mat::from_tensor(&store.get("temporal.e_temp").unwrap());
    let expect = naive_temporal(&frames_ref, &e_temp, &gamma, &beta, &attn, nn::LN_EPS);
    assert!(max_abs_diff_tensor(&ctx.tokens, &expect) < 1e-5);
}

#[test]
fn lora_ffn_matches_dense_merge_oracle() {
    for seed in 0..5u64 {
        let stream = RngStream::new(seed, 9);
        let mut store = ParamStore::<f32>::new();
        nn::register_ffn(&mut store, &stream, "ffn", 8, 32, false).unwrap();
        nn::register_lora(&mut store, &stream, "ffn", 8, 32, 4).unwrap();
        // Random factors, including the normally-zero B side.
        let mut d = RngStream::new(seed, 10).draws();
        store.set("ffn.lora_b1", T::randn(vec![4, 32], &mut d, 0.3).unwrap()).unwrap();
        store.set("ffn.lora_b2", T::randn(vec![4, 8], &mut d, 0.3).unwrap()).unwrap();
        let p = nn::lora_ffn_from_store(&store, "ffn").unwrap();
        let x = randn(vec![3, 8], seed + 40, 1.0);
        let y = nn::lora_ffn_forward(&x, &p).unwrap();
        let expect = naive_lora_ffn_dense_merge(&Mat::from_tensor(&x), &p);
        assert!(max_abs_diff_tensor(&y, &expect) < 1e-5, "seed {seed}");
    }
}

/// Hand-rolled single layer of the interaction stack: one encoder layer with
/// LoRA, interest selection from the head-averaged map, projection, one
/// prompting step, final projection and normalization.
#[test]
fn interaction_single_layer_matches_hand_rolled_oracle() {
    let dim = 8;
    let heads = 2;
    let icfg = ImageEncoderConfig {
        image_size: 16,
        patch_size: 8,
        width: dim,
        layers: 1,
        heads,
        joint_dim: dim,
    };
    let mcfg = ModelConfig {
        t_frames: 2,
        k_interest: 2,
        prompt_heads: 2,
        toggles: ModelToggles {
            its: true,
            ..ModelToggles::default()
        },
        ..ModelConfig::default()
    };
    let tcfg = TextEncoderConfig {
        width: dim,
        layers: 1,
        heads,
        joint_dim: dim,
        context_len: 8,
    };
    let stream = RngStream::new(7, 0);
    let mut store = ParamStore::<f32>::new();
    register_encoders(&mut store, &stream, &icfg, &tcfg, &Vocab::build(["x"])).unwrap();
    stclip::encoders::register_image_lora(&mut store, &stream.derive(1), &icfg, 2).unwrap();
    register_model(&mut store, &stream.derive(2), &icfg, &mcfg).unwrap();
    // Randomize everything that is zero at init so the oracle sees the full
    // computation: LoRA B sides, person slot, rho.
    let mut d = RngStream::new(8, 0).draws();
    store.set("image.layer0.ffn.lora_b1", T::randn(vec![2, 4 * dim], &mut d, 0.3).unwrap()).unwrap();
    store.set("image.layer0.ffn.lora_b2", T::randn(vec![2, dim], &mut d, 0.3).unwrap()).unwrap();
    store.set("person_slot", T::randn(vec![dim], &mut d, 0.5).unwrap()).unwrap();
    store.set("prompt.layer0.rho", T::randn(vec![dim], &mut d, 0.5).unwrap()).unwrap();

    let person = randn(vec![1, dim], 11, 1.0);
    let ctx_tokens = randn(vec![4, dim], 12, 1.0);
    let labels = randn(vec![3, dim], 13, 1.0).l2_normalize_rows().unwrap();

    let persons = PersonTokens { tokens: person.clone() };
    let ctx = ContextTokens { tokens: ctx_tokens.clone(), frame_count: 2 };
    let (person_out, label_out, trace) = interaction_forward_traced(
        &store, &icfg, &mcfg, &persons, &ctx, &labels, PromptMode::PerPerson, true,
    )
    .unwrap();

    // Oracle.
    let slot: Vec<f64> = store.get("person_slot").unwrap().data().iter().map(|&v| v as f64).collect();
    let mut seq = Mat::zeros(5, dim);
    for c in 0..dim {
        seq.set(0, c, person.data()[c] as f64 + slot[c]);
        for r in 0..4 {
            seq.set(r + 1, c, ctx_tokens.data()[r * dim + c] as f64);
        }
    }
    let ln1 = nn::ln_from_store(&store, "image.layer0.ln1").unwrap();
    let g1: Vec<f64> = ln1.gamma.data().iter().map(|&v| v as f64).collect();
    let b1: Vec<f64> = ln1.beta.data().iter().map(|&v| v as f64).collect();
    let attn = NaiveMhsa::from_params(
        &nn::mhsa_from_store(&store, "image.layer0.attn", heads).unwrap(),
    );
    let normed = naive_layer_norm(&seq, &g1, &b1, nn::LN_EPS);
    let (attn_out, importance) = naive_attention(&normed, &normed, &attn);
    let seq = seq.add(&attn_out);
    let ln2 = nn::ln_from_store(&store, "image.layer0.ln2").unwrap();
    let g2: Vec<f64> = ln2.gamma.data().iter().map(|&v| v as f64).collect();
    let b2: Vec<f64> = ln2.beta.data().iter().map(|&v| v as f64).collect();
    let lora = nn::lora_ffn_from_store(&store, "image.layer0.ffn").unwrap();
    let ffn_out = naive_lora_ffn_dense_merge(&naive_layer_norm(&seq, &g2, &b2, nn::LN_EPS), &lora);
    let seq = seq.add(&ffn_out);

    // Interest: top-2 of person row over context columns 1..5.
    let interest_rel = full_sort_topk(&importance.row(0)[1..5], 2);
    let interest_abs: Vec<usize> = interest_rel.iter().map(|&i| i + 1).collect();
    assert_eq!(trace.layers[0].interest[0], interest_abs);

    // Prompting.
    let proj_w = Mat::from_tensor(&store.get("prompt.projector.weight").unwrap());
    let proj_b: Vec<f64> = store.get("prompt.projector.bias").unwrap().data().iter().map(|&v| v as f64).collect();
    let mut f_i = Mat::zeros(interest_abs.len(), dim);
    for (r, &row) in interest_abs.iter().enumerate() {
        for c in 0..dim {
            f_i.set(r, c, seq.get(row, c));
        }
    }
    let f_i = f_i.matmul(&proj_w).add_bias(&proj_b);
    let f_t = Mat::from_tensor(&labels);
    let prompt = model::prompt_layer_from_store(&store, 0, 2).unwrap();
    let ca = NaiveMhsa::from_params(&prompt.ca);
    let (ca_out, _) = naive_attention(&f_t, &f_i, &ca);
    let fbar = f_t.add(&ca_out);
    let fhat = fbar.add(&naive_ffn(&fbar, &NaiveFfn::from_params(&prompt.ffn)));
    let rho: Vec<f64> = prompt.rho.data().iter().map(|&v| v as f64).collect();
    let mut f_out = f_t.clone();
    for r in 0..3 {
        for c in 0..dim {
            f_out.set(r, c, f_t.get(r, c) + rho[c] * fhat.get(r, c));
        }
    }
    // Normalize rows.
    for r in 0..3 {
        let norm: f64 = f_out.row(r).iter().map(|&v| v * v).sum::<f64>().sqrt();
        for c in 0..dim {
            f_out.set(r, c, f_out.get(r, c) / norm);
        }
    }

    // Person projection.
    let proj = Mat::from_tensor(&store.get("image.proj").unwrap());
    let mut person_row = Mat::zeros(1, dim);
    for c in 0..dim {
        person_row.set(0, c, seq.get(0, c));
    }
    let projected = person_row.matmul(&proj);
    let norm: f64 = projected.row(0).iter().map(|&v| v * v).sum::<f64>().sqrt();
    let expected_person = Mat {
        rows: 1,
        cols: dim,
        data: projected.data.iter().map(|&v| v / norm).collect(),
    };

    assert!(max_abs_diff_tensor(&person_out, &expected_person) < 1e-5);
    match label_out {
        stclip::model::LabelFeatures::PerPerson(blocks) => {
            assert!(max_abs_diff_tensor(&blocks[0], &f_out) < 1e-5);
        }
        _ => panic!("expected per-person labels"),
    }
}

#[test]
fn spot_matches_full_sort_oracle_on_random_rows() {
    let mut draws = RngStream::new(21, 0).draws();
    for case in 0..200 {
        let n = 2 + draws.below(14);
        let k = 1 + draws.below(n + 2);
        // Quantized scores force frequent ties.
        let scores: Vec<f32> = (0..n)
            .map(|_| (draws.below(5) as f32) / 5.0)
            .collect();
        let m = stclip::nn::ImportanceMatrix {
            values: T::from_vec(vec![1, n], scores.clone()).unwrap(),
        };
        let got = model::spot_interest_tokens(&m, 0, 0..n, k).unwrap();
        let scores64: Vec<f64> = scores.iter().map(|&v| v as f64).collect();
        let expect = full_sort_topk(&scores64, k);
        assert_eq!(got, expect, "case {case} scores {scores:?} k {k}");
    }
}

#[test]
fn frame_map_equals_brute_force_oracle_on_random_instances() {
    let mut draws = RngStream::new(33, 0).draws();
    for case in 0..40 {
        let inst = random_instance(&mut draws);
        for class in &inst.classes {
            let dets: Vec<ClassDetection> = inst
                .dets
                .iter()
                .filter(|(c, _)| c == class)
                .map(|(_, d)| ClassDetection {
                    frame: d.frame.clone(),
                    bbox: d.bbox,
                    score: d.score,
                })
                .collect();
            let gts: Vec<ClassGroundTruth> = inst
                .gts
                .iter()
                .filter(|(c, _)| c == class)
                .map(|(_, g)| ClassGroundTruth {
                    frame: g.frame.clone(),
                    bbox: g.bbox,
                })
                .collect();
            let (ap, _) = average_precision(&dets, &gts, 0.5).unwrap();
            let oracle_dets: Vec<OracleDet> = dets
                .iter()
                .map(|d| OracleDet {
                    frame: d.frame.clone(),
                    bbox: d.bbox,
                    score: d.score,
                })
                .collect();
            let oracle_gts: Vec<OracleGt> = gts
                .iter()
                .map(|g| OracleGt {
                    frame: g.frame.clone(),
                    bbox: g.bbox,
                })
                .collect();
            let expect = brute_force_ap(&oracle_dets, &oracle_gts, 0.5);
            match (ap, expect) {
                (Some(a), Some(b)) => {
                    assert!((a - b).abs() < 1e-9, "case {case} class {class}: {a} vs {b}")
                }
                (None, None) => {}
                other => panic!("case {case} class {class}: mismatch {other:?}"),
            }
        }
    }
}

#[test]
fn frame_map_on_oracle_detections_is_one() {
    // Detections identical to GT with score 1.0 -> mAP 1.0.
    let config = stclip::data::synth::SynthConfig {
        num_videos: 3,
        ..Default::default()
    };
    let out = stclip::data::synth::synth_generate(&config, 77).unwrap();
    let manifests: Vec<_> = out.videos.iter().map(|v| v.manifest.clone()).collect();
    let mut results = Vec::new();
    for m in &manifests {
        for f in &m.frames {
            for p in &f.persons {
                results.push(DetectionResult {
                    video_id: m.video_id.clone(),
                    frame_idx: f.frame_idx,
                    bbox: p.bbox,
                    class: p.labels[0].clone(),
                    score: 1.0,
                });
            }
        }
    }
    let all: Vec<String> = out.classes.clone();
    let present: std::collections::BTreeSet<String> = results.iter().map(|r| r.class.clone()).collect();
    let split = LabelSplit {
        split_id: "t".into(),
        seen: all.iter().filter(|c| !present.contains(*c)).cloned().collect(),
        unseen: present.into_iter().collect(),
    };
    let report = frame_map(&results, &manifests, &split, 0.5).unwrap();
    assert!((report.map - 1.0).abs() < 1e-12, "mAP {}", report.map);

    // And with no detections at all, mAP is 0 over the same classes.
    let empty = frame_map(&[], &manifests, &split, 0.5).unwrap();
    assert_eq!(empty.map, 0.0);
}
