//! Zero-shot evaluation: IoU matching, per-class average precision with
//! all-point interpolation, frame-mAP@0.5 over unseen classes, soft voting,
//! and the checkpoint-driven inference that produces detection results.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{filter_detection_indices, sample_clip, LabelSplit, VideoManifest};
use crate::encoders::{class_label_features, ImageEncoderConfig, TextEncoderConfig, Vocab};
use crate::error::{Error, Result};
use crate::image::Box2D;
use crate::model::{classify, forward_sample, similarity_logits, ClassifyMode, ModelConfig};
use crate::store::ParamStore;

pub const INTERPOLATION_CONVENTION: &str =
    "all-point (continuous) PR interpolation; zero-GT classes excluded from the mean";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionResult {
    pub video_id: String,
    pub frame_idx: u64,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub class: String,
    pub score: f64,
}

pub fn write_results(path: &Path, results: &[DetectionResult]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut file = std::fs::File::create(path)?;
    for r in results {
        serde_json::to_writer(&mut file, r)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<DetectionResult>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Intersection over union of two valid boxes.
pub fn iou(a: Box2D, b: Box2D) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    Ok(inter / union)
}

// ── Average precision ───────────────────────────────────────────────────────

pub type FrameKey = (String, u64);

#[derive(Debug, Clone)]
pub struct ClassDetection {
    pub frame: FrameKey,
    pub bbox: Box2D,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct ClassGroundTruth {
    pub frame: FrameKey,
    pub bbox: Box2D,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ClassCounts {
    pub gt: usize,
    pub tp: usize,
    pub fp: usize,
}

/// Greedy matching (detections by descending score, candidates by descending
/// IoU, ties toward the lower index) followed by area under the
/// precision-recall curve with right-to-left monotone precision.
/// Returns `None` when the class has no ground truth (excluded, as opposed
/// to an AP of zero).
pub fn average_precision(
    dets: &[ClassDetection],
    gts: &[ClassGroundTruth],
    iou_thresh: f64,
) -> Result<(Option<f64>, ClassCounts)> {
    if gts.is_empty() {
        return Ok((
            None,
            ClassCounts {
                gt: 0,
                tp: 0,
                fp: dets.len(),
            },
        ));
    }
    let mut per_frame_gts: BTreeMap<&FrameKey, Vec<usize>> = BTreeMap::new();
    for (i, gt) in gts.iter().enumerate() {
        gt.bbox.validate()?;
        per_frame_gts.entry(&gt.frame).or_default().push(i);
    }

    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    let mut matched = vec![false; gts.len()];
    let mut tp_flags = Vec::with_capacity(dets.len());
    for &di in &order {
        let det = &dets[di];
        det.bbox.validate()?;
        let mut best: Option<(f64, usize)> = None;
        if let Some(candidates) = per_frame_gts.get(&det.frame) {
            for &gi in candidates {
                if matched[gi] {
                    continue;
                }
                let overlap = iou(det.bbox, gts[gi].bbox)?;
                if overlap < iou_thresh {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((b, _)) => overlap > b,
                };
                if better {
                    best = Some((overlap, gi));
                }
            }
        }
        match best {
            Some((_, gi)) => {
                matched[gi] = true;
                tp_flags.push(true);
            }
            None => tp_flags.push(false),
        }
    }

    let n_gt = gts.len() as f64;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut recalls = Vec::with_capacity(tp_flags.len());
    let mut precisions = Vec::with_capacity(tp_flags.len());
    for &is_tp in &tp_flags {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        recalls.push(tp as f64 / n_gt);
        precisions.push(tp as f64 / (tp + fp) as f64);
    }

    // Right-to-left running max makes precision monotone non-increasing.
    for i in (0..precisions.len().saturating_sub(1)).rev() {
        if precisions[i] < precisions[i + 1] {
            precisions[i] = precisions[i + 1];
        }
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recalls.iter().zip(precisions.iter()) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    Ok((
        Some(ap),
        ClassCounts {
            gt: gts.len(),
            tp,
            fp,
        },
    ))
}

// ── Frame mAP ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// Headline: unseen classes with ground truth.
    pub per_class_ap: BTreeMap<String, f64>,
    pub map: f64,
    /// Seen-class results, reported but not part of the headline number.
    pub seen_per_class_ap: BTreeMap<String, f64>,
    pub seen_map: Option<f64>,
    pub counts: BTreeMap<String, ClassCounts>,
    /// Unseen classes excluded for lack of ground truth.
    pub excluded_classes: Vec<String>,
    pub iou_thresh: f64,
    pub interpolation: String,
}

fn gather_class_data(
    results: &[DetectionResult],
    manifests: &[VideoManifest],
    class: &str,
) -> (Vec<ClassDetection>, Vec<ClassGroundTruth>) {
    let dets: Vec<ClassDetection> = results
        .iter()
        .filter(|r| r.class == class)
        .map(|r| ClassDetection {
            frame: (r.video_id.clone(), r.frame_idx),
            bbox: Box2D::from_array(r.bbox),
            score: r.score,
        })
        .collect();
    let mut gts = Vec::new();
    for m in manifests {
        for frame in &m.frames {
            for person in &frame.persons {
                if person.labels.iter().any(|l| l == class) {
                    gts.push(ClassGroundTruth {
                        frame: (m.video_id.clone(), frame.frame_idx),
                        bbox: person.bbox2d(),
                    });
                }
            }
        }
    }
    (dets, gts)
}

/// Frame-mAP over the split's unseen classes at the given IoU threshold;
/// seen-class APs are computed alongside as an appendix.
pub fn frame_map(
    results: &[DetectionResult],
    manifests: &[VideoManifest],
    split: &LabelSplit,
    iou_thresh: f64,
) -> Result<EvalReport> {
    let eval_class = |class: &String| -> Result<(String, Option<f64>, ClassCounts)> {
        let (dets, gts) = gather_class_data(results, manifests, class);
        let (ap, counts) = average_precision(&dets, &gts, iou_thresh)?;
        Ok((class.clone(), ap, counts))
    };

    let unseen: Vec<(String, Option<f64>, ClassCounts)> = split
        .unseen
        .par_iter()
        .map(eval_class)
        .collect::<Result<_>>()?;
    let seen: Vec<(String, Option<f64>, ClassCounts)> = split
        .seen
        .par_iter()
        .map(eval_class)
        .collect::<Result<_>>()?;

    let mut report = EvalReport {
        per_class_ap: BTreeMap::new(),
        map: 0.0,
        seen_per_class_ap: BTreeMap::new(),
        seen_map: None,
        counts: BTreeMap::new(),
        excluded_classes: Vec::new(),
        iou_thresh,
        interpolation: INTERPOLATION_CONVENTION.to_string(),
    };
    for (class, ap, counts) in unseen {
        match ap {
            Some(ap) => {
                report.per_class_ap.insert(class.clone(), ap);
            }
            None => report.excluded_classes.push(class.clone()),
        }
        report.counts.insert(class, counts);
    }
    if report.per_class_ap.is_empty() {
        return Err(Error::Eval(
            "no unseen class has ground truth in the evaluated manifests".into(),
        ));
    }
    report.map =
        report.per_class_ap.values().sum::<f64>() / report.per_class_ap.len() as f64;

    for (class, ap, counts) in seen {
        if let Some(ap) = ap {
            report.seen_per_class_ap.insert(class.clone(), ap);
        }
        report.counts.insert(class, counts);
    }
    if !report.seen_per_class_ap.is_empty() {
        report.seen_map = Some(
            report.seen_per_class_ap.values().sum::<f64>()
                / report.seen_per_class_ap.len() as f64,
        );
    }
    Ok(report)
}

// ── Soft voting ─────────────────────────────────────────────────────────────

/// Arithmetic mean of per-person score vectors.
pub fn soft_vote(per_person_scores: &[Vec<f64>]) -> Result<Vec<f64>> {
    if per_person_scores.is_empty() {
        return Err(Error::Input("soft_vote: no score vectors".into()));
    }
    let n = per_person_scores[0].len();
    let mut acc = vec![0.0f64; n];
    for scores in per_person_scores {
        if scores.len() != n {
            return Err(Error::Dim("soft_vote: ragged score vectors".into()));
        }
        for (a, &s) in acc.iter_mut().zip(scores.iter()) {
            *a += s;
        }
    }
    let count = per_person_scores.len() as f64;
    for a in &mut acc {
        *a /= count;
    }
    Ok(acc)
}

pub fn argmax(scores: &[f64]) -> usize {
    scores
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

// ── Inference ───────────────────────────────────────────────────────────────

pub struct InferenceInputs<'a> {
    pub store: &'a ParamStore<f32>,
    pub image_cfg: &'a ImageEncoderConfig,
    pub text_cfg: &'a TextEncoderConfig,
    pub vocab: &'a Vocab,
    /// The full label set scored at inference time.
    pub classes: &'a [String],
    pub manifests: &'a [VideoManifest],
    pub frames_root: &'a Path,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceOptions {
    pub model: ModelConfig,
    pub mode: ClassifyMode,
    /// Average per-person scores over each video and assign everyone the
    /// argmax class (single-action assumption).
    pub soft_vote: bool,
    /// When set, detector scores (if present) are filtered per keyframe.
    pub detector_margin: Option<f64>,
    /// Ensemble label features over caption templates (synthetic classes).
    pub prompt_ensemble: bool,
    /// Center each person's cosine row at its mean before the score
    /// activation; calibrates scores across frames without saturating them.
    pub center_scores: bool,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        InferenceOptions {
            model: ModelConfig::default(),
            mode: ClassifyMode::Single,
            soft_vote: false,
            detector_margin: None,
            prompt_ensemble: false,
            center_scores: false,
        }
    }
}

/// Run the model over every keyframe and emit detection results: one record
/// per (box, class) — or per box with the voted class when soft voting.
pub fn infer_detections(
    inputs: &InferenceInputs,
    opts: &InferenceOptions,
) -> Result<Vec<DetectionResult>> {
    let label_feats = class_label_features(
        inputs.classes,
        inputs.store,
        inputs.text_cfg,
        inputs.vocab,
        opts.prompt_ensemble,
    )?
    .detach();
    let mut results = Vec::new();
    for manifest in inputs.manifests {
        // (frame_idx, box, scores) for every scored person of this video.
        let mut video_scores: Vec<(u64, Box2D, Vec<f64>)> = Vec::new();
        for (fi, _) in manifest.frames.iter().enumerate() {
            let Some(mut clip) = sample_clip(
                manifest,
                fi,
                opts.model.t_frames,
                opts.model.stride,
                inputs.frames_root,
            )?
            else {
                continue;
            };
            if let Some(margin) = opts.detector_margin {
                let scores: Vec<f64> = clip
                    .detector_scores
                    .iter()
                    .map(|s| s.unwrap_or(1.0))
                    .collect();
                if clip.detector_scores.iter().any(Option::is_some) {
                    let keep = filter_detection_indices(&scores, margin)?;
                    clip.boxes = keep.iter().map(|&i| clip.boxes[i]).collect();
                    clip.labels = keep.iter().map(|&i| clip.labels[i].clone()).collect();
                    clip.detector_scores =
                        keep.iter().map(|&i| clip.detector_scores[i]).collect();
                }
            }
            if clip.boxes.is_empty() {
                continue;
            }
            let fwd = forward_sample(
                inputs.store,
                inputs.image_cfg,
                &opts.model,
                &clip,
                &label_feats,
                false,
            )?;
            let n_l = inputs.classes.len();
            if opts.center_scores {
                let cosines = similarity_logits(&fwd.person_out, &fwd.label_out, 1.0)?;
                for (b, bbox) in clip.boxes.iter().enumerate() {
                    let raw = &cosines.data()[b * n_l..(b + 1) * n_l];
                    let mean: f64 =
                        raw.iter().map(|&v| v as f64).sum::<f64>() / n_l as f64;
                    let row: Vec<f64> = raw
                        .iter()
                        .map(|&v| 1.0 / (1.0 + (-(v as f64 - mean) / opts.model.temperature).exp()))
                        .collect();
                    video_scores.push((clip.frame_idx, *bbox, row));
                }
            } else {
                let scores = classify(
                    &fwd.person_out,
                    &fwd.label_out,
                    opts.model.temperature,
                    opts.mode,
                )?;
                for (b, bbox) in clip.boxes.iter().enumerate() {
                    let row: Vec<f64> = scores.data()[b * n_l..(b + 1) * n_l]
                        .iter()
                        .map(|&v| v as f64)
                        .collect();
                    video_scores.push((clip.frame_idx, *bbox, row));
                }
            }
        }
        if opts.soft_vote {
            let vectors: Vec<Vec<f64>> =
                video_scores.iter().map(|(_, _, s)| s.clone()).collect();
            if vectors.is_empty() {
                continue;
            }
            let voted = soft_vote(&vectors)?;
            let winner = argmax(&voted);
            for (frame_idx, bbox, _) in &video_scores {
                results.push(DetectionResult {
                    video_id: manifest.video_id.clone(),
                    frame_idx: *frame_idx,
                    bbox: bbox.to_array(),
                    class: inputs.classes[winner].clone(),
                    score: voted[winner],
                });
            }
        } else {
            for (frame_idx, bbox, row) in &video_scores {
                for (c, class) in inputs.classes.iter().enumerate() {
                    results.push(DetectionResult {
                        video_id: manifest.video_id.clone(),
                        frame_idx: *frame_idx,
                        bbox: bbox.to_array(),
                        class: class.clone(),
                        score: row[c],
                    });
                }
            }
        }
    }
    Ok(results)
}

pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, serde_json::to_string_pretty(report)?)?;
    Ok(())
}
