//! Dataset machinery: video manifests (JSONL), zero-shot label splits, clip
//! sampling around keyframes, and detector-score filtering.
//!
//! Manifest schema (one video per JSONL line):
//! `{"video_id": ..., "frames": [{"frame_idx": ..., "image": <relpath>,
//!   "persons": [{"box": [x1,y1,x2,y2], "labels": [...],
//!   "detector_score": <optional>}]}]}`

pub mod synth;

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Box2D, Image};
use crate::rng::RngStream;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PersonEntry {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detector_score: Option<f64>,
}

impl PersonEntry {
    pub fn bbox2d(&self) -> Box2D {
        Box2D::from_array(self.bbox)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameEntry {
    pub frame_idx: u64,
    pub image: String,
    pub persons: Vec<PersonEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VideoManifest {
    pub video_id: String,
    pub frames: Vec<FrameEntry>,
}

impl VideoManifest {
    /// Structural invariants: valid boxes, strictly increasing frame indices,
    /// labels drawn from `classes` when given.
    pub fn validate(&self, classes: Option<&BTreeSet<String>>) -> Result<()> {
        let mut prev: Option<u64> = None;
        for frame in &self.frames {
            if let Some(p) = prev {
                if frame.frame_idx <= p {
                    return Err(Error::Input(format!(
                        "video '{}': frame_idx {} not strictly increasing",
                        self.video_id, frame.frame_idx
                    )));
                }
            }
            prev = Some(frame.frame_idx);
            for person in &frame.persons {
                person.bbox2d().validate()?;
                if let Some(classes) = classes {
                    for label in &person.labels {
                        if !classes.contains(label) {
                            return Err(Error::Input(format!(
                                "video '{}': label '{}' not in the dataset class list",
                                self.video_id, label
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn write_manifests(path: &Path, manifests: &[VideoManifest]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut file = std::fs::File::create(path)?;
    for m in manifests {
        serde_json::to_writer(&mut file, m)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_manifests(path: &Path) -> Result<Vec<VideoManifest>> {
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

// ── Label splits ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelSplit {
    pub split_id: String,
    pub seen: Vec<String>,
    pub unseen: Vec<String>,
}

impl LabelSplit {
    pub fn seen_set(&self) -> BTreeSet<String> {
        self.seen.iter().cloned().collect()
    }

    pub fn unseen_set(&self) -> BTreeSet<String> {
        self.unseen.iter().cloned().collect()
    }
}

/// Shuffle the classes by seed, then slide a test window of
/// `ceil(test_fraction * n)` classes in steps of the window size, wrapping
/// around; the remainder of each split is the seen set. Consecutive windows
/// are disjoint except where wraparound forces overlap with the earliest
/// ones.
pub fn gen_splits(
    classes: &[String],
    n_splits: usize,
    test_fraction: f64,
    seed: u64,
) -> Result<Vec<LabelSplit>> {
    if classes.is_empty() {
        return Err(Error::Config("gen_splits: empty class list".into()));
    }
    {
        let unique: BTreeSet<&String> = classes.iter().collect();
        if unique.len() != classes.len() {
            return Err(Error::Config("gen_splits: duplicate class names".into()));
        }
    }
    if n_splits < 1 {
        return Err(Error::Config("gen_splits: n_splits must be >= 1".into()));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "gen_splits: test_fraction must be in (0,1), got {test_fraction}"
        )));
    }
    let n = classes.len();
    let window = (test_fraction * n as f64).ceil() as usize;
    if window == 0 {
        return Err(Error::Config("gen_splits: test set size is 0".into()));
    }
    if window >= n {
        return Err(Error::Config(format!(
            "gen_splits: test window {window} leaves no seen classes out of {n}"
        )));
    }

    let mut shuffled: Vec<String> = classes.to_vec();
    RngStream::new(seed, 0).draws().shuffle(&mut shuffled);

    let mut splits = Vec::with_capacity(n_splits);
    for i in 0..n_splits {
        let start = (i * window) % n;
        let test_idx: BTreeSet<usize> = (0..window).map(|k| (start + k) % n).collect();
        let mut unseen: Vec<String> = test_idx.iter().map(|&k| shuffled[k].clone()).collect();
        let mut seen: Vec<String> = (0..n)
            .filter(|k| !test_idx.contains(k))
            .map(|k| shuffled[k].clone())
            .collect();
        unseen.sort();
        seen.sort();
        splits.push(LabelSplit {
            split_id: format!("split{}", i + 1),
            seen,
            unseen,
        });
    }
    Ok(splits)
}

pub fn write_splits(path: &Path, splits: &[LabelSplit]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut file = std::fs::File::create(path)?;
    for s in splits {
        serde_json::to_writer(&mut file, s)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

/// Read one split from a file holding a single JSON object (or the first
/// line of a JSONL splits file).
pub fn read_split(path: &Path) -> Result<LabelSplit> {
    let text = std::fs::read_to_string(path)?;
    if let Ok(split) = serde_json::from_str(&text) {
        return Ok(split);
    }
    let first = text
        .lines()
        .find(|l| !l.trim().is_empty())
        .ok_or_else(|| Error::Input(format!("empty split file {}", path.display())))?;
    Ok(serde_json::from_str(first)?)
}

pub fn read_splits(path: &Path) -> Result<Vec<LabelSplit>> {
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

// ── Clip sampling ───────────────────────────────────────────────────────────

/// One keyframe with its temporal context, ready for the model.
#[derive(Debug, Clone)]
pub struct ClipSample {
    pub video_id: String,
    pub frame_idx: u64,
    pub keyframe: Image,
    /// Exactly `t_frames` context frames (edge-replicated at video bounds).
    pub frames: Vec<Image>,
    pub boxes: Vec<Box2D>,
    /// Per-person label sets, aligned with `boxes`.
    pub labels: Vec<Vec<String>>,
    pub detector_scores: Vec<Option<f64>>,
}

/// Positions (indices into the manifest's frame sequence) of a clip centered
/// on `key`: `start = key - ((t-1)*stride)/2`, then `t` steps of `stride`,
/// clamped to the valid range (edge replication).
pub fn clip_frame_positions(n_frames: usize, key: usize, t_frames: usize, stride: usize) -> Vec<usize> {
    let start = key as isize - ((t_frames as isize - 1) * stride as isize) / 2;
    (0..t_frames)
        .map(|i| (start + i as isize * stride as isize).clamp(0, n_frames as isize - 1) as usize)
        .collect()
}

/// Build a [`ClipSample`] around the keyframe at position `key` in the
/// manifest's frame list. Returns `Ok(None)` when the keyframe has no person
/// boxes (a skip, not an error).
pub fn sample_clip(
    manifest: &VideoManifest,
    key: usize,
    t_frames: usize,
    stride: usize,
    frames_root: &Path,
) -> Result<Option<ClipSample>> {
    if t_frames < 1 {
        return Err(Error::Input("sample_clip: t_frames must be >= 1".into()));
    }
    if stride < 1 {
        return Err(Error::Input("sample_clip: stride must be >= 1".into()));
    }
    let n = manifest.frames.len();
    if key >= n {
        return Err(Error::Input(format!(
            "sample_clip: keyframe position {key} out of range for {n} frames"
        )));
    }
    let keyframe_entry = &manifest.frames[key];
    if keyframe_entry.persons.is_empty() {
        return Ok(None);
    }
    let keyframe = Image::read(&frames_root.join(&keyframe_entry.image))?;
    let frames = clip_frame_positions(n, key, t_frames, stride)
        .into_iter()
        .map(|pos| Image::read(&frames_root.join(&manifest.frames[pos].image)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Some(ClipSample {
        video_id: manifest.video_id.clone(),
        frame_idx: keyframe_entry.frame_idx,
        keyframe,
        frames,
        boxes: keyframe_entry.persons.iter().map(|p| p.bbox2d()).collect(),
        labels: keyframe_entry
            .persons
            .iter()
            .map(|p| p.labels.clone())
            .collect(),
        detector_scores: keyframe_entry
            .persons
            .iter()
            .map(|p| p.detector_score)
            .collect(),
    }))
}

// ── Detector filtering ──────────────────────────────────────────────────────

/// Margin below the per-frame top score within which detections are kept.
pub const DETECTOR_MARGIN_JHMDB: f64 = 0.001;
/// Margin used for UCF- and AVA-style data.
pub const DETECTOR_MARGIN_UCF_AVA: f64 = 0.7;

/// Keep the top-scoring detection plus every detection scoring above
/// `top - margin`. Returns indices into the input, in input order.
pub fn filter_detection_indices(scores: &[f64], margin: f64) -> Result<Vec<usize>> {
    if scores.is_empty() {
        return Ok(Vec::new());
    }
    for &s in scores {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::Input(format!(
                "detector score {s} outside [0, 1]"
            )));
        }
    }
    let (top_idx, top) = scores
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
        .map(|(i, &s)| (i, s))
        .unwrap();
    Ok(scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| i == top_idx || s > top - margin)
        .map(|(i, _)| i)
        .collect())
}

/// As [`filter_detection_indices`], but over (box, score) pairs.
pub fn filter_detections(
    boxes_with_scores: &[(Box2D, f64)],
    margin: f64,
) -> Result<Vec<(Box2D, f64)>> {
    let scores: Vec<f64> = boxes_with_scores.iter().map(|&(_, s)| s).collect();
    Ok(filter_detection_indices(&scores, margin)?
        .into_iter()
        .map(|i| boxes_with_scores[i])
        .collect())
}
