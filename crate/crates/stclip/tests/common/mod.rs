//! Independent oracles used by the integration and acceptance suites.
//!
//! Everything here is deliberately written as plain f64 loops over flat
//! matrices, one head at a time, re-deriving each computation from its
//! definition rather than reusing the library's kernels.

#![allow(dead_code)]

use stclip::image::Box2D;
use stclip::nn::MhsaParams;
use stclip::rng::Draws;
use stclip::tensor::Tensor;

// ── Flat f64 matrices ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Mat {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Mat {
        let rows = t.shape()[0];
        let cols = if t.ndim() == 1 { 1 } else { t.shape()[1] };
        let (rows, cols) = if t.ndim() == 1 { (1, rows) } else { (rows, cols) };
        Mat {
            rows,
            cols,
            data: t.data().iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows);
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for j in 0..other.cols {
                let mut acc = 0.0;
                for k in 0..self.cols {
                    acc += self.get(i, k) * other.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    pub fn add(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn add_bias(&self, bias: &[f64]) -> Mat {
        assert_eq!(self.cols, bias.len());
        let mut out = self.clone();
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[r * self.cols + c] += bias[c];
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub fn max_abs_diff_tensor(t: &Tensor<f32>, m: &Mat) -> f64 {
    Mat::from_tensor(t).max_abs_diff(m)
}

fn vec_from_tensor(t: &Tensor<f32>) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

// ── Naive attention ─────────────────────────────────────────────────────────

pub struct NaiveMhsa {
    pub num_heads: usize,
    pub w_q: Mat,
    pub b_q: Vec<f64>,
    pub w_k: Mat,
    pub b_k: Vec<f64>,
    pub w_v: Mat,
    pub b_v: Vec<f64>,
    pub w_o: Mat,
    pub b_o: Vec<f64>,
}

impl NaiveMhsa {
    pub fn from_params(p: &MhsaParams<f32>) -> NaiveMhsa {
        NaiveMhsa {
            num_heads: p.num_heads,
            w_q: Mat::from_tensor(&p.w_q),
            b_q: vec_from_tensor(&p.b_q),
            w_k: Mat::from_tensor(&p.w_k),
            b_k: vec_from_tensor(&p.b_k),
            w_v: Mat::from_tensor(&p.w_v),
            b_v: vec_from_tensor(&p.b_v),
            w_o: Mat::from_tensor(&p.w_o),
            b_o: vec_from_tensor(&p.b_o),
        }
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Single-head-at-a-time attention; returns the projected output and the
/// head-averaged attention map.
pub fn naive_attention(q_in: &Mat, kv_in: &Mat, p: &NaiveMhsa) -> (Mat, Mat) {
    let d = p.w_q.rows;
    let head_dim = d / p.num_heads;
    let q = q_in.matmul(&p.w_q).add_bias(&p.b_q);
    let k = kv_in.matmul(&p.w_k).add_bias(&p.b_k);
    let v = kv_in.matmul(&p.w_v).add_bias(&p.b_v);

    let nq = q_in.rows;
    let nk = kv_in.rows;
    let mut merged = Mat::zeros(nq, d);
    let mut avg_map = Mat::zeros(nq, nk);
    for h in 0..p.num_heads {
        let off = h * head_dim;
        for i in 0..nq {
            let mut logits = vec![0.0f64; nk];
            for (j, logit) in logits.iter_mut().enumerate() {
                let mut acc = 0.0;
                for t in 0..head_dim {
                    acc += q.get(i, off + t) * k.get(j, off + t);
                }
                *logit = acc / (head_dim as f64).sqrt();
            }
            softmax_in_place(&mut logits);
            for (j, &a) in logits.iter().enumerate() {
                avg_map.data[i * nk + j] += a / p.num_heads as f64;
                for t in 0..head_dim {
                    merged.data[i * d + off + t] += a * v.get(j, off + t);
                }
            }
        }
    }
    (merged.matmul(&p.w_o).add_bias(&p.b_o), avg_map)
}

pub fn naive_layer_norm(x: &Mat, gamma: &[f64], beta: &[f64], eps: f64) -> Mat {
    let mut out = Mat::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / x.cols as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / x.cols as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for c in 0..x.cols {
            out.set(r, c, (x.get(r, c) - mean) * inv * gamma[c] + beta[c]);
        }
    }
    out
}

pub fn naive_gelu(x: &Mat) -> Mat {
    let c = (2.0f64 / std::f64::consts::PI).sqrt();
    Mat {
        rows: x.rows,
        cols: x.cols,
        data: x
            .data
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (c * (v + 0.044715 * v * v * v)).tanh()))
            .collect(),
    }
}

pub struct NaiveFfn {
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
}

impl NaiveFfn {
    pub fn from_params(p: &stclip::nn::FfnParams<f32>) -> NaiveFfn {
        NaiveFfn {
            w1: Mat::from_tensor(&p.w1),
            b1: vec_from_tensor(&p.b1),
            w2: Mat::from_tensor(&p.w2),
            b2: vec_from_tensor(&p.b2),
        }
    }
}

pub fn naive_ffn(x: &Mat, p: &NaiveFfn) -> Mat {
    naive_gelu(&x.matmul(&p.w1).add_bias(&p.b1))
        .matmul(&p.w2)
        .add_bias(&p.b2)
}

/// Dense-merge route: materialize `W + (alpha/r)·A·B` per layer, then run the
/// plain FFN on the merged weights.
pub fn naive_lora_ffn_dense_merge(x: &Mat, p: &stclip::nn::LoraFfnParams<f32>) -> Mat {
    let scaling = p.alpha / p.rank as f64;
    let merge = |w: &Tensor<f32>, a: &Tensor<f32>, b: &Tensor<f32>| -> Mat {
        let delta = Mat::from_tensor(a).matmul(&Mat::from_tensor(b));
        let mut out = Mat::from_tensor(w);
        for (o, d) in out.data.iter_mut().zip(delta.data.iter()) {
            *o += scaling * d;
        }
        out
    };
    let w1 = merge(&p.ffn.w1, &p.lora1.a, &p.lora1.b);
    let w2 = merge(&p.ffn.w2, &p.lora2.a, &p.lora2.b);
    let merged = NaiveFfn {
        w1,
        b1: vec_from_tensor(&p.ffn.b1),
        w2,
        b2: vec_from_tensor(&p.ffn.b2),
    };
    naive_ffn(x, &merged)
}

/// Per-position application of the temporal equations: gather the position's
/// frame rows, add the temporal encoding, one LN+MHSA residual step, then
/// mean over frames.
pub fn naive_temporal(
    frames: &[Mat],
    e_temp: &Mat,
    ln_gamma: &[f64],
    ln_beta: &[f64],
    attn: &NaiveMhsa,
    eps: f64,
) -> Mat {
    let t = frames.len();
    let n = frames[0].rows;
    let d = frames[0].cols;
    let mut out = Mat::zeros(n, d);
    for pos in 0..n {
        let mut z = Mat::zeros(t, d);
        for ti in 0..t {
            for c in 0..d {
                z.set(ti, c, frames[ti].get(pos, c) + e_temp.get(ti, c));
            }
        }
        let normed = naive_layer_norm(&z, ln_gamma, ln_beta, eps);
        let (attn_out, _) = naive_attention(&normed, &normed, attn);
        for c in 0..d {
            let mut acc = 0.0;
            for ti in 0..t {
                acc += z.get(ti, c) + attn_out.get(ti, c);
            }
            out.set(pos, c, acc / t as f64);
        }
    }
    out
}

/// Full-sort top-k with the tie rule "lower column index wins"; returns
/// ascending indices relative to the scores slice.
pub fn full_sort_topk(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut top: Vec<usize> = order.into_iter().take(k.min(scores.len())).collect();
    top.sort_unstable();
    top
}

// ── Brute-force PR oracle ───────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct OracleDet {
    pub frame: (String, u64),
    pub bbox: Box2D,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct OracleGt {
    pub frame: (String, u64),
    pub bbox: Box2D,
}

fn oracle_iou(a: Box2D, b: Box2D) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    inter / (a.area() + b.area() - inter)
}

/// Greedy matching of a detection prefix, recomputed from scratch: returns
/// the TP count.
fn match_prefix(dets: &[OracleDet], gts: &[OracleGt], thresh: f64) -> usize {
    let mut matched = vec![false; gts.len()];
    let mut tp = 0;
    for det in dets {
        let mut best: Option<(f64, usize)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if matched[gi] || gt.frame != det.frame {
                continue;
            }
            let ov = oracle_iou(det.bbox, gt.bbox);
            if ov >= thresh {
                let better = match best {
                    None => true,
                    Some((b, _)) => ov > b,
                };
                if better {
                    best = Some((ov, gi));
                }
            }
        }
        if let Some((_, gi)) = best {
            matched[gi] = true;
            tp += 1;
        }
    }
    tp
}

/// Exhaustive all-point AP: sort detections by score, recompute the matching
/// for every prefix length to obtain the PR points, then integrate
/// `sum (R_k - R_{k-1}) * max_{j>=k} P_j`. Returns `None` for zero GT.
pub fn brute_force_ap(dets: &[OracleDet], gts: &[OracleGt], thresh: f64) -> Option<f64> {
    if gts.is_empty() {
        return None;
    }
    let mut sorted: Vec<OracleDet> = dets.to_vec();
    let mut order: Vec<usize> = (0..sorted.len()).collect();
    order.sort_by(|&a, &b| {
        sorted[b]
            .score
            .partial_cmp(&sorted[a].score)
            .unwrap()
            .then(a.cmp(&b))
    });
    sorted = order.into_iter().map(|i| dets[i].clone()).collect();

    let n_gt = gts.len() as f64;
    let mut points: Vec<(f64, f64)> = Vec::new(); // (recall, precision)
    for k in 1..=sorted.len() {
        let tp = match_prefix(&sorted[..k], gts, thresh);
        points.push((tp as f64 / n_gt, tp as f64 / k as f64));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (i, &(r, _)) in points.iter().enumerate() {
        let max_p = points[i..]
            .iter()
            .map(|&(_, p)| p)
            .fold(0.0f64, f64::max);
        ap += (r - prev_recall) * max_p;
        prev_recall = r;
    }
    Some(ap)
}

/// Random small evaluation instance: up to `max_classes` classes, up to 10
/// frames, up to 5 boxes per frame, random detections overlapping some GT.
pub struct RandomInstance {
    pub classes: Vec<String>,
    pub gts: Vec<(String, OracleGt)>,
    pub dets: Vec<(String, OracleDet)>,
}

pub fn random_instance(draws: &mut Draws) -> RandomInstance {
    let n_classes = 1 + draws.below(3);
    let classes: Vec<String> = (0..n_classes).map(|c| format!("c{c}")).collect();
    let n_frames = 1 + draws.below(10);
    let mut gts = Vec::new();
    let mut dets = Vec::new();
    for f in 0..n_frames {
        let frame = ("v0".to_string(), f as u64);
        let n_boxes = draws.below(6);
        for _ in 0..n_boxes {
            let x1 = draws.uniform(0.0, 80.0);
            let y1 = draws.uniform(0.0, 80.0);
            let w = draws.uniform(4.0, 20.0);
            let h = draws.uniform(4.0, 20.0);
            let bbox = Box2D::new(x1, y1, x1 + w, y1 + h);
            let class = classes[draws.below(n_classes)].clone();
            gts.push((
                class.clone(),
                OracleGt {
                    frame: frame.clone(),
                    bbox,
                },
            ));
            // A detection near this GT with random jitter, random score,
            // sometimes for the wrong class.
            let jitter = |d: &mut Draws| d.uniform(-6.0, 6.0);
            let db = Box2D::new(
                x1 + jitter(draws),
                y1 + jitter(draws),
                x1 + w + jitter(draws),
                y1 + h + jitter(draws),
            );
            if db.is_valid() {
                let det_class = if draws.unit_f64() < 0.8 {
                    class
                } else {
                    classes[draws.below(n_classes)].clone()
                };
                dets.push((
                    det_class,
                    OracleDet {
                        frame: frame.clone(),
                        bbox: db,
                        score: draws.unit_f64(),
                    },
                ));
            }
        }
        // Occasional pure false positive.
        if draws.unit_f64() < 0.3 {
            let x1 = draws.uniform(0.0, 90.0);
            let y1 = draws.uniform(0.0, 90.0);
            dets.push((
                classes[draws.below(n_classes)].clone(),
                OracleDet {
                    frame,
                    bbox: Box2D::new(x1, y1, x1 + 8.0, y1 + 8.0),
                    score: draws.unit_f64(),
                },
            ));
        }
    }
    RandomInstance { classes, gts, dets }
}
pub mod blocks;
