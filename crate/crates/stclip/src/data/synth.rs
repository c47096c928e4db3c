//! Synthetic multi-actor videos: anti-aliased vector shapes executing one of
//! twelve motions on a plain dark background.
//!
//! Every frame also carries a static cue for its motion so that single-frame
//! encoders can tell classes apart: each shape is drawn with a dimmed "ghost"
//! at its previous-frame state (translation direction, rotation step, size
//! change and brightness change all leave distinct two-exposure patterns),
//! bouncing actors get a ground line, and orbiting actors a pivot dot.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::RngStream;

use super::{FrameEntry, PersonEntry, VideoManifest};

/// The built-in motion vocabulary.
pub const MOTION_CLASSES: [&str; 12] = [
    "move-right",
    "move-left",
    "bounce",
    "rotate",
    "grow",
    "shrink",
    "zigzag",
    "orbit",
    "flash",
    "drift-up",
    "drift-down",
    "spin-fast",
];

const COLORS: [(&str, [f32; 3]); 8] = [
    ("red", [1.0, 0.15, 0.15]),
    ("green", [0.2, 1.0, 0.2]),
    ("blue", [0.3, 0.45, 1.0]),
    ("yellow", [1.0, 1.0, 0.2]),
    ("magenta", [1.0, 0.3, 1.0]),
    ("cyan", [0.3, 1.0, 1.0]),
    ("white", [1.0, 1.0, 1.0]),
    ("orange", [1.0, 0.6, 0.15]),
];

const SHAPES: [&str; 3] = ["circle", "square", "triangle"];
const BACKGROUND: [f32; 3] = [0.05, 0.05, 0.05];
const GHOST_FACTOR: f32 = 0.45;
const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_videos: usize,
    pub frames_per_video: usize,
    pub actors_min: usize,
    pub actors_max: usize,
    pub classes: Vec<String>,
    pub image_size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_videos: 8,
            frames_per_video: 8,
            actors_min: 1,
            actors_max: 1,
            classes: MOTION_CLASSES.iter().map(|s| s.to_string()).collect(),
            image_size: 32,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_videos == 0 || self.frames_per_video == 0 {
            return Err(Error::Config("synth: need at least one video and frame".into()));
        }
        if self.actors_min == 0 || self.actors_min > self.actors_max {
            return Err(Error::Config(format!(
                "synth: bad actor range {}..{}",
                self.actors_min, self.actors_max
            )));
        }
        // Actors live in separate slots: one full-canvas slot for solo videos,
        // otherwise a 2x2 grid.
        if self.actors_max > 4 {
            return Err(Error::Config(format!(
                "synth: {} actors exceed the canvas capacity of 4 slots",
                self.actors_max
            )));
        }
        if self.image_size < 16 {
            return Err(Error::Config("synth: image_size must be at least 16".into()));
        }
        if self.actors_max > 1 && self.image_size < 24 {
            return Err(Error::Config(
                "synth: multi-actor videos need image_size >= 24".into(),
            ));
        }
        if self.classes.is_empty() {
            return Err(Error::Config("synth: empty class list".into()));
        }
        for c in &self.classes {
            if !MOTION_CLASSES.contains(&c.as_str()) {
                return Err(Error::Config(format!(
                    "synth: '{c}' is not in the built-in motion vocabulary"
                )));
            }
        }
        if self.actors_max > self.classes.len() {
            return Err(Error::Config(
                "synth: actors_max exceeds the number of distinct classes".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub video_id: String,
    pub frame_idx: u64,
    pub image: String,
    pub caption: String,
}

pub struct SynthVideo {
    pub manifest: VideoManifest,
    pub frames: Vec<Image>,
    pub captions: Vec<CaptionRecord>,
    /// Image behind each caption record (the full frame, or the actor-crop
    /// view for `crops/...` records), aligned with `captions`.
    pub caption_images: Vec<Image>,
}

pub struct SynthOutput {
    pub videos: Vec<SynthVideo>,
    pub classes: Vec<String>,
}

#[derive(Clone, Copy)]
struct Slot {
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
}

#[derive(Clone)]
struct Actor {
    class: String,
    shape: &'static str,
    color_name: &'static str,
    color: [f32; 3],
    slot: Slot,
    base_radius: f64,
    amplitude: f64,
}

/// Pose of one actor at a given frame.
struct Pose {
    cx: f64,
    cy: f64,
    radius: f64,
    angle: f64,
    brightness: f32,
}

/// Deterministically generate videos, manifests, and caption records.
/// Captions are emitted only for single-actor videos, where the whole frame
/// matches the caption.
pub fn synth_generate(config: &SynthConfig, seed: u64) -> Result<SynthOutput> {
    config.validate()?;
    let root = RngStream::new(seed, 0);
    let mut videos = Vec::with_capacity(config.num_videos);
    for v in 0..config.num_videos {
        videos.push(generate_video(config, &root.derive(v as u64), v)?);
    }
    Ok(SynthOutput {
        videos,
        classes: config.classes.clone(),
    })
}

fn generate_video(config: &SynthConfig, stream: &RngStream, index: usize) -> Result<SynthVideo> {
    let mut draws = stream.draws();
    let video_id = format!("synthv{index:04}");
    let n_actors = config.actors_min + draws.below(config.actors_max - config.actors_min + 1);

    // The first actor's class cycles through the class list so every class
    // is covered (and balanced) once num_videos >= |classes|; further actors
    // draw distinct classes (AVA-like).
    let primary = &config.classes[index % config.classes.len()];
    let mut class_pool: Vec<&String> = config.classes.iter().filter(|c| *c != primary).collect();
    draws.shuffle(&mut class_pool);
    class_pool.insert(0, primary);
    let size = config.image_size as f64;
    let mut slots = if n_actors == 1 {
        vec![Slot { x0: 0.0, y0: 0.0, w: size, h: size }]
    } else {
        let hw = size / 2.0;
        vec![
            Slot { x0: 0.0, y0: 0.0, w: hw, h: hw },
            Slot { x0: hw, y0: 0.0, w: hw, h: hw },
            Slot { x0: 0.0, y0: hw, w: hw, h: hw },
            Slot { x0: hw, y0: hw, w: hw, h: hw },
        ]
    };
    draws.shuffle(&mut slots);

    let mut actors = Vec::with_capacity(n_actors);
    for a in 0..n_actors {
        let class = class_pool[a].clone();
        let needs_orientation = class == "rotate" || class == "spin-fast";
        let shape = if needs_orientation {
            ["square", "triangle"][draws.below(2)]
        } else {
            SHAPES[draws.below(SHAPES.len())]
        };
        let (color_name, color) = COLORS[draws.below(COLORS.len())];
        let slot = slots[a];
        let extent = slot.w.min(slot.h);
        actors.push(Actor {
            class,
            shape,
            color_name,
            color,
            slot,
            base_radius: extent * 0.18,
            amplitude: extent * 0.25,
        });
    }

    let mut frames = Vec::with_capacity(config.frames_per_video);
    let mut entries = Vec::with_capacity(config.frames_per_video);
    let mut captions = Vec::new();
    let mut caption_images = Vec::new();
    for t in 0..config.frames_per_video {
        let mut img = Image::new(config.image_size, config.image_size);
        img.fill(BACKGROUND[0], BACKGROUND[1], BACKGROUND[2]);

        for actor in &actors {
            draw_props(&mut img, actor);
        }
        for actor in &actors {
            // Two-step trail: the per-frame state change is the static cue
            // that makes each motion readable from a single frame.
            let prev2 = pose_at(actor, t as i64 - 2, config.frames_per_video);
            draw_shape(&mut img, actor, &prev2, GHOST_FACTOR * 0.55);
            let prev = pose_at(actor, t as i64 - 1, config.frames_per_video);
            draw_shape(&mut img, actor, &prev, GHOST_FACTOR);
            let pose = pose_at(actor, t as i64, config.frames_per_video);
            draw_shape(&mut img, actor, &pose, 1.0);
        }

        let image_path = format!("frames/{video_id}/{t:04}.ppm");
        let persons = actors
            .iter()
            .map(|actor| {
                let pose = pose_at(actor, t as i64, config.frames_per_video);
                PersonEntry {
                    bbox: bounding_box(actor, &pose, size),
                    labels: vec![actor.class.clone()],
                    detector_score: None,
                }
            })
            .collect();
        entries.push(FrameEntry {
            frame_idx: t as u64,
            image: image_path.clone(),
            persons,
        });
        if actors.len() == 1 {
            let a = &actors[0];
            let caption = format!("a {} {} that is {}", a.color_name, a.shape, a.class);
            captions.push(CaptionRecord {
                video_id: video_id.clone(),
                frame_idx: t as u64,
                image: image_path,
                caption: caption.clone(),
            });
            caption_images.push(img.clone());
            // A zoomed actor view with the same caption: aligns the encoder
            // with the person-crop distribution used at detection time.
            let bbox = crate::image::Box2D::from_array(
                entries.last().unwrap().persons[0].bbox,
            );
            let grown = crate::image::Box2D::new(
                bbox.x1 - bbox.width() * 0.5,
                bbox.y1 - bbox.height() * 0.5,
                bbox.x2 + bbox.width() * 0.5,
                bbox.y2 + bbox.height() * 0.5,
            );
            let clamped = crate::image::Box2D::new(
                grown.x1.max(0.0),
                grown.y1.max(0.0),
                grown.x2.min(size),
                grown.y2.min(size),
            );
            let rgb = crate::image::bilinear_resize_region(
                &img,
                clamped,
                config.image_size,
                config.image_size,
            );
            caption_images.push(Image {
                width: config.image_size,
                height: config.image_size,
                rgb,
            });
            captions.push(CaptionRecord {
                video_id: video_id.clone(),
                frame_idx: t as u64,
                image: format!("crops/{video_id}/{t:04}.ppm"),
                caption,
            });
        }
        frames.push(img);
    }

    Ok(SynthVideo {
        manifest: VideoManifest {
            video_id,
            frames: entries,
        },
        frames,
        captions,
        caption_images,
    })
}

fn phase(t: i64, n_frames: usize) -> f64 {
    t as f64 / (n_frames.max(2) - 1) as f64
}

fn triangle_wave(u: f64) -> f64 {
    let f = u - u.floor();
    2.0 * (2.0 * f - 1.0).abs() - 1.0
}

fn pose_at(actor: &Actor, t: i64, n_frames: usize) -> Pose {
    let p = phase(t, n_frames);
    let s = &actor.slot;
    let cx0 = s.x0 + s.w / 2.0;
    let cy0 = s.y0 + s.h / 2.0;
    let a = actor.amplitude;
    let r0 = actor.base_radius;
    let mut pose = Pose {
        cx: cx0,
        cy: cy0,
        radius: r0,
        angle: 0.0,
        brightness: 1.0,
    };
    match actor.class.as_str() {
        "move-right" => pose.cx = cx0 - a + 2.0 * a * p,
        "move-left" => pose.cx = cx0 + a - 2.0 * a * p,
        "drift-up" => pose.cy = cy0 + a - 2.0 * a * p,
        "drift-down" => pose.cy = cy0 - a + 2.0 * a * p,
        "bounce" => {
            let rest = s.y0 + s.h - r0 - 2.0;
            pose.cy = rest - 1.6 * a * (std::f64::consts::PI * 2.0 * p).sin().abs();
        }
        "zigzag" => {
            pose.cx = cx0 - a + 2.0 * a * p;
            pose.cy = cy0 + 0.9 * a * triangle_wave(2.0 * p);
        }
        "rotate" => pose.angle = 0.25 * t as f64,
        "spin-fast" => pose.angle = 1.1 * t as f64,
        "grow" => pose.radius = r0 * (0.5 + 1.0 * p),
        "shrink" => pose.radius = r0 * (1.5 - 1.0 * p),
        "orbit" => {
            let th = std::f64::consts::TAU * p;
            pose.cx = cx0 + 0.8 * a * th.cos();
            pose.cy = cy0 + 0.8 * a * th.sin();
        }
        "flash" => {
            let b = 0.55 + 0.45 * (std::f64::consts::TAU * 1.5 * p).sin();
            pose.brightness = b.clamp(0.08, 1.0) as f32;
        }
        other => unreachable!("unknown class '{other}' passed validation"),
    }
    pose
}

fn draw_props(img: &mut Image, actor: &Actor) {
    let s = &actor.slot;
    match actor.class.as_str() {
        "bounce" => {
            // Ground line along the slot bottom.
            let y = (s.y0 + s.h - 1.5) as usize;
            let y = y.min(img.height - 1);
            let x0 = (s.x0 + 1.0) as usize;
            let x1 = ((s.x0 + s.w - 1.0) as usize).min(img.width - 1);
            for x in x0..=x1 {
                img.set_pixel(x, y, [0.5, 0.5, 0.5]);
            }
        }
        "orbit" => {
            // Pivot dot at the slot center.
            let cx = s.x0 + s.w / 2.0;
            let cy = s.y0 + s.h / 2.0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let x = (cx as i64 + dx).clamp(0, img.width as i64 - 1) as usize;
                    let y = (cy as i64 + dy).clamp(0, img.height as i64 - 1) as usize;
                    if dx.abs() + dy.abs() <= 1 {
                        img.set_pixel(x, y, [0.45, 0.45, 0.45]);
                    }
                }
            }
        }
        _ => {}
    }
}

fn draw_shape(img: &mut Image, actor: &Actor, pose: &Pose, alpha: f32) {
    let color = [
        actor.color[0] * pose.brightness,
        actor.color[1] * pose.brightness,
        actor.color[2] * pose.brightness,
    ];
    // Conservative raster bounds around the shape.
    let reach = pose.radius * 1.6 + 1.0;
    let x_min = ((pose.cx - reach).floor().max(0.0)) as usize;
    let y_min = ((pose.cy - reach).floor().max(0.0)) as usize;
    let x_max = ((pose.cx + reach).ceil().min(img.width as f64 - 1.0)) as usize;
    let y_max = ((pose.cy + reach).ceil().min(img.height as f64 - 1.0)) as usize;

    let step = 1.0 / SUPERSAMPLE as f64;
    for y in y_min..=y_max {
        for x in x_min..=x_max {
            let mut hits = 0usize;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let px = x as f64 + (sx as f64 + 0.5) * step;
                    let py = y as f64 + (sy as f64 + 0.5) * step;
                    if inside_shape(actor.shape, pose, px, py) {
                        hits += 1;
                    }
                }
            }
            if hits == 0 {
                continue;
            }
            let coverage = alpha * hits as f32 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
            let old = img.pixel(x, y);
            img.set_pixel(
                x,
                y,
                [
                    old[0] * (1.0 - coverage) + color[0] * coverage,
                    old[1] * (1.0 - coverage) + color[1] * coverage,
                    old[2] * (1.0 - coverage) + color[2] * coverage,
                ],
            );
        }
    }
}

fn inside_shape(shape: &str, pose: &Pose, px: f64, py: f64) -> bool {
    let dx = px - pose.cx;
    let dy = py - pose.cy;
    match shape {
        "circle" => dx * dx + dy * dy <= pose.radius * pose.radius,
        "square" => {
            let (sin, cos) = pose.angle.sin_cos();
            let u = dx * cos + dy * sin;
            let v = -dx * sin + dy * cos;
            let half = pose.radius * 0.9;
            u.abs() <= half && v.abs() <= half
        }
        "triangle" => {
            let vertices = triangle_vertices(pose);
            point_in_triangle(px, py, vertices)
        }
        _ => unreachable!(),
    }
}

fn triangle_vertices(pose: &Pose) -> [(f64, f64); 3] {
    let r = pose.radius * 1.15;
    let mut out = [(0.0, 0.0); 3];
    for (k, slot) in out.iter_mut().enumerate() {
        let th = pose.angle - std::f64::consts::FRAC_PI_2 + std::f64::consts::TAU * k as f64 / 3.0;
        *slot = (pose.cx + r * th.cos(), pose.cy + r * th.sin());
    }
    out
}

fn point_in_triangle(px: f64, py: f64, v: [(f64, f64); 3]) -> bool {
    let sign = |a: (f64, f64), b: (f64, f64), c: (f64, f64)| {
        (a.0 - c.0) * (b.1 - c.1) - (b.0 - c.0) * (a.1 - c.1)
    };
    let d1 = sign((px, py), v[0], v[1]);
    let d2 = sign((px, py), v[1], v[2]);
    let d3 = sign((px, py), v[2], v[0]);
    let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
    let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
    !(has_neg && has_pos)
}

fn bounding_box(actor: &Actor, pose: &Pose, canvas: f64) -> [f64; 4] {
    let (ex, ey) = match actor.shape {
        "circle" => (pose.radius, pose.radius),
        "square" => {
            let half = pose.radius * 0.9;
            let (sin, cos) = pose.angle.sin_cos();
            let e = half * (cos.abs() + sin.abs());
            (e, e)
        }
        "triangle" => {
            let v = triangle_vertices(pose);
            let x1 = v.iter().map(|p| p.0).fold(f64::MAX, f64::min).max(0.0);
            let x2 = v.iter().map(|p| p.0).fold(f64::MIN, f64::max).min(canvas);
            let y1 = v.iter().map(|p| p.1).fold(f64::MAX, f64::min).max(0.0);
            let y2 = v.iter().map(|p| p.1).fold(f64::MIN, f64::max).min(canvas);
            return [x1, y1, x2.max(x1 + 0.5), y2.max(y1 + 0.5)];
        }
        _ => unreachable!(),
    };
    let x1 = (pose.cx - ex).max(0.0);
    let y1 = (pose.cy - ey).max(0.0);
    let x2 = (pose.cx + ex).min(canvas);
    let y2 = (pose.cy + ey).min(canvas);
    [x1, y1, x2.max(x1 + 0.5), y2.max(y1 + 0.5)]
}

/// All caption-format phrasings of one class name, one per (color, shape)
/// combination; averaging text features over these matches the phrase
/// distribution the caption corpus was aligned on.
pub fn caption_templates(class: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(COLORS.len() * SHAPES.len());
    for (color, _) in COLORS {
        for shape in SHAPES {
            out.push(format!("a {color} {shape} that is {class}"));
        }
    }
    out
}

/// Write frames, manifests, captions, and the class list under `out_dir`.
pub fn write_synth_output(out_dir: &std::path::Path, output: &SynthOutput) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    for video in &output.videos {
        for (entry, frame) in video.manifest.frames.iter().zip(video.frames.iter()) {
            frame.write_ppm(&out_dir.join(&entry.image))?;
        }
        for (record, image) in video.captions.iter().zip(video.caption_images.iter()) {
            if record.image.starts_with("crops/") {
                image.write_ppm(&out_dir.join(&record.image))?;
            }
        }
    }
    let manifests: Vec<VideoManifest> = output.videos.iter().map(|v| v.manifest.clone()).collect();
    super::write_manifests(&out_dir.join("manifests.jsonl"), &manifests)?;

    let mut captions_file = std::fs::File::create(out_dir.join("captions.jsonl"))?;
    use std::io::Write;
    for video in &output.videos {
        for c in &video.captions {
            serde_json::to_writer(&mut captions_file, c)?;
            captions_file.write_all(b"\n")?;
        }
    }
    std::fs::write(
        out_dir.join("classes.json"),
        serde_json::to_string_pretty(&output.classes)?,
    )?;
    Ok(())
}

pub fn read_captions(path: &std::path::Path) -> Result<Vec<CaptionRecord>> {
    use std::io::BufRead;
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
