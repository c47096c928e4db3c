//! In-memory RGB images, binary PPM (P6) / PGM (P5) codecs, and the bilinear
//! crop-resize used to build encoder inputs.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// RGB image with channel values in [0, 1], row-major, interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            rgb: vec![0.0; width * height * 3],
        }
    }

    pub fn fill(&mut self, r: f32, g: f32, b: f32) {
        for px in self.rgb.chunks_mut(3) {
            px[0] = r;
            px[1] = g;
            px[2] = b;
        }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, px: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.rgb[i] = px[0];
        self.rgb[i + 1] = px[1];
        self.rgb[i + 2] = px[2];
    }

    /// `[H×W×3]` tensor with values mapped from [0,1] to [-1,1].
    pub fn to_tensor(&self) -> Result<Tensor<f32>> {
        Tensor::from_vec(
            vec![self.height, self.width, 3],
            self.rgb.iter().map(|&v| v * 2.0 - 1.0).collect(),
        )
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let mut out = Vec::with_capacity(self.rgb.len() + 32);
        out.extend_from_slice(format!("P6\n{} {}\n255\n", self.width, self.height).as_bytes());
        out.extend(self.rgb.iter().map(|&v| quantize(v)));
        std::fs::File::create(path)?.write_all(&out)?;
        Ok(())
    }

    pub fn read_ppm(path: &Path) -> Result<Image> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let (magic, dims, payload) = parse_netpbm_header(&bytes)?;
        if magic != "P6" {
            return Err(Error::Format {
                offset: 0,
                message: format!("expected PPM magic P6, got {magic}"),
            });
        }
        let (w, h) = dims;
        if payload.len() < w * h * 3 {
            return Err(Error::Format {
                offset: (bytes.len() - payload.len()) as u64,
                message: "PPM payload truncated".into(),
            });
        }
        Ok(Image {
            width: w,
            height: h,
            rgb: payload[..w * h * 3]
                .iter()
                .map(|&b| b as f32 / 255.0)
                .collect(),
        })
    }

    pub fn read_png(path: &Path) -> Result<Image> {
        let img = image::open(path)
            .map_err(|e| Error::Input(format!("cannot decode {}: {e}", path.display())))?
            .to_rgb8();
        Ok(Image {
            width: img.width() as usize,
            height: img.height() as usize,
            rgb: img.into_raw().iter().map(|&b| b as f32 / 255.0).collect(),
        })
    }

    /// Load a frame by path; dispatches on the extension (`.ppm` / `.png`).
    pub fn read(path: &Path) -> Result<Image> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("ppm") => Image::read_ppm(path),
            Some("png") => Image::read_png(path),
            other => Err(Error::Input(format!(
                "unsupported image extension {other:?} for {}",
                path.display()
            ))),
        }
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write a grayscale P5 graymap; values clipped to [0, 1].
pub fn write_pgm(path: &Path, width: usize, height: usize, gray: &[f32]) -> Result<()> {
    if gray.len() != width * height {
        return Err(Error::Dim(format!(
            "write_pgm: {} values for {width}x{height} grid",
            gray.len()
        )));
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut out = Vec::with_capacity(gray.len() + 32);
    out.extend_from_slice(format!("P5\n{width} {height}\n255\n").as_bytes());
    out.extend(gray.iter().map(|&v| quantize(v)));
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

fn parse_netpbm_header(bytes: &[u8]) -> Result<(String, (usize, usize), &[u8])> {
    let mut pos = 0usize;
    let mut fields: Vec<String> = Vec::new();
    // magic, width, height, maxval; whitespace separated with optional comments
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format {
                offset: pos as u64,
                message: "netpbm header truncated".into(),
            });
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1; // single whitespace after maxval
    let parse = |s: &str| -> Result<usize> {
        s.parse::<usize>().map_err(|_| Error::Format {
            offset: 0,
            message: format!("bad netpbm header field '{s}'"),
        })
    };
    let w = parse(&fields[1])?;
    let h = parse(&fields[2])?;
    let maxval = parse(&fields[3])?;
    if maxval != 255 {
        return Err(Error::Format {
            offset: 0,
            message: format!("only maxval 255 supported, got {maxval}"),
        });
    }
    Ok((fields[0].clone(), (w, h), &bytes[pos.min(bytes.len())..]))
}

/// Axis-aligned box in pixel coordinates, `[x1, y1, x2, y2]` with `x1 < x2`,
/// `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Box2D {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Box2D {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Box2D { x1, y1, x2, y2 }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Box2D::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center_x(&self) -> f64 {
        0.5 * (self.x1 + self.x2)
    }

    pub fn center_y(&self) -> f64 {
        0.5 * (self.y1 + self.y2)
    }

    pub fn is_valid(&self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(Error::Input(format!(
                "degenerate box [{}, {}, {}, {}]",
                self.x1, self.y1, self.x2, self.y2
            )))
        }
    }
}

/// Crop a box out of a frame and bilinear-resize it to `out_size`², mapped to
/// [-1, 1].
///
/// Sampling convention: output pixel centers at half-pixel offsets inside the
/// box, i.e. `src_x = x1 + (j + 0.5) * bw / out - 0.5`, clamped to the frame.
pub fn crop_person(frame: &Image, bbox: Box2D, out_size: usize) -> Result<Tensor<f32>> {
    bbox.validate()?;
    let clamped = Box2D::new(
        bbox.x1.max(0.0),
        bbox.y1.max(0.0),
        bbox.x2.min(frame.width as f64),
        bbox.y2.min(frame.height as f64),
    );
    if !clamped.is_valid() {
        return Err(Error::Input(format!(
            "box [{}, {}, {}, {}] has zero area after clamping to {}x{}",
            bbox.x1, bbox.y1, bbox.x2, bbox.y2, frame.width, frame.height
        )));
    }
    let resized = bilinear_resize_region(frame, clamped, out_size, out_size);
    Tensor::from_vec(
        vec![out_size, out_size, 3],
        resized.iter().map(|&v| v * 2.0 - 1.0).collect(),
    )
}

/// Bilinear sample of a sub-region into `ow×oh`; returns [0,1] RGB data.
pub fn bilinear_resize_region(frame: &Image, region: Box2D, ow: usize, oh: usize) -> Vec<f32> {
    let bw = region.width();
    let bh = region.height();
    let mut out = Vec::with_capacity(ow * oh * 3);
    for oy in 0..oh {
        let sy = region.y1 + (oy as f64 + 0.5) * bh / oh as f64 - 0.5;
        for ox in 0..ow {
            let sx = region.x1 + (ox as f64 + 0.5) * bw / ow as f64 - 0.5;
            out.extend(sample_bilinear(frame, sx, sy));
        }
    }
    out
}

fn sample_bilinear(frame: &Image, sx: f64, sy: f64) -> [f32; 3] {
    let max_x = (frame.width - 1) as f64;
    let max_y = (frame.height - 1) as f64;
    let cx = sx.clamp(0.0, max_x);
    let cy = sy.clamp(0.0, max_y);
    let x0 = cx.floor() as usize;
    let y0 = cy.floor() as usize;
    let x1 = (x0 + 1).min(frame.width - 1);
    let y1 = (y0 + 1).min(frame.height - 1);
    let fx = (cx - x0 as f64) as f32;
    let fy = (cy - y0 as f64) as f32;
    let p00 = frame.pixel(x0, y0);
    let p10 = frame.pixel(x1, y0);
    let p01 = frame.pixel(x0, y1);
    let p11 = frame.pixel(x1, y1);
    let mut out = [0.0f32; 3];
    for c in 0..3 {
        let top = p00[c] * (1.0 - fx) + p10[c] * fx;
        let bot = p01[c] * (1.0 - fx) + p11[c] * fx;
        out[c] = top * (1.0 - fy) + bot * fy;
    }
    out
}
