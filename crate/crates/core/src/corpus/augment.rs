use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::ImageTensor;

fn one() -> f64 {
    1.0
}

/// A single augmentation. Every op fires with probability `p`; ranged
/// parameters are drawn uniformly from `[min, max]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase", deny_unknown_fields)]
pub enum AugmentOp {
    /// Random `height × width` window, resized back to the input size.
    Crop {
        height: usize,
        width: usize,
        #[serde(default = "one")]
        p: f64,
    },
    Hflip {
        #[serde(default = "one")]
        p: f64,
    },
    Vflip {
        #[serde(default = "one")]
        p: f64,
    },
    /// Rotation about the centre in degrees, edge pixels extended.
    Rotate {
        degrees: [f64; 2],
        #[serde(default = "one")]
        p: f64,
    },
    /// Additive offset.
    Brightness {
        delta: [f64; 2],
        #[serde(default = "one")]
        p: f64,
    },
    /// Scales deviation from the per-channel mean.
    Contrast {
        factor: [f64; 2],
        #[serde(default = "one")]
        p: f64,
    },
    /// Scales deviation from the per-pixel grey level.
    Saturation {
        factor: [f64; 2],
        #[serde(default = "one")]
        p: f64,
    },
}

const OP_NAMES: [&str; 7] = ["crop", "hflip", "vflip", "rotate", "brightness", "contrast", "saturation"];

impl AugmentOp {
    fn p(&self) -> f64 {
        match *self {
            AugmentOp::Crop { p, .. }
            | AugmentOp::Hflip { p }
            | AugmentOp::Vflip { p }
            | AugmentOp::Rotate { p, .. }
            | AugmentOp::Brightness { p, .. }
            | AugmentOp::Contrast { p, .. }
            | AugmentOp::Saturation { p, .. } => p,
        }
    }

    /// Parses one op object, reporting unrecognised `op` names by name.
    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let name = value
            .get("op")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::InvalidConfig("augmentation entry without an \"op\" string".into()))?;
        if !OP_NAMES.contains(&name) {
            return Err(Error::UnknownAugmentation(name.to_string()));
        }
        serde_json::from_value(value.clone()).map_err(|e| Error::json(format!("augmentation {name}"), e))
    }
}

/// Ordered augmentation pipeline.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
#[serde(transparent)]
pub struct AugmentConfig {
    pub ops: Vec<AugmentOp>,
}

impl AugmentConfig {
    pub fn new(ops: Vec<AugmentOp>) -> Self {
        Self { ops }
    }

    /// The manual set: random crops plus horizontal and vertical flips.
    pub fn standard(image_size: usize) -> Self {
        let c = (image_size * 7 / 8).max(1);
        Self::new(vec![
            AugmentOp::Crop { height: c, width: c, p: 0.5 },
            AugmentOp::Hflip { p: 0.5 },
            AugmentOp::Vflip { p: 0.5 },
        ])
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let arr =
            value.as_array().ok_or_else(|| Error::InvalidConfig("augmentation config must be an array".into()))?;
        Ok(Self { ops: arr.iter().map(AugmentOp::from_json).collect::<Result<_>>()? })
    }
}

impl<'de> Deserialize<'de> for AugmentConfig {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = serde_json::Value::deserialize(d)?;
        AugmentConfig::from_json(&v).map_err(serde::de::Error::custom)
    }
}

fn draw(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

/// Applies `cfg` in order. Output has the input's shape with values in
/// `[0, 1]`, and depends only on `(img, cfg, seed)`.
pub fn augment_image(img: &ImageTensor, cfg: &AugmentConfig, seed: u64) -> Result<ImageTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = img.clone();
    for op in &cfg.ops {
        if let AugmentOp::Crop { height, width, .. } = *op {
            if height > img.height() || width > img.width() || height == 0 || width == 0 {
                return Err(Error::CropTooLarge { crop: (height, width), height: img.height(), width: img.width() });
            }
        }
        // Draw the gate unconditionally so later ops see the same stream
        // whatever `p` is.
        let fire = rng.gen::<f64>() < op.p();
        if !fire {
            continue;
        }
        out = match *op {
            AugmentOp::Crop { height, width, .. } => {
                let y0 = rng.gen_range(0..=out.height() - height);
                let x0 = rng.gen_range(0..=out.width() - width);
                crop(&out, y0, x0, height, width).resize(img.height(), img.width())
            }
            AugmentOp::Hflip { .. } => hflip(&out),
            AugmentOp::Vflip { .. } => vflip(&out),
            AugmentOp::Rotate { degrees, .. } => rotate(&out, draw(&mut rng, degrees)),
            AugmentOp::Brightness { delta, .. } => {
                let d = draw(&mut rng, delta) as f32;
                map(out, |v| v + d)
            }
            AugmentOp::Contrast { factor, .. } => {
                let f = draw(&mut rng, factor) as f32;
                contrast(out, f)
            }
            AugmentOp::Saturation { factor, .. } => {
                let f = draw(&mut rng, factor) as f32;
                saturation(out, f)
            }
        };
        out.clamp();
    }
    Ok(out)
}

fn map(mut img: ImageTensor, f: impl Fn(f32) -> f32) -> ImageTensor {
    for v in img.data_mut() {
        *v = f(*v);
    }
    img
}

fn crop(img: &ImageTensor, y0: usize, x0: usize, h: usize, w: usize) -> ImageTensor {
    let mut data = Vec::with_capacity(h * w * 3);
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            data.extend_from_slice(&img.pixel(y, x));
        }
    }
    ImageTensor::from_vec(h, w, data)
}

fn hflip(img: &ImageTensor) -> ImageTensor {
    let mut out = img.clone();
    let w = img.width();
    for y in 0..img.height() {
        for x in 0..w {
            out.set_pixel(y, x, img.pixel(y, w - 1 - x));
        }
    }
    out
}

fn vflip(img: &ImageTensor) -> ImageTensor {
    let mut out = img.clone();
    let h = img.height();
    for y in 0..h {
        for x in 0..img.width() {
            out.set_pixel(y, x, img.pixel(h - 1 - y, x));
        }
    }
    out
}

fn rotate(img: &ImageTensor, degrees: f64) -> ImageTensor {
    if degrees.rem_euclid(360.0) == 0.0 {
        return img.clone();
    }
    let (h, w) = (img.height(), img.width());
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            // Inverse mapping: sample the source at the un-rotated position.
            let sx = (cos * dx + sin * dy + cx).clamp(0.0, w as f64 - 1.0);
            let sy = (-sin * dx + cos * dy + cy).clamp(0.0, h as f64 - 1.0);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
            let (a, b, c, d) = (img.pixel(y0, x0), img.pixel(y0, x1), img.pixel(y1, x0), img.pixel(y1, x1));
            let mut px = [0.0f32; 3];
            for ch in 0..3 {
                let top = a[ch] * (1.0 - fx) + b[ch] * fx;
                let bottom = c[ch] * (1.0 - fx) + d[ch] * fx;
                px[ch] = top * (1.0 - fy) + bottom * fy;
            }
            out.set_pixel(y, x, px);
        }
    }
    out
}

fn contrast(mut img: ImageTensor, f: f32) -> ImageTensor {
    let n = (img.height() * img.width()).max(1) as f32;
    let mut mean = [0.0f32; 3];
    for px in img.data().chunks_exact(3) {
        for ch in 0..3 {
            mean[ch] += px[ch] / n;
        }
    }
    for px in img.data_mut().chunks_exact_mut(3) {
        for ch in 0..3 {
            px[ch] = mean[ch] + (px[ch] - mean[ch]) * f;
        }
    }
    img
}

fn saturation(mut img: ImageTensor, f: f32) -> ImageTensor {
    for px in img.data_mut().chunks_exact_mut(3) {
        let grey = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
        for v in px.iter_mut() {
            *v = grey + (*v - grey) * f;
        }
    }
    img
}
