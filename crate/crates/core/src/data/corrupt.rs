//! Procedural corruptions at five fixed severities.

use std::fmt;
use std::str::FromStr;

use super::Dataset;
use crate::augment::Image;
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const NOISE_STD: [f64; 5] = [0.04, 0.08, 0.12, 0.16, 0.20];
pub const BLUR_SIGMA: [f64; 5] = [0.5, 0.75, 1.0, 1.5, 2.0];
pub const CONTRAST_FACTOR: [f64; 5] = [0.75, 0.6, 0.45, 0.3, 0.2];
pub const BRIGHTNESS_SHIFT: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];
pub const PIXELATE_BLOCK: [usize; 5] = [2, 3, 4, 6, 8];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CorruptionKind {
    GaussianNoise,
    GaussianBlur,
    Contrast,
    Brightness,
    Pixelate,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 5] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::GaussianBlur,
        CorruptionKind::Contrast,
        CorruptionKind::Brightness,
        CorruptionKind::Pixelate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::GaussianBlur => "gaussian_blur",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Pixelate => "pixelate",
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|k| k.name()).collect();
            Error::Config(format!("unknown corruption {s:?}; valid: {}", names.join(", ")))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    /// 1 to 5.
    pub severity: u8,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(Error::Config(format!("severity must be in 1..=5, got {severity}")));
        }
        Ok(Self { kind, severity })
    }

    /// The distortion parameter from the kind's severity table.
    pub fn parameter(&self) -> f64 {
        let i = usize::from(self.severity.clamp(1, 5)) - 1;
        match self.kind {
            CorruptionKind::GaussianNoise => NOISE_STD[i],
            CorruptionKind::GaussianBlur => BLUR_SIGMA[i],
            CorruptionKind::Contrast => CONTRAST_FACTOR[i],
            CorruptionKind::Brightness => BRIGHTNESS_SHIFT[i],
            CorruptionKind::Pixelate => PIXELATE_BLOCK[i] as f64,
        }
    }
}

/// Scales every channel around its own mean by `factor`, without clamping.
pub fn contrast_scale(img: &Image, factor: f64) -> Image {
    let mut out = img.clone();
    let plane = img.height * img.width;
    for ch in out.data_mut().chunks_mut(plane) {
        let mean = ch.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
        for v in ch {
            *v = (mean + factor * (*v as f64 - mean)) as f32;
        }
    }
    out
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / s).collect()
}

/// Separable Gaussian blur with edge replication. Each output is written as
/// the center value plus weighted differences, so flat regions stay exact.
fn blur(img: &Image, sigma: f64) -> Image {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = (img.height as isize, img.width as isize);
    let pass = |src: &[f32], horizontal: bool| -> Vec<f32> {
        let mut dst = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                let center = src[(y * w + x) as usize] as f64;
                let mut acc = 0.0;
                for (j, &wt) in k.iter().enumerate() {
                    let o = j as isize - r;
                    let (yy, xx) = if horizontal {
                        (y, (x + o).clamp(0, w - 1))
                    } else {
                        ((y + o).clamp(0, h - 1), x)
                    };
                    acc += wt * (src[(yy * w + xx) as usize] as f64 - center);
                }
                dst[(y * w + x) as usize] = (center + acc) as f32;
            }
        }
        dst
    };
    let mut out = img.clone();
    let plane = img.height * img.width;
    for ch in out.data_mut().chunks_mut(plane) {
        let tmp = pass(ch, true);
        ch.copy_from_slice(&pass(&tmp, false));
    }
    out
}

fn pixelate(img: &Image, block: usize) -> Image {
    let mut out = img.clone();
    let (h, w) = (img.height, img.width);
    for ch in out.data_mut().chunks_mut(h * w) {
        for by in (0..h).step_by(block) {
            for bx in (0..w).step_by(block) {
                let (y1, x1) = ((by + block).min(h), (bx + block).min(w));
                let mut sum = 0.0f64;
                for y in by..y1 {
                    for x in bx..x1 {
                        sum += ch[y * w + x] as f64;
                    }
                }
                let mean = (sum / ((y1 - by) * (x1 - bx)) as f64) as f32;
                for y in by..y1 {
                    for x in bx..x1 {
                        ch[y * w + x] = mean;
                    }
                }
            }
        }
    }
    out
}

/// Applies `spec` and clamps to `[0, 1]`. Only Gaussian noise draws from `rng`.
pub fn apply_corruption(img: &Image, spec: CorruptionSpec, rng: &mut Rng) -> Result<Image> {
    let spec = CorruptionSpec::new(spec.kind, spec.severity)?;
    let p = spec.parameter();
    let mut out = match spec.kind {
        CorruptionKind::GaussianNoise => {
            let mut out = img.clone();
            for v in out.data_mut() {
                *v = (*v as f64 + p * rng.standard_normal()) as f32;
            }
            out
        }
        CorruptionKind::GaussianBlur => blur(img, p),
        CorruptionKind::Contrast => contrast_scale(img, p),
        CorruptionKind::Brightness => {
            let mut out = img.clone();
            for v in out.data_mut() {
                *v = (*v as f64 + p) as f32;
            }
            out
        }
        CorruptionKind::Pixelate => pixelate(img, p as usize),
    };
    out.clamp();
    Ok(out)
}

/// Corrupts every image of `data`, each from its own child stream.
pub fn corrupt_dataset(data: &Dataset, spec: CorruptionSpec, rng: &mut Rng) -> Result<Dataset> {
    let images = (0..data.len())
        .map(|i| apply_corruption(&Image::from_batch(&data.images, i)?, spec, &mut rng.split()))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Dataset::new(Image::stack(&images)?, data.labels.clone(), data.classes)?;
    out.meta = data.meta.clone();
    out.meta.insert("corruption".into(), spec.kind.to_string());
    out.meta.insert("severity".into(), spec.severity.to_string());
    Ok(out)
}
