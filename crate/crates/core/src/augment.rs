//! Image-level perturbation: random flip, color jitter and random grayscale.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// An RGB image with values in `[0, 1]`, stored as three `H × W` planes.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::invalid(format!(
                "image {height}×{width}×3 needs {} values, got {}",
                3 * height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for v in rgb {
            data.extend(std::iter::repeat_n(v, height * width));
        }
        Self { height, width, data }
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = y * self.width + x;
        let n = self.plane_len();
        [self.data[i], self.data[n + i], self.data[2 * n + i]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = y * self.width + x;
        let n = self.plane_len();
        for (c, v) in rgb.into_iter().enumerate() {
            self.data[c * n + i] = v;
        }
    }

    pub fn mean(&self) -> f32 {
        (self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64) as f32
    }

    pub fn clamp(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Extracts image `index` from an `N × 3 × H × W` batch.
    pub fn from_batch<T: Scalar>(batch: &Tensor<T>, index: usize) -> Result<Self> {
        let (n, c, h, w) = batch.dims4()?;
        if c != 3 || index >= n {
            return Err(Error::invalid(format!(
                "no RGB image {index} in batch of shape {:?}",
                batch.shape()
            )));
        }
        let len = 3 * h * w;
        let data = batch.data()[index * len..(index + 1) * len]
            .iter()
            .map(|v| v.as_f64() as f32)
            .collect();
        Image::new(h, w, data)
    }

    pub fn stack<T: Scalar>(images: &[Image]) -> Result<Tensor<T>> {
        let first = images
            .first()
            .ok_or_else(|| Error::invalid("cannot stack zero images"))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(images.len() * 3 * h * w);
        for img in images {
            if (img.height, img.width) != (h, w) {
                return Err(Error::invalid("images of different sizes"));
            }
            data.extend(img.data.iter().map(|&v| T::from_f64(v as f64)));
        }
        Tensor::from_vec(&[images.len(), 3, h, w], data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub flip_probability: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub grayscale_probability: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_probability: 0.5,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            grayscale_probability: 0.1,
        }
    }
}

impl AugmentConfig {
    /// Every transform switched off.
    pub fn disabled() -> Self {
        Self {
            flip_probability: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            grayscale_probability: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("flip_probability", self.flip_probability),
            ("grayscale_probability", self.grayscale_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} {p} outside [0, 1]")));
            }
        }
        for (name, s) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(s >= 0.0) {
                return Err(Error::Config(format!("{name} strength must be non-negative, got {s}")));
            }
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::disabled()
    }
}

pub fn flip(img: &Image) -> Image {
    let mut out = img.clone();
    for c in 0..3 {
        for y in 0..img.height {
            let row = &mut out.data[(c * img.height + y) * img.width..(c * img.height + y + 1) * img.width];
            row.reverse();
        }
    }
    out
}

pub fn horizontal_flip(img: &Image, rng: &mut Rng, p: f64) -> Result<Image> {
    Ok(if rng.bernoulli(p)? { flip(img) } else { img.clone() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JitterOp {
    Brightness,
    Contrast,
    Saturation,
}

/// Concrete jitter factors and the order they are applied in.
#[derive(Clone, Debug, PartialEq)]
pub struct JitterDraw {
    pub order: [JitterOp; 3],
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
}

impl JitterDraw {
    pub fn sample(rng: &mut Rng, brightness: f64, contrast: f64, saturation: f64) -> Result<Self> {
        const OPS: [JitterOp; 3] = [JitterOp::Brightness, JitterOp::Contrast, JitterOp::Saturation];
        let perm = rng.permutation(3)?;
        let mut factor = |s: f64| (1.0 - s + 2.0 * s * rng.unit()) as f32;
        let (b, c, s) = (factor(brightness), factor(contrast), factor(saturation));
        Ok(Self {
            order: [OPS[perm[0]], OPS[perm[1]], OPS[perm[2]]],
            brightness: b,
            contrast: c,
            saturation: s,
        })
    }
}

/// Applies the jitter ops in `draw.order`, clamping to `[0, 1]` after each.
pub fn apply_jitter(img: &Image, draw: &JitterDraw) -> Image {
    let mut out = img.clone();
    for op in draw.order {
        match op {
            JitterOp::Brightness => {
                for v in &mut out.data {
                    *v *= draw.brightness;
                }
            }
            JitterOp::Contrast => {
                let mean = out.mean();
                let u = draw.contrast;
                for v in &mut out.data {
                    *v = u * *v + (1.0 - u) * mean;
                }
            }
            JitterOp::Saturation => {
                let u = draw.saturation;
                for y in 0..out.height {
                    for x in 0..out.width {
                        let px = out.pixel(y, x);
                        let l = luma(px);
                        out.set_pixel(y, x, px.map(|v| u * v + (1.0 - u) * l));
                    }
                }
            }
        }
        out.clamp();
    }
    out
}

pub fn color_jitter(img: &Image, rng: &mut Rng, cfg: &AugmentConfig) -> Result<Image> {
    let draw = JitterDraw::sample(rng, cfg.brightness, cfg.contrast, cfg.saturation)?;
    Ok(apply_jitter(img, &draw))
}

pub fn luma(px: [f32; 3]) -> f32 {
    LUMA[0] * px[0] + LUMA[1] * px[1] + LUMA[2] * px[2]
}

pub fn grayscale(img: &Image) -> Image {
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            let l = luma(img.pixel(y, x));
            out.set_pixel(y, x, [l; 3]);
        }
    }
    out
}

pub fn random_grayscale(img: &Image, rng: &mut Rng, p: f64) -> Result<Image> {
    Ok(if rng.bernoulli(p)? { grayscale(img) } else { img.clone() })
}

/// Flip, then color jitter, then random grayscale.
pub fn strong_augment(img: &Image, rng: &mut Rng, cfg: &AugmentConfig) -> Result<Image> {
    cfg.validate()?;
    let out = horizontal_flip(img, rng, cfg.flip_probability)?;
    let out = color_jitter(&out, rng, cfg)?;
    random_grayscale(&out, rng, cfg.grayscale_probability)
}

/// Augments every image of an `N × 3 × H × W` batch with its own child stream.
pub fn augment_batch<T: Scalar>(batch: &Tensor<T>, rng: &mut Rng, cfg: &AugmentConfig) -> Result<Tensor<T>> {
    let (n, ..) = batch.dims4()?;
    let images = (0..n)
        .map(|i| {
            let img = Image::from_batch(batch, i)?;
            strong_augment(&img, &mut rng.split(), cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    Image::stack(&images)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn random_image(rng: &mut Rng, h: usize, w: usize) -> Image {
        let data = (0..3 * h * w).map(|_| rng.unit() as f32).collect();
        Image::new(h, w, data).unwrap()
    }

    #[test]
    fn flip_examples() {
        let img = Image::new(1, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let f = horizontal_flip(&img, &mut Rng::new(0), 1.0).unwrap();
        assert_eq!(f.data(), &[0.2, 0.1, 0.4, 0.3, 0.6, 0.5]);
        assert_eq!(horizontal_flip(&f, &mut Rng::new(0), 1.0).unwrap(), img);
        let mut rng = Rng::new(1);
        for _ in 0..20 {
            assert_eq!(horizontal_flip(&img, &mut rng, 0.0).unwrap(), img);
        }
    }

    #[test]
    fn jitter_examples() {
        let mut rng = Rng::new(3);
        let img = random_image(&mut rng, 4, 5);
        let cfg = AugmentConfig::disabled();
        assert_eq!(color_jitter(&img, &mut rng, &cfg).unwrap(), img);

        let bright = JitterDraw {
            order: [JitterOp::Brightness, JitterOp::Contrast, JitterOp::Saturation],
            brightness: 2.0,
            contrast: 1.0,
            saturation: 1.0,
        };
        let gray = Image::filled(2, 2, [0.6; 3]);
        assert!(apply_jitter(&gray, &bright).data().iter().all(|&v| v == 1.0));

        let flat = JitterDraw {
            order: [JitterOp::Contrast, JitterOp::Brightness, JitterOp::Saturation],
            brightness: 1.0,
            contrast: 0.0,
            saturation: 1.0,
        };
        let out = apply_jitter(&img, &flat);
        let m = img.mean();
        assert!(out.data().iter().all(|&v| (v - m).abs() < 1e-6));
    }

    #[test]
    fn grayscale_examples() {
        let gray = Image::filled(2, 3, [0.4; 3]);
        let out = random_grayscale(&gray, &mut Rng::new(0), 1.0).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.4).abs() < 1e-6));
        let red = Image::filled(1, 1, [1.0, 0.0, 0.0]);
        let out = grayscale(&red);
        assert!(out.data().iter().all(|&v| (v - 0.299).abs() < 1e-7));
        let img = random_image(&mut Rng::new(2), 3, 3);
        assert_eq!(random_grayscale(&img, &mut Rng::new(5), 0.0).unwrap(), img);
    }

    #[test]
    fn strong_augment_disabled_and_deterministic() {
        let img = random_image(&mut Rng::new(8), 6, 6);
        assert_eq!(
            strong_augment(&img, &mut Rng::new(1), &AugmentConfig::disabled()).unwrap(),
            img
        );
        let cfg = AugmentConfig::default();
        let a = strong_augment(&img, &mut Rng::new(42), &cfg).unwrap();
        let b = strong_augment(&img, &mut Rng::new(42), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stays_in_range_over_many_trials() {
        let mut rng = Rng::new(1000);
        let cfg = AugmentConfig {
            brightness: 0.9,
            contrast: 0.9,
            saturation: 0.9,
            grayscale_probability: 0.3,
            ..Default::default()
        };
        for _ in 0..1000 {
            let img = random_image(&mut rng, 3, 4);
            let out = strong_augment(&img, &mut rng, &cfg).unwrap();
            assert!(out.in_unit_range());
            assert_eq!((out.height, out.width), (3, 4));
        }
    }

    #[test]
    fn batch_roundtrip() {
        let mut rng = Rng::new(4);
        let imgs: Vec<Image> = (0..3).map(|_| random_image(&mut rng, 4, 4)).collect();
        let batch: Tensor<f32> = Image::stack(&imgs).unwrap();
        assert_eq!(Image::from_batch(&batch, 1).unwrap(), imgs[1]);
        let same = augment_batch(&batch, &mut rng, &AugmentConfig::disabled()).unwrap();
        assert_eq!(same, batch);
    }

    #[test]
    fn config_validation() {
        assert!(AugmentConfig {
            flip_probability: -0.1,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(AugmentConfig {
            contrast: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    proptest! {
        #[test]
        fn jitter_preserves_range_and_shape(seed in any::<u64>(), s in 0.0f64..2.0) {
            let mut rng = Rng::new(seed);
            let img = random_image(&mut rng, 5, 3);
            let cfg = AugmentConfig { brightness: s, contrast: s, saturation: s, ..Default::default() };
            let out = color_jitter(&img, &mut rng, &cfg).unwrap();
            prop_assert!(out.in_unit_range());
            prop_assert_eq!(out.data().len(), img.data().len());
        }
    }
}
