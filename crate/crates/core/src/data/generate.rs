//! Procedural shape images rendered in configurable visual styles.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use super::Dataset;
use crate::augment::Image;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
    Star,
    Diamond,
    Ring,
}

pub const SHAPES: [Shape; 7] = [
    Shape::Circle,
    Shape::Square,
    Shape::Triangle,
    Shape::Cross,
    Shape::Star,
    Shape::Diamond,
    Shape::Ring,
];

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
            Shape::Star => "star",
            Shape::Diamond => "diamond",
            Shape::Ring => "ring",
        }
    }

    /// Signed distance in shape units (negative inside); the shape fits in
    /// the unit disc.
    fn sdf(self, x: f64, y: f64) -> f64 {
        let r = x.hypot(y);
        match self {
            Shape::Circle => r - 0.9,
            Shape::Square => x.abs().max(y.abs()) - 0.7,
            Shape::Triangle => regular_polygon(x, y, 3, 0.5),
            Shape::Cross => (x.abs() - 0.85)
                .max(y.abs() - 0.28)
                .min((x.abs() - 0.28).max(y.abs() - 0.85)),
            Shape::Star => {
                let a = y.atan2(x);
                let spike = (0.5 + 0.5 * (5.0 * a).cos()).powi(2);
                r - (0.42 + 0.53 * spike)
            }
            Shape::Diamond => (x.abs() + y.abs() - 0.95) / std::f64::consts::SQRT_2,
            Shape::Ring => (r - 0.68).abs() - 0.22,
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Convex regular polygon with `sides` edges at distance `apothem` from the center.
fn regular_polygon(x: f64, y: f64, sides: usize, apothem: f64) -> f64 {
    (0..sides)
        .map(|i| {
            let a = PI / 2.0 + TAU * (i as f64 + 0.5) / sides as f64;
            x * a.cos() + y * a.sin() - apothem
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Visual style of a domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub name: String,
    /// Background hue in `[0, 1)`; `None` for a neutral light background.
    pub background_hue: Option<f64>,
    /// Foreground darkening relative to the background, in `[0, 1]`.
    pub contrast: f64,
    /// Outline thickness in shape units; 0 draws filled shapes.
    pub stroke: f64,
    /// Amplitude of the additive background texture, in `[0, 0.5]`.
    pub noise: f64,
    pub invert: bool,
}

impl DomainSpec {
    pub fn builtin() -> Vec<DomainSpec> {
        let base = |name: &str| DomainSpec {
            name: name.into(),
            background_hue: None,
            contrast: 0.85,
            stroke: 0.0,
            noise: 0.02,
            invert: false,
        };
        vec![
            base("plain"),
            DomainSpec {
                invert: true,
                ..base("inverted")
            },
            DomainSpec {
                background_hue: Some(0.58),
                contrast: 0.7,
                ..base("tinted")
            },
            DomainSpec {
                contrast: 0.7,
                noise: 0.25,
                ..base("textured")
            },
            DomainSpec {
                stroke: 0.18,
                ..base("outline")
            },
            DomainSpec {
                contrast: 0.3,
                ..base("lowcontrast")
            },
        ]
    }

    pub fn names() -> Vec<String> {
        Self::builtin().into_iter().map(|d| d.name).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.background_hue.is_none_or(|h| (0.0..1.0).contains(&h))
            && (0.0..=1.0).contains(&self.contrast)
            && (0.0..=0.5).contains(&self.stroke)
            && (0.0..=0.5).contains(&self.noise);
        if !ok {
            return Err(Error::Config(format!(
                "domain {:?} has parameters out of range",
                self.name
            )));
        }
        Ok(())
    }

    fn background(&self) -> [f64; 3] {
        match self.background_hue {
            None => [0.9; 3],
            Some(h) => hsv(h, 0.55, 0.9),
        }
    }
}

impl FromStr for DomainSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::builtin()
            .into_iter()
            .find(|d| d.name == s)
            .ok_or_else(|| Error::Config(format!("unknown domain {s:?}; valid: {}", Self::names().join(", "))))
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let f = |n: f64| {
        let k = (n + h * 6.0) % 6.0;
        v - v * s * (k.min(4.0 - k).clamp(0.0, 1.0))
    };
    [f(5.0), f(3.0), f(1.0)]
}

/// Renders one sample of `shape` in the style of `spec`.
pub fn render(shape: Shape, spec: &DomainSpec, size: usize, rng: &mut Rng) -> Image {
    let s = size as f64;
    let scale = s * (0.26 + 0.1 * rng.unit());
    let margin = scale * 0.95;
    let cx = margin + (s - 2.0 * margin) * rng.unit();
    let cy = margin + (s - 2.0 * margin) * rng.unit();
    let theta = TAU * rng.unit();
    let (sin, cos) = theta.sin_cos();
    let tex_angle = TAU * rng.unit();
    let tex_period = s * (0.15 + 0.1 * rng.unit());
    let tex_phase = TAU * rng.unit();

    let bg = spec.background();
    let fg = bg.map(|c| c * (1.0 - spec.contrast));
    let mut img = Image::filled(size, size, [0.0; 3]);
    for py in 0..size {
        for px in 0..size {
            let dx = px as f64 + 0.5 - cx;
            let dy = py as f64 + 0.5 - cy;
            let u = (cos * dx + sin * dy) / scale;
            let v = (-sin * dx + cos * dy) / scale;
            let mut d = shape.sdf(u, v);
            if spec.stroke > 0.0 {
                d = d.abs() - spec.stroke / 2.0;
            }
            let alpha = (0.5 - d * scale).clamp(0.0, 1.0);
            let along = dx * tex_angle.cos() + dy * tex_angle.sin();
            let texture = spec.noise * ((TAU * along / tex_period + tex_phase).sin() + (rng.unit() - 0.5));
            let rgb = [0, 1, 2].map(|c| {
                let mut val = bg[c] * (1.0 - alpha) + fg[c] * alpha + texture * (1.0 - alpha);
                if spec.invert {
                    val = 1.0 - val;
                }
                val.clamp(0.0, 1.0) as f32
            });
            img.set_pixel(py, px, rgb);
        }
    }
    img
}

/// `per_class` samples of each of the first `classes` shapes, interleaved by
/// class. Each sample is rendered from its own child stream.
pub fn gen_domain_dataset(
    spec: &DomainSpec,
    per_class: usize,
    classes: usize,
    size: usize,
    rng: &mut Rng,
) -> Result<Dataset> {
    spec.validate()?;
    if !(2..=SHAPES.len()).contains(&classes) {
        return Err(Error::Config(format!(
            "classes must be in 2..={}, got {classes}",
            SHAPES.len()
        )));
    }
    if size < 16 {
        return Err(Error::Config(format!("image size must be at least 16, got {size}")));
    }
    if per_class == 0 {
        return Err(Error::Config("per_class must be at least 1".into()));
    }
    let seed = rng.seed();
    let n = per_class * classes;
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let images: Vec<Image> = labels
        .iter()
        .map(|&y| render(SHAPES[y], spec, size, &mut rng.split()))
        .collect();
    let mut data = Dataset::new(Image::stack(&images)?, labels, classes)?;
    for (k, v) in [
        ("domain", spec.name.clone()),
        ("classes", classes.to_string()),
        ("size", size.to_string()),
        ("per_class", per_class.to_string()),
        ("seed", seed.to_string()),
    ] {
        data.meta.insert(k.into(), v);
    }
    Ok(data)
}
