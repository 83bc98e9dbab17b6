//! Procedural multi-domain scenes with exact labels.
//!
//! A scene is a class-0 background with layered rectangles, ellipses and
//! triangles, one class each. Domains share the class semantics (colour,
//! texture, shape family) and differ by an appearance/geometry shift.

use rand::Rng as _;
use rand_distr::StandardNormal;

use super::{DomainSample, DomainSet, Image, LabelMap};
use crate::error::{Error, Result};
use crate::rng::{stream_id, substream, Rng};

/// Per-domain appearance and geometry perturbation.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainShift {
    /// Hue rotation in degrees.
    pub hue_shift: f64,
    pub brightness: f64,
    pub noise_sigma: f64,
    /// Gaussian blur sigma in pixels; 0 disables blurring.
    pub blur_sigma: f64,
    /// Amplitude in pixels of a sinusoidal coordinate warp.
    pub warp_amplitude: f64,
}

impl DomainShift {
    pub fn identity() -> Self {
        DomainShift {
            hue_shift: 0.0,
            brightness: 1.0,
            noise_sigma: 0.0,
            blur_sigma: 0.0,
            warp_amplitude: 0.0,
        }
    }
}

impl Default for DomainShift {
    fn default() -> Self {
        Self::identity()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub num_images: usize,
    /// Inclusive range of foreground shapes per image.
    pub shapes_per_image: (usize, usize),
    /// Shift `k` (k ≥ 1) is `shifts[k - 1]`; shift 0 is the identity.
    pub shifts: Vec<DomainShift>,
    pub seed: u64,
}

impl SynthSpec {
    /// The 64×64, 5-class benchmark: three source styles and one strongly
    /// shifted target style (shift indices 1..=3 and 4).
    pub fn desk(num_images: usize, seed: u64) -> Self {
        SynthSpec {
            num_classes: 5,
            height: 64,
            width: 64,
            num_images,
            shapes_per_image: (2, 5),
            shifts: vec![
                DomainShift {
                    hue_shift: -12.0,
                    brightness: 1.05,
                    noise_sigma: 0.02,
                    ..DomainShift::identity()
                },
                DomainShift {
                    hue_shift: 10.0,
                    brightness: 0.9,
                    blur_sigma: 0.6,
                    ..DomainShift::identity()
                },
                DomainShift {
                    hue_shift: 4.0,
                    brightness: 1.15,
                    noise_sigma: 0.04,
                    warp_amplitude: 1.0,
                    ..DomainShift::identity()
                },
                DomainShift {
                    hue_shift: 28.0,
                    brightness: 0.7,
                    noise_sigma: 0.07,
                    blur_sigma: 0.9,
                    warp_amplitude: 2.5,
                },
            ],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.shapes_per_image;
        if self.num_classes < 2 || self.num_classes > 255 {
            return Err(Error::Config(format!("synthetic class count {} outside 2..=255", self.num_classes)));
        }
        if self.height < 2 || self.width < 2 || self.num_images == 0 || lo > hi {
            return Err(Error::Config(format!("degenerate synthetic spec {self:?}")));
        }
        for s in &self.shifts {
            if !(s.brightness > 0.0) || s.noise_sigma < 0.0 || s.blur_sigma < 0.0 || s.warp_amplitude < 0.0 {
                return Err(Error::Config(format!("invalid domain shift {s:?}")));
            }
        }
        Ok(())
    }

    pub fn shift(&self, index: usize) -> Result<DomainShift> {
        match index {
            0 => Ok(DomainShift::identity()),
            k => self
                .shifts
                .get(k - 1)
                .cloned()
                .ok_or_else(|| Error::Config(format!("shift index {k} but only {} shifts defined", self.shifts.len()))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Kind {
    Rect,
    Ellipse,
    Triangle,
}

#[derive(Clone, Copy, Debug)]
struct Shape {
    class: u8,
    kind: Kind,
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    cos: f64,
    sin: f64,
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = (dx * self.cos + dy * self.sin) / self.rx;
        let v = (-dx * self.sin + dy * self.cos) / self.ry;
        match self.kind {
            Kind::Rect => u.abs() <= 1.0 && v.abs() <= 1.0,
            Kind::Ellipse => u * u + v * v <= 1.0,
            // apex at v = -1, base at v = 1
            Kind::Triangle => (-1.0..=1.0).contains(&v) && u.abs() <= (v + 1.0) / 2.0,
        }
    }
}

/// Base colour of a class; hues are spread evenly over the foreground
/// classes, the background is a desaturated grey-green.
pub fn class_color(class: usize, num_classes: usize) -> [f32; 3] {
    if class == 0 {
        return [0.42, 0.45, 0.40];
    }
    let hue = 360.0 * (class - 1) as f64 / (num_classes - 1) as f64 + 15.0;
    hsv_to_rgb(hue, 0.75, 0.85)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f32; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) as f32, (g + m) as f32, (b + m) as f32]
}

fn texture(class: usize, y: f64, x: f64) -> f64 {
    let freq = 0.35 + 0.17 * class as f64;
    let angle = 0.9 * class as f64;
    1.0 + 0.12 * (freq * (x * angle.cos() + y * angle.sin())).sin()
}

fn draw_shapes(spec: &SynthSpec, rng: &mut Rng) -> Vec<Shape> {
    let (lo, hi) = spec.shapes_per_image;
    let n = rng.random_range(lo..=hi);
    let (h, w) = (spec.height as f64, spec.width as f64);
    (0..n)
        .map(|_| {
            let class = rng.random_range(1..spec.num_classes) as u8;
            let kind = match (class - 1) % 3 {
                0 => Kind::Rect,
                1 => Kind::Ellipse,
                _ => Kind::Triangle,
            };
            let angle: f64 = rng.random_range(-0.6..0.6);
            Shape {
                class,
                kind,
                cy: rng.random_range(0.0..h),
                cx: rng.random_range(0.0..w),
                ry: rng.random_range(0.08..0.3) * h,
                rx: rng.random_range(0.08..0.3) * w,
                cos: angle.cos(),
                sin: angle.sin(),
            }
        })
        .collect()
}

fn render(spec: &SynthSpec, shapes: &[Shape], shift: &DomainShift) -> (Image, LabelMap) {
    let (h, w) = (spec.height, spec.width);
    let plane = h * w;
    let mut data = vec![0.0f32; 3 * plane];
    let mut ids = vec![0u8; plane];
    let a = shift.warp_amplitude;
    for py in 0..h {
        for px in 0..w {
            let (mut y, mut x) = (py as f64 + 0.5, px as f64 + 0.5);
            if a > 0.0 {
                let (y0, x0) = (y, x);
                y += a * (std::f64::consts::TAU * x0 / 23.0).sin();
                x += a * (std::f64::consts::TAU * y0 / 19.0).sin();
            }
            let class = shapes.iter().rev().find(|s| s.contains(y, x)).map_or(0, |s| s.class) as usize;
            let base = class_color(class, spec.num_classes);
            let shade = if class == 0 {
                0.85 + 0.3 * y / h as f64
            } else {
                texture(class, y, x)
            };
            ids[py * w + px] = class as u8;
            for c in 0..3 {
                data[c * plane + py * w + px] = (base[c] as f64 * shade).clamp(0.0, 1.0) as f32;
            }
        }
    }
    (Image { height: h, width: w, data }, LabelMap { height: h, width: w, ids })
}

fn hue_rotate(img: &mut Image, degrees: f64) {
    let (s, c) = degrees.to_radians().sin_cos();
    let k = 1.0 / 3.0;
    let q = (1.0f64 / 3.0).sqrt();
    // Rodrigues rotation about the grey axis (1,1,1)/√3.
    let m = [
        [c + (1.0 - c) * k, k * (1.0 - c) - q * s, k * (1.0 - c) + q * s],
        [k * (1.0 - c) + q * s, c + k * (1.0 - c), k * (1.0 - c) - q * s],
        [k * (1.0 - c) - q * s, k * (1.0 - c) + q * s, c + k * (1.0 - c)],
    ];
    let plane = img.height * img.width;
    for p in 0..plane {
        let rgb = [0, 1, 2].map(|ch| img.data[ch * plane + p] as f64);
        for (ch, row) in m.iter().enumerate() {
            let v = row[0] * rgb[0] + row[1] * rgb[1] + row[2] * rgb[2];
            img.data[ch * plane + p] = v.clamp(0.0, 1.0) as f32;
        }
    }
}

fn apply_appearance(img: &mut Image, shift: &DomainShift, rng: &mut Rng) {
    if shift.hue_shift != 0.0 {
        hue_rotate(img, shift.hue_shift);
    }
    if shift.brightness != 1.0 {
        for v in &mut img.data {
            *v = (*v as f64 * shift.brightness).clamp(0.0, 1.0) as f32;
        }
    }
    if shift.blur_sigma > 0.0 {
        *img = super::augment::gaussian_blur(img, shift.blur_sigma);
    }
    if shift.noise_sigma > 0.0 {
        for v in &mut img.data {
            let n: f64 = rng.sample(StandardNormal);
            *v = (*v as f64 + shift.noise_sigma * n).clamp(0.0, 1.0) as f32;
        }
    }
}

/// Renders `spec.num_images` labelled scenes under domain shift
/// `shift_index`. The output depends only on `(spec, shift_index)`.
pub fn synth_generate(spec: &SynthSpec, shift_index: usize) -> Result<DomainSet> {
    spec.validate()?;
    let shift = spec.shift(shift_index)?;
    let samples = (0..spec.num_images)
        .map(|i| {
            let mut geo = substream(spec.seed, stream_id(&[shift_index as u64, i as u64, 0]));
            let mut noise = substream(spec.seed, stream_id(&[shift_index as u64, i as u64, 1]));
            let shapes = draw_shapes(spec, &mut geo);
            let (mut image, label) = render(spec, &shapes, &shift);
            apply_appearance(&mut image, &shift, &mut noise);
            DomainSample::new(format!("d{shift_index}_{i:04}"), image, Some(label))
        })
        .collect::<Result<Vec<_>>>()?;
    DomainSet::source(format!("synth{shift_index}"), samples)
}
