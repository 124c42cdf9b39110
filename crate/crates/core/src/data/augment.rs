//! Random affine and HSV colour augmentation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::tensor::Tensor;

/// Colour jitter magnitudes: hue shift in `[-hue_deg, hue_deg]`, saturation
/// and value factors in `[1 - x, 1 + x]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HsvJitter {
    pub hue_deg: f64,
    pub saturation: f64,
    pub value: f64,
}

impl Default for HsvJitter {
    fn default() -> Self {
        HsvJitter {
            hue_deg: 10.0,
            saturation: 0.1,
            value: 0.1,
        }
    }
}

impl HsvJitter {
    pub fn none() -> Self {
        HsvJitter {
            hue_deg: 0.0,
            saturation: 0.0,
            value: 0.0,
        }
    }
}

/// Augmentation ranges, each symmetric about the identity: rotation in
/// `[-rotation_deg, rotation_deg]`, scale in `[1 - scale, 1 + scale]`, shift
/// in `[-shift, shift]` of the extent, shear in `[-shear_deg, shear_deg]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentParams {
    pub rotation_deg: f64,
    pub scale: f64,
    pub shift: f64,
    pub shear_deg: f64,
    pub hflip_p: f64,
    pub vflip_p: f64,
    pub hsv: HsvJitter,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            rotation_deg: 15.0,
            scale: 0.1,
            shift: 0.1,
            shear_deg: 5.0,
            hflip_p: 0.5,
            vflip_p: 0.5,
            hsv: HsvJitter::default(),
        }
    }
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            rotation_deg: 0.0,
            scale: 0.0,
            shift: 0.0,
            shear_deg: 0.0,
            hflip_p: 0.0,
            vflip_p: 0.0,
            hsv: HsvJitter::none(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("rotation_deg", self.rotation_deg, 0.0, 180.0),
            ("scale", self.scale, 0.0, 0.99),
            ("shift", self.shift, 0.0, 1.0),
            ("shear_deg", self.shear_deg, 0.0, 60.0),
            ("hflip_p", self.hflip_p, 0.0, 1.0),
            ("vflip_p", self.vflip_p, 0.0, 1.0),
            ("hsv.hue_deg", self.hsv.hue_deg, 0.0, 180.0),
            ("hsv.saturation", self.hsv.saturation, 0.0, 1.0),
            ("hsv.value", self.hsv.value, 0.0, 1.0),
        ];
        let bad: Vec<String> = checks
            .iter()
            .filter(|(_, v, lo, hi)| !(v >= lo && v <= hi))
            .map(|(k, v, lo, hi)| format!("augment.{k} = {v} outside [{lo}, {hi}]"))
            .collect();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

fn symmetric(rng: &mut impl Rng, r: f64) -> f64 {
    if r > 0.0 {
        rng.random_range(-r..=r)
    } else {
        0.0
    }
}

/// One concrete geometric transform about the image center. Coordinates are
/// `(x = col, y = row)`; a positive angle turns content counter-clockwise as
/// displayed. Flips are applied after the affine warp.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineTransform {
    pub rotation_deg: f64,
    pub scale: f64,
    pub shear_deg: f64,
    /// `(dx, dy)` as fractions of width and height.
    pub shift: (f64, f64),
    pub hflip: bool,
    pub vflip: bool,
}

impl Default for AffineTransform {
    fn default() -> Self {
        AffineTransform {
            rotation_deg: 0.0,
            scale: 1.0,
            shear_deg: 0.0,
            shift: (0.0, 0.0),
            hflip: false,
            vflip: false,
        }
    }
}

impl AffineTransform {
    pub fn sample(params: &AugmentParams, rng: &mut impl Rng) -> Self {
        AffineTransform {
            rotation_deg: symmetric(rng, params.rotation_deg),
            scale: 1.0 + symmetric(rng, params.scale),
            shear_deg: symmetric(rng, params.shear_deg),
            shift: (symmetric(rng, params.shift), symmetric(rng, params.shift)),
            hflip: params.hflip_p > 0.0 && rng.random_bool(params.hflip_p),
            vflip: params.vflip_p > 0.0 && rng.random_bool(params.vflip_p),
        }
    }

    fn warps(&self) -> bool {
        self.rotation_deg != 0.0 || self.scale != 1.0 || self.shear_deg != 0.0 || self.shift != (0.0, 0.0)
    }

    /// Forward map `[a, b; c, d]` applied to offsets from the center.
    fn matrix(&self) -> [f64; 4] {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let k = self.shear_deg.to_radians().tan();
        // R * Sh * S with R = [c, s; -s, c], Sh = [1, k; 0, 1]
        let z = self.scale;
        [c * z, (c * k + s) * z, -s * z, (-s * k + c) * z]
    }

    /// Where the pixel center `(x, y)` lands, before flips.
    pub fn map_point(&self, x: f64, y: f64, width: usize, height: usize) -> (f64, f64) {
        let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
        let [a, b, c, d] = self.matrix();
        let (dx, dy) = (x - cx, y - cy);
        let (mut px, mut py) = (
            a * dx + b * dy + cx + self.shift.0 * width as f64,
            c * dx + d * dy + cy + self.shift.1 * height as f64,
        );
        if self.hflip {
            px = width as f64 - 1.0 - px;
        }
        if self.vflip {
            py = height as f64 - 1.0 - py;
        }
        (px, py)
    }

    /// Applies the same map to image (bilinear) and mask (nearest), both
    /// with reflection padding.
    pub fn apply(&self, s: &Sample) -> Sample {
        let (h, w) = (s.height(), s.width());
        let mut out = s.clone();
        if self.warps() {
            let [a, b, c, d] = self.matrix();
            let det = a * d - b * c;
            let inv = [d / det, -b / det, -c / det, a / det];
            let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
            let (tx, ty) = (self.shift.0 * w as f64, self.shift.1 * h as f64);
            let source = |r: usize, col: usize| {
                let (dx, dy) = (col as f64 - cx - tx, r as f64 - cy - ty);
                (inv[0] * dx + inv[1] * dy + cx, inv[2] * dx + inv[3] * dy + cy)
            };
            let src = s.image.data();
            let dst = out.image.data_mut();
            for r in 0..h {
                for col in 0..w {
                    let (x, y) = source(r, col);
                    let (x0, y0) = (x.floor(), y.floor());
                    let (fx, fy) = (x - x0, y - y0);
                    let xs = [reflect(x0 as i64, w), reflect(x0 as i64 + 1, w)];
                    let ys = [reflect(y0 as i64, h), reflect(y0 as i64 + 1, h)];
                    for ch in 0..3 {
                        let p = &src[ch * h * w..(ch + 1) * h * w];
                        let top = f64::from(p[ys[0] * w + xs[0]]) * (1.0 - fx) + f64::from(p[ys[0] * w + xs[1]]) * fx;
                        let bot = f64::from(p[ys[1] * w + xs[0]]) * (1.0 - fx) + f64::from(p[ys[1] * w + xs[1]]) * fx;
                        dst[ch * h * w + r * w + col] = (top * (1.0 - fy) + bot * fy) as f32;
                    }
                }
            }
            if let Some(m) = &s.mask {
                out.mask = Some(LabelMask::from_fn(h, w, |r, col| {
                    let (x, y) = source(r, col);
                    m.get(reflect(y.round() as i64, h), reflect(x.round() as i64, w))
                }));
            }
        }
        if self.hflip || self.vflip {
            out = flip(&out, self.hflip, self.vflip);
        }
        out
    }
}

/// Mirror index without repeating the edge pixel.
fn reflect(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    (if m >= n as i64 { period - m } else { m }) as usize
}

fn flip(s: &Sample, horizontal: bool, vertical: bool) -> Sample {
    let (h, w) = (s.height(), s.width());
    let src_of = |r: usize, c: usize| {
        (
            if vertical { h - 1 - r } else { r },
            if horizontal { w - 1 - c } else { c },
        )
    };
    let mut out = s.clone();
    let src = s.image.data();
    let dst = out.image.data_mut();
    for ch in 0..3 {
        for r in 0..h {
            for c in 0..w {
                let (sr, sc) = src_of(r, c);
                dst[ch * h * w + r * w + c] = src[ch * h * w + sr * w + sc];
            }
        }
    }
    if let Some(m) = &s.mask {
        out.mask = Some(LabelMask::from_fn(h, w, |r, c| {
            let (sr, sc) = src_of(r, c);
            m.get(sr, sc)
        }));
    }
    out
}

pub fn augment_affine(s: &Sample, params: &AugmentParams, rng: &mut impl Rng) -> Sample {
    AffineTransform::sample(params, rng).apply(s)
}

/// Hexcone conversion; hue in degrees `[0, 360)`.
pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let s = if max > 0.0 { d / max } else { 0.0 };
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    (h, s, max)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let c = v * s;
    let hp = h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}

/// Adds `hue_shift` degrees (mod 360) and scales saturation and value,
/// clamping both to [0, 1].
pub fn shift_hsv(image: &Tensor<f32>, hue_shift: f64, sat_factor: f64, val_factor: f64) -> Tensor<f32> {
    let mut out = image.clone();
    if hue_shift == 0.0 && sat_factor == 1.0 && val_factor == 1.0 {
        return out;
    }
    let plane = image.len() / 3;
    let src = image.data();
    let dst = out.data_mut();
    for i in 0..plane {
        let (h, s, v) = rgb_to_hsv(
            f64::from(src[i]),
            f64::from(src[plane + i]),
            f64::from(src[2 * plane + i]),
        );
        let (r, g, b) = hsv_to_rgb(
            (h + hue_shift).rem_euclid(360.0),
            (s * sat_factor).clamp(0.0, 1.0),
            (v * val_factor).clamp(0.0, 1.0),
        );
        dst[i] = r as f32;
        dst[plane + i] = g as f32;
        dst[2 * plane + i] = b as f32;
    }
    out
}

pub fn augment_hsv(image: &Tensor<f32>, jitter: &HsvJitter, rng: &mut impl Rng) -> Tensor<f32> {
    let dh = symmetric(rng, jitter.hue_deg);
    let sf = 1.0 + symmetric(rng, jitter.saturation);
    let vf = 1.0 + symmetric(rng, jitter.value);
    shift_hsv(image, dh, sf, vf)
}

/// Affine warp followed by colour jitter.
pub fn augment(s: &Sample, params: &AugmentParams, rng: &mut impl Rng) -> Sample {
    let mut out = augment_affine(s, params, rng);
    out.image = augment_hsv(&out.image, &params.hsv, rng);
    out
}
