//! Synthetic lesion images: textured mucosa-like background with reddish
//! elliptical blobs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    pub size: usize,
    pub max_lesions: usize,
    /// Range of ellipse semi-axes in pixels.
    pub semi_axis: (f64, f64),
    /// Share of images without lesions.
    pub empty_fraction: f64,
    /// Ratio between the weights of `k + 1` and `k` lesions, `k >= 1`.
    pub count_decay: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            size: 64,
            max_lesions: 3,
            semi_axis: (11.0, 15.0),
            empty_fraction: 0.1,
            count_decay: 0.4,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.semi_axis;
        if self.size < 8 {
            return Err(Error::Config(format!("synth.size must be >= 8, got {}", self.size)));
        }
        if !(lo >= 1.0 && lo <= hi && 2.0 * hi + 4.0 <= self.size as f64) {
            return Err(Error::Config(format!(
                "synth.semi_axis {:?} must satisfy 1 <= lo <= hi and fit a {} px image",
                self.semi_axis, self.size
            )));
        }
        if !(0.0..=1.0).contains(&self.empty_fraction) || !(self.count_decay > 0.0) {
            return Err(Error::Config(
                "synth.empty_fraction must be in [0, 1] and synth.count_decay > 0".into(),
            ));
        }
        Ok(())
    }

    /// Probability of each lesion count `0..=max_lesions`.
    pub fn count_weights(&self) -> Vec<f64> {
        if self.max_lesions == 0 {
            return vec![1.0];
        }
        let geo: Vec<f64> = (0..self.max_lesions).map(|k| self.count_decay.powi(k as i32)).collect();
        let total: f64 = geo.iter().sum();
        std::iter::once(self.empty_fraction)
            .chain(geo.iter().map(|g| (1.0 - self.empty_fraction) * g / total))
            .collect()
    }
}

/// Support of a filled ellipse centered at `(row, col)`, semi-axes
/// `(a, b)` along the axes rotated by `angle` radians.
pub fn render_blob(height: usize, width: usize, center: (f64, f64), semi_axes: (f64, f64), angle: f64) -> LabelMask {
    LabelMask::from_fn(height, width, |r, c| ellipse_radius(r, c, center, semi_axes, angle) <= 1.0)
}

/// Normalized elliptical radius: 1 on the boundary.
fn ellipse_radius(r: usize, c: usize, center: (f64, f64), (a, b): (f64, f64), angle: f64) -> f64 {
    let (dy, dx) = (r as f64 - center.0, c as f64 - center.1);
    let (s, co) = angle.sin_cos();
    let u = co * dx + s * dy;
    let v = -s * dx + co * dy;
    ((u / a).powi(2) + (v / b).powi(2)).sqrt()
}

struct Blob {
    center: (f64, f64),
    axes: (f64, f64),
    angle: f64,
}

fn pick_count(weights: &[f64], rng: &mut impl Rng) -> usize {
    let mut u: f64 = rng.random();
    for (k, w) in weights.iter().enumerate() {
        if u < *w {
            return k;
        }
        u -= w;
    }
    weights.len() - 1
}

fn place_blobs(p: &SynthParams, want: usize, rng: &mut impl Rng) -> Vec<Blob> {
    let mut blobs: Vec<Blob> = Vec::new();
    let n = p.size as f64;
    let mut attempts = 0;
    while blobs.len() < want && attempts < 200 {
        attempts += 1;
        let axes = (
            rng.random_range(p.semi_axis.0..=p.semi_axis.1),
            rng.random_range(p.semi_axis.0..=p.semi_axis.1),
        );
        let reach = axes.0.max(axes.1);
        let lo = reach + 1.0;
        let hi = n - reach - 2.0;
        let center = (rng.random_range(lo..=hi), rng.random_range(lo..=hi));
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        // a 2 px gap keeps blobs separate under 8-connectivity
        let clear = blobs.iter().all(|b| {
            let d = ((b.center.0 - center.0).powi(2) + (b.center.1 - center.1).powi(2)).sqrt();
            d >= reach + b.axes.0.max(b.axes.1) + 2.0
        });
        if clear {
            blobs.push(Blob { center, axes, angle });
        }
    }
    blobs
}

fn render_sample(p: &SynthParams, index: usize, rng: &mut ChaCha8Rng) -> Sample {
    let n = p.size;
    let want = pick_count(&p.count_weights(), rng);
    let blobs = place_blobs(p, want, rng);

    // mucosa: warm pink base, a few low-frequency waves, fine grain
    let base = [
        rng.random_range(0.74..0.86),
        rng.random_range(0.46..0.56),
        rng.random_range(0.36..0.46),
    ];
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(-0.25..0.25),
                rng.random_range(-0.25..0.25),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.02..0.06),
            )
        })
        .collect();
    let tones: Vec<[f64; 3]> = blobs
        .iter()
        .map(|_| {
            [
                rng.random_range(0.62..0.78),
                rng.random_range(0.08..0.18),
                rng.random_range(0.08..0.18),
            ]
        })
        .collect();

    let plane = n * n;
    let mut data = vec![0.0f32; 3 * plane];
    let mut mask = LabelMask::empty(n, n);
    for r in 0..n {
        for c in 0..n {
            let shade: f64 = waves
                .iter()
                .map(|&(fy, fx, phase, amp)| amp * (fy * r as f64 + fx * c as f64 + phase).sin())
                .sum();
            let mut px = [0.0; 3];
            for ch in 0..3 {
                px[ch] = base[ch] + shade + rng.random_range(-0.03..0.03);
            }
            for (blob, tone) in blobs.iter().zip(&tones) {
                let rho = ellipse_radius(r, c, blob.center, blob.axes, blob.angle);
                if rho <= 1.0 {
                    mask.set(r, c, true);
                }
                // about one pixel of soft edge centered on the boundary
                let alpha = ((1.0 - rho) * blob.axes.0.min(blob.axes.1) + 0.5).clamp(0.0, 1.0);
                if alpha > 0.0 {
                    for ch in 0..3 {
                        px[ch] = px[ch] * (1.0 - alpha) + (tone[ch] + 0.5 * shade) * alpha;
                    }
                }
            }
            for ch in 0..3 {
                data[ch * plane + r * n + c] = px[ch].clamp(0.0, 1.0) as f32;
            }
        }
    }
    Sample {
        image: Tensor::new(vec![3, n, n], data).expect("positive extent"),
        mask: Some(mask),
        source_id: format!("synth_{index:04}"),
        fold: None,
    }
}

/// `count` samples; sample `i` draws from its own generator seeded with
/// `seed ^ i`, so the output does not depend on thread scheduling.
pub fn synth_blobs(seed: u64, count: usize, params: &SynthParams) -> Result<Vec<Sample>> {
    params.validate()?;
    Ok((0..count)
        .into_par_iter()
        .map(|i| render_sample(params, i, &mut ChaCha8Rng::seed_from_u64(seed ^ i as u64)))
        .collect())
}
