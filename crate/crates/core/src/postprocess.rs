//! Probability maps to binary masks, connected components and lesion centroids.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::tensor::{Real, Tensor};

pub const DEFAULT_THRESHOLD: f64 = 0.3;
pub const DEFAULT_MIN_AREA: usize = 300;
pub const DEFAULT_MATCH_RADIUS: f64 = 30.0;

/// Per-pixel lesion probabilities of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ProbabilityMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "probability map {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(ProbabilityMap { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        ProbabilityMap { height, width, data }
    }

    /// Channel 0 of sample `index` of an `N x C x H x W` tensor.
    pub fn from_tensor<T: Real>(t: &Tensor<T>, index: usize) -> Result<Self> {
        let (n, c, h, w) = t.dims4()?;
        if index >= n {
            return Err(Error::Shape(format!("sample {index} out of range for batch of {n}")));
        }
        let start = index * c * h * w;
        let data = t.data()[start..start + h * w]
            .iter()
            .map(|v| v.as_f64() as f32)
            .collect();
        Ok(ProbabilityMap { height: h, width: w, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
#[derive(Default)]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}


impl TryFrom<u8> for Connectivity {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            4 => Ok(Connectivity::Four),
            8 => Ok(Connectivity::Eight),
            other => Err(Error::Config(format!("connectivity must be 4 or 8, got {other}"))),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Four => 4,
            Connectivity::Eight => 8,
        }
    }
}

impl std::fmt::Display for Connectivity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", u8::from(*self))
    }
}

/// Bounding box as `(top, left, height, width)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    pub label: usize,
    pub area: usize,
    /// `(row, col)`.
    pub centroid: (f64, f64),
    pub bbox: BBox,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    /// `(row, col)`.
    pub centroid: (f64, f64),
    pub area: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub present: bool,
    pub lesions: Vec<Lesion>,
}

impl Detection {
    pub fn centroids(&self) -> Vec<(f64, f64)> {
        self.lesions.iter().map(|l| l.centroid).collect()
    }
}

pub fn check_threshold(threshold: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!("threshold {threshold} outside [0, 1]")));
    }
    Ok(())
}

/// Pixels strictly above `threshold` become 255. The comparison is made at
/// the map's f32 precision, so a stored 0.3 is not above a threshold of 0.3.
pub fn binarize(p: &ProbabilityMap, threshold: f64) -> Result<BinaryMask> {
    check_threshold(threshold)?;
    let t = threshold as f32;
    let w = p.width;
    Ok(BinaryMask::from_fn(p.height, w, |r, c| p.data[r * w + c] > t))
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

fn union(parent: &mut [usize], a: usize, b: usize) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi] = lo;
    }
}

/// Two-pass union-find labeling. Labels run `1..=K` in row-major order of
/// each component's first pixel.
pub fn connected_components_with_stats(m: &BinaryMask, connectivity: Connectivity) -> Vec<Component> {
    label_components(m, connectivity).1
}

/// Per-pixel labels (0 = background) together with the component stats.
pub fn label_components(m: &BinaryMask, connectivity: Connectivity) -> (Vec<usize>, Vec<Component>) {
    let (h, w) = m.dims();
    let data = m.data();
    let mut provisional = vec![0usize; h * w];
    // parent[0] is unused so provisional labels can start at 1
    let mut parent = vec![0usize];
    let back: &[(isize, isize)] = match connectivity {
        Connectivity::Four => &[(-1, 0), (0, -1)],
        Connectivity::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1)],
    };

    for r in 0..h {
        for c in 0..w {
            if data[r * w + c] == 0 {
                continue;
            }
            let mut label = 0;
            for &(dr, dc) in back {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < 0 || nc < 0 || nc >= w as isize {
                    continue;
                }
                let n = provisional[nr as usize * w + nc as usize];
                if n == 0 {
                    continue;
                }
                if label == 0 {
                    label = n;
                } else {
                    union(&mut parent, label, n);
                }
            }
            if label == 0 {
                label = parent.len();
                parent.push(label);
            }
            provisional[r * w + c] = label;
        }
    }

    // roots are the smallest provisional label of their set, so numbering
    // roots in increasing order gives first-encounter order
    let mut final_label = vec![0usize; parent.len()];
    let mut count = 0;
    for l in 1..parent.len() {
        let root = find(&mut parent, l);
        if root == l {
            count += 1;
            final_label[l] = count;
        }
    }

    struct Acc {
        area: usize,
        sum_r: u64,
        sum_c: u64,
        top: usize,
        left: usize,
        bottom: usize,
        right: usize,
    }
    let mut acc: Vec<Acc> = (0..count)
        .map(|_| Acc {
            area: 0,
            sum_r: 0,
            sum_c: 0,
            top: usize::MAX,
            left: usize::MAX,
            bottom: 0,
            right: 0,
        })
        .collect();
    for r in 0..h {
        for c in 0..w {
            let l = provisional[r * w + c];
            if l == 0 {
                continue;
            }
            let root = find(&mut parent, l);
            let label = final_label[root];
            provisional[r * w + c] = label;
            let a = &mut acc[label - 1];
            a.area += 1;
            a.sum_r += r as u64;
            a.sum_c += c as u64;
            a.top = a.top.min(r);
            a.left = a.left.min(c);
            a.bottom = a.bottom.max(r);
            a.right = a.right.max(c);
        }
    }

    let comps = acc
        .into_iter()
        .enumerate()
        .map(|(i, a)| Component {
            label: i + 1,
            area: a.area,
            centroid: (a.sum_r as f64 / a.area as f64, a.sum_c as f64 / a.area as f64),
            bbox: BBox {
                top: a.top,
                left: a.left,
                height: a.bottom - a.top + 1,
                width: a.right - a.left + 1,
            },
        })
        .collect();
    (provisional, comps)
}

/// Keeps components with `area >= min_area`, order preserved.
pub fn filter_components(cs: Vec<Component>, min_area: usize) -> Vec<Component> {
    cs.into_iter().filter(|c| c.area >= min_area).collect()
}

pub fn detect(p: &ProbabilityMap, threshold: f64, connectivity: Connectivity, min_area: usize) -> Result<Detection> {
    let mask = binarize(p, threshold)?;
    Ok(detect_mask(&mask, connectivity, min_area))
}

/// Detection on an already binarized mask.
pub fn detect_mask(mask: &BinaryMask, connectivity: Connectivity, min_area: usize) -> Detection {
    let lesions: Vec<Lesion> = filter_components(connected_components_with_stats(mask, connectivity), min_area)
        .into_iter()
        .map(|c| Lesion {
            centroid: c.centroid,
            area: c.area,
        })
        .collect();
    Detection {
        present: !lesions.is_empty(),
        lesions,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// `(prediction index, truth component index)`, truth indexed by label - 1.
    pub pairings: Vec<(usize, usize)>,
    /// Distance from each paired prediction to its truth component.
    pub distances: Vec<f64>,
}

impl MatchResult {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }
}

/// `num / den`, with `0 / 0 = 1` (nothing to find and nothing reported).
pub fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Counts the matching statistics of several images together.
pub fn total_counts(results: &[MatchResult]) -> MatchResult {
    MatchResult {
        tp: results.iter().map(|r| r.tp).sum(),
        fp: results.iter().map(|r| r.fp).sum(),
        fn_: results.iter().map(|r| r.fn_).sum(),
        pairings: Vec::new(),
        distances: Vec::new(),
    }
}

/// Matches predicted centroids `(row, col)` to the 8-connected components of
/// `truth`. A prediction is a candidate for a component when it lies inside
/// it or within `radius` of one of its pixels; candidates are assigned
/// one-to-one, nearest first, ties broken by prediction then component index.
pub fn match_lesions(predicted: &[(f64, f64)], truth: &BinaryMask, radius: f64) -> Result<MatchResult> {
    if !(radius >= 0.0) {
        return Err(Error::Config(format!("match radius {radius} must be >= 0")));
    }
    let (labels, comps) = label_components(truth, Connectivity::Eight);
    let (h, w) = truth.dims();
    let mut pixels: Vec<Vec<(usize, usize)>> = vec![Vec::new(); comps.len()];
    for r in 0..h {
        for c in 0..w {
            let l = labels[r * w + c];
            if l > 0 {
                pixels[l - 1].push((r, c));
            }
        }
    }

    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (pi, &(pr, pc)) in predicted.iter().enumerate() {
        for (ci, px) in pixels.iter().enumerate() {
            let d = px
                .iter()
                .map(|&(r, c)| ((r as f64 - pr).powi(2) + (c as f64 - pc).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            // pixel centers within half a pixel count as inside
            let d = if d <= 0.5 { 0.0 } else { d };
            if d <= radius {
                candidates.push((d, pi, ci));
            }
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut pred_used = vec![false; predicted.len()];
    let mut truth_used = vec![false; comps.len()];
    let mut pairings = Vec::new();
    let mut distances = Vec::new();
    for (d, pi, ci) in candidates {
        if !pred_used[pi] && !truth_used[ci] {
            pred_used[pi] = true;
            truth_used[ci] = true;
            pairings.push((pi, ci));
            distances.push(d);
        }
    }
    let tp = pairings.len();
    Ok(MatchResult {
        tp,
        fp: predicted.len() - tp,
        fn_: comps.len() - tp,
        pairings,
        distances,
    })
}

/// Writes an 8-bit single-channel PNG with values {0, 255}.
pub fn write_mask_png(mask: &BinaryMask, path: &Path) -> Result<()> {
    let img = image::GrayImage::from_raw(mask.width() as u32, mask.height() as u32, mask.data().to_vec())
        .ok_or_else(|| Error::format(path, "mask buffer size mismatch"))?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))
}

/// One line of the detections file; coordinates in image convention
/// (`x` = column, `y` = row).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub id: String,
    pub present: bool,
    pub lesions: Vec<LesionRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionRecord {
    pub x: f64,
    pub y: f64,
    pub area: usize,
}

impl DetectionRecord {
    pub fn new(id: impl Into<String>, d: &Detection) -> Self {
        DetectionRecord {
            id: id.into(),
            present: d.present,
            lesions: d
                .lesions
                .iter()
                .map(|l| LesionRecord {
                    x: l.centroid.1,
                    y: l.centroid.0,
                    area: l.area,
                })
                .collect(),
        }
    }

    /// Centroids back in `(row, col)` order.
    pub fn centroids(&self) -> Vec<(f64, f64)> {
        self.lesions.iter().map(|l| (l.y, l.x)).collect()
    }
}

pub fn write_detections_jsonl(records: &[DetectionRecord], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for rec in records {
        let line = serde_json::to_string(rec).map_err(|e| Error::format(path, e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_detections_jsonl(path: &Path) -> Result<Vec<DetectionRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1))))
        .collect()
}
