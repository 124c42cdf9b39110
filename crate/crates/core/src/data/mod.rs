//! Dataset loading, preprocessing, fold splitting and batching.

mod augment;
mod synth;

pub use augment::{
    augment, augment_affine, augment_hsv, hsv_to_rgb, rgb_to_hsv, shift_hsv, AffineTransform, AugmentParams, HsvJitter,
};
pub use synth::{render_blob, synth_blobs, SynthParams};

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::tensor::Tensor;

/// Conventional ImageNet channel statistics.
pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];
/// Decoded 8-bit mask pixels above this value are lesion.
pub const MASK_THRESHOLD: u8 = 127;

/// One image with its optional lesion mask. `image` is `3 x H x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub mask: Option<LabelMask>,
    pub source_id: String,
    pub fold: Option<usize>,
}

impl Sample {
    pub fn new(image: Tensor<f32>, mask: Option<LabelMask>, source_id: impl Into<String>) -> Result<Self> {
        let (h, w) = image_dims(&image)?;
        if let Some(m) = &mask {
            if m.dims() != (h, w) {
                return Err(Error::Shape(format!(
                    "mask {}x{} does not match image {h}x{w}",
                    m.height(),
                    m.width()
                )));
            }
        }
        Ok(Sample {
            image,
            mask,
            source_id: source_id.into(),
            fold: None,
        })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

fn image_dims(image: &Tensor<f32>) -> Result<(usize, usize)> {
    match image.shape() {
        [3, h, w] => Ok((*h, *w)),
        other => Err(Error::Shape(format!("image must be 3 x H x W, got {other:?}"))),
    }
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Decodes an RGB image rescaled to [0, 1] and, if given, a mask binarized
/// at `> 127`.
pub fn load_sample(image_path: &Path, mask_path: Option<&Path>) -> Result<Sample> {
    let img = open_image(image_path)?;
    let rgb = match img {
        image::DynamicImage::ImageRgb8(buf) => buf,
        image::DynamicImage::ImageRgb16(_) => img.to_rgb8(),
        other => {
            return Err(Error::format(
                image_path,
                format!("expected a 3-channel RGB image, got {:?}", other.color()),
            ))
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.into_raw();
    let mut data = vec![0.0f32; 3 * h * w];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = f32::from(px[c]) / 255.0;
        }
    }
    let image = Tensor::new(vec![3, h, w], data)?;

    let mask = match mask_path {
        Some(p) => {
            let luma = open_image(p)?.to_luma8();
            if (luma.width() as usize, luma.height() as usize) != (w, h) {
                return Err(Error::format(
                    p,
                    format!("mask is {}x{}, image is {w}x{h}", luma.width(), luma.height()),
                ));
            }
            let bits = luma.into_raw().into_iter().map(|v| u8::from(v > MASK_THRESHOLD)).collect();
            Some(LabelMask::new(h, w, bits)?)
        }
        None => None,
    };
    let id = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Sample::new(image, mask, id)
}

/// Centered `target x target` window; offset `floor((extent - target) / 2)`.
pub fn center_crop(s: &Sample, target: usize) -> Result<Sample> {
    let (h, w) = (s.height(), s.width());
    if target == 0 || target > h || target > w {
        return Err(Error::Shape(format!("cannot crop {h}x{w} to {target}x{target}")));
    }
    if target == h && target == w {
        return Ok(s.clone());
    }
    let (top, left) = ((h - target) / 2, (w - target) / 2);
    let src = s.image.data();
    let mut data = Vec::with_capacity(3 * target * target);
    for c in 0..3 {
        for r in 0..target {
            let start = c * h * w + (top + r) * w + left;
            data.extend_from_slice(&src[start..start + target]);
        }
    }
    let mask = s
        .mask
        .as_ref()
        .map(|m| LabelMask::from_fn(target, target, |r, c| m.get(top + r, left + c)));
    Ok(Sample {
        image: Tensor::new(vec![3, target, target], data)?,
        mask,
        source_id: s.source_id.clone(),
        fold: s.fold,
    })
}

/// Per channel `(v - mean_c) / std_c`.
pub fn standardize(s: &Sample, mean: [f32; 3], std: [f32; 3]) -> Result<Sample> {
    if let Some(v) = std.iter().find(|&&v| !(v > 0.0)) {
        return Err(Error::Config(format!("standardization std must be > 0, got {v}")));
    }
    let plane = s.height() * s.width();
    let mut out = s.clone();
    for (c, chunk) in out.image.data_mut().chunks_mut(plane).enumerate() {
        for v in chunk {
            *v = (*v - mean[c]) / std[c];
        }
    }
    Ok(out)
}

/// Assignment of sample ids to folds `0..k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    k: usize,
    /// `(id, fold)` in the caller's id order.
    assignment: Vec<(String, usize)>,
}

impl FoldSplit {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn assignment(&self) -> &[(String, usize)] {
        &self.assignment
    }

    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.assignment.iter().find(|(i, _)| i == id).map(|(_, f)| *f)
    }

    pub fn members(&self, fold: usize) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, f)| *f == fold)
            .map(|(i, _)| i.as_str())
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for (_, f) in &self.assignment {
            sizes[*f] += 1;
        }
        sizes
    }

    /// Writes the `sample_id,fold` table, rows sorted by id.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        wtr.write_record(["sample_id", "fold"]).map_err(|e| csv_error(path, e))?;
        let mut rows: Vec<_> = self.assignment.iter().collect();
        rows.sort();
        for (id, fold) in rows {
            wtr.write_record([id.as_str(), &fold.to_string()])
                .map_err(|e| csv_error(path, e))?;
        }
        wtr.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            sample_id: String,
            fold: usize,
        }
        let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let mut assignment = Vec::new();
        for row in rdr.deserialize() {
            let row: Row = row.map_err(|e| csv_error(path, e))?;
            assignment.push((row.sample_id, row.fold));
        }
        if assignment.is_empty() {
            return Err(Error::format(path, "fold table is empty"));
        }
        let k = assignment.iter().map(|(_, f)| f + 1).max().unwrap_or(0);
        Ok(FoldSplit { k, assignment })
    }
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, format!("{other:?}")),
    }
}

/// Seeded shuffle, then contiguous partition into folds whose sizes differ
/// by at most one (larger folds first).
pub fn split_folds(ids: &[String], k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(Error::Config(format!("fold count must be >= 2, got {k}")));
    }
    if ids.len() < k {
        return Err(Error::Config(format!("{} ids cannot fill {k} folds", ids.len())));
    }
    let unique: HashSet<&String> = ids.iter().collect();
    if unique.len() != ids.len() {
        return Err(Error::Config("duplicate sample ids".into()));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (ids.len() / k, ids.len() % k);
    let mut fold_of = vec![0; ids.len()];
    let mut pos = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        for &i in &order[pos..pos + size] {
            fold_of[i] = f;
        }
        pos += size;
    }
    Ok(FoldSplit {
        k,
        assignment: ids.iter().cloned().zip(fold_of).collect(),
    })
}

/// Image/mask pairs under `<root>/images` and `<root>/masks`, sorted by stem.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetEntry {
    pub id: String,
    pub image: PathBuf,
    pub mask: Option<PathBuf>,
}

fn stems(dir: &Path, extensions: &[&str]) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .map(|e| e.to_string_lossy().to_ascii_lowercase())
            .unwrap_or_default();
        if path.is_file() && extensions.contains(&ext.as_str()) {
            if let Some(stem) = path.file_stem() {
                let stem = stem.to_string_lossy().into_owned();
                if out.contains_key(&stem) {
                    return Err(Error::format(dir, format!("two files share the stem `{stem}`")));
                }
                out.insert(stem, path);
            }
        }
    }
    Ok(out)
}

/// Lists the dataset. Images without a mask are kept with `mask: None`.
pub fn scan_dataset(root: &Path) -> Result<Vec<DatasetEntry>> {
    let images_dir = root.join("images");
    if !images_dir.is_dir() {
        return Err(Error::io(&images_dir, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    let images = stems(&images_dir, &["png"])?;
    if images.is_empty() {
        return Err(Error::format(&images_dir, "no PNG images found"));
    }
    let masks_dir = root.join("masks");
    let masks = if masks_dir.is_dir() {
        stems(&masks_dir, &["png", "jpg", "jpeg"])?
    } else {
        BTreeMap::new()
    };
    Ok(images
        .into_iter()
        .map(|(id, image)| DatasetEntry {
            mask: masks.get(&id).cloned(),
            id,
            image,
        })
        .collect())
}

/// Loads the listed entries, optionally center-cropping each one.
pub fn load_entries(entries: &[DatasetEntry], crop: Option<usize>) -> Result<Vec<Sample>> {
    use rayon::prelude::*;
    entries
        .par_iter()
        .map(|e| {
            let s = load_sample(&e.image, e.mask.as_deref())?;
            match crop {
                Some(t) => center_crop(&s, t),
                None => Ok(s),
            }
        })
        .collect()
}

/// Writes `images/<id>.png` and `masks/<id>.png` (values 0/255) under `root`.
pub fn write_dataset(samples: &[Sample], root: &Path) -> Result<()> {
    let (images_dir, masks_dir) = (root.join("images"), root.join("masks"));
    for dir in [&images_dir, &masks_dir] {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    for s in samples {
        let path = images_dir.join(format!("{}.png", s.source_id));
        write_image_png(&s.image, &path)?;
        if let Some(m) = &s.mask {
            crate::postprocess::write_mask_png(&m.to_binary(), &masks_dir.join(format!("{}.png", s.source_id)))?;
        }
    }
    Ok(())
}

/// Writes a `3 x H x W` image in [0, 1] as 24-bit PNG.
pub fn write_image_png(image: &Tensor<f32>, path: &Path) -> Result<()> {
    let (h, w) = image_dims(image)?;
    let data = image.data();
    let mut raw = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            raw.push((data[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let buf = image::RgbImage::from_raw(w as u32, h as u32, raw).ok_or_else(|| Error::format(path, "buffer size"))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Stacks images into `N x 3 x H x W` and masks into `N x 1 x H x W`.
pub fn make_batch(samples: &[&Sample]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Shape("empty batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut images = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut labels = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.height(), s.width()) != (h, w) {
            return Err(Error::Shape(format!(
                "batch mixes {h}x{w} and {}x{} samples",
                s.height(),
                s.width()
            )));
        }
        images.extend_from_slice(s.image.data());
        match &s.mask {
            Some(m) => labels.extend(m.data().iter().map(|&v| f32::from(v))),
            None => labels.extend(std::iter::repeat_n(0.0, h * w)),
        }
    }
    Ok((
        Tensor::new(vec![samples.len(), 3, h, w], images)?,
        Tensor::new(vec![samples.len(), 1, h, w], labels)?,
    ))
}

/// Standardization and augmentation settings with their defaults.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Standardization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Standardization {
    fn default() -> Self {
        Standardization {
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }
}
