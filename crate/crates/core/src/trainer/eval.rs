use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{make_batch, standardize, Sample, Standardization};
use crate::error::{Error, Result};
use crate::loss_metrics::{dice, iou_binary};
use crate::mask::BinaryMask;
use crate::nets::Network;
use crate::postprocess::{
    binarize, check_threshold, detect_mask, match_lesions, ratio, Connectivity, Detection, ProbabilityMap,
    DEFAULT_MATCH_RADIUS, DEFAULT_MIN_AREA, DEFAULT_THRESHOLD,
};

/// Binarization, detection and matching settings shared by validation,
/// evaluation and inference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub threshold: f64,
    pub min_area: usize,
    pub connectivity: Connectivity,
    pub match_radius: f64,
    pub batch_size: usize,
    /// Warm repetitions behind the reported per-image time.
    pub timing_reps: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            threshold: DEFAULT_THRESHOLD,
            min_area: DEFAULT_MIN_AREA,
            connectivity: Connectivity::Eight,
            match_radius: DEFAULT_MATCH_RADIUS,
            batch_size: 16,
            timing_reps: 20,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        check_threshold(self.threshold)?;
        if !(self.match_radius >= 0.0) {
            return Err(Error::Config(format!("match_radius must be >= 0, got {}", self.match_radius)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("eval batch_size must be >= 1".into()));
        }
        if self.timing_reps < 20 {
            return Err(Error::Config(format!("timing_reps must be >= 20, got {}", self.timing_reps)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageEval {
    pub id: String,
    pub iou: f64,
    pub dice: f64,
    pub detection: Detection,
    /// Areas of the ground-truth components.
    pub truth_areas: Vec<usize>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub images: Vec<ImageEval>,
    pub mean_iou: f64,
    pub mean_dice: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// Median milliseconds per image for forward pass plus postprocessing.
    pub time_ms: Option<f64>,
}

impl EvalReport {
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

/// Evaluation-mode probability maps, one per sample, computed in batches on
/// standardized copies of the images.
pub fn predict_maps(
    net: &Network<f32>,
    samples: &[Sample],
    norm: &Standardization,
    batch_size: usize,
) -> Result<Vec<ProbabilityMap>> {
    let mut maps = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let prepared = chunk
            .iter()
            .map(|s| standardize(s, norm.mean, norm.std))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Sample> = prepared.iter().collect();
        let (x, _) = make_batch(&refs)?;
        let probs = net.forward_segment(&x)?;
        for i in 0..chunk.len() {
            maps.push(ProbabilityMap::from_tensor(&probs, i)?);
        }
    }
    Ok(maps)
}

/// Scores probability maps against the samples' masks (absent mask = no
/// lesion). IoU and Dice use the binarized map; detections additionally
/// pass the area filter before matching.
pub fn evaluate_maps(samples: &[Sample], maps: &[ProbabilityMap], cfg: &EvalConfig) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Config("cannot evaluate an empty fold".into()));
    }
    if samples.len() != maps.len() {
        return Err(Error::Shape(format!("{} samples but {} maps", samples.len(), maps.len())));
    }
    let mut images = Vec::with_capacity(samples.len());
    for (s, p) in samples.iter().zip(maps) {
        let pred = binarize(p, cfg.threshold)?;
        let truth = s
            .mask
            .as_ref()
            .map(|m| m.to_binary())
            .unwrap_or_else(|| BinaryMask::empty(s.height(), s.width()));
        let detection = detect_mask(&pred, cfg.connectivity, cfg.min_area);
        let m = match_lesions(&detection.centroids(), &truth, cfg.match_radius)?;
        let truth_areas = crate::postprocess::connected_components_with_stats(&truth, Connectivity::Eight)
            .iter()
            .map(|c| c.area)
            .collect();
        images.push(ImageEval {
            id: s.source_id.clone(),
            iou: iou_binary(&pred, &truth)?,
            dice: dice(&pred, &truth)?,
            detection,
            truth_areas,
            tp: m.tp,
            fp: m.fp,
            fn_: m.fn_,
        });
    }
    let n = images.len() as f64;
    Ok(EvalReport {
        mean_iou: images.iter().map(|e| e.iou).sum::<f64>() / n,
        mean_dice: images.iter().map(|e| e.dice).sum::<f64>() / n,
        tp: images.iter().map(|e| e.tp).sum(),
        fp: images.iter().map(|e| e.fp).sum(),
        fn_: images.iter().map(|e| e.fn_).sum(),
        images,
        time_ms: None,
    })
}

pub fn evaluate(
    net: &Network<f32>,
    samples: &[Sample],
    norm: &Standardization,
    cfg: &EvalConfig,
    timing: bool,
) -> Result<EvalReport> {
    let maps = predict_maps(net, samples, norm, cfg.batch_size)?;
    let mut report = evaluate_maps(samples, &maps, cfg)?;
    if timing {
        report.time_ms = Some(time_per_image(net, samples, norm, cfg)?);
    }
    Ok(report)
}

/// Median over `cfg.timing_reps` warm repetitions of one batch through the
/// network and the detection pipeline, in ms per image.
pub fn time_per_image(net: &Network<f32>, samples: &[Sample], norm: &Standardization, cfg: &EvalConfig) -> Result<f64> {
    let batch = &samples[..samples.len().min(cfg.batch_size)];
    let run = || -> Result<()> {
        for p in predict_maps(net, batch, norm, cfg.batch_size)? {
            let m = binarize(&p, cfg.threshold)?;
            std::hint::black_box(detect_mask(&m, cfg.connectivity, cfg.min_area));
        }
        Ok(())
    };
    for _ in 0..2 {
        run()?;
    }
    let mut times = Vec::with_capacity(cfg.timing_reps);
    for _ in 0..cfg.timing_reps {
        let start = Instant::now();
        run()?;
        times.push(start.elapsed().as_secs_f64() * 1e3 / batch.len() as f64);
    }
    Ok(median(&mut times))
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}
