//! Evaluation reports: one summary row per model (IOU, Dice, Time and
//! detection precision/recall/F1), per-image rows, and histograms of lesion
//! counts per image and lesion areas.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::csv_error;
use crate::error::{Error, Result};
use crate::trainer::EvalReport;

pub const REPORT_COLUMNS: [&str; 8] = ["model", "IOU", "Dice", "Time", "Precision", "Recall", "F1", "images"];

/// Summary row; IOU and Dice in percent, Time in ms per image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelRow {
    pub model: String,
    #[serde(rename = "IOU")]
    pub iou: f64,
    #[serde(rename = "Dice")]
    pub dice: f64,
    #[serde(rename = "Time")]
    pub time_ms: Option<f64>,
    #[serde(rename = "Precision")]
    pub precision: f64,
    #[serde(rename = "Recall")]
    pub recall: f64,
    #[serde(rename = "F1")]
    pub f1: f64,
    pub images: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRow {
    pub model: String,
    pub id: String,
    pub iou: f64,
    pub dice: f64,
    pub truth_lesions: usize,
    pub predicted_lesions: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountBin {
    pub lesions: usize,
    pub images: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AreaBin {
    /// Inclusive lower and exclusive upper bound in pixels.
    pub min: usize,
    pub max: usize,
    pub lesions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histograms {
    pub lesions_per_image: Vec<CountBin>,
    pub lesion_areas: Vec<AreaBin>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub row: ModelRow,
    pub images: Vec<ImageRow>,
    pub truth_histograms: Histograms,
    pub predicted_histograms: Histograms,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub models: Vec<ModelReport>,
    pub notes: Vec<String>,
}

/// Number of images with `k` lesions for `k = 0..=max`.
pub fn count_histogram(per_image: &[usize]) -> Vec<CountBin> {
    let max = per_image.iter().copied().max().unwrap_or(0);
    (0..=max)
        .map(|k| CountBin {
            lesions: k,
            images: per_image.iter().filter(|&&n| n == k).count(),
        })
        .collect()
}

/// Lesion areas in bins of `bin_width` pixels, from 0 up to the largest area.
pub fn area_histogram(areas: &[usize], bin_width: usize) -> Vec<AreaBin> {
    let width = bin_width.max(1);
    let Some(max) = areas.iter().copied().max() else {
        return Vec::new();
    };
    (0..=max / width)
        .map(|b| AreaBin {
            min: b * width,
            max: (b + 1) * width,
            lesions: areas.iter().filter(|&&a| a / width == b).count(),
        })
        .collect()
}

impl ModelReport {
    pub fn new(model: impl Into<String>, eval: &EvalReport, area_bin: usize) -> Self {
        let model = model.into();
        let images: Vec<ImageRow> = eval
            .images
            .iter()
            .map(|e| ImageRow {
                model: model.clone(),
                id: e.id.clone(),
                iou: e.iou,
                dice: e.dice,
                truth_lesions: e.truth_areas.len(),
                predicted_lesions: e.detection.lesions.len(),
                tp: e.tp,
                fp: e.fp,
                fn_: e.fn_,
            })
            .collect();
        let truth_counts: Vec<usize> = eval.images.iter().map(|e| e.truth_areas.len()).collect();
        let truth_areas: Vec<usize> = eval.images.iter().flat_map(|e| e.truth_areas.iter().copied()).collect();
        let pred_counts: Vec<usize> = eval.images.iter().map(|e| e.detection.lesions.len()).collect();
        let pred_areas: Vec<usize> = eval
            .images
            .iter()
            .flat_map(|e| e.detection.lesions.iter().map(|l| l.area))
            .collect();
        ModelReport {
            row: ModelRow {
                model,
                iou: 100.0 * eval.mean_iou,
                dice: 100.0 * eval.mean_dice,
                time_ms: eval.time_ms,
                precision: eval.precision(),
                recall: eval.recall(),
                f1: eval.f1(),
                images: eval.images.len(),
            },
            images,
            truth_histograms: Histograms {
                lesions_per_image: count_histogram(&truth_counts),
                lesion_areas: area_histogram(&truth_areas, area_bin),
            },
            predicted_histograms: Histograms {
                lesions_per_image: count_histogram(&pred_counts),
                lesion_areas: area_histogram(&pred_areas, area_bin),
            },
        }
    }
}

impl Report {
    pub fn new(models: Vec<ModelReport>, match_radius: f64, timed: bool) -> Self {
        let mut notes = vec![format!(
            "Precision, Recall and F1 count a predicted centroid as a hit when it lies inside a ground-truth \
             component or within {match_radius} px of it (one-to-one, nearest first); this matching rule is a \
             stand-in, not an official challenge metric."
        )];
        if timed {
            notes.push(
                "Time is the median over warm repetitions of forward pass plus postprocessing, in ms per image; \
                 it depends on the machine and thread count and is not comparable across environments."
                    .into(),
            );
        }
        Report { models, notes }
    }

    /// Writes `report.csv` (summary rows), `per_image.csv` and `report.json`
    /// into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let summary = dir.join("report.csv");
        let mut wtr = csv::Writer::from_path(&summary).map_err(|e| csv_error(&summary, e))?;
        wtr.write_record(REPORT_COLUMNS).map_err(|e| csv_error(&summary, e))?;
        for m in &self.models {
            let r = &m.row;
            wtr.write_record([
                r.model.clone(),
                format!("{:.2}", r.iou),
                format!("{:.2}", r.dice),
                r.time_ms.map(|t| format!("{t:.3}")).unwrap_or_default(),
                format!("{:.4}", r.precision),
                format!("{:.4}", r.recall),
                format!("{:.4}", r.f1),
                r.images.to_string(),
            ])
            .map_err(|e| csv_error(&summary, e))?;
        }
        wtr.flush().map_err(|e| Error::io(&summary, e))?;

        let per_image = dir.join("per_image.csv");
        let mut wtr = csv::Writer::from_path(&per_image).map_err(|e| csv_error(&per_image, e))?;
        for m in &self.models {
            for row in &m.images {
                wtr.serialize(row).map_err(|e| csv_error(&per_image, e))?;
            }
        }
        wtr.flush().map_err(|e| Error::io(&per_image, e))?;

        let json_path = dir.join("report.json");
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::format(&json_path, e.to_string()))?;
        std::fs::write(&json_path, json + "\n").map_err(|e| Error::io(&json_path, e))
    }
}
