//! Lesion segmentation and detection toolkit.
//!
//! Encoder-decoder networks of the U-Net family are trained with a combined
//! cross-entropy / soft-Jaccard loss; their probability maps are binarized,
//! split into connected components and reduced to lesion centroids.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod loss_metrics;
pub mod mask;
pub mod nets;
pub mod postprocess;
pub mod report;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
