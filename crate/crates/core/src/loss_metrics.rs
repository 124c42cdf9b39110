//! Segmentation losses and overlap metrics.
//!
//! The training loss is `L = H - log J`, where `H` is binary cross-entropy
//! and `J` a soft Jaccard index over predicted probabilities. Evaluation uses
//! hard IoU and Dice on binarized masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::tensor::{Graph, Real, Tensor, Var};

/// Smoothing term for soft Jaccard denominators and the log in the loss.
pub const JACCARD_EPS: f64 = 1e-7;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside BCE.
pub const PROB_CLAMP: f64 = 1e-7;

/// How the soft Jaccard index aggregates over pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum JaccardVariant {
    /// Mean over pixels of `y p / (y + p - y p + eps)`.
    PerPixel,
    /// `(sum y p + eps) / (sum y + sum p - sum y p + eps)` over the batch.
    #[default]
    Aggregate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    Iou,
    Dice,
    Bce,
    Loss,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub name: MetricName,
    pub value: f64,
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

pub(crate) fn bce_value<T: Real>(probs: &[T], labels: &[T]) -> f64 {
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let (p, y) = (clamp_prob(p.as_f64()), y.as_f64());
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    total / probs.len() as f64
}

pub(crate) fn bce_grad<T: Real>(probs: &[T], labels: &[T], upstream: T) -> Vec<T> {
    let scale = upstream.as_f64() / probs.len() as f64;
    probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let (raw, y) = (p.as_f64(), y.as_f64());
            if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&raw) {
                return T::zero();
            }
            T::from_f64_lossy(scale * ((1.0 - y) / (1.0 - raw) - y / raw))
        })
        .collect()
}

struct JaccardSums {
    inter: f64,
    labels: f64,
    probs: f64,
}

fn jaccard_sums<T: Real>(probs: &[T], labels: &[T]) -> JaccardSums {
    let mut s = JaccardSums {
        inter: 0.0,
        labels: 0.0,
        probs: 0.0,
    };
    for (&p, &y) in probs.iter().zip(labels) {
        let (p, y) = (p.as_f64(), y.as_f64());
        s.inter += y * p;
        s.labels += y;
        s.probs += p;
    }
    s
}

pub(crate) fn soft_jaccard_value<T: Real>(probs: &[T], labels: &[T], variant: JaccardVariant, eps: f64) -> f64 {
    match variant {
        JaccardVariant::PerPixel => {
            let total: f64 = probs
                .iter()
                .zip(labels)
                .map(|(&p, &y)| {
                    let (p, y) = (p.as_f64(), y.as_f64());
                    y * p / (y + p - y * p + eps)
                })
                .sum();
            total / probs.len() as f64
        }
        JaccardVariant::Aggregate => {
            let s = jaccard_sums(probs, labels);
            (s.inter + eps) / (s.labels + s.probs - s.inter + eps)
        }
    }
}

pub(crate) fn soft_jaccard_grad<T: Real>(
    probs: &[T],
    labels: &[T],
    variant: JaccardVariant,
    eps: f64,
    upstream: T,
) -> Vec<T> {
    let up = upstream.as_f64();
    match variant {
        JaccardVariant::PerPixel => {
            let scale = up / probs.len() as f64;
            probs
                .iter()
                .zip(labels)
                .map(|(&p, &y)| {
                    let (p, y) = (p.as_f64(), y.as_f64());
                    let den = y + p - y * p + eps;
                    T::from_f64_lossy(scale * (y * den - y * p * (1.0 - y)) / (den * den))
                })
                .collect()
        }
        JaccardVariant::Aggregate => {
            let s = jaccard_sums(probs, labels);
            let inter = s.inter + eps;
            let union = s.labels + s.probs - s.inter + eps;
            probs
                .iter()
                .zip(labels)
                .map(|(_, &y)| {
                    let y = y.as_f64();
                    T::from_f64_lossy(up * (y * union - inter * (1.0 - y)) / (union * union))
                })
                .collect()
        }
    }
}

pub(crate) fn categorical_ce_value<T: Real>(probs: &[T], labels: &[T], pixels: usize) -> f64 {
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| -y.as_f64() * clamp_prob(p.as_f64()).ln())
        .sum();
    total / pixels as f64
}

pub(crate) fn categorical_ce_grad<T: Real>(probs: &[T], labels: &[T], pixels: usize, upstream: T) -> Vec<T> {
    let scale = upstream.as_f64() / pixels as f64;
    probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let raw = p.as_f64();
            if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&raw) {
                return T::zero();
            }
            T::from_f64_lossy(-scale * y.as_f64() / raw)
        })
        .collect()
}

fn check_same<T: Real>(probs: &Tensor<T>, labels: &Tensor<T>) -> Result<()> {
    if probs.shape() != labels.shape() {
        return Err(Error::Shape(format!(
            "prediction shape {:?} vs label shape {:?}",
            probs.shape(),
            labels.shape()
        )));
    }
    Ok(())
}

/// Mean binary cross-entropy `H`.
pub fn bce<T: Real>(probs: &Tensor<T>, labels: &Tensor<T>) -> Result<f64> {
    check_same(probs, labels)?;
    Ok(bce_value(probs.data(), labels.data()))
}

/// Soft Jaccard index `J` of probabilities against binary labels.
pub fn soft_jaccard<T: Real>(probs: &Tensor<T>, labels: &Tensor<T>, variant: JaccardVariant, eps: f64) -> Result<f64> {
    check_same(probs, labels)?;
    Ok(soft_jaccard_value(probs.data(), labels.data(), variant, eps))
}

/// Value of `H - log J` without building a graph.
pub fn combined_loss<T: Real>(probs: &Tensor<T>, labels: &Tensor<T>, variant: JaccardVariant) -> Result<f64> {
    let h = bce(probs, labels)?;
    let j = soft_jaccard(probs, labels, variant, JACCARD_EPS)?;
    Ok(h - jaccard_log_argument(j, variant).ln())
}

/// The literal per-pixel index is zero whenever no label is positive, so
/// it gets an extra `eps` before the log; the aggregate form already
/// carries `eps` in its numerator.
fn jaccard_log_argument(j: f64, variant: JaccardVariant) -> f64 {
    match variant {
        JaccardVariant::PerPixel => j + JACCARD_EPS,
        JaccardVariant::Aggregate => j,
    }
}

/// Differentiable terms of the combined loss recorded on a graph.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub loss: Var,
    pub bce: Var,
    pub jaccard: Var,
}

/// Records `H - log J` on `graph` for the probability node `probs`.
pub fn combined_loss_graph<T: Real>(
    graph: &mut Graph<T>,
    probs: Var,
    labels: &Tensor<T>,
    variant: JaccardVariant,
) -> Result<LossTerms> {
    let h = graph.bce(probs, labels.clone())?;
    let j = graph.soft_jaccard(probs, labels.clone(), variant, JACCARD_EPS)?;
    let log_arg = match variant {
        JaccardVariant::PerPixel => {
            let eps = graph.input(Tensor::scalar(T::from_f64_lossy(JACCARD_EPS)));
            graph.add(j, eps)?
        }
        JaccardVariant::Aggregate => j,
    };
    let log_j = graph.log(log_arg)?;
    let loss = graph.sub(h, log_j)?;
    Ok(LossTerms {
        loss,
        bce: h,
        jaccard: j,
    })
}

/// Categorical cross-entropy for `N x K x H x W` probabilities and one-hot labels.
pub fn categorical_cross_entropy<T: Real>(probs: &Tensor<T>, labels: &Tensor<T>) -> Result<f64> {
    check_same(probs, labels)?;
    let (n, _, h, w) = probs.dims4()?;
    Ok(categorical_ce_value(probs.data(), labels.data(), n * h * w))
}

struct Overlap {
    a: usize,
    b: usize,
    both: usize,
}

fn overlap(a: &BinaryMask, b: &BinaryMask) -> Result<Overlap> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "mask sizes {:?} and {:?} differ",
            a.dims(),
            b.dims()
        )));
    }
    let mut o = Overlap { a: 0, b: 0, both: 0 };
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x != 0, y != 0);
        o.a += usize::from(x);
        o.b += usize::from(y);
        o.both += usize::from(x && y);
    }
    Ok(o)
}

/// Hard intersection-over-union; 1.0 when both masks are empty.
pub fn iou_binary(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let o = overlap(a, b)?;
    let union = o.a + o.b - o.both;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(o.both as f64 / union as f64)
}

/// Dice coefficient `2|A n B| / (|A| + |B|)`; 1.0 when both masks are empty.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let o = overlap(a, b)?;
    let total = o.a + o.b;
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * o.both as f64 / total as f64)
}
