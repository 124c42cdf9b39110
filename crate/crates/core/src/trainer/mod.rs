//! Adam training on the combined loss, checkpoints and evaluation.

mod adam;
mod checkpoint;
mod eval;

pub use adam::{adam_step, AdamConfig, OptState};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION,
};
pub use eval::{evaluate, evaluate_maps, median, predict_maps, time_per_image, EvalConfig, EvalReport, ImageEval};

use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{augment, make_batch, standardize, AugmentParams, Sample, Standardization};
use crate::error::{Error, Result};
use crate::loss_metrics::{combined_loss_graph, JaccardVariant};
use crate::nets::Network;
use crate::tensor::{Graph, Mode, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub epochs: usize,
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub phases: Vec<Phase>,
    pub batch_size: usize,
    /// Set from the run's top-level seed rather than configured here.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            phases: vec![
                Phase {
                    epochs: 10,
                    rate: 1e-3,
                },
                Phase {
                    epochs: 5,
                    rate: 1e-4,
                },
            ],
            batch_size: 32,
            seed: 0,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() {
            return Err(Error::Config("schedule has no phases".into()));
        }
        for (i, p) in self.phases.iter().enumerate() {
            if p.epochs == 0 {
                return Err(Error::Config(format!("schedule phase {i} has zero epochs")));
            }
            if !(p.rate > 0.0 && p.rate.is_finite()) {
                return Err(Error::Config(format!("schedule phase {i} rate {} must be > 0", p.rate)));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.phases.iter().map(|p| p.epochs).sum()
    }

    /// Learning rate of 1-based `epoch`.
    pub fn rate_at(&self, epoch: usize) -> Option<f64> {
        let mut end = 0;
        for p in &self.phases {
            end += p.epochs;
            if epoch >= 1 && epoch <= end {
                return Some(p.rate);
            }
        }
        None
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase_rate: f64,
    pub train_loss: f64,
    pub val_iou: f64,
    pub val_dice: f64,
    /// Mean over the epoch's batches of the aggregate soft Jaccard.
    pub train_jaccard: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct TrainConfig {
    pub schedule: Schedule,
    pub variant: JaccardVariant,
    pub augment: AugmentParams,
    pub standardization: Standardization,
    pub adam: AdamConfig,
    pub eval: EvalConfig,
}

impl Checkpoint {
    /// Untrained starting point.
    pub fn fresh(network: Network<f32>) -> Self {
        Checkpoint {
            opt: OptState::new(network.params()),
            network,
            epochs_done: 0,
            history: Vec::new(),
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of everything random in 1-based `epoch`; derived rather than carried
/// so a resumed run replays the same epochs.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    splitmix64(seed ^ splitmix64(epoch as u64))
}

/// Augments and standardizes the samples at `indices`; sample `i` uses a
/// generator seeded with `seed ^ i`.
pub fn prepare_batch(
    samples: &[Sample],
    indices: &[usize],
    seed: u64,
    augment_params: &AugmentParams,
    norm: &Standardization,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let prepared = indices
        .par_iter()
        .map(|&i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ i as u64);
            let s = augment(&samples[i], augment_params, &mut rng);
            standardize(&s, norm.mean, norm.std)
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Sample> = prepared.iter().collect();
    make_batch(&refs)
}

/// Result of one optimization step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepTerms {
    pub loss: f64,
    pub jaccard: f64,
}

/// Forward, loss, backward, Adam update and batch-norm running-stat update
/// for one batch.
pub fn train_step(
    net: &mut Network<f32>,
    opt: &mut OptState<f32>,
    x: Tensor<f32>,
    y: &Tensor<f32>,
    rate: f64,
    cfg: &TrainConfig,
    position: (usize, usize),
) -> Result<StepTerms> {
    let mut g = Graph::<f32>::new();
    let input = g.input(x);
    let out = net.forward(&mut g, input, Mode::Train)?;
    let terms = combined_loss_graph(&mut g, out.probs, y, cfg.variant)?;
    let loss = g.value(terms.loss)?.item()?.as_f64();
    let jaccard = g.value(terms.jaccard)?.item()?.as_f64();
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch: position.0,
            batch: position.1,
        });
    }
    let grads = g.backward(terms.loss)?;
    let mut flat = Vec::with_capacity(net.params().len());
    for (i, p) in net.params().iter().enumerate() {
        let gi = grads
            .param(i)
            .ok_or_else(|| Error::State(format!("no gradient for `{}`", p.name)))?;
        flat.push(gi.clone());
    }
    adam_step(net.params_mut(), &flat, opt, rate, &cfg.adam)?;
    net.commit_batch_stats(&out.batch_stats);
    Ok(StepTerms { loss, jaccard })
}

/// Runs the remaining epochs of the schedule on `state`. After each epoch
/// the validation fold is scored and `on_epoch` sees the updated state.
pub fn train(
    state: &mut Checkpoint,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<()> {
    cfg.schedule.validate()?;
    cfg.augment.validate()?;
    cfg.adam.validate()?;
    cfg.eval.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if val_set.is_empty() {
        return Err(Error::Config("validation fold is empty".into()));
    }
    let total = cfg.schedule.total_epochs();
    if state.epochs_done > total {
        return Err(Error::State(format!(
            "checkpoint has {} epochs but the schedule has {total}",
            state.epochs_done
        )));
    }
    let bs = cfg.schedule.batch_size;
    for epoch in state.epochs_done + 1..=total {
        let rate = cfg.schedule.rate_at(epoch).expect("epoch within schedule");
        let seed = epoch_seed(cfg.schedule.seed, epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

        let (mut loss_sum, mut j_sum, mut batches) = (0.0, 0.0, 0usize);
        for (b, chunk) in order.chunks(bs).enumerate() {
            let (x, y) = prepare_batch(train_set, chunk, seed, &cfg.augment, &cfg.standardization)?;
            let terms = train_step(&mut state.network, &mut state.opt, x, &y, rate, cfg, (epoch, b))?;
            loss_sum += terms.loss;
            j_sum += terms.jaccard;
            batches += 1;
        }

        let val = evaluate(&state.network, val_set, &cfg.standardization, &cfg.eval, false)?;
        let record = EpochRecord {
            epoch,
            phase_rate: rate,
            train_loss: loss_sum / batches as f64,
            val_iou: val.mean_iou,
            val_dice: val.mean_dice,
            train_jaccard: j_sum / batches as f64,
        };
        info!(
            "epoch={} rate={} train_loss={:.6} train_jaccard={:.6} val_iou={:.6} val_dice={:.6} val_f1={:.4}",
            epoch,
            rate,
            record.train_loss,
            record.train_jaccard,
            record.val_iou,
            record.val_dice,
            val.f1()
        );
        state.history.push(record);
        state.epochs_done = epoch;
        on_epoch(state)?;
    }
    Ok(())
}

pub const HISTORY_COLUMNS: [&str; 6] = ["epoch", "phase_rate", "train_loss", "val_iou", "val_dice", "train_jaccard"];

pub fn write_history_csv(history: &[EpochRecord], path: &Path) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| crate::data::csv_error(path, e))?;
    for r in history {
        wtr.serialize(r).map_err(|e| crate::data::csv_error(path, e))?;
    }
    if history.is_empty() {
        wtr.write_record(HISTORY_COLUMNS)
            .map_err(|e| crate::data::csv_error(path, e))?;
    }
    wtr.flush().map_err(|e| Error::io(path, e))
}

pub fn read_history_csv(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| crate::data::csv_error(path, e))?;
    rdr.deserialize()
        .map(|r| r.map_err(|e| crate::data::csv_error(path, e)))
        .collect()
}

/// Epoch with the highest validation IoU (earliest on ties).
pub fn best_epoch(history: &[EpochRecord]) -> Option<&EpochRecord> {
    history
        .iter()
        .fold(None, |best: Option<&EpochRecord>, r| match best {
            Some(b) if b.val_iou >= r.val_iou => Some(b),
            _ => Some(r),
        })
}
