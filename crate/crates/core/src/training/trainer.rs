use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adamw::{adamw_step, OptimizerState};
use super::loss::contrastive_loss;
use super::TrainConfig;
use crate::combiner::{CombineMode, CombinerParams, Phase};
use crate::retrieval::{evaluate, EvalOptions, GalleryIndex};
use crate::store::AlignedTriplets;
use crate::{Error, Result};

const SHUFFLE_STREAM: u64 = 3;

/// Validation queries and the gallery they are searched against.
#[derive(Debug, Clone, Copy)]
pub struct Validation<'a> {
    pub queries: &'a AlignedTriplets,
    pub gallery: &'a GalleryIndex,
    pub options: EvalOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn best_metric(&self) -> f64 {
        self.epochs[self.best_epoch].val_metric
    }
}

/// Seed for the dropout masks of one optimizer step.
fn step_seed(seed: u64, epoch: usize, step: usize) -> u64 {
    let mix = seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(epoch as u64 + 1);
    mix.rotate_left(17) ^ (step as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

fn gather(m: &Array2<f32>, rows: &[usize]) -> Array2<f32> {
    m.select(Axis(0), rows)
}

/// Train a fresh Combiner with early stopping on the validation headline metric.
///
/// Each epoch shuffles the training rows (seeded), walks them in batches of
/// `cfg.batch_size` (the last batch may be smaller), and takes one AdamW step
/// per batch. After every epoch the validation metric is computed in eval
/// phase; the best parameters are kept and training stops once `cfg.patience`
/// epochs pass without improvement. `on_epoch` sees every epoch record as it
/// is produced.
pub fn train_combiner(
    train: &AlignedTriplets,
    val: Validation<'_>,
    cfg: &TrainConfig,
    mode: CombineMode,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(CombinerParams<f32>, TrainHistory)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    let d = train.dim();
    if val.queries.dim() != d {
        return Err(Error::ShapeMismatch(format!(
            "train dim {d} vs validation dim {}",
            val.queries.dim()
        )));
    }

    let mut params = CombinerParams::<f32>::init(d, cfg.seed)?.with_dropout(cfg.dropout_rate)?;
    let mut state = OptimizerState::new(&params);
    let adam = cfg.adamw();
    let tau = cfg.tau as f32;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SHUFFLE_STREAM);

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, CombinerParams<f32>)> = None;
    let mut since_best = 0usize;
    let mut stopped_early = false;

    for epoch in 0..cfg.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        for (step, rows) in order.chunks(cfg.batch_size).enumerate() {
            let img = gather(&train.reference, rows);
            let txt = gather(&train.caption, rows);
            let tgt = gather(&train.target, rows);
            let phase = Phase::Train {
                dropout_seed: step_seed(cfg.seed, epoch, step),
            };
            let (fwd, cache) = params.forward_cached(img.view(), txt.view(), mode, phase)?;
            // A combined row collapsing to zero is a training failure, not bad data.
            let out =
                contrastive_loss(fwd.combined.view(), tgt.view(), tau).map_err(|e| match e {
                    Error::ZeroNorm(ref what) if what.starts_with("combined") => Error::Diverged {
                        epoch,
                        loss: f64::NAN,
                    },
                    other => other,
                })?;
            let loss = f64::from(out.loss);
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            loss_sum += loss * rows.len() as f64;
            if mode.is_trainable() {
                let grads = params.backward(&cache, out.grad_combined.view())?;
                adamw_step(&mut params, &grads.params, &mut state, &adam).map_err(|e| match e {
                    Error::NonFiniteGradient(_) => Error::Diverged { epoch, loss },
                    other => other,
                })?;
            }
        }

        let report = evaluate(val.queries, Some(&params), mode, val.gallery, &val.options)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_metric: report.headline(),
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        let metric = record.val_metric;
        epochs.push(record);

        if best.as_ref().is_none_or(|(b, _, _)| metric > *b) {
            best = Some((metric, epoch, params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        // Nothing to optimize: one pass measures the fixed combination.
        if !mode.is_trainable() || since_best >= cfg.patience {
            stopped_early = epoch + 1 < cfg.max_epochs;
            break;
        }
    }

    let (_, best_epoch, best_params) = best.expect("max_epochs >= 1 is validated");
    Ok((
        best_params,
        TrainHistory {
            epochs,
            best_epoch,
            stopped_early,
        },
    ))
}
