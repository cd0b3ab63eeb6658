use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::batch::{Batch, EncodedExample};
use super::optim::{Adam, AdamConfig};
use super::params::ModelParams;
use super::{forward, gradients_inner, loss};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
    /// Average the parameters of the last N epochs (0 disables).
    pub average_last: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            seed: 1,
            adam: AdamConfig::default(),
            patience: Some(30),
            average_last: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Loss on the training set before the first update.
    pub initial_loss: f64,
    pub curve: Vec<EpochStats>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

fn mean_loss(params: &ModelParams, data: &[EncodedExample], batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in data.chunks(batch_size.max(1)) {
        let batch = Batch::new(chunk)?;
        let logits = forward(params, &batch)?;
        total += loss(&logits, &batch)? * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Minibatch Adam on the target-masked loss. Deterministic for a given seed.
pub fn train(
    mut params: ModelParams,
    train_set: &[EncodedExample],
    valid_set: &[EncodedExample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    let initial_loss = mean_loss(&params, train_set, cfg.batch_size)?;
    if !initial_loss.is_finite() {
        return Err(Error::Divergence {
            epoch: 0,
            step: 0,
            loss: initial_loss,
        });
    }
    log::info!("initial training loss {initial_loss:.4}");

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.adam.clone(), &params);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut recent: Vec<ModelParams> = Vec::new();
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let examples: Vec<EncodedExample> = idx.iter().map(|&i| train_set[i].clone()).collect();
            let batch = Batch::new(&examples)?;
            let seed: u64 = rng.random();
            let (l, grads) = gradients_inner(&params, &batch, Some(seed))?;
            if !l.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step: adam.steps() + 1,
                    loss: l,
                });
            }
            total += l * examples.len() as f64;
            adam.update(&mut params, &grads);
        }
        if !params.is_finite() {
            return Err(Error::Divergence {
                epoch,
                step: adam.steps(),
                loss: f64::NAN,
            });
        }
        let train_loss = total / train_set.len() as f64;
        let valid_loss = if valid_set.is_empty() {
            None
        } else {
            Some(mean_loss(&params, valid_set, cfg.batch_size)?)
        };
        log::info!(
            "epoch {epoch}: train {train_loss:.4}{}",
            valid_loss
                .map(|v| format!(", valid {v:.4}"))
                .unwrap_or_default()
        );
        curve.push(EpochStats {
            epoch,
            train_loss,
            valid_loss,
        });
        if cfg.average_last > 0 {
            recent.push(params.clone());
            if recent.len() > cfg.average_last {
                recent.remove(0);
            }
        }
        if let Some(v) = valid_loss {
            if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
                best = Some((v, epoch, params.clone()));
            }
            if let (Some(patience), Some((_, be, _))) = (cfg.patience, &best) {
                if epoch - be >= patience {
                    stopped_early = true;
                    log::info!("early stop at epoch {epoch}, best epoch {be}");
                    break;
                }
            }
        }
    }

    let best_epoch = best.as_ref().map(|b| b.1);
    let params = if !recent.is_empty() {
        ModelParams::average(&recent)?
    } else if let Some((_, _, p)) = best {
        p
    } else {
        params
    };
    Ok(TrainOutcome {
        params,
        initial_loss,
        curve,
        best_epoch,
        stopped_early,
    })
}

/// Stage one trains on knowledge-free examples; stage two continues from the
/// stage-one parameters on the knowledge-augmented examples.
pub fn train_two_stage(
    params: ModelParams,
    plain: (&[EncodedExample], &[EncodedExample]),
    prompted: (&[EncodedExample], &[EncodedExample]),
    stage1: &TrainConfig,
    stage2: &TrainConfig,
) -> Result<(TrainOutcome, TrainOutcome)> {
    let first = train(params, plain.0, plain.1, stage1)?;
    let second = train(first.params.clone(), prompted.0, prompted.1, stage2)?;
    Ok((first, second))
}
