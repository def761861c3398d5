//! Epoch-level training loop with per-epoch evaluation.

use std::time::Instant;

use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::metrics;
use crate::models::{Model, ParamState};
use crate::objective::{self, ObjectiveConfig, Prior};
use crate::optim::{adam_step, AdamConfig, AdamState, Schedule};
use crate::rng::{self, derive_seed};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub adam: AdamConfig,
    /// Stochastic forwards per training batch.
    pub samples: usize,
    /// Weight samples averaged at evaluation.
    pub eval_samples: usize,
    pub temperature: f64,
    pub prior: Prior,
    pub bins: usize,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 160,
            batch_size: 128,
            schedule: Schedule::default(),
            adam: AdamConfig::default(),
            samples: 10,
            eval_samples: 10,
            temperature: 0.1,
            prior: Prior::default(),
            bins: 10,
            augment: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub nll: f64,
    pub kl: f64,
    pub test_acc: f64,
    pub mace: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRecord {
    pub epochs: Vec<EpochRecord>,
    pub max_test_acc: f64,
    pub mace_at_max: f64,
    /// First epoch reaching `max_test_acc`.
    pub best_epoch: usize,
    /// Seed of the evaluation weight samples.
    pub eval_seed: u64,
    /// Time spent in the loop itself, evaluation included, I/O excluded.
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub record: TrainRecord,
    /// Parameters at `best_epoch`.
    pub best: ParamState,
}

/// Test accuracy and MACE of the model's `samples`-sample predictive mean.
pub fn evaluate(model: &Model, test: &Dataset, samples: usize, bins: usize, seed: u64) -> Result<(f64, f64)> {
    let (x, y) = test.all();
    let probs = model.predict_mean(&x, samples, seed)?;
    metrics::evaluate(&probs, &y, bins)
}

/// Trains `model` in place; on return it holds the final-epoch parameters.
pub fn train(model: &mut Model, train: &Dataset, test: &Dataset, cfg: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    if cfg.epochs == 0 {
        return Err(Error::invalid("epochs must be at least 1"));
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::invalid("training and test sets must be nonempty"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    let obj = ObjectiveConfig {
        samples: cfg.samples,
        temperature: cfg.temperature,
        prior: cfg.prior,
        dataset_size: train.len(),
    };
    let eval_seed = derive_seed(seed, "eval", 0);
    let mut shuffle_rng = rng::stream(seed, "shuffle", 0);
    let mut noise_rng = rng::stream(seed, "noise", 0);
    let mut augment_rng = rng::stream(seed, "augment", 0);
    let mut adam = AdamState::new(model);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, f64, ParamState)> = None;

    let start = Instant::now();
    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr(epoch);
        let order = data::shuffled_indices(train.len(), &mut shuffle_rng);
        let (mut total, mut nll, mut kl) = (0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, labels) = if cfg.augment && train.is_image() {
                let augmented = Dataset {
                    records: chunk
                        .iter()
                        .map(|&i| data::augment_with(&train.records[i], &train.feature_shape, &mut augment_rng))
                        .collect(),
                    feature_shape: train.feature_shape.clone(),
                    num_classes: train.num_classes,
                };
                augmented.all()
            } else {
                train.batch(chunk)
            };
            let noise = objective::draw_noise_set(model, cfg.samples, &mut noise_rng);
            let (parts, grads) = objective::elbo_gradients(model, &x, &labels, &obj, &noise)?;
            adam_step(model, &grads, &mut adam, lr, &cfg.adam)?;
            total += parts.total;
            nll += parts.nll;
            kl += parts.kl;
            batches += 1;
        }
        let n = batches as f64;
        let (test_acc, mace) = evaluate(model, test, cfg.eval_samples, cfg.bins, eval_seed)?;
        epochs.push(EpochRecord {
            epoch,
            lr,
            total: total / n,
            nll: nll / n,
            kl: kl / n,
            test_acc,
            mace,
        });
        if best.as_ref().is_none_or(|b| test_acc > b.1) {
            best = Some((epoch, test_acc, mace, model.state()));
        }
    }
    let wall_seconds = start.elapsed().as_secs_f64();
    let (best_epoch, max_test_acc, mace_at_max, best_state) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        record: TrainRecord {
            epochs,
            max_test_acc,
            mace_at_max,
            best_epoch,
            eval_seed,
            wall_seconds,
        },
        best: best_state,
    })
}
