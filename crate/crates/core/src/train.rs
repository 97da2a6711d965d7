//! Mini-batch training with Adam and a step-decay learning-rate schedule.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, RetrievalReport};
use crate::featurestore::{Dataset, FeatureSet};
use crate::matcher::LossConfig;
use crate::model::Model;
use crate::params::{BnAccess, Ctx};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplier applied every `decay_epoch` epochs.
    pub decay_factor: f64,
    /// Defaults to half of `epochs`.
    pub decay_epoch: Option<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    /// Fraction of all optimizer steps spent on a linear warmup; 0 disables it.
    pub warmup_fraction: f64,
    /// Shuffling seed; run configs set it from their top-level seed.
    #[serde(skip)]
    pub seed: u64,
    /// Train on the first `train_items` items and validate on the rest; all
    /// items are used for both when unset.
    pub train_items: Option<usize>,
    /// Validate every this many epochs (and always after the last one); 0 disables.
    pub validate_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 16,
            learning_rate: 2e-3,
            decay_factor: 0.1,
            decay_epoch: None,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            warmup_fraction: 0.0,
            seed: 0,
            train_items: None,
            validate_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn decay_epoch(&self) -> usize {
        self.decay_epoch.unwrap_or((self.epochs / 2).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be ≥ 1");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be ≥ 2 so negatives exist");
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return bad("learning_rate must be finite and ≥ 0");
        }
        if self.decay_factor.is_nan() || self.decay_factor <= 0.0 {
            return bad("decay_factor must be > 0");
        }
        let de = self.decay_epoch();
        if de == 0 || de > self.epochs {
            return bad("decay_epoch must lie in 1..=epochs");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.adam_epsilon.is_nan() || self.adam_epsilon <= 0.0 {
            return bad("Adam epsilon must be > 0");
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must lie in [0, 1)");
        }
        Ok(())
    }

    /// Learning rate for `epoch` (0-based) before warmup scaling.
    pub fn epoch_learning_rate(&self, epoch: usize) -> f64 {
        self.learning_rate * self.decay_factor.powi((epoch / self.decay_epoch()) as i32)
    }
}

/// Adam moment estimates for every parameter tensor.
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: i32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &[Tensor], cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.adam_epsilon,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.dim())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.dim())).collect(),
        }
    }

    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + self.epsilon);
                });
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Mean batch loss over the epoch.
    pub loss: f64,
    pub validation: Option<RetrievalReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }

    pub fn final_validation(&self) -> Option<&RetrievalReport> {
        self.epochs.iter().rev().find_map(|e| e.validation.as_ref())
    }

    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }

    /// First epoch (1-based) whose mean loss is below `threshold`.
    pub fn epochs_to_reach(&self, threshold: f64) -> Option<usize> {
        self.epochs
            .iter()
            .find(|e| e.loss < threshold)
            .map(|e| e.epoch)
    }
}

/// Splits `dataset` into training and validation parts per `cfg.train_items`.
pub fn split(dataset: &Dataset, cfg: &TrainConfig) -> Result<(Dataset, Dataset)> {
    match cfg.train_items {
        Some(t) if t < dataset.len() => {
            Ok((dataset.subset(0, t)?, dataset.subset(t, dataset.len())?))
        }
        Some(t) if t > dataset.len() => Err(Error::Config(format!(
            "train_items {t} exceeds dataset of {}",
            dataset.len()
        ))),
        _ => Ok((dataset.clone(), dataset.clone())),
    }
}

/// Loss and parameter gradients for one batch; batch-norm running statistics are updated.
pub fn batch_gradients(
    model: &mut Model,
    images: &[&FeatureSet],
    captions: &[&[u32]],
    loss: &LossConfig,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let vars = model.store.bind(&mut tape);
    let mut bn = model.store.bn_states().to_vec();
    let out = {
        let mut ctx = Ctx::new(&mut tape, &vars, BnAccess::Update(&mut bn));
        model.batch_loss(&mut ctx, images, captions, loss)?
    };
    model.store.bn_states_mut().clone_from_slice(&bn);
    let value = tape.scalar(out);
    let grads = tape.backward(out)?;
    let per_param = vars
        .iter()
        .zip(model.store.values())
        .map(|(&v, p)| grads.wrt_or_zeros(v, p.dim()))
        .collect();
    Ok((value, per_param))
}

/// Trains `model` in place and returns the per-epoch log.
pub fn train(
    model: &mut Model,
    dataset: &Dataset,
    cfg: &TrainConfig,
    loss: &LossConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    loss.validate()?;
    model.config.check_dataset(&dataset.manifest)?;
    let (train_set, val_set) = split(dataset, cfg)?;
    if train_set.len() < 2 {
        return Err(Error::Config("training needs at least 2 items".into()));
    }
    let cpi = train_set.manifest.captions_per_image;
    let n = train_set.len();
    let batches_per_epoch = cpi * n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let warmup_steps = (cfg.warmup_fraction * total_steps as f64).round() as usize;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model.store.values(), cfg);
    let mut log = TrainLog {
        epochs: Vec::with_capacity(cfg.epochs),
    };
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        // Every (image, caption) pair once per epoch: `cpi` rounds, each a
        // fresh shuffle of the images, with per-image caption offsets so a
        // batch never holds the same image twice.
        let offsets: Vec<usize> = (0..n).map(|_| rng.random_range(0..cpi)).collect();
        let base_lr = cfg.epoch_learning_rate(epoch);
        let mut total = 0.0;
        let mut batches = 0usize;
        for round in 0..cpi {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            for batch in order.chunks(cfg.batch_size) {
                if batch.len() < 2 {
                    continue;
                }
                let images: Vec<&FeatureSet> = batch.iter().map(|&i| &train_set.items[i]).collect();
                let captions: Vec<&[u32]> = batch
                    .iter()
                    .map(|&i| train_set.items[i].captions[(offsets[i] + round) % cpi].as_slice())
                    .collect();
                let non_finite = Error::NonFiniteLoss {
                    epoch: epoch + 1,
                    batch: batches,
                };
                let (value, grads) = match batch_gradients(model, &images, &captions, loss) {
                    Err(Error::NonFinite(_)) => return Err(non_finite),
                    other => other?,
                };
                if !value.is_finite() || grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                    return Err(non_finite);
                }
                step += 1;
                let lr = if step <= warmup_steps {
                    base_lr * step as f64 / warmup_steps as f64
                } else {
                    base_lr
                };
                adam.update(model.store.values_mut(), &grads, lr);
                total += value;
                batches += 1;
            }
        }

        let last = epoch + 1 == cfg.epochs;
        let validation =
            if cfg.validate_every > 0 && ((epoch + 1) % cfg.validate_every == 0 || last) {
                Some(evaluate(&model.similarity(&val_set)?)?)
            } else {
                None
            };
        log.epochs.push(EpochRecord {
            epoch: epoch + 1,
            learning_rate: base_lr,
            loss: total / batches.max(1) as f64,
            validation,
        });
    }
    Ok(log)
}
