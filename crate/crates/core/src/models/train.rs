use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{sample_loss, Architecture, LossWeights, Model, Workspace, ORDER_COEFFS};
use crate::dataset::TrainingSample;
use crate::error::{Error, Result};
use crate::nn::AdamConfig;

/// ChaCha stream reserved for batch shuffling; layer initialization uses
/// the low stream numbers.
const SHUFFLE_STREAM: u64 = 1 << 32;
const SPLIT_STREAM: u64 = (1 << 32) + 1;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub architecture: Architecture,
    #[cfg_attr(feature = "serde", serde(default = "defaults::epochs"))]
    pub epochs: usize,
    #[cfg_attr(feature = "serde", serde(default = "defaults::batch_size"))]
    pub batch_size: usize,
    #[cfg_attr(feature = "serde", serde(default = "defaults::learning_rate"))]
    pub learning_rate: f64,
    #[cfg_attr(feature = "serde", serde(default))]
    pub loss_weights: LossWeights,
    pub seed: u64,
    /// Epochs without a validation improvement before stopping.
    #[cfg_attr(feature = "serde", serde(default = "defaults::patience"))]
    pub patience: usize,
}

mod defaults {
    pub fn epochs() -> usize {
        200
    }
    pub fn batch_size() -> usize {
        64
    }
    pub fn learning_rate() -> f64 {
        1e-4
    }
    pub fn patience() -> usize {
        10
    }
}

impl TrainConfig {
    pub fn new(architecture: Architecture, seed: u64) -> Self {
        Self {
            architecture,
            epochs: defaults::epochs(),
            batch_size: defaults::batch_size(),
            learning_rate: defaults::learning_rate(),
            loss_weights: LossWeights::default(),
            seed,
            patience: defaults::patience(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch size must be positive".into()));
        }
        if self.patience == 0 {
            return Err(Error::InvalidParameter("patience must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidParameter(alloc::format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        self.loss_weights.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    pub optimizer_steps: u64,
}

impl TrainLog {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.best_epoch.and_then(|e| self.epochs.iter().find(|r| r.epoch == e))
    }
}

/// Seeded split of `0..n` into `(train, validation)` index lists, each sorted.
pub fn split_indices(n: usize, validation_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SPLIT_STREAM);
    idx.shuffle(&mut rng);
    let n_val = libm::round((n as f64) * validation_fraction.clamp(0.0, 1.0)) as usize;
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

fn check_samples<S: TrainingSample>(arch: Architecture, set: &[S], what: &'static str) -> Result<()> {
    if set.is_empty() {
        return Err(Error::Empty(what));
    }
    for s in set {
        if s.input().len() != arch.input_len() {
            return Err(Error::LengthMismatch {
                context: "sample input for architecture",
                expected: arch.input_len(),
                found: s.input().len(),
            });
        }
        if s.target_sh().len() != ORDER_COEFFS {
            return Err(Error::LengthMismatch {
                context: "target SH coefficients",
                expected: ORDER_COEFFS,
                found: s.target_sh().len(),
            });
        }
    }
    Ok(())
}

/// Mean per-sample composite loss of `model` over `set`.
pub fn evaluate_loss<S: TrainingSample>(model: &Model, set: &[S], weights: &LossWeights) -> Result<f64> {
    let mut ws = Workspace::new(model.architecture());
    let mut d_sh = vec![0.0; ORDER_COEFFS];
    let mut d_fr = [0.0; 3];
    let mut total = 0.0;
    for s in set {
        model.forward_with(s.input(), &mut ws)?;
        let (sh, fr) = ws.outputs();
        total += sample_loss(sh, fr, s.target_sh(), &s.target_fractions(), weights, 1.0, &mut d_sh, &mut d_fr);
    }
    Ok(total / set.len().max(1) as f64)
}

/// Trains with Adam on shuffled mini-batches and keeps the parameters of the
/// epoch with the lowest validation loss.
pub fn train<S: TrainingSample>(config: &TrainConfig, train_set: &[S], validation_set: &[S]) -> Result<(Model, TrainLog)> {
    train_with_progress(config, train_set, validation_set, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with_progress<S: TrainingSample>(
    config: &TrainConfig,
    train_set: &[S],
    validation_set: &[S],
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Model, TrainLog)> {
    train_from(Model::new(config.architecture, config.seed), config, train_set, validation_set, on_epoch)
}

/// [`train_with_progress`] starting from given parameters instead of a fresh
/// initialization. The config seed still drives batch shuffling.
pub fn train_from<S: TrainingSample>(
    mut model: Model,
    config: &TrainConfig,
    train_set: &[S],
    validation_set: &[S],
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Model, TrainLog)> {
    config.validate()?;
    if model.architecture() != config.architecture {
        return Err(Error::InvalidParameter(alloc::format!(
            "model is {} but config asks for {}",
            model.architecture().name(),
            config.architecture.name()
        )));
    }
    check_samples(config.architecture, train_set, "training set")?;
    check_samples(config.architecture, validation_set, "validation set")?;

    let mut log = TrainLog::default();
    if config.epochs == 0 {
        return Ok((model, log));
    }
    let adam = AdamConfig {
        learning_rate: config.learning_rate,
        ..AdamConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut ws = Workspace::new(config.architecture);
    let mut grads = model.params().zero_gradients();
    let mut d_sh = vec![0.0; ORDER_COEFFS];
    let mut d_fr = [0.0; 3];
    let mut best: Option<(f64, Model)> = None;
    let mut since_best = 0;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
            grads.fill_zero();
            let scale = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for &i in batch {
                let s = &train_set[i];
                model.forward_with(s.input(), &mut ws)?;
                let (sh, fr) = ws.outputs();
                let l = sample_loss(sh, fr, s.target_sh(), &s.target_fractions(), &config.loss_weights, scale, &mut d_sh, &mut d_fr);
                batch_loss += l;
                model.backward(&ws, &d_sh, &d_fr, &mut grads);
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: batch_idx });
            }
            epoch_loss += batch_loss;
            model.params_mut().adam_step(&grads, &adam)?;
            log.optimizer_steps += 1;
        }
        let validation_loss = evaluate_loss(&model, validation_set, &config.loss_weights)?;
        if !validation_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: 0 });
        }
        let record = EpochRecord {
            epoch,
            train_loss: epoch_loss / train_set.len() as f64,
            validation_loss,
        };
        log.epochs.push(record);
        on_epoch(&record);
        if best.as_ref().is_none_or(|(b, _)| validation_loss < *b) {
            best = Some((validation_loss, model.clone()));
            log.best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                log.stopped_early = epoch < config.epochs;
                break;
            }
        }
    }
    let model = best.map(|(_, m)| m).unwrap_or(model);
    Ok((model, log))
}
