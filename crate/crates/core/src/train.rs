//! Mini-batch Adam training over tokenized observations.
//!
//! Data order is a fresh seeded permutation per epoch, derived only from
//! `(seed, epoch)`, so a run resumed from a checkpoint at step `k` sees exactly
//! the batches an uninterrupted run would.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::{loss_and_grads, Checkpoint, Dropout, ModelError};
use crate::optim::{adam_step, clip_grad_norm, AdamConfig, AdamState, OptimError};
use crate::scalar::Scalar;
use crate::tokenizer::{Tokenizer, TokenizerError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("step {step}: {source}")]
    Optim {
        step: u64,
        #[source]
        source: OptimError,
    },
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error("{} observation(s) exceed max_seq_len {max}: {}", .lines.len(), describe_lines(.lines))]
    TooLong {
        lines: Vec<(usize, usize)>,
        max: usize,
    },
    #[error("the training set is empty")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("{0}")]
    Observer(String),
}

fn describe_lines(lines: &[(usize, usize)]) -> String {
    let shown: Vec<String> = lines
        .iter()
        .take(10)
        .map(|(line, len)| format!("line {line} ({len} tokens)"))
        .collect();
    let more = if lines.len() > 10 { ", ..." } else { "" };
    format!("{}{more}", shown.join(", "))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    /// Linear decay from the initial rate to zero at the last step.
    LinearDecay,
}

impl FromStr for LrSchedule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "linear" | "linear-decay" => Ok(LrSchedule::LinearDecay),
            _ => Err(format!(
                "unknown learning-rate schedule `{s}` (expected constant or linear)"
            )),
        }
    }
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LrSchedule::Constant => "constant",
            LrSchedule::LinearDecay => "linear",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Call [`TrainObserver::on_eval`] every this many steps; 0 disables.
    pub eval_every: u64,
    /// Call [`TrainObserver::on_checkpoint`] every this many steps; 0 disables.
    pub checkpoint_every: u64,
    pub schedule: LrSchedule,
    /// Global gradient-norm bound; off by default.
    pub clip_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 25,
            learning_rate: 1e-4,
            batch_size: 32,
            adam: AdamConfig::default(),
            seed: 0,
            eval_every: 0,
            checkpoint_every: 0,
            schedule: LrSchedule::Constant,
            clip_grad_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: &str| Err(TrainError::InvalidConfig(msg.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        let AdamConfig { beta1, beta2, eps } = self.adam;
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
            return bad("adam betas must lie in [0, 1) and epsilon must be positive");
        }
        if self.clip_grad_norm.is_some_and(|c| c <= 0.0) {
            return bad("clip_grad_norm must be positive");
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n: usize) -> u64 {
        n.div_ceil(self.batch_size) as u64
    }

    pub fn lr_at(&self, step: u64, total_steps: u64) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::LinearDecay => {
                self.learning_rate * (1.0 - step as f64 / total_steps.max(1) as f64)
            }
        }
    }
}

/// One optimizer step's mean batch loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    /// 1-based count of updates applied, including this one.
    pub step: u64,
    /// 1-based epoch.
    pub epoch: u64,
    pub loss: f64,
}

pub fn loss_log_csv(records: &[LossRecord]) -> String {
    let mut out = String::from("step,epoch,loss\n");
    for r in records {
        out.push_str(&format!("{},{},{}\n", r.step, r.epoch, r.loss));
    }
    out
}

/// Mean loss of each epoch, in order.
pub fn epoch_means(records: &[LossRecord]) -> Vec<(u64, f64)> {
    let mut out: Vec<(u64, f64, usize)> = Vec::new();
    for r in records {
        match out.last_mut() {
            Some((e, sum, n)) if *e == r.epoch => {
                *sum += r.loss;
                *n += 1;
            }
            _ => out.push((r.epoch, r.loss, 1)),
        }
    }
    out.into_iter()
        .map(|(e, sum, n)| (e, sum / n as f64))
        .collect()
}

/// Hooks called from the training loop.
pub trait TrainObserver<S> {
    fn on_step(&mut self, _record: &LossRecord) {}

    fn on_eval(&mut self, _checkpoint: &Checkpoint<S>) -> Result<(), TrainError> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _checkpoint: &Checkpoint<S>) -> Result<(), TrainError> {
        Ok(())
    }
}

/// Observer that does nothing.
pub struct Silent;

impl<S> TrainObserver<S> for Silent {}

/// Tokenizes every observation as `BOS text EOS`, failing with the full list
/// of lines (1-based) that would not fit in `max_seq_len`.
pub fn encode_dataset<T: AsRef<str>>(
    lines: &[T],
    tokenizer: &Tokenizer,
    max_seq_len: usize,
) -> Result<Vec<Vec<u32>>, TrainError> {
    let mut out = Vec::with_capacity(lines.len());
    let mut too_long = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        let ids = tokenizer.encode_sequence(line.as_ref())?;
        if ids.len() > max_seq_len {
            too_long.push((i + 1, ids.len()));
        }
        out.push(ids);
    }
    if !too_long.is_empty() {
        return Err(TrainError::TooLong {
            lines: too_long,
            max: max_seq_len,
        });
    }
    Ok(out)
}

fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn dropout_seed(seed: u64, step: u64) -> u64 {
    // splitmix64 finalizer over the pair.
    let mut z = seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Trains `checkpoint` until `cfg.epochs` epochs over `data` have been
/// completed, starting from `checkpoint.step`. Returns the loss of every step
/// taken in this call.
pub fn train<S: Scalar>(
    checkpoint: &mut Checkpoint<S>,
    data: &[Vec<u32>],
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver<S>,
) -> Result<Vec<LossRecord>, TrainError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let max = checkpoint.model.config().max_seq_len;
    let too_long: Vec<(usize, usize)> = data
        .iter()
        .enumerate()
        .filter(|(_, s)| s.len() > max)
        .map(|(i, s)| (i + 1, s.len()))
        .collect();
    if !too_long.is_empty() {
        return Err(TrainError::TooLong {
            lines: too_long,
            max,
        });
    }

    let per_epoch = cfg.steps_per_epoch(data.len());
    let total = per_epoch * cfg.epochs as u64;
    let dropout_p = checkpoint.model.config().dropout;
    let mut records = Vec::new();
    let mut order_epoch = u64::MAX;
    let mut order = Vec::new();
    let mut batch: Vec<Vec<u32>> = Vec::with_capacity(cfg.batch_size);

    while checkpoint.step < total {
        let step = checkpoint.step;
        let epoch = step / per_epoch;
        if epoch != order_epoch {
            order = epoch_order(cfg.seed, epoch, data.len());
            order_epoch = epoch;
        }
        let b = (step % per_epoch) as usize;
        let end = ((b + 1) * cfg.batch_size).min(data.len());
        batch.clear();
        batch.extend(
            order[b * cfg.batch_size..end]
                .iter()
                .map(|&i| data[i].clone()),
        );

        let dropout = (dropout_p > 0.0).then(|| Dropout {
            p: dropout_p,
            seed: dropout_seed(cfg.seed, step),
        });
        let mut out = loss_and_grads(&checkpoint.model, &batch, dropout)?;
        if let Some(c) = cfg.clip_grad_norm {
            clip_grad_norm(&mut out.grads, c);
        }
        let layout = checkpoint.model.params().layout().clone();
        let state = checkpoint
            .optimizer
            .get_or_insert_with(|| AdamState::new(layout));
        adam_step(
            checkpoint.model.params_mut(),
            &out.grads,
            state,
            &cfg.adam,
            cfg.lr_at(step, total),
        )
        .map_err(|source| TrainError::Optim {
            step: step + 1,
            source,
        })?;
        checkpoint.step += 1;

        let record = LossRecord {
            step: checkpoint.step,
            epoch: epoch + 1,
            loss: out.loss,
        };
        observer.on_step(&record);
        records.push(record);
        if cfg.eval_every > 0 && checkpoint.step % cfg.eval_every == 0 {
            observer.on_eval(checkpoint)?;
        }
        if cfg.checkpoint_every > 0 && checkpoint.step % cfg.checkpoint_every == 0 {
            observer.on_checkpoint(checkpoint)?;
        }
    }
    Ok(records)
}
