//! Training loop: per-mode batches sampled with replacement, AdaMax updates,
//! periodic evaluation and lowest-calval-loss checkpointing.

mod adamax;
mod gradient;
mod loss;

pub use adamax::{AdaMax, MomentBuffers, OptimizerState};
pub use gradient::{loss_and_gradient, total_loss, ModeBatches};
pub use loss::{pinball_gradient, pinball_loss, proportional_loss, squared_log_loss, LossConfig, MeanLoss};

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::format::{fmt_f64, write_file};
use crate::model::RuntimeModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_per_mode: usize,
    pub eval_every: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 20_000,
            batch_per_mode: 512,
            eval_every: 200,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// `steps = 0` is allowed and returns the initial model.
    pub fn validate(&self) -> Result<()> {
        if self.eval_every == 0 {
            return Err(Error::validation("eval_every must be at least 1"));
        }
        if self.batch_per_mode == 0 {
            return Err(Error::validation("batch_per_mode must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::validation(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdaMax {
        AdaMax {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdaMax::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub train_loss: f64,
    pub calval_loss: f64,
    pub is_best: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Checkpoint with the lowest calval loss.
    pub best: RuntimeModel,
    /// Parameters after the last step.
    pub last: RuntimeModel,
    pub best_step: usize,
    pub log: Vec<LogRow>,
}

fn group<'a>(dataset: &'a Dataset, ids: &[usize]) -> ModeBatches<'a> {
    let mut out: ModeBatches<'a> = Default::default();
    for &id in ids {
        let obs = &dataset.observations[id];
        out[obs.mode()].push(obs);
    }
    out
}

/// Train `model` on `split.train`, checkpointing on `split.calval`.
/// Test observations are never read.
pub fn train(
    dataset: &Dataset,
    split: &Split,
    model: RuntimeModel,
    config: &TrainConfig,
    loss: &LossConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    loss.validate()?;
    model.config.validate()?;
    if split.train.is_empty() {
        return Err(Error::validation("training set is empty"));
    }
    if model.n_workloads() != dataset.n_workloads() || model.n_platforms() != dataset.n_platforms() {
        return Err(Error::validation(format!(
            "model covers {}x{} entities but dataset has {}x{}",
            model.n_workloads(),
            model.n_platforms(),
            dataset.n_workloads(),
            dataset.n_platforms()
        )));
    }
    let n = dataset.len();
    if split.train.iter().chain(&split.calval).any(|&id| id >= n) {
        return Err(Error::Index(format!("split refers to observations beyond {n}")));
    }

    let train_set = group(dataset, &split.train);
    let calval_set = group(dataset, &split.calval);
    let optimizer = config.optimizer();
    let mut state = OptimizerState::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut current = model;
    let mut best = current.clone();
    let mut best_step = 0;
    let mut best_loss = total_loss(&current, &calval_set, loss);
    let mut log = vec![LogRow {
        step: 0,
        train_loss: total_loss(&current, &train_set, loss),
        calval_loss: best_loss,
        is_best: true,
    }];

    for step in 1..=config.steps {
        let mut batch: ModeBatches<'_> = Default::default();
        for (mode, pool) in train_set.iter().enumerate() {
            if pool.is_empty() {
                continue;
            }
            batch[mode] = (0..config.batch_per_mode)
                .map(|_| pool[rng.random_range(0..pool.len())])
                .collect();
        }
        let (_, grad) = loss_and_gradient(&current, &batch, loss);
        optimizer.step(&mut current.params, &grad, &mut state);

        if step % config.eval_every == 0 || step == config.steps {
            let calval_loss = total_loss(&current, &calval_set, loss);
            let is_best = calval_loss < best_loss;
            if is_best {
                best_loss = calval_loss;
                best = current.clone();
                best_step = step;
            }
            log.push(LogRow {
                step,
                train_loss: total_loss(&current, &train_set, loss),
                calval_loss,
                is_best,
            });
        }
    }

    if !current.params.is_finite() {
        return Err(Error::validation("training diverged to non-finite parameters"));
    }
    Ok(TrainOutcome {
        best,
        last: current,
        best_step,
        log,
    })
}

pub fn log_to_csv(log: &[LogRow]) -> String {
    let mut out = String::from("step,train_loss,calval_loss,is_best\n");
    for row in log {
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.step,
            fmt_f64(row.train_loss),
            fmt_f64(row.calval_loss),
            row.is_best
        ));
    }
    out
}

pub fn save_log(log: &[LogRow], path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), log_to_csv(log).as_bytes())
}
