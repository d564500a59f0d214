//! Teacher-forced training loop.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::network::loss_with_grads;
use super::optim::{AdaFactor, Adam, Optimizer};
use super::params::ModelParams;
use super::{parse_value, ModelConfig};
use crate::error::{Error, Result};
use crate::features::MelSpectrogram;
use crate::tokenizer::TokenSeq;

/// One training pair: a segment spectrogram, its arranger and target tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub spectrogram: MelSpectrogram,
    pub arranger: usize,
    pub target: TokenSeq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    AdaFactor,
    Adam,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Stop as soon as a step's batch loss falls below this value.
    pub stop_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 2000,
            batch_size: 32,
            learning_rate: 0.001,
            optimizer: OptimizerKind::AdaFactor,
            seed: 0,
            stop_loss: None,
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 6] = [
        "epochs",
        "batch_size",
        "learning_rate",
        "optimizer",
        "seed",
        "stop_loss",
    ];

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Parameter(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Parameter("learning_rate must be positive".into()));
        }
        Ok(())
    }

    /// Builds a config from parsed key/value pairs, taking defaults for
    /// missing keys. Keys that do not belong to training are ignored.
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = TrainConfig::default();
        for (k, v) in map {
            match k.as_str() {
                "epochs" => c.epochs = parse_value(k, v)?,
                "batch_size" => c.batch_size = parse_value(k, v)?,
                "learning_rate" => c.learning_rate = parse_value(k, v)?,
                "seed" => c.seed = parse_value(k, v)?,
                "stop_loss" => c.stop_loss = Some(parse_value(k, v)?),
                "optimizer" => {
                    c.optimizer = match v.as_str() {
                        "adafactor" => OptimizerKind::AdaFactor,
                        "adam" => OptimizerKind::Adam,
                        other => {
                            return Err(Error::Parameter(format!("unknown optimizer '{}'", other)))
                        }
                    }
                }
                _ => {}
            }
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub params: ModelParams,
    /// Batch loss before each optimizer step.
    pub losses: Vec<f64>,
}

/// Trains freshly initialized parameters (seeded by `train_config.seed`).
pub fn train(
    dataset: &[Example],
    train_config: &TrainConfig,
    config: &ModelConfig,
) -> Result<Trained> {
    let params = ModelParams::init(config, train_config.seed)?;
    train_from(params, dataset, train_config)
}

/// Continues training from existing parameters.
pub fn train_from(
    mut params: ModelParams,
    dataset: &[Example],
    train_config: &TrainConfig,
) -> Result<Trained> {
    train_config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Parameter("empty training set".into()));
    }
    let mut optimizer: Box<dyn Optimizer> = match train_config.optimizer {
        OptimizerKind::Adam => Box::new(Adam::new(train_config.learning_rate)),
        OptimizerKind::AdaFactor => Box::new(AdaFactor::new(train_config.learning_rate)),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(train_config.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut losses = Vec::new();
    'epochs: for epoch in 0..train_config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(train_config.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &dataset[i]).collect();
            let (loss, grads) = loss_with_grads(&params, &batch)?;
            let step = losses.len();
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { step, loss });
            }
            losses.push(loss);
            if train_config.stop_loss.is_some_and(|s| loss < s) {
                log::info!(
                    "epoch {} step {}: loss {:.6} below stop threshold",
                    epoch,
                    step,
                    loss
                );
                break 'epochs;
            }
            optimizer.step(&mut params.tensors, &grads);
        }
        if epoch % 50 == 0 {
            log::debug!(
                "epoch {}: loss {:.6}",
                epoch,
                losses.last().copied().unwrap_or(f64::NAN)
            );
        }
    }
    Ok(Trained { params, losses })
}
