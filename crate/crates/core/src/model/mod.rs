//! Arranger-conditioned encoder-decoder transformer.
//!
//! The encoder reads one segment of log-Mel frames with a learned arranger
//! embedding prepended; the decoder emits token ids autoregressively. Both
//! stacks use pre-norm residual blocks with RMS normalization and T5-style
//! relative position bias shared across the layers of a stack.

mod buckets;
mod checkpoint;
mod generate;
mod graph;
mod network;
mod optim;
mod params;
mod tensor;
mod train;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tokenizer::{MAX_DECODE_LEN, VOCAB_SIZE};

pub use buckets::{relative_position_bucket, BucketMatrix};
pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, FloatWidth,
};
pub use generate::{greedy_generate, Generated};
pub use graph::{Graph, Var};
pub use network::{decode_step, decoder_logits, encode, loss_with_grads, teacher_forced_loss};
pub use optim::{AdaFactor, Adam, Optimizer};
pub use params::{ModelParams, ParamSpec};
pub use tensor::Tensor;
pub use train::{train, train_from, Example, OptimizerKind, TrainConfig, Trained};

/// Feed-forward block variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeedForward {
    /// `wo · (gelu(x·wi_0) ⊙ x·wi_1)`
    GatedGelu,
    /// `wo · relu(x·wi)`
    Relu,
}

impl FeedForward {
    fn as_str(self) -> &'static str {
        match self {
            FeedForward::GatedGelu => "gated_gelu",
            FeedForward::Relu => "relu",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "gated_gelu" => Ok(FeedForward::GatedGelu),
            "relu" => Ok(FeedForward::Relu),
            other => Err(Error::Parameter(format!(
                "unknown feed_forward '{}'",
                other
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub num_heads: usize,
    pub d_ff: usize,
    pub num_encoder_layers: usize,
    pub num_decoder_layers: usize,
    pub vocab_size: usize,
    pub n_mels: usize,
    pub num_arrangers: usize,
    pub relative_bias_buckets: usize,
    pub relative_bias_max_distance: usize,
    pub max_decode_len: usize,
    pub feed_forward: FeedForward,
}

impl Default for ModelConfig {
    /// Desk-scale configuration that trains on one CPU core in minutes.
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            num_heads: 4,
            d_ff: 256,
            num_encoder_layers: 2,
            num_decoder_layers: 2,
            vocab_size: VOCAB_SIZE,
            n_mels: crate::features::DEFAULT_N_MELS,
            num_arrangers: 21,
            relative_bias_buckets: 32,
            relative_bias_max_distance: 128,
            max_decode_len: MAX_DECODE_LEN,
            feed_forward: FeedForward::GatedGelu,
        }
    }
}

impl ModelConfig {
    /// T5-small dimensions. Used for parameter counting, not for training.
    pub fn t5_small() -> Self {
        ModelConfig {
            d_model: 512,
            num_heads: 8,
            d_ff: 2048,
            num_encoder_layers: 6,
            num_decoder_layers: 6,
            n_mels: 512,
            ..ModelConfig::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("num_heads", self.num_heads),
            ("d_ff", self.d_ff),
            ("n_mels", self.n_mels),
            ("num_arrangers", self.num_arrangers),
            ("relative_bias_buckets", self.relative_bias_buckets),
            (
                "relative_bias_max_distance",
                self.relative_bias_max_distance,
            ),
            ("max_decode_len", self.max_decode_len),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::Parameter(format!("{} must be positive", name)));
            }
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::Parameter(format!(
                "d_model {} not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.vocab_size != VOCAB_SIZE {
            return Err(Error::Parameter(format!(
                "vocab_size must be {}, got {}",
                VOCAB_SIZE, self.vocab_size
            )));
        }
        if self.relative_bias_buckets < 4 {
            return Err(Error::Parameter(
                "relative_bias_buckets must be at least 4".into(),
            ));
        }
        Ok(())
    }

    /// Exact number of learnable scalars.
    pub fn count_params(&self) -> usize {
        let d = self.d_model;
        let ffn = match self.feed_forward {
            FeedForward::GatedGelu => 3 * d * self.d_ff,
            FeedForward::Relu => 2 * d * self.d_ff,
        };
        let bias = self.relative_bias_buckets * self.num_heads;
        let encoder = self.n_mels * d
            + self.num_arrangers * d
            + bias
            + self.num_encoder_layers * (2 * d + 4 * d * d + ffn)
            + d;
        let decoder =
            self.vocab_size * d + bias + self.num_decoder_layers * (3 * d + 8 * d * d + ffn) + d;
        encoder + decoder
    }

    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{}={}", k, v);
        }
        out
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("d_model", self.d_model.to_string()),
            ("num_heads", self.num_heads.to_string()),
            ("d_ff", self.d_ff.to_string()),
            ("num_encoder_layers", self.num_encoder_layers.to_string()),
            ("num_decoder_layers", self.num_decoder_layers.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("n_mels", self.n_mels.to_string()),
            ("num_arrangers", self.num_arrangers.to_string()),
            (
                "relative_bias_buckets",
                self.relative_bias_buckets.to_string(),
            ),
            (
                "relative_bias_max_distance",
                self.relative_bias_max_distance.to_string(),
            ),
            ("max_decode_len", self.max_decode_len.to_string()),
            ("feed_forward", self.feed_forward.as_str().to_string()),
        ]
    }

    pub const KEYS: [&'static str; 12] = [
        "d_model",
        "num_heads",
        "d_ff",
        "num_encoder_layers",
        "num_decoder_layers",
        "vocab_size",
        "n_mels",
        "num_arrangers",
        "relative_bias_buckets",
        "relative_bias_max_distance",
        "max_decode_len",
        "feed_forward",
    ];

    /// Builds a config from parsed key/value pairs, taking defaults for
    /// missing keys. Keys that do not belong to the model are ignored.
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = ModelConfig::default();
        for (k, v) in map {
            let slot = match k.as_str() {
                "d_model" => &mut c.d_model,
                "num_heads" => &mut c.num_heads,
                "d_ff" => &mut c.d_ff,
                "num_encoder_layers" => &mut c.num_encoder_layers,
                "num_decoder_layers" => &mut c.num_decoder_layers,
                "vocab_size" => &mut c.vocab_size,
                "n_mels" => &mut c.n_mels,
                "num_arrangers" => &mut c.num_arrangers,
                "relative_bias_buckets" => &mut c.relative_bias_buckets,
                "relative_bias_max_distance" => &mut c.relative_bias_max_distance,
                "max_decode_len" => &mut c.max_decode_len,
                "feed_forward" => {
                    c.feed_forward = FeedForward::parse(v)?;
                    continue;
                }
                _ => continue,
            };
            *slot = parse_value(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }
}

pub(crate) fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Parameter(format!("invalid value '{}' for {}", value, key)))
}

/// Parses flat `key=value` text. Blank lines and `#` comments are skipped;
/// duplicate keys are rejected.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parameter(format!("line {}: expected key=value", n + 1)))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if map.insert(k.clone(), v).is_some() {
            return Err(Error::Parameter(format!(
                "line {}: duplicate key {}",
                n + 1,
                k
            )));
        }
    }
    Ok(map)
}

/// Parses a combined model + training config file, rejecting unknown keys.
pub fn parse_config_file(text: &str) -> Result<(ModelConfig, TrainConfig)> {
    let map = parse_key_values(text)?;
    for k in map.keys() {
        if !ModelConfig::KEYS.contains(&k.as_str()) && !TrainConfig::KEYS.contains(&k.as_str()) {
            return Err(Error::Parameter(format!("unknown config key '{}'", k)));
        }
    }
    Ok((ModelConfig::from_map(&map)?, TrainConfig::from_map(&map)?))
}
