//! Parameter layout and initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::Tensor;
use super::{FeedForward, ModelConfig};
use crate::error::{Error, Result};

/// Name, shape and initial standard deviation of one parameter tensor.
/// A standard deviation of `None` means "initialize to ones".
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub init_std: Option<f64>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnIdx {
    pub q: usize,
    pub k: usize,
    pub v: usize,
    pub o: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct FfnIdx {
    pub wi0: usize,
    pub wi1: Option<usize>,
    pub wo: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct EncLayerIdx {
    pub attn_norm: usize,
    pub attn: AttnIdx,
    pub ffn_norm: usize,
    pub ffn: FfnIdx,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct DecLayerIdx {
    pub self_norm: usize,
    pub self_attn: AttnIdx,
    pub cross_norm: usize,
    pub cross_attn: AttnIdx,
    pub ffn_norm: usize,
    pub ffn: FfnIdx,
}

/// Indices of every tensor in declaration order.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub specs: Vec<ParamSpec>,
    pub input_proj: usize,
    pub arranger: usize,
    pub enc_bias: usize,
    pub enc_layers: Vec<EncLayerIdx>,
    pub enc_norm: usize,
    pub token_emb: usize,
    pub dec_bias: usize,
    pub dec_layers: Vec<DecLayerIdx>,
    pub dec_norm: usize,
}

struct Builder {
    specs: Vec<ParamSpec>,
}

impl Builder {
    fn add(&mut self, name: String, rows: usize, cols: usize, init_std: Option<f64>) -> usize {
        self.specs.push(ParamSpec {
            name,
            rows,
            cols,
            init_std,
        });
        self.specs.len() - 1
    }

    fn norm(&mut self, name: String, d: usize) -> usize {
        self.add(name, 1, d, None)
    }

    fn attention(&mut self, prefix: &str, c: &ModelConfig) -> AttnIdx {
        let d = c.d_model;
        let dk = c.head_dim();
        let std_d = (d as f64).powf(-0.5);
        AttnIdx {
            q: self.add(
                format!("{}.q", prefix),
                d,
                d,
                Some(((d * dk) as f64).powf(-0.5)),
            ),
            k: self.add(format!("{}.k", prefix), d, d, Some(std_d)),
            v: self.add(format!("{}.v", prefix), d, d, Some(std_d)),
            o: self.add(format!("{}.o", prefix), d, d, Some(std_d)),
        }
    }

    fn ffn(&mut self, prefix: &str, c: &ModelConfig) -> FfnIdx {
        let d = c.d_model;
        let std_in = (d as f64).powf(-0.5);
        let std_out = (c.d_ff as f64).powf(-0.5);
        match c.feed_forward {
            FeedForward::GatedGelu => FfnIdx {
                wi0: self.add(format!("{}.wi_0", prefix), d, c.d_ff, Some(std_in)),
                wi1: Some(self.add(format!("{}.wi_1", prefix), d, c.d_ff, Some(std_in))),
                wo: self.add(format!("{}.wo", prefix), c.d_ff, d, Some(std_out)),
            },
            FeedForward::Relu => FfnIdx {
                wi0: self.add(format!("{}.wi", prefix), d, c.d_ff, Some(std_in)),
                wi1: None,
                wo: self.add(format!("{}.wo", prefix), c.d_ff, d, Some(std_out)),
            },
        }
    }
}

/// Standard deviation of the token embedding at initialization. Small enough
/// that untrained logits are close to uniform.
const TOKEN_EMBEDDING_STD: f64 = 0.1;

impl Layout {
    pub fn new(c: &ModelConfig) -> Self {
        let d = c.d_model;
        let mut b = Builder { specs: Vec::new() };
        let input_proj = b.add(
            "encoder.input_proj".into(),
            c.n_mels,
            d,
            Some((c.n_mels as f64).powf(-0.5)),
        );
        let arranger = b.add(
            "encoder.arranger_embedding".into(),
            c.num_arrangers,
            d,
            Some(1.0),
        );
        let bias_std = Some((d as f64).powf(-0.5));
        let enc_bias = b.add(
            "encoder.relative_bias".into(),
            c.relative_bias_buckets,
            c.num_heads,
            bias_std,
        );
        let enc_layers = (0..c.num_encoder_layers)
            .map(|i| {
                let p = format!("encoder.layer{}", i);
                EncLayerIdx {
                    attn_norm: b.norm(format!("{}.attn_norm", p), d),
                    attn: b.attention(&format!("{}.attn", p), c),
                    ffn_norm: b.norm(format!("{}.ffn_norm", p), d),
                    ffn: b.ffn(&format!("{}.ffn", p), c),
                }
            })
            .collect();
        let enc_norm = b.norm("encoder.final_norm".into(), d);
        let token_emb = b.add(
            "decoder.token_embedding".into(),
            c.vocab_size,
            d,
            Some(TOKEN_EMBEDDING_STD),
        );
        let dec_bias = b.add(
            "decoder.relative_bias".into(),
            c.relative_bias_buckets,
            c.num_heads,
            bias_std,
        );
        let dec_layers = (0..c.num_decoder_layers)
            .map(|i| {
                let p = format!("decoder.layer{}", i);
                DecLayerIdx {
                    self_norm: b.norm(format!("{}.self_norm", p), d),
                    self_attn: b.attention(&format!("{}.self_attn", p), c),
                    cross_norm: b.norm(format!("{}.cross_norm", p), d),
                    cross_attn: b.attention(&format!("{}.cross_attn", p), c),
                    ffn_norm: b.norm(format!("{}.ffn_norm", p), d),
                    ffn: b.ffn(&format!("{}.ffn", p), c),
                }
            })
            .collect();
        let dec_norm = b.norm("decoder.final_norm".into(), d);
        Layout {
            specs: b.specs,
            input_proj,
            arranger,
            enc_bias,
            enc_layers,
            enc_norm,
            token_emb,
            dec_bias,
            dec_layers,
            dec_norm,
        }
    }
}

/// Weights of the model together with its configuration.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: Vec<Tensor>,
    pub(crate) layout: Layout,
}

impl ModelParams {
    /// Random initialization from a seed.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = layout
            .specs
            .iter()
            .map(|s| match s.init_std {
                None => Tensor::filled(s.rows, s.cols, 1.0),
                Some(std) => {
                    let normal = Normal::new(0.0, std).expect("positive std");
                    let data = (0..s.rows * s.cols)
                        .map(|_| normal.sample(&mut rng))
                        .collect();
                    Tensor::from_vec(s.rows, s.cols, data)
                }
            })
            .collect();
        Ok(ModelParams {
            config: config.clone(),
            tensors,
            layout,
        })
    }

    /// Wraps existing tensors, checking count and shapes against the config.
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(config);
        if tensors.len() != layout.specs.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                layout.specs.len(),
                tensors.len()
            )));
        }
        for (t, s) in tensors.iter().zip(&layout.specs) {
            if t.rows != s.rows || t.cols != s.cols {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {}x{}, expected {}x{}",
                    s.name, t.rows, t.cols, s.rows, s.cols
                )));
            }
        }
        Ok(ModelParams {
            config: config.clone(),
            tensors,
            layout,
        })
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.layout.specs
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.layout.specs.iter().position(|s| s.name == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Zeroes the output projections of every attention and feed-forward
    /// block, leaving only the residual path.
    pub fn zero_residual_branches(&mut self) {
        let mut idx = Vec::new();
        for l in &self.layout.enc_layers {
            idx.extend([l.attn.o, l.ffn.wo]);
        }
        for l in &self.layout.dec_layers {
            idx.extend([l.self_attn.o, l.cross_attn.o, l.ffn.wo]);
        }
        for i in idx {
            self.tensors[i].data.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    /// Zeroes the tied token embedding, which makes every logit zero.
    pub fn zero_output_head(&mut self) {
        let i = self.layout.token_emb;
        self.tensors[i].data.iter_mut().for_each(|x| *x = 0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_follow_config() {
        let c = ModelConfig::default();
        let p = ModelParams::init(&c, 1).unwrap();
        assert_eq!(p.num_scalars(), c.count_params());
        assert!(p.is_finite());
        let names: std::collections::HashSet<_> = p.specs().iter().map(|s| &s.name).collect();
        assert_eq!(names.len(), p.specs().len());
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let c = ModelConfig {
            d_model: 8,
            num_heads: 2,
            d_ff: 16,
            n_mels: 4,
            ..ModelConfig::default()
        };
        let a = ModelParams::init(&c, 9).unwrap();
        let b = ModelParams::init(&c, 9).unwrap();
        let other = ModelParams::init(&c, 10).unwrap();
        assert_eq!(a.tensors, b.tensors);
        assert_ne!(a.tensors, other.tensors);
    }
}
