//! Greedy decoding with cached keys and values.
//!
//! This path recomputes nothing across steps: self-attention keys/values are
//! appended per step and cross-attention keys/values are projected once. It
//! computes the same function as the tape forward pass.

use super::buckets::relative_position_bucket;
use super::graph::{gelu, softmax_in_place};
use super::network::{check_arranger, encode, NORM_EPS};
use super::params::{FfnIdx, ModelParams};
use super::tensor::{dot, Tensor};
use super::FeedForward;
use crate::error::Result;
use crate::features::MelSpectrogram;
use crate::tokenizer::{TokenSeq, EOS_ID, PAD_ID, SEGMENT_HALFBEATS};

/// Output of [`greedy_generate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generated {
    /// Generated ids, ending in EOS when the model emitted one. Never contains PAD.
    pub tokens: TokenSeq,
    /// True when generation stopped at `max_decode_len` without EOS.
    pub truncated: bool,
}

fn rms_norm(x: &[f64], w: &Tensor) -> Vec<f64> {
    let inv = 1.0 / (dot(x, x) / x.len() as f64 + NORM_EPS).sqrt();
    x.iter().zip(&w.data).map(|(a, b)| a * inv * b).collect()
}

fn vec_mat(x: &[f64], w: &Tensor) -> Vec<f64> {
    Tensor::from_vec(1, x.len(), x.to_vec()).matmul(w).data
}

fn add_in_place(x: &mut [f64], y: &[f64]) {
    x.iter_mut().zip(y).for_each(|(a, b)| *a += b);
}

fn ffn(params: &ModelParams, h: &[f64], idx: FfnIdx) -> Vec<f64> {
    let t = &params.tensors;
    let hidden: Vec<f64> = match (params.config.feed_forward, idx.wi1) {
        (FeedForward::GatedGelu, Some(wi1)) => vec_mat(h, &t[idx.wi0])
            .into_iter()
            .zip(vec_mat(h, &t[wi1]))
            .map(|(a, b)| gelu(a) * b)
            .collect(),
        _ => vec_mat(h, &t[idx.wi0])
            .into_iter()
            .map(|a| a.max(0.0))
            .collect(),
    };
    vec_mat(&hidden, &t[idx.wo])
}

/// Attention of one query row against cached keys/values.
fn attend(
    params: &ModelParams,
    q: &[f64],
    keys: &Tensor,
    values: &Tensor,
    bias: impl Fn(usize, usize) -> f64,
) -> Vec<f64> {
    let dk = params.config.head_dim();
    let mut out = vec![0.0; params.config.d_model];
    let mut scores = vec![0.0; keys.rows];
    for h in 0..params.config.num_heads {
        let cols = h * dk..(h + 1) * dk;
        for (j, s) in scores.iter_mut().enumerate() {
            *s = dot(&q[cols.clone()], &keys.row(j)[cols.clone()]) + bias(h, j);
        }
        softmax_in_place(&mut scores);
        for (j, &p) in scores.iter().enumerate() {
            for (o, v) in out[cols.clone()]
                .iter_mut()
                .zip(&values.row(j)[cols.clone()])
            {
                *o += p * v;
            }
        }
    }
    out
}

struct LayerCache {
    self_k: Tensor,
    self_v: Tensor,
    cross_k: Tensor,
    cross_v: Tensor,
}

fn push_row(t: &mut Tensor, row: &[f64]) {
    t.data.extend_from_slice(row);
    t.rows += 1;
}

struct CachedDecoder<'a> {
    params: &'a ModelParams,
    layers: Vec<LayerCache>,
    position: usize,
}

impl<'a> CachedDecoder<'a> {
    fn new(params: &'a ModelParams, enc: &Tensor) -> Self {
        let d = params.config.d_model;
        let layers = params
            .layout
            .dec_layers
            .iter()
            .map(|l| LayerCache {
                self_k: Tensor::zeros(0, d),
                self_v: Tensor::zeros(0, d),
                cross_k: enc.matmul(&params.tensors[l.cross_attn.k]),
                cross_v: enc.matmul(&params.tensors[l.cross_attn.v]),
            })
            .collect();
        CachedDecoder {
            params,
            layers,
            position: 0,
        }
    }

    /// Feeds one input token and returns logits for the next one.
    fn step(&mut self, token: u32) -> Vec<f64> {
        let p = self.params;
        let c = &p.config;
        let t = &p.tensors;
        let l = &p.layout;
        let pos = self.position;
        let mut x = t[l.token_emb].row(token as usize).to_vec();
        let table = &t[l.dec_bias];
        let bucket_of: Vec<usize> = (0..=pos)
            .map(|j| {
                relative_position_bucket(
                    j as i64 - pos as i64,
                    false,
                    c.relative_bias_buckets,
                    c.relative_bias_max_distance,
                )
            })
            .collect();
        for (layer, cache) in l.dec_layers.iter().zip(self.layers.iter_mut()) {
            let h = rms_norm(&x, &t[layer.self_norm]);
            let i = layer.self_attn;
            let (q, k, v) = (
                vec_mat(&h, &t[i.q]),
                vec_mat(&h, &t[i.k]),
                vec_mat(&h, &t[i.v]),
            );
            push_row(&mut cache.self_k, &k);
            push_row(&mut cache.self_v, &v);
            let a = attend(p, &q, &cache.self_k, &cache.self_v, |head, j| {
                table[(bucket_of[j], head)]
            });
            add_in_place(&mut x, &vec_mat(&a, &t[layer.self_attn.o]));

            let h = rms_norm(&x, &t[layer.cross_norm]);
            let q = vec_mat(&h, &t[layer.cross_attn.q]);
            let a = attend(p, &q, &cache.cross_k, &cache.cross_v, |_, _| 0.0);
            add_in_place(&mut x, &vec_mat(&a, &t[layer.cross_attn.o]));

            let h = rms_norm(&x, &t[layer.ffn_norm]);
            add_in_place(&mut x, &ffn(p, &h, layer.ffn));
        }
        self.position += 1;
        let scale = (c.d_model as f64).powf(-0.5);
        let x: Vec<f64> = rms_norm(&x, &t[l.dec_norm])
            .into_iter()
            .map(|v| v * scale)
            .collect();
        let emb = &t[l.token_emb];
        (0..emb.rows).map(|r| dot(&x, emb.row(r))).collect()
    }
}

/// Index of the largest value; ties go to the lowest index.
pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Argmax decoding from the start symbol until EOS, PAD or `max_decode_len`.
pub fn greedy_generate(
    mel: &MelSpectrogram,
    arranger: usize,
    params: &ModelParams,
) -> Result<Generated> {
    check_arranger(params, arranger)?;
    let enc = encode(mel, arranger, params)?;
    let mut decoder = CachedDecoder::new(params, &enc);
    let mut ids = Vec::new();
    let mut current = PAD_ID;
    let mut truncated = true;
    while ids.len() < params.config.max_decode_len {
        let next = argmax(&decoder.step(current)) as u32;
        if next == PAD_ID {
            truncated = false;
            break;
        }
        ids.push(next);
        if next == EOS_ID {
            truncated = false;
            break;
        }
        current = next;
    }
    Ok(Generated {
        tokens: TokenSeq {
            ids,
            segment_halfbeats: SEGMENT_HALFBEATS,
        },
        truncated,
    })
}

/// Logits at every step of teacher-forced decoding through the cached path.
#[cfg(test)]
pub(crate) fn cached_logits(params: &ModelParams, enc: &Tensor, prefix: &[u32]) -> Vec<Vec<f64>> {
    let mut decoder = CachedDecoder::new(params, enc);
    std::iter::once(PAD_ID)
        .chain(prefix.iter().copied())
        .map(|id| decoder.step(id))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FrontendConfig;
    use crate::model::{decoder_logits, ModelConfig};

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            num_heads: 2,
            d_ff: 16,
            num_encoder_layers: 1,
            num_decoder_layers: 2,
            n_mels: 6,
            num_arrangers: 3,
            relative_bias_buckets: 8,
            relative_bias_max_distance: 20,
            max_decode_len: 40,
            ..ModelConfig::default()
        }
    }

    fn mel(frames: usize, n_mels: usize) -> MelSpectrogram {
        let rows: Vec<Vec<f64>> = (0..frames)
            .map(|i| {
                (0..n_mels)
                    .map(|j| ((i * 7 + j * 3) as f64).sin())
                    .collect()
            })
            .collect();
        MelSpectrogram::from_rows(&rows, FrontendConfig::default()).unwrap()
    }

    #[test]
    fn cached_path_matches_tape() {
        let c = tiny();
        let p = ModelParams::init(&c, 3).unwrap();
        let enc = encode(&mel(5, 6), 1, &p).unwrap();
        let prefix: Vec<u32> = (0..30).map(|i| (i * 37 % 232) as u32).collect();
        let full = decoder_logits(&enc, &prefix, &p).unwrap();
        let cached = cached_logits(&p, &enc, &prefix);
        for (r, row) in cached.iter().enumerate() {
            for (a, b) in row.iter().zip(full.row(r)) {
                assert!((a - b).abs() < 1e-10, "row {}: {} vs {}", r, a, b);
            }
        }
    }

    #[test]
    fn zero_head_picks_lowest_id() {
        let mut p = ModelParams::init(&tiny(), 4).unwrap();
        p.zero_output_head();
        // All logits are zero, so PAD (id 0) wins and stops generation at once.
        let out = greedy_generate(&mel(3, 6), 0, &p).unwrap();
        assert!(out.tokens.ids.is_empty());
        assert!(!out.truncated);
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
    }

    #[test]
    fn generation_is_deterministic_and_pad_free() {
        let p = ModelParams::init(&tiny(), 5).unwrap();
        let a = greedy_generate(&mel(4, 6), 2, &p).unwrap();
        let b = greedy_generate(&mel(4, 6), 2, &p).unwrap();
        assert_eq!(a, b);
        assert!(!a.tokens.ids.contains(&PAD_ID));
        assert!(a.tokens.ids.len() <= 40);
        assert!(greedy_generate(&mel(4, 6), 3, &p).is_err());
    }
}
