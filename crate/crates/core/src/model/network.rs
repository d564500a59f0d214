//! Forward pass on the autodiff tape.

use std::rc::Rc;

use super::buckets::BucketMatrix;
use super::graph::{Graph, Var};
use super::params::{AttnIdx, FfnIdx, ModelParams};
use super::tensor::Tensor;
use super::train::Example;
use super::FeedForward;
use crate::error::{Error, Result};
use crate::features::MelSpectrogram;
use crate::tokenizer::PAD_ID;

pub(crate) const NORM_EPS: f64 = 1e-6;

pub(crate) fn check_arranger(params: &ModelParams, arranger: usize) -> Result<()> {
    if arranger >= params.config.num_arrangers {
        return Err(Error::Parameter(format!(
            "arranger id {} out of range [0, {})",
            arranger, params.config.num_arrangers
        )));
    }
    Ok(())
}

fn spectrogram_tensor(params: &ModelParams, mel: &MelSpectrogram) -> Result<Tensor> {
    if mel.n_mels != params.config.n_mels {
        return Err(Error::Parameter(format!(
            "spectrogram has {} mel bands, model expects {}",
            mel.n_mels, params.config.n_mels
        )));
    }
    Ok(Tensor::from_vec(
        mel.num_frames,
        mel.n_mels,
        mel.data.clone(),
    ))
}

fn check_ids(params: &ModelParams, ids: &[u32]) -> Result<()> {
    if ids.len() > params.config.max_decode_len {
        return Err(Error::Length {
            len: ids.len(),
            limit: params.config.max_decode_len,
        });
    }
    if let Some(&bad) = ids
        .iter()
        .find(|&&id| id as usize >= params.config.vocab_size)
    {
        return Err(Error::Validation(format!(
            "token id {} outside vocabulary",
            bad
        )));
    }
    Ok(())
}

struct Attention<'a> {
    idx: AttnIdx,
    bias: Option<(Var, &'a BucketMatrix)>,
    causal: bool,
}

fn attention(g: &mut Graph, params: &ModelParams, xq: Var, xkv: Var, a: Attention) -> Var {
    let heads = params.config.num_heads;
    let dk = params.config.head_dim();
    let (wq, wk, wv, wo) = (
        g.param(a.idx.q),
        g.param(a.idx.k),
        g.param(a.idx.v),
        g.param(a.idx.o),
    );
    let q = g.matmul(xq, wq);
    let k = g.matmul(xkv, wk);
    let v = g.matmul(xkv, wv);
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dk, dk);
        let kh = g.slice_cols(k, h * dk, dk);
        let vh = g.slice_cols(v, h * dk, dk);
        let mut s = g.matmul_t(qh, kh);
        if let Some((table, buckets)) = a.bias {
            s = g.rel_bias(s, table, Rc::clone(&buckets.0), h);
        }
        let p = g.softmax(s, a.causal);
        outs.push(g.matmul(p, vh));
    }
    let cat = g.concat_cols(&outs);
    g.matmul(cat, wo)
}

fn feed_forward(g: &mut Graph, params: &ModelParams, x: Var, idx: FfnIdx) -> Var {
    let wi0 = g.param(idx.wi0);
    let wo = g.param(idx.wo);
    let hidden = match (params.config.feed_forward, idx.wi1) {
        (FeedForward::GatedGelu, Some(wi1)) => {
            let wi1 = g.param(wi1);
            let a = g.matmul(x, wi0);
            let a = g.gelu(a);
            let b = g.matmul(x, wi1);
            g.mul(a, b)
        }
        _ => {
            let a = g.matmul(x, wi0);
            g.relu(a)
        }
    };
    g.matmul(hidden, wo)
}

fn residual_norm(g: &mut Graph, x: Var, norm: usize) -> Var {
    let w = g.param(norm);
    g.rms_norm(x, w, NORM_EPS)
}

/// Records the encoder on `g` and returns the final states.
pub(crate) fn encoder_graph(
    g: &mut Graph,
    params: &ModelParams,
    mel: &MelSpectrogram,
    arranger: usize,
) -> Result<Var> {
    check_arranger(params, arranger)?;
    let frames = spectrogram_tensor(params, mel)?;
    let c = &params.config;
    let l = &params.layout;
    let len = 1 + frames.rows;
    let buckets = BucketMatrix::new(
        len,
        len,
        true,
        c.relative_bias_buckets,
        c.relative_bias_max_distance,
    );

    let table = g.param(l.arranger);
    let arr = g.gather(table, Rc::new(vec![arranger]));
    let mut x = if frames.rows == 0 {
        arr
    } else {
        let input = g.input(frames);
        let proj = g.param(l.input_proj);
        let projected = g.matmul(input, proj);
        g.concat_rows(arr, projected)
    };
    let bias = g.param(l.enc_bias);
    for layer in &l.enc_layers {
        let h = residual_norm(g, x, layer.attn_norm);
        let a = attention(
            g,
            params,
            h,
            h,
            Attention {
                idx: layer.attn,
                bias: Some((bias, &buckets)),
                causal: false,
            },
        );
        x = g.add(x, a);
        let h = residual_norm(g, x, layer.ffn_norm);
        let f = feed_forward(g, params, h, layer.ffn);
        x = g.add(x, f);
    }
    Ok(residual_norm(g, x, l.enc_norm))
}

/// Records the decoder over `inputs` and returns logits for every position.
pub(crate) fn decoder_graph(g: &mut Graph, params: &ModelParams, enc: Var, inputs: &[u32]) -> Var {
    let c = &params.config;
    let l = &params.layout;
    let n = inputs.len();
    let buckets = BucketMatrix::new(
        n,
        n,
        false,
        c.relative_bias_buckets,
        c.relative_bias_max_distance,
    );
    let emb = g.param(l.token_emb);
    let ids = Rc::new(inputs.iter().map(|&i| i as usize).collect());
    let mut x = g.gather(emb, ids);
    let bias = g.param(l.dec_bias);
    for layer in &l.dec_layers {
        let h = residual_norm(g, x, layer.self_norm);
        let a = attention(
            g,
            params,
            h,
            h,
            Attention {
                idx: layer.self_attn,
                bias: Some((bias, &buckets)),
                causal: true,
            },
        );
        x = g.add(x, a);
        let h = residual_norm(g, x, layer.cross_norm);
        let a = attention(
            g,
            params,
            h,
            enc,
            Attention {
                idx: layer.cross_attn,
                bias: None,
                causal: false,
            },
        );
        x = g.add(x, a);
        let h = residual_norm(g, x, layer.ffn_norm);
        let f = feed_forward(g, params, h, layer.ffn);
        x = g.add(x, f);
    }
    let x = residual_norm(g, x, l.dec_norm);
    let x = g.scale(x, (c.d_model as f64).powf(-0.5));
    g.matmul_t(x, emb)
}

/// Decoder inputs for teacher forcing: the start symbol (PAD) followed by
/// the target shifted right by one.
pub(crate) fn shift_right(target: &[u32]) -> Vec<u32> {
    let mut inputs = Vec::with_capacity(target.len());
    inputs.push(PAD_ID);
    inputs.extend_from_slice(&target[..target.len().saturating_sub(1)]);
    inputs
}

/// Encoder states, one row for the arranger position plus one per frame.
pub fn encode(mel: &MelSpectrogram, arranger: usize, params: &ModelParams) -> Result<Tensor> {
    let mut g = Graph::new(&params.tensors);
    let out = encoder_graph(&mut g, params, mel, arranger)?;
    Ok(g.value(out).clone())
}

/// Logits at every decoder position for input `[PAD] ++ prefix`; row `i`
/// predicts the token following `prefix[..i]`.
pub fn decoder_logits(
    encoder_state: &Tensor,
    prefix: &[u32],
    params: &ModelParams,
) -> Result<Tensor> {
    if prefix.len() >= params.config.max_decode_len {
        return Err(Error::Length {
            len: prefix.len(),
            limit: params.config.max_decode_len - 1,
        });
    }
    check_ids(params, prefix)?;
    if encoder_state.cols != params.config.d_model {
        return Err(Error::Parameter(
            "encoder state width differs from d_model".into(),
        ));
    }
    let mut inputs = vec![PAD_ID];
    inputs.extend_from_slice(prefix);
    let mut g = Graph::new(&params.tensors);
    let enc = g.input(encoder_state.clone());
    let logits = decoder_graph(&mut g, params, enc, &inputs);
    Ok(g.value(logits).clone())
}

/// Logits for the token following `prefix`.
pub fn decode_step(
    encoder_state: &Tensor,
    prefix: &[u32],
    params: &ModelParams,
) -> Result<Vec<f64>> {
    let logits = decoder_logits(encoder_state, prefix, params)?;
    Ok(logits.row(logits.rows - 1).to_vec())
}

fn record_example(
    g: &mut Graph,
    params: &ModelParams,
    ex: &Example,
    normalizer: f64,
) -> Result<Var> {
    let target = &ex.target.ids;
    check_ids(params, target)?;
    if target.is_empty() {
        return Err(Error::Validation("empty target sequence".into()));
    }
    let enc = encoder_graph(g, params, &ex.spectrogram, ex.arranger)?;
    let logits = decoder_graph(g, params, enc, &shift_right(target));
    let targets = target
        .iter()
        .map(|&t| if t == PAD_ID { None } else { Some(t as usize) })
        .collect();
    Ok(g.cross_entropy(logits, Rc::new(targets), normalizer))
}

fn scored_tokens(batch: &[&Example]) -> usize {
    batch
        .iter()
        .map(|ex| ex.target.ids.iter().filter(|&&t| t != PAD_ID).count())
        .sum()
}

/// Mean teacher-forced cross-entropy per non-PAD target token.
pub fn teacher_forced_loss(params: &ModelParams, batch: &[&Example]) -> Result<f64> {
    let normalizer = scored_tokens(batch).max(1) as f64;
    let mut total = 0.0;
    for ex in batch {
        let mut g = Graph::new(&params.tensors);
        let loss = record_example(&mut g, params, ex, normalizer)?;
        total += g.value(loss).data[0];
    }
    Ok(total)
}

/// Batch loss and its gradient with respect to every parameter tensor.
/// Per-example gradients are accumulated in batch order.
pub fn loss_with_grads(params: &ModelParams, batch: &[&Example]) -> Result<(f64, Vec<Tensor>)> {
    let normalizer = scored_tokens(batch).max(1) as f64;
    let mut total = 0.0;
    let mut grads: Vec<Tensor> = params
        .tensors
        .iter()
        .map(|t| Tensor::zeros(t.rows, t.cols))
        .collect();
    for ex in batch {
        let mut g = Graph::new(&params.tensors);
        let loss = record_example(&mut g, params, ex, normalizer)?;
        total += g.value(loss).data[0];
        for (acc, grad) in grads.iter_mut().zip(g.backward(loss)) {
            if let Some(grad) = grad {
                acc.add_assign(&grad);
            }
        }
    }
    Ok((total, grads))
}
