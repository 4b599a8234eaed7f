//! Autoregressive decoder. Each of the `L` blocks runs masked self-attention,
//! context attention over the encoder output, and a feed-forward network,
//! with the same double-LayerNorm residual pattern as the encoder:
//!
//! ```text
//! a = LN_s(Y + SelfAttn(Y) · W^O)
//! c = LN_c(a + ContextAttn(a, H^enc))
//! h = LN_o(FFN(c) + c)
//! ```
//!
//! Context head `i` scores `(a W_i^Q)(H^enc W_i^K)ᵀ` over every valid
//! encoder row and returns `Σ_j γ_j (W^G h_j)` restricted to the head's
//! column block of `W^G`; the head outputs are concatenated.
//!
//! Two paths share these definitions: [`decode`] builds the whole
//! teacher-forced computation on a [`Tape`], and [`DecodeState`] extends a
//! prefix one token at a time with cached keys and values.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::model::config::ModelConfig;
use crate::model::encoder::{feed_forward, graph_attention_head, layer_norm};
use crate::model::params::{ParamStore, ParamVars};
use crate::model::{alpha_source, HeadWeights, Model};
use crate::normalize::Normalizer;
use crate::tape::{AlphaSource, Tape, Var};
use crate::tensor::{dot, Tensor};
use crate::vocab::{BOS, UNK};

/// Fixed sinusoidal encodings `[n × d]`.
pub fn sinusoidal(n: usize, d: usize) -> Tensor {
    let mut out = Tensor::zeros(&[n, d]);
    for p in 0..n {
        let row = out.row_mut(p);
        for (i, x) in row.iter_mut().enumerate() {
            let freq = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = p as f64 / freq;
            *x = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

fn check_length(config: &ModelConfig, n: usize) -> Result<()> {
    if n > config.max_tokens {
        return Err(Error::Capacity {
            what: "decoder positions",
            limit: config.max_tokens,
            got: n,
        });
    }
    Ok(())
}

fn clamp_token(config: &ModelConfig, id: usize) -> usize {
    if id < config.token_vocab {
        id
    } else {
        UNK
    }
}

/// Token embeddings plus sinusoidal positions.
pub fn embed_tokens(
    tape: &mut Tape,
    pv: &ParamVars,
    config: &ModelConfig,
    tokens: &[usize],
) -> Result<Var> {
    check_length(config, tokens.len())?;
    let ids: Vec<usize> = tokens.iter().map(|&t| clamp_token(config, t)).collect();
    let emb = tape.gather(pv.get("dec.token_embedding")?, &ids)?;
    let pos = tape.constant(sinusoidal(tokens.len(), config.d_model));
    tape.add(emb, pos)
}

/// One causal head over `y [t × d]`: position `u` sees positions `≤ u`.
pub fn masked_self_attention(
    tape: &mut Tape,
    y: Var,
    head: &HeadWeights,
    alpha: AlphaSource,
    scale: f64,
) -> Result<Var> {
    let t = tape.value(y).rows();
    graph_attention_head(tape, y, &Mask::causal(t), head, alpha, scale)
}

/// `Y + concat_i(head_i(Y)) · W^O`.
pub fn multi_head_self_attention(
    tape: &mut Tape,
    pv: &ParamVars,
    config: &ModelConfig,
    layer: usize,
    y: Var,
) -> Result<Var> {
    let prefix = format!("dec.{layer}.self");
    let mut heads = Vec::with_capacity(config.heads);
    for h in 0..config.heads {
        let weights =
            HeadWeights::slice(tape, pv, &prefix, ["wq", "wk", "wv"], h, config.head_dim())?;
        let alpha = alpha_source(config, pv, layer, h)?;
        heads.push(masked_self_attention(
            tape,
            y,
            &weights,
            alpha,
            config.score_factor(),
        )?);
    }
    let concat = tape.concat_cols(&heads)?;
    let projected = tape.matmul(concat, pv.get(&format!("{prefix}.wo"))?)?;
    tape.add(y, projected)
}

/// Context attention of decoder states `a [n × d]` over encoder rows
/// `memory [m × d]` where `valid[j]`. Returns the concatenated heads
/// `[n × d]` without the residual.
pub fn context_attention(
    tape: &mut Tape,
    pv: &ParamVars,
    config: &ModelConfig,
    layer: usize,
    a: Var,
    memory: Var,
    valid: &[bool],
) -> Result<Var> {
    let prefix = format!("dec.{layer}.ctx");
    let n = tape.value(a).rows();
    let mask = Mask::broadcast_row(n, valid);
    let mut heads = Vec::with_capacity(config.heads);
    for h in 0..config.heads {
        let w = HeadWeights::slice(tape, pv, &prefix, ["wq", "wk", "wg"], h, config.head_dim())?;
        let q = tape.matmul(a, w.wq)?;
        let k = tape.matmul(memory, w.wk)?;
        let values = tape.matmul(memory, w.wv)?;
        let scores = tape.matmul_nt(q, k)?;
        let scores = tape.scale(scores, config.score_factor());
        let alpha = alpha_source(config, pv, layer, h)?;
        let weights = tape.attention_weights(scores, &mask, alpha)?;
        heads.push(tape.matmul(weights, values)?);
    }
    tape.concat_cols(&heads)
}

pub fn decoder_block(
    tape: &mut Tape,
    pv: &ParamVars,
    config: &ModelConfig,
    layer: usize,
    y: Var,
    memory: Var,
    valid: &[bool],
) -> Result<Var> {
    let y_hat = multi_head_self_attention(tape, pv, config, layer, y)?;
    let a = layer_norm(tape, pv, config, &format!("dec.{layer}.ln_self"), y_hat)?;
    let ctx = context_attention(tape, pv, config, layer, a, memory, valid)?;
    let c_hat = tape.add(a, ctx)?;
    let c = layer_norm(tape, pv, config, &format!("dec.{layer}.ln_ctx"), c_hat)?;
    let transformed = feed_forward(tape, pv, &format!("dec.{layer}.ffn"), c)?;
    let sum = tape.add(transformed, c)?;
    layer_norm(tape, pv, config, &format!("dec.{layer}.ln_out"), sum)
}

/// Teacher-forced logits `[n × V]` for decoder inputs `tokens`.
pub fn decode(
    tape: &mut Tape,
    pv: &ParamVars,
    config: &ModelConfig,
    memory: Var,
    valid: &[bool],
    tokens: &[usize],
) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::contract("decoder input is empty"));
    }
    let mut y = embed_tokens(tape, pv, config, tokens)?;
    for layer in 0..config.layers {
        y = decoder_block(tape, pv, config, layer, y, memory, valid)?;
    }
    tape.matmul(y, pv.get("dec.output")?)
}

/// Encoder output projected once per layer for context attention.
#[derive(Debug)]
pub struct Memory {
    keys: Vec<Tensor>,
    values: Vec<Tensor>,
    valid: Vec<bool>,
}

impl Memory {
    pub fn new(model: &Model, h_enc: Tensor, valid: Vec<bool>) -> Result<Self> {
        if valid.len() != h_enc.rows() {
            return Err(Error::Shape {
                op: "memory",
                left: h_enc.shape().to_vec(),
                right: vec![valid.len()],
            });
        }
        let p = &model.params;
        let mut keys = Vec::with_capacity(model.config.layers);
        let mut values = Vec::with_capacity(model.config.layers);
        for l in 0..model.config.layers {
            keys.push(h_enc.matmul(p.get(&format!("dec.{l}.ctx.wk"))?)?);
            values.push(h_enc.matmul(p.get(&format!("dec.{l}.ctx.wg"))?)?);
        }
        Ok(Memory {
            keys,
            values,
            valid,
        })
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }
}

#[derive(Clone, Debug, Default)]
struct LayerCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

/// Incremental decoding state: the prefix, cached self-attention keys and
/// values for every processed position, and the shared encoder memory.
#[derive(Clone, Debug)]
pub struct DecodeState {
    memory: Arc<Memory>,
    tokens: Vec<usize>,
    cache: Vec<LayerCache>,
}

impl DecodeState {
    pub fn new(model: &Model, memory: Arc<Memory>) -> Self {
        DecodeState {
            memory,
            tokens: vec![BOS],
            cache: vec![LayerCache::default(); model.config.layers],
        }
    }

    /// The prefix, BOS first.
    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn push(&mut self, token: usize) {
        self.tokens.push(token);
    }

    fn processed(&self) -> usize {
        self.cache
            .first()
            .map_or(self.tokens.len(), |c| c.keys.len())
    }

    /// Logits for the token after the current prefix. Positions not yet in
    /// the cache are run through the decoder and appended to it.
    pub fn step(&mut self, model: &Model) -> Result<Vec<f64>> {
        check_length(&model.config, self.tokens.len())?;
        let mut logits = None;
        for pos in self.processed()..self.tokens.len() {
            logits = Some(self.run_position(model, pos)?);
        }
        match logits {
            Some(l) => Ok(l),
            // Everything was cached already; rerun the last position without
            // extending the cache.
            None => {
                let mut scratch = self.clone();
                for c in &mut scratch.cache {
                    c.keys.pop();
                    c.values.pop();
                }
                scratch.run_position(model, self.tokens.len() - 1)
            }
        }
    }

    fn run_position(&mut self, model: &Model, pos: usize) -> Result<Vec<f64>> {
        let config = &model.config;
        let p: &ParamStore = &model.params;
        let d = config.d_model;
        let dh = config.head_dim();
        let scale = config.score_factor();
        let eps = config.layer_norm_eps;
        let token = clamp_token(config, self.tokens[pos]);
        let mut x = Tensor::new(
            vec![1, d],
            p.get("dec.token_embedding")?.row(token).to_vec(),
        )?;
        x = x.add(&Tensor::new(
            vec![1, d],
            sinusoidal(pos + 1, d).row(pos).to_vec(),
        )?)?;

        for l in 0..config.layers {
            let prefix = format!("dec.{l}.self");
            let q = x.matmul(p.get(&format!("{prefix}.wq"))?)?;
            let k = x.matmul(p.get(&format!("{prefix}.wk"))?)?;
            let v = x.matmul(p.get(&format!("{prefix}.wv"))?)?;
            let cache = &mut self.cache[l];
            cache.keys.push(k.into_data());
            cache.values.push(v.into_data());
            let mut concat = vec![0.0; d];
            for h in 0..config.heads {
                let cols = h * dh..(h + 1) * dh;
                let normalizer = model.normalizer(l, h)?;
                let keys: Vec<&[f64]> = cache.keys.iter().map(|k| &k[cols.clone()]).collect();
                let values: Vec<&[f64]> = cache.values.iter().map(|v| &v[cols.clone()]).collect();
                attend(
                    &q.data()[cols.clone()],
                    &keys,
                    &values,
                    scale,
                    normalizer,
                    &mut concat[cols],
                )?;
            }
            let attn = Tensor::new(vec![1, d], concat)?.matmul(p.get(&format!("{prefix}.wo"))?)?;
            let y_hat = x.add(&attn)?;
            let a = norm(p, &format!("dec.{l}.ln_self"), &y_hat, eps)?;

            let q = a.matmul(p.get(&format!("dec.{l}.ctx.wq"))?)?;
            let mem_keys = &self.memory.keys[l];
            let mem_values = &self.memory.values[l];
            let rows: Vec<usize> = (0..self.memory.len())
                .filter(|&j| self.memory.valid[j])
                .collect();
            let mut concat = vec![0.0; d];
            for h in 0..config.heads {
                let cols = h * dh..(h + 1) * dh;
                let normalizer = model.normalizer(l, h)?;
                let keys: Vec<&[f64]> = rows
                    .iter()
                    .map(|&j| &mem_keys.row(j)[cols.clone()])
                    .collect();
                let values: Vec<&[f64]> = rows
                    .iter()
                    .map(|&j| &mem_values.row(j)[cols.clone()])
                    .collect();
                attend(
                    &q.data()[cols.clone()],
                    &keys,
                    &values,
                    scale,
                    normalizer,
                    &mut concat[cols],
                )?;
            }
            let c_hat = a.add(&Tensor::new(vec![1, d], concat)?)?;
            let c = norm(p, &format!("dec.{l}.ln_ctx"), &c_hat, eps)?;

            let ffn = format!("dec.{l}.ffn");
            let hidden = c
                .matmul(p.get(&format!("{ffn}.w1"))?)?
                .add_row(p.get(&format!("{ffn}.b1"))?)?
                .relu();
            let out = hidden
                .matmul(p.get(&format!("{ffn}.w2"))?)?
                .add_row(p.get(&format!("{ffn}.b2"))?)?;
            x = norm(p, &format!("dec.{l}.ln_out"), &out.add(&c)?, eps)?;
        }
        Ok(x.matmul(p.get("dec.output")?)?.into_data())
    }
}

fn norm(p: &ParamStore, prefix: &str, x: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(x.layer_norm(
        p.get(&format!("{prefix}.gain"))?,
        p.get(&format!("{prefix}.bias"))?,
        eps,
    )?
    .output)
}

/// Writes `Σ_j w_j values[j]` into `out`, with `w` the normalized scaled
/// scores of `q` against `keys`. No keys leaves `out` at zero.
fn attend(
    q: &[f64],
    keys: &[&[f64]],
    values: &[&[f64]],
    scale: f64,
    normalizer: Normalizer,
    out: &mut [f64],
) -> Result<()> {
    if keys.is_empty() {
        return Ok(());
    }
    let scores: Vec<f64> = keys.iter().map(|k| dot(q, k) * scale).collect();
    let weights = normalizer.apply(&scores)?;
    for (w, v) in weights.probs.iter().zip(values) {
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += w * x;
        }
    }
    Ok(())
}
