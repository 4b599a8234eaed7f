//! Sparse graph encoder: vertex embeddings plus positional rank, then `L`
//! blocks of neighborhood-restricted multi-head attention and a two-layer
//! feed-forward network.
//!
//! One block maps `V` to
//!
//! ```text
//! v̂ = V + concat_i(head_i(V)) · W^O
//! ṽ = FFN(LN_a(v̂))
//! h = LN_b(ṽ + LN_a(v̂))
//! ```
//!
//! where head `i` normalizes its scores for vertex `r` only over the
//! neighborhood mask row `r`.

use crate::error::{Error, Result};
use crate::graph::{NeighborhoodRule, SceneGraph};
use crate::mask::Mask;
use crate::model::config::ModelConfig;
use crate::model::params::ParamVars;
use crate::model::{alpha_source, HeadWeights};
use crate::tape::{AlphaSource, Tape, Var};
use crate::vocab::{Vocabulary, PAD};

/// Encoder input: label ids in canonical vertex order, the neighborhood
/// mask, and which vertices are real (false for batch padding).
#[derive(Clone, Debug, PartialEq)]
pub struct GraphInput {
    pub labels: Vec<usize>,
    pub mask: Mask,
    pub valid: Vec<bool>,
}

impl GraphInput {
    pub fn from_graph(graph: &SceneGraph, labels: &Vocabulary, rule: NeighborhoodRule) -> Self {
        GraphInput {
            labels: graph.labels().map(|l| labels.id(l)).collect(),
            mask: graph.neighborhood_mask(rule),
            valid: vec![true; graph.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Pads to `m` vertices. Padding vertices carry the PAD label, have an
    /// all-false mask row and column, and are marked invalid.
    pub fn padded(&self, m: usize) -> GraphInput {
        let n = self.len();
        assert!(m >= n, "cannot pad {n} vertices down to {m}");
        let mut labels = self.labels.clone();
        labels.resize(m, PAD);
        let mut valid = self.valid.clone();
        valid.resize(m, false);
        GraphInput {
            labels,
            mask: Mask::from_fn(m, m, |i, j| i < n && j < n && self.mask.get(i, j)),
            valid,
        }
    }

    /// Drops trailing padding vertices.
    pub fn trimmed(&self) -> GraphInput {
        let n = self.valid.iter().rposition(|&v| v).map_or(0, |i| i + 1);
        GraphInput {
            labels: self.labels[..n].to_vec(),
            mask: Mask::from_fn(n, n, |i, j| self.mask.get(i, j)),
            valid: self.valid[..n].to_vec(),
        }
    }
}

/// `embedding[label] + positional[rank]`, rank being the vertex index.
pub fn embed_vertices(
    tape: &mut Tape,
    pv: &ParamVars,
    config: &ModelConfig,
    input: &GraphInput,
) -> Result<Var> {
    let m = input.len();
    if m > config.max_vertices {
        return Err(Error::Capacity {
            what: "graph vertices",
            limit: config.max_vertices,
            got: m,
        });
    }
    let labels: Vec<usize> = input
        .labels
        .iter()
        .map(|&l| {
            if l < config.label_vocab {
                l
            } else {
                crate::vocab::UNK
            }
        })
        .collect();
    let emb = tape.gather(pv.get("enc.label_embedding")?, &labels)?;
    let ranks: Vec<usize> = (0..m).collect();
    let pos = tape.gather(pv.get("enc.positional")?, &ranks)?;
    tape.add(emb, pos)
}

/// One head: scores `(V W^Q)(V W^K)ᵀ · scale`, normalized per row over the
/// mask, applied to `V W^V`. Output is `[m × d_h]`.
pub fn graph_attention_head(
    tape: &mut Tape,
    v: Var,
    mask: &Mask,
    head: &HeadWeights,
    alpha: AlphaSource,
    scale: f64,
) -> Result<Var> {
    let q = tape.matmul(v, head.wq)?;
    let k = tape.matmul(v, head.wk)?;
    let values = tape.matmul(v, head.wv)?;
    let scores = tape.matmul_nt(q, k)?;
    let scores = tape.scale(scores, scale);
    let weights = tape.attention_weights(scores, mask, alpha)?;
    tape.matmul(weights, values)
}

/// Concatenated heads projected by `W^O` and added back to the input (v̂).
pub fn multi_head_graph_attention(
    tape: &mut Tape,
    pv: &ParamVars,
    config: &ModelConfig,
    layer: usize,
    v: Var,
    mask: &Mask,
) -> Result<Var> {
    let prefix = format!("enc.{layer}.attn");
    let mut heads = Vec::with_capacity(config.heads);
    for h in 0..config.heads {
        let weights =
            HeadWeights::slice(tape, pv, &prefix, ["wq", "wk", "wv"], h, config.head_dim())?;
        let alpha = alpha_source(config, pv, layer, h)?;
        heads.push(graph_attention_head(
            tape,
            v,
            mask,
            &weights,
            alpha,
            config.score_factor(),
        )?);
    }
    let concat = tape.concat_cols(&heads)?;
    let projected = tape.matmul(concat, pv.get(&format!("{prefix}.wo"))?)?;
    tape.add(v, projected)
}

/// Two-layer feed-forward network with a ReLU between the layers.
pub(crate) fn feed_forward(tape: &mut Tape, pv: &ParamVars, prefix: &str, x: Var) -> Result<Var> {
    let hidden = tape.linear(
        x,
        pv.get(&format!("{prefix}.w1"))?,
        pv.get(&format!("{prefix}.b1"))?,
    )?;
    let hidden = tape.relu(hidden);
    tape.linear(
        hidden,
        pv.get(&format!("{prefix}.w2"))?,
        pv.get(&format!("{prefix}.b2"))?,
    )
}

pub(crate) fn layer_norm(
    tape: &mut Tape,
    pv: &ParamVars,
    config: &ModelConfig,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    tape.layer_norm(
        x,
        pv.get(&format!("{prefix}.gain"))?,
        pv.get(&format!("{prefix}.bias"))?,
        config.layer_norm_eps,
    )
}

/// `h = LN_b(FFN(LN_a(v̂)) + LN_a(v̂))`.
pub fn encoder_block(
    tape: &mut Tape,
    pv: &ParamVars,
    config: &ModelConfig,
    layer: usize,
    v_hat: Var,
) -> Result<Var> {
    let normed = layer_norm(tape, pv, config, &format!("enc.{layer}.ln_attn"), v_hat)?;
    let transformed = feed_forward(tape, pv, &format!("enc.{layer}.ffn"), normed)?;
    let sum = tape.add(transformed, normed)?;
    layer_norm(tape, pv, config, &format!("enc.{layer}.ln_out"), sum)
}

/// Runs the `L` stacked blocks on already embedded vertices.
pub fn encode_embedded(
    tape: &mut Tape,
    pv: &ParamVars,
    config: &ModelConfig,
    v0: Var,
    mask: &Mask,
) -> Result<Var> {
    let mut v = v0;
    for layer in 0..config.layers {
        let v_hat = multi_head_graph_attention(tape, pv, config, layer, v, mask)?;
        v = encoder_block(tape, pv, config, layer, v_hat)?;
    }
    Ok(v)
}

pub fn encode(
    tape: &mut Tape,
    pv: &ParamVars,
    config: &ModelConfig,
    input: &GraphInput,
) -> Result<Var> {
    let v0 = embed_vertices(tape, pv, config, input)?;
    encode_embedded(tape, pv, config, v0, &input.mask)
}
