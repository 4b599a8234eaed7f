use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::config::{AlphaMode, ModelConfig};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Named parameter tensors in a fixed insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::contract(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Puts every parameter on `tape` as a differentiable leaf.
    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        ParamVars {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
                .collect(),
        }
    }

    /// Puts every parameter on `tape` as a constant (inference).
    pub fn register_frozen(&self, tape: &mut Tape) -> ParamVars {
        ParamVars {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
                .collect(),
        }
    }
}

/// Tape handles for a registered [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: IndexMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

impl FromIterator<(String, Var)> for ParamVars {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        ParamVars {
            vars: iter.into_iter().collect(),
        }
    }
}

/// Name of the α scalar shared by encoder and decoder heads at (layer, head).
pub fn alpha_name(layer: usize, head: usize) -> String {
    format!("alpha.{layer}.{head}")
}

/// Random initialization: projections N(0, 1/fan_in), embeddings N(0, 1),
/// LayerNorm gain 1 and bias 0, FFN biases 0, `att_scalar` 0.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ParamStore> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.d_model;
    let ff = config.d_ff;
    let mut store = ParamStore::new();
    let mut proj = |store: &mut ParamStore, name: String, rows: usize, cols: usize| {
        let std = 1.0 / (rows as f64).sqrt();
        store.insert(name, Tensor::randn(&[rows, cols], std, &mut rng));
    };
    let layer_norm = |store: &mut ParamStore, prefix: String| {
        store.insert(format!("{prefix}.gain"), Tensor::filled(&[d], 1.0));
        store.insert(format!("{prefix}.bias"), Tensor::zeros(&[d]));
    };

    if config.alpha == AlphaMode::Learned {
        for l in 0..config.layers {
            for h in 0..config.heads {
                store.insert(alpha_name(l, h), Tensor::zeros(&[1]));
            }
        }
    }

    let mut emb_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    store.insert(
        "enc.label_embedding",
        Tensor::randn(&[config.label_vocab, d], 1.0, &mut emb_rng),
    );
    store.insert(
        "enc.positional",
        Tensor::randn(&[config.max_vertices, d], 1.0, &mut emb_rng),
    );
    store.insert(
        "dec.token_embedding",
        Tensor::randn(&[config.token_vocab, d], 1.0, &mut emb_rng),
    );

    for l in 0..config.layers {
        for w in ["wq", "wk", "wv", "wo"] {
            proj(&mut store, format!("enc.{l}.attn.{w}"), d, d);
        }
        layer_norm(&mut store, format!("enc.{l}.ln_attn"));
        ffn(&mut store, &mut proj, format!("enc.{l}.ffn"), d, ff);
        layer_norm(&mut store, format!("enc.{l}.ln_out"));
    }
    for l in 0..config.layers {
        for w in ["wq", "wk", "wv", "wo"] {
            proj(&mut store, format!("dec.{l}.self.{w}"), d, d);
        }
        layer_norm(&mut store, format!("dec.{l}.ln_self"));
        for w in ["wq", "wk", "wg"] {
            proj(&mut store, format!("dec.{l}.ctx.{w}"), d, d);
        }
        layer_norm(&mut store, format!("dec.{l}.ln_ctx"));
        ffn(&mut store, &mut proj, format!("dec.{l}.ffn"), d, ff);
        layer_norm(&mut store, format!("dec.{l}.ln_out"));
    }
    proj(&mut store, "dec.output".to_string(), d, config.token_vocab);
    Ok(store)
}

fn ffn(
    store: &mut ParamStore,
    proj: &mut impl FnMut(&mut ParamStore, String, usize, usize),
    prefix: String,
    d: usize,
    ff: usize,
) {
    proj(store, format!("{prefix}.w1"), d, ff);
    store.insert(format!("{prefix}.b1"), Tensor::zeros(&[ff]));
    proj(store, format!("{prefix}.w2"), ff, d);
    store.insert(format!("{prefix}.b2"), Tensor::zeros(&[d]));
}
