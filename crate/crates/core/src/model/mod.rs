//! The graph-to-sequence transformer: configuration, parameters, encoder and
//! decoder forward passes.

pub mod config;
pub mod decoder;
pub mod encoder;
pub mod params;

use std::sync::Arc;

use crate::error::Result;
use crate::normalize::{AlphaSpec, Normalizer};
use crate::tape::{AlphaSource, Tape, Var};
use crate::tensor::Tensor;
use crate::vocab::{BOS, PAD};

pub use config::{AlphaMode, ModelConfig, ScoreScale};
pub use decoder::{DecodeState, Memory};
pub use encoder::GraphInput;
pub use params::{alpha_name, init_params, ParamStore, ParamVars};

/// Per-head column blocks of fused projection matrices.
#[derive(Clone, Copy, Debug)]
pub struct HeadWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

impl HeadWeights {
    /// Columns `[head·d_h, (head+1)·d_h)` of `{prefix}.{names[i]}`.
    pub fn slice(
        tape: &mut Tape,
        pv: &ParamVars,
        prefix: &str,
        names: [&str; 3],
        head: usize,
        head_dim: usize,
    ) -> Result<Self> {
        let mut block = |name: &str| -> Result<Var> {
            let full = pv.get(&format!("{prefix}.{name}"))?;
            tape.columns(full, head * head_dim, head_dim)
        };
        Ok(HeadWeights {
            wq: block(names[0])?,
            wk: block(names[1])?,
            wv: block(names[2])?,
        })
    }
}

/// Normalizer source for head `head` of layer `layer`. Learned α reads the
/// scalar shared by the encoder and decoder heads at that position.
pub fn alpha_source(
    config: &ModelConfig,
    pv: &ParamVars,
    layer: usize,
    head: usize,
) -> Result<AlphaSource> {
    Ok(match config.alpha {
        AlphaMode::Softmax => AlphaSource::Softmax,
        AlphaMode::Fixed(a) => AlphaSource::Fixed(a),
        AlphaMode::Learned => AlphaSource::Learned(pv.get(&alpha_name(layer, head))?),
    })
}

/// Tokens the output layer may emit: everything except PAD and BOS.
pub fn emittable(token_vocab: usize) -> Vec<bool> {
    (0..token_vocab).map(|id| id != PAD && id != BOS).collect()
}

/// A configuration with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Model { config, params })
    }

    /// The α spec of every (layer, head), or `None` under softmax.
    pub fn alpha_spec(&self, layer: usize, head: usize) -> Result<Option<AlphaSpec>> {
        Ok(match self.config.alpha {
            AlphaMode::Softmax => None,
            AlphaMode::Fixed(a) => Some(AlphaSpec::Fixed(a)),
            AlphaMode::Learned => Some(AlphaSpec::Learned {
                att_scalar: self.params.get(&alpha_name(layer, head))?.item(),
            }),
        })
    }

    /// Effective α per layer and head (1.0 stands for softmax).
    pub fn alphas(&self) -> Result<Vec<Vec<f64>>> {
        (0..self.config.layers)
            .map(|l| {
                (0..self.config.heads)
                    .map(|h| Ok(self.alpha_spec(l, h)?.map_or(1.0, |s| s.effective())))
                    .collect()
            })
            .collect()
    }

    pub(crate) fn normalizer(&self, layer: usize, head: usize) -> Result<Normalizer> {
        Ok(match self.alpha_spec(layer, head)? {
            None => Normalizer::Softmax,
            Some(spec) => Normalizer::Entmax(spec.effective()),
        })
    }

    /// Encoder output `H^enc` for one graph.
    pub fn encode(&self, input: &GraphInput) -> Result<Tensor> {
        let mut tape = Tape::new();
        let pv = self.params.register_frozen(&mut tape);
        let h = encoder::encode(&mut tape, &pv, &self.config, input)?;
        Ok(tape.value(h).clone())
    }

    /// Teacher-forced logits `[n × V]` for decoder inputs `inputs`
    /// (BOS-first), recomputed from scratch.
    pub fn logits(&self, input: &GraphInput, inputs: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let pv = self.params.register_frozen(&mut tape);
        let memory = encoder::encode(&mut tape, &pv, &self.config, input)?;
        let logits = decoder::decode(&mut tape, &pv, &self.config, memory, &input.valid, inputs)?;
        Ok(tape.value(logits).clone())
    }

    /// Precomputes per-layer context keys and values from the encoder output.
    pub fn memory(&self, input: &GraphInput) -> Result<Arc<Memory>> {
        let h_enc = self.encode(input)?;
        Ok(Arc::new(Memory::new(self, h_enc, input.valid.clone())?))
    }

    /// A fresh decode state holding only BOS.
    pub fn start(&self, input: &GraphInput) -> Result<DecodeState> {
        Ok(DecodeState::new(self, self.memory(input)?))
    }

    /// `log P(y | g)`: the sum over positions of the log-probability of each
    /// target. `y` is the framed sequence `BOS … EOS`; PAD targets are
    /// skipped.
    pub fn sequence_log_prob(&self, input: &GraphInput, y: &[usize]) -> Result<f64> {
        if y.len() < 2 {
            return Err(crate::error::Error::contract(
                "sequence must contain BOS and at least one target",
            ));
        }
        if y[0] != BOS {
            return Err(crate::error::Error::contract(
                "sequence must start with BOS",
            ));
        }
        let logits = self.logits(input, &y[..y.len() - 1])?;
        let allowed = emittable(self.config.token_vocab);
        let mut total = 0.0;
        for (t, &target) in y[1..].iter().enumerate() {
            if target == PAD {
                continue;
            }
            let lp = crate::tape::masked_log_softmax(logits.row(t), &allowed);
            total += lp.get(target).copied().unwrap_or(f64::NEG_INFINITY);
        }
        Ok(total)
    }
}
