use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::NeighborhoodRule;
use crate::normalize::AlphaSpec;

/// Attention normalizer shared by every head.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMode {
    Softmax,
    /// Every head uses the same constant α in (1, 2].
    Fixed(f64),
    /// One trained `att_scalar` per (layer, head), shared by the encoder and
    /// decoder heads at that position; α = 1 + sigmoid(att_scalar).
    Learned,
}

impl FromStr for AlphaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(AlphaMode::Softmax),
            "learned" => Ok(AlphaMode::Learned),
            _ => {
                let value = s
                    .strip_prefix("fixed:")
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| {
                        Error::Domain(format!(
                            "alpha mode \"{s}\" is not softmax, fixed:<value> or learned"
                        ))
                    })?;
                AlphaSpec::fixed(value)?;
                Ok(AlphaMode::Fixed(value))
            }
        }
    }
}

impl fmt::Display for AlphaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AlphaMode::Softmax => write!(f, "softmax"),
            AlphaMode::Fixed(v) => write!(f, "fixed:{v}"),
            AlphaMode::Learned => write!(f, "learned"),
        }
    }
}

/// Divisor applied to query-key dot products.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreScale {
    /// √d_h, the per-head key width.
    HeadDim,
    /// √d, the model width.
    ModelDim,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Rows of the learned vertex positional table.
    pub max_vertices: usize,
    /// Longest decoder input, BOS included.
    pub max_tokens: usize,
    pub label_vocab: usize,
    pub token_vocab: usize,
    pub alpha: AlphaMode,
    pub score_scale: ScoreScale,
    pub neighborhood: NeighborhoodRule,
    pub layer_norm_eps: f64,
}

impl ModelConfig {
    /// L=2, H=2, d=64, d_ff=128.
    pub fn desk(label_vocab: usize, token_vocab: usize) -> Self {
        ModelConfig {
            layers: 2,
            heads: 2,
            d_model: 64,
            d_ff: 128,
            max_vertices: 64,
            max_tokens: 128,
            label_vocab,
            token_vocab,
            alpha: AlphaMode::Fixed(1.5),
            score_scale: ScoreScale::HeadDim,
            neighborhood: NeighborhoodRule::default(),
            layer_norm_eps: 1e-5,
        }
    }

    /// L=6, H=8, d=512, d_ff=2048.
    pub fn paper(label_vocab: usize, token_vocab: usize) -> Self {
        ModelConfig {
            layers: 6,
            heads: 8,
            d_model: 512,
            d_ff: 2048,
            ..ModelConfig::desk(label_vocab, token_vocab)
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Multiplier applied to attention scores.
    pub fn score_factor(&self) -> f64 {
        let width = match self.score_scale {
            ScoreScale::HeadDim => self.head_dim(),
            ScoreScale::ModelDim => self.d_model,
        };
        1.0 / (width as f64).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("heads", self.heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("max_vertices", self.max_vertices),
            ("max_tokens", self.max_tokens),
            ("label_vocab", self.label_vocab),
            ("token_vocab", self.token_vocab),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::contract(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::contract(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.token_vocab <= crate::vocab::EOS {
            return Err(Error::contract(
                "token vocabulary must contain PAD, BOS and EOS",
            ));
        }
        if let AlphaMode::Fixed(v) = self.alpha {
            AlphaSpec::fixed(v)?;
        }
        if self.layer_norm_eps.is_nan() || self.layer_norm_eps <= 0.0 {
            return Err(Error::contract("layer norm eps must be positive"));
        }
        Ok(())
    }
}
