//! Greedy and beam-search decoding.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{emittable, DecodeState, GraphInput, Model};
use crate::tape::masked_log_softmax;
use crate::vocab::EOS;

/// A decoded sequence. `tokens` excludes BOS and includes the final EOS when
/// `finished`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Mean log-probability per generated token.
    pub fn normalized_score(&self) -> f64 {
        self.log_prob / self.tokens.len().max(1) as f64
    }

    /// The framed sequence `BOS … ` for [`Model::sequence_log_prob`].
    pub fn framed(&self) -> Vec<usize> {
        std::iter::once(crate::vocab::BOS)
            .chain(self.tokens.iter().copied())
            .collect()
    }
}

fn step_log_probs(model: &Model, state: &mut DecodeState, allowed: &[bool]) -> Result<Vec<f64>> {
    let logits = state.step(model)?;
    Ok(masked_log_softmax(&logits, allowed))
}

fn effective_max_len(model: &Model, max_len: usize) -> Result<usize> {
    if max_len == 0 {
        return Err(Error::contract("max_len must be at least 1"));
    }
    Ok(max_len.min(model.config.max_tokens))
}

/// Argmax decoding; ties go to the lowest token id.
pub fn greedy_decode(model: &Model, input: &GraphInput, max_len: usize) -> Result<Hypothesis> {
    let max_len = effective_max_len(model, max_len)?;
    let allowed = emittable(model.config.token_vocab);
    let mut state = model.start(input)?;
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    while tokens.len() < max_len {
        let lp = step_log_probs(model, &mut state, &allowed)?;
        let mut best = None;
        for (id, &v) in lp.iter().enumerate() {
            if allowed[id] && best.is_none_or(|(_, b)| v > b) {
                best = Some((id, v));
            }
        }
        let (id, v) = best.ok_or_else(|| Error::contract("no emittable token"))?;
        tokens.push(id);
        log_prob += v;
        if id == EOS {
            return Ok(Hypothesis {
                tokens,
                log_prob,
                finished: true,
            });
        }
        state.push(id);
    }
    Ok(Hypothesis {
        tokens,
        log_prob,
        finished: false,
    })
}

struct Live {
    state: DecodeState,
    tokens: Vec<usize>,
    log_prob: f64,
}

/// Beam search over cumulative log-probabilities.
///
/// Each step expands every live hypothesis by every emittable token and
/// ranks the candidates (ties: lower parent rank, then lower token id). EOS
/// candidates ranked within the top `width` are frozen as finished; the
/// `width` best non-EOS candidates stay live. The search stops when nothing
/// is live, `max_len` tokens have been generated, or at least `width`
/// hypotheses have finished and no live one has a higher mean
/// log-probability than the best finished one. The finished hypothesis with the
/// best mean log-probability per token is returned; if none finished, the
/// best live one is returned with `finished = false`.
pub fn beam_search(
    model: &Model,
    input: &GraphInput,
    width: usize,
    max_len: usize,
) -> Result<Hypothesis> {
    if width == 0 {
        return Err(Error::contract("beam width must be at least 1"));
    }
    let max_len = effective_max_len(model, max_len)?;
    let allowed = emittable(model.config.token_vocab);
    let mut live = vec![Live {
        state: model.start(input)?,
        tokens: Vec::new(),
        log_prob: 0.0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for (parent, hyp) in live.iter_mut().enumerate() {
            let lp = step_log_probs(model, &mut hyp.state, &allowed)?;
            for (id, &v) in lp.iter().enumerate() {
                if allowed[id] {
                    candidates.push((hyp.log_prob + v, parent, id));
                }
            }
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        // EOS candidates ranked within the top `width` finish; the live beam
        // is refilled to `width` from the best non-EOS candidates.
        let mut next = Vec::with_capacity(width);
        for (rank, (score, parent, id)) in candidates.into_iter().enumerate() {
            if id == EOS {
                if rank < width {
                    let mut tokens = live[parent].tokens.clone();
                    tokens.push(id);
                    finished.push(Hypothesis {
                        tokens,
                        log_prob: score,
                        finished: true,
                    });
                }
                continue;
            }
            if next.len() == width {
                if rank >= width {
                    break;
                }
                continue;
            }
            let mut tokens = live[parent].tokens.clone();
            tokens.push(id);
            let mut state = live[parent].state.clone();
            state.push(id);
            next.push(Live {
                state,
                tokens,
                log_prob: score,
            });
        }
        live = next;
        if live.is_empty() {
            break;
        }
        if finished.len() >= width {
            let best_finished = finished
                .iter()
                .map(Hypothesis::normalized_score)
                .fold(f64::NEG_INFINITY, f64::max);
            let best_live = live
                .iter()
                .map(|l| l.log_prob / l.tokens.len() as f64)
                .fold(f64::NEG_INFINITY, f64::max);
            if best_live <= best_finished {
                break;
            }
        }
    }
    let pick = |hyps: Vec<Hypothesis>| {
        hyps.into_iter().reduce(|best, h| {
            if h.normalized_score() > best.normalized_score() {
                h
            } else {
                best
            }
        })
    };
    if let Some(best) = pick(finished) {
        return Ok(best);
    }
    log::debug!("no beam hypothesis finished within {max_len} tokens");
    pick(
        live.into_iter()
            .map(|l| Hypothesis {
                tokens: l.tokens,
                log_prob: l.log_prob,
                finished: false,
            })
            .collect(),
    )
    .ok_or_else(|| Error::contract("beam is empty"))
}
