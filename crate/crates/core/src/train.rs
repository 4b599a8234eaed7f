//! Objective, Adam, batching and the training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::error::{Error, Result};
use crate::model::{decoder, emittable, encoder, GraphInput, Model, ParamStore};
use crate::tape::{SparsityStats, Tape, Var};
use crate::tensor::Tensor;
use crate::vocab::PAD;

/// Mean negative log-likelihood over non-PAD targets.
pub fn nll_loss(tape: &mut Tape, logits: Var, targets: &[usize], allowed: &[bool]) -> Result<Var> {
    let targets: Vec<Option<usize>> = targets.iter().map(|&t| (t != PAD).then_some(t)).collect();
    tape.cross_entropy(logits, &targets, allowed)
}

/// Learning rate `peak · min(step / warmup, sqrt(warmup / step))` for
/// 1-based `step`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup: usize,
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        let s = step.max(1) as f64;
        let w = self.warmup.max(1) as f64;
        self.peak * (s / w).min((w / s).sqrt())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// First and second moments, one tensor per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update; `grads` follows store order.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    config: AdamConfig,
) -> Result<()> {
    let AdamConfig { beta1, beta2, eps } = config;
    if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
        return Err(Error::Domain(format!(
            "Adam betas ({beta1}, {beta2}) outside [0, 1)"
        )));
    }
    if grads.len() != params.len() {
        return Err(Error::contract(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (((_, p), g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        if p.shape() != g.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        for (((x, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *x -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// A padded batch. `inputs[i]` is the decoder input (BOS-first) and
/// `targets[i]` the shifted target, both padded with PAD to the batch
/// maximum; graphs are padded to the batch-maximum vertex count.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub graphs: Vec<GraphInput>,
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
}

impl Batch {
    fn assemble(examples: &[Example], indices: Vec<usize>) -> Batch {
        let m = indices
            .iter()
            .map(|&i| examples[i].input.len())
            .max()
            .unwrap_or(0);
        let n = indices
            .iter()
            .map(|&i| examples[i].target_tokens())
            .max()
            .unwrap_or(0);
        let pad = |mut v: Vec<usize>| {
            v.resize(n, PAD);
            v
        };
        Batch {
            graphs: indices
                .iter()
                .map(|&i| examples[i].input.padded(m))
                .collect(),
            inputs: indices
                .iter()
                .map(|&i| {
                    let t = &examples[i].target;
                    pad(t[..t.len() - 1].to_vec())
                })
                .collect(),
            targets: indices
                .iter()
                .map(|&i| pad(examples[i].target[1..].to_vec()))
                .collect(),
            indices,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Non-PAD target count.
    pub fn tokens(&self) -> usize {
        self.targets.iter().flatten().filter(|&&t| t != PAD).count()
    }

    /// Example `i` with batch padding removed.
    pub fn trimmed(&self, i: usize) -> (GraphInput, Vec<usize>, Vec<usize>) {
        let len = self.targets[i]
            .iter()
            .rposition(|&t| t != PAD)
            .map_or(0, |p| p + 1);
        (
            self.graphs[i].trimmed(),
            self.inputs[i][..len].to_vec(),
            self.targets[i][..len].to_vec(),
        )
    }
}

/// Seeded shuffle, then greedy packing so that each batch's target tokens
/// stay within `batch_tokens`. An example that alone exceeds the budget gets
/// its own batch.
pub fn make_batches(examples: &[Example], batch_tokens: usize, seed: u64) -> Result<Vec<Batch>> {
    if examples.is_empty() {
        return Err(Error::contract("dataset is empty"));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut batches = Vec::new();
    let mut current = Vec::new();
    let mut used = 0;
    for i in order {
        let len = examples[i].target_tokens();
        if len > batch_tokens {
            log::warn!("example {i} has {len} target tokens, over the batch budget {batch_tokens}");
        }
        if !current.is_empty() && used + len > batch_tokens {
            batches.push(Batch::assemble(examples, std::mem::take(&mut current)));
            used = 0;
        }
        current.push(i);
        used += len;
    }
    if !current.is_empty() {
        batches.push(Batch::assemble(examples, current));
    }
    Ok(batches)
}

/// Loss and gradients of one example. The loss is the example's summed
/// token NLL times `weight`.
pub struct ExampleGrad {
    pub loss: f64,
    pub grads: Vec<Tensor>,
    pub sparsity: SparsityStats,
}

/// Forward and backward for one (unpadded) example, with the summed token
/// NLL scaled by `weight`.
pub fn example_gradient(
    model: &Model,
    input: &GraphInput,
    inputs: &[usize],
    targets: &[usize],
    weight: f64,
) -> Result<ExampleGrad> {
    let config = &model.config;
    let mut tape = Tape::new();
    let pv = model.params.register(&mut tape);
    let memory = encoder::encode(&mut tape, &pv, config, input)?;
    let logits = decoder::decode(&mut tape, &pv, config, memory, &input.valid, inputs)?;
    let mean = nll_loss(&mut tape, logits, targets, &emittable(config.token_vocab))?;
    let count = targets.iter().filter(|&&t| t != PAD).count();
    let loss = tape.scale(mean, weight * count as f64);
    let mut grads = tape.backward(loss)?;
    let grads = pv
        .iter()
        .map(|(name, var)| {
            Ok(grads.take(var).unwrap_or_else(|| {
                Tensor::zeros(model.params.get(name).expect("registered").shape())
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExampleGrad {
        loss: tape.value(loss).item(),
        grads,
        sparsity: tape.sparsity_stats(),
    })
}

/// Token-mean loss and summed gradients of a batch. Examples run in
/// parallel; their gradients are summed in batch order.
pub fn batch_gradient(model: &Model, batch: &Batch) -> Result<(f64, Vec<Tensor>)> {
    let weight = 1.0 / batch.tokens() as f64;
    let parts: Vec<ExampleGrad> = (0..batch.len())
        .into_par_iter()
        .map(|i| {
            let (input, inputs, targets) = batch.trimmed(i);
            example_gradient(model, &input, &inputs, &targets, weight)
        })
        .collect::<Result<_>>()?;
    let mut iter = parts.into_iter();
    let first = iter.next().ok_or_else(|| Error::contract("empty batch"))?;
    let mut loss = first.loss;
    let mut grads = first.grads;
    for part in iter {
        loss += part.loss;
        for (g, p) in grads.iter_mut().zip(&part.grads) {
            g.add_assign(p)?;
        }
    }
    Ok((loss, grads))
}

/// Token-mean NLL of `examples` under `model`, plus attention sparsity.
pub fn evaluate(model: &Model, examples: &[Example]) -> Result<(f64, SparsityStats)> {
    let parts: Vec<(f64, usize, SparsityStats)> = examples
        .par_iter()
        .map(|ex| {
            let mut tape = Tape::new();
            let pv = model.params.register_frozen(&mut tape);
            let memory = encoder::encode(&mut tape, &pv, &model.config, &ex.input)?;
            let inputs = &ex.target[..ex.target.len() - 1];
            let logits = decoder::decode(
                &mut tape,
                &pv,
                &model.config,
                memory,
                &ex.input.valid,
                inputs,
            )?;
            let loss = nll_loss(
                &mut tape,
                logits,
                &ex.target[1..],
                &emittable(model.config.token_vocab),
            )?;
            let n = ex.target_tokens();
            Ok((tape.value(loss).item() * n as f64, n, tape.sparsity_stats()))
        })
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    let mut count = 0;
    let mut stats = SparsityStats::default();
    for (l, n, s) in parts {
        total += l;
        count += n;
        stats.merge(s);
    }
    Ok((total / count.max(1) as f64, stats))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_tokens: usize,
    pub epochs: usize,
    /// Hard cap on optimizer steps.
    pub max_steps: Option<usize>,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Stop once an epoch's mean loss drops to this value.
    pub target_loss: Option<f64>,
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            batch_tokens: 512,
            epochs: 10,
            max_steps: None,
            schedule: LrSchedule {
                peak: 2e-3,
                warmup: 200,
            },
            adam: AdamConfig::default(),
            seed: 0,
            target_loss: None,
        }
    }

    pub fn paper() -> Self {
        TrainConfig {
            batch_tokens: 2048,
            epochs: 10,
            schedule: LrSchedule {
                peak: 7e-4,
                warmup: 4000,
            },
            ..TrainConfig::desk()
        }
    }
}

/// One metrics-log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub steps: usize,
    pub epochs: usize,
    pub final_loss: f64,
}

/// Runs epochs of forward, backward and Adam. `on_epoch` receives each
/// epoch's token-weighted mean loss. Non-finite loss or gradients abort with
/// [`Error::Diverged`].
pub fn train(
    model: &mut Model,
    examples: &[Example],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&MetricRecord) -> Result<()>,
) -> Result<TrainReport> {
    let mut state = AdamState::new(&model.params);
    let mut step = 0;
    let mut final_loss = f64::NAN;
    let mut epochs = 0;
    'epochs: for epoch in 0..config.epochs {
        let batches = make_batches(
            examples,
            config.batch_tokens,
            config.seed.wrapping_add(epoch as u64),
        )?;
        let mut total = 0.0;
        let mut tokens = 0;
        let mut lr = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            if config.max_steps.is_some_and(|m| step >= m) {
                break;
            }
            let (loss, grads) = batch_gradient(model, batch)?;
            let max_grad = grads.iter().map(Tensor::max_abs).fold(0.0, f64::max);
            if !loss.is_finite() || !max_grad.is_finite() {
                return Err(Error::Diverged {
                    step,
                    batch: b,
                    loss,
                    max_grad,
                });
            }
            step += 1;
            lr = config.schedule.at(step);
            adam_step(&mut model.params, &grads, &mut state, lr, config.adam)?;
            total += loss * batch.tokens() as f64;
            tokens += batch.tokens();
        }
        if tokens == 0 {
            break;
        }
        epochs = epoch + 1;
        final_loss = total / tokens as f64;
        let record = MetricRecord {
            epoch,
            step,
            loss: final_loss,
            lr,
        };
        log::info!("epoch {epoch} step {step} loss {final_loss:.5} lr {lr:.2e}");
        on_epoch(&record)?;
        if config.target_loss.is_some_and(|t| final_loss <= t) {
            break 'epochs;
        }
    }
    Ok(TrainReport {
        steps: step,
        epochs,
        final_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_grad(params: &ParamStore) -> Vec<Tensor> {
        params.iter().map(|(_, t)| t.scale(2.0)).collect()
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::vector(vec![1.0, -2.0]));
        let before = params.clone();
        let mut state = AdamState::new(&params);
        adam_step(
            &mut params,
            &[Tensor::zeros(&[2])],
            &mut state,
            0.1,
            AdamConfig::default(),
        )
        .unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn adam_first_step_is_sign_times_lr() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::vector(vec![0.0, 0.0]));
        let mut state = AdamState::new(&params);
        let g = Tensor::vector(vec![3.0, -0.5]);
        adam_step(&mut params, &[g], &mut state, 0.01, AdamConfig::default()).unwrap();
        let w = params.get("w").unwrap().data();
        assert!(
            (w[0] + 0.01).abs() < 1e-10 && (w[1] - 0.01).abs() < 1e-10,
            "{w:?}"
        );
    }

    #[test]
    fn adam_descends_quadratic_bowl() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::vector(vec![3.0]));
        let mut state = AdamState::new(&params);
        let loss = |p: &ParamStore| p.get("w").unwrap().data()[0].powi(2);
        let mut prev = loss(&params);
        for step in 0..100 {
            let g = quadratic_grad(&params);
            adam_step(&mut params, &g, &mut state, 0.01, AdamConfig::default()).unwrap();
            let now = loss(&params);
            if step > 5 {
                assert!(now < prev, "step {step}: {now} >= {prev}");
            }
            prev = now;
        }
    }

    #[test]
    fn schedule_shape() {
        let s = LrSchedule {
            peak: 1.0,
            warmup: 4,
        };
        assert_eq!(s.at(1), 0.25);
        assert_eq!(s.at(4), 1.0);
        assert_eq!(s.at(16), 0.5);
    }

    #[test]
    fn nll_uniform_is_log_v() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[2, 5]));
        let allowed = vec![true; 5];
        let loss = nll_loss(&mut tape, logits, &[1, 3], &allowed).unwrap();
        assert!((tape.value(loss).item() - 5f64.ln()).abs() < 1e-15);
        assert!(nll_loss(&mut tape, logits, &[PAD, PAD], &allowed).is_err());
    }
}
