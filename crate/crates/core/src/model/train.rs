//! Mini-batch training with deterministic, chunked gradient reduction.
//!
//! A batch is split into fixed-size chunks; each chunk is evaluated in its
//! own graph (possibly on another thread) and the chunk gradients are
//! summed in chunk order. The chunking does not depend on the number of
//! threads, so parallel and sequential builds produce identical bits.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::labels::{argmax, collapse_event, collapse_prong, softmax};
use super::network::{EventOutput, TransformerCvn};
use super::optim::{adamw_step, AdamState, CosineWarmRestarts};
use crate::datagen::Event;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::par;
use crate::tensor::Tensor;
use crate::transformer::AttentionStack;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub focal_gamma: f64,
    pub learning_rate: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub annealing_epochs: f64,
    pub annealing_cycles: u32,
    pub batch_size: usize,
    /// Events per independently evaluated graph inside a batch.
    pub chunk_size: usize,
    /// Epochs to run.
    pub epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            focal_gamma: 1.0,
            learning_rate: 1e-5,
            lr_min: 0.0,
            weight_decay: 2e-5,
            annealing_epochs: 1024.0,
            annealing_cycles: 16,
            batch_size: 2048,
            chunk_size: 16,
            epochs: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal_gamma >= 0.0) {
            return Err(Error::Config(format!("focal_gamma {} < 0", self.focal_gamma)));
        }
        if self.batch_size == 0 || self.chunk_size == 0 {
            return Err(Error::Config("batch_size and chunk_size must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        self.schedule().map(|_| ())
    }

    pub fn schedule(&self) -> Result<CosineWarmRestarts> {
        CosineWarmRestarts::new(self.learning_rate, self.lr_min, self.annealing_epochs, self.annealing_cycles)
    }
}

/// Accuracies on the evaluation label sets.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    /// Event accuracy over {νμ, νe, NC, CB}.
    pub event: f64,
    /// Prong accuracy over {e, μ, p, γ, π±}, on prongs whose truth is one of them.
    pub prong: f64,
    /// Prong accuracy over all nine labels.
    pub prong_fine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: usize,
    pub lr_first: f64,
    pub lr_last: f64,
    pub train_loss: f64,
    pub train: Accuracy,
    pub val: Option<Accuracy>,
    pub clamped: usize,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ParamStore,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochMetrics>,
}

impl TrainState {
    pub fn new(params: ParamStore) -> Self {
        Self {
            params,
            adam: AdamState::default(),
            epoch: 0,
            history: Vec::new(),
        }
    }
}

/// Probabilities and attention for one event.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub event_probs: Vec<f64>,
    pub prong_probs: Vec<Vec<f64>>,
    pub attention: AttentionStack,
}

impl From<EventOutput> for Prediction {
    fn from(o: EventOutput) -> Self {
        Self {
            event_probs: softmax(&o.event_logits),
            prong_probs: o.prong_logits.iter().map(|l| softmax(l)).collect(),
            attention: o.attention,
        }
    }
}

/// Seed of the shuffle for a given epoch.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    crate::datagen::event_seed(seed, 0x5348_5546, epoch as u64)
}

fn add_into(acc: &mut BTreeMap<String, Tensor>, grads: BTreeMap<String, Tensor>) {
    for (name, g) in grads {
        match acc.get_mut(&name) {
            Some(a) => a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y),
            None => {
                acc.insert(name, g);
            }
        }
    }
}

/// Accuracy tallies from predictions and truth.
pub fn accuracy(preds: &[Prediction], events: &[Event]) -> Result<Accuracy> {
    let mut ev_ok = 0usize;
    let (mut pr_n, mut pr_ok, mut fine_n, mut fine_ok) = (0usize, 0usize, 0usize, 0usize);
    for (p, e) in preds.iter().zip(events) {
        let c = collapse_event(&p.event_probs)?;
        if argmax(&c) == e.label.flavor().index() {
            ev_ok += 1;
        }
        for (pp, prong) in p.prong_probs.iter().zip(&e.prongs) {
            fine_n += 1;
            if argmax(pp) == prong.truth.label.index() {
                fine_ok += 1;
            }
            if let Some(kind) = prong.truth.label.kind() {
                pr_n += 1;
                if let Some(c) = collapse_prong(pp)? {
                    if argmax(&c) == kind.index() {
                        pr_ok += 1;
                    }
                }
            }
        }
    }
    let frac = |a: usize, n: usize| if n == 0 { 0.0 } else { a as f64 / n as f64 };
    Ok(Accuracy {
        event: frac(ev_ok, events.len()),
        prong: frac(pr_ok, pr_n),
        prong_fine: frac(fine_ok, fine_n),
    })
}

/// Runs one epoch of AdamW over `train`, shuffled by (seed, epoch), and
/// optionally scores `val` afterwards. On a non-finite loss or gradient
/// the error is returned before that step's update is applied.
pub fn train_epoch(
    model: &TransformerCvn,
    state: &mut TrainState,
    train: &[Event],
    val: Option<&[Event]>,
    config: &TrainConfig,
    seed: u64,
) -> Result<EpochMetrics> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("empty training set".into()));
    }
    let schedule = config.schedule()?;
    let epoch = state.epoch;
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(seed, epoch)));
    let steps = train.len().div_ceil(config.batch_size);
    let mut loss_sum = 0.0;
    let mut clamped = 0;
    let mut outputs: Vec<Option<Prediction>> = vec![None; train.len()];
    let (mut lr_first, mut lr_last) = (0.0, 0.0);

    for (step, batch) in order.chunks(config.batch_size).enumerate() {
        let refs: Vec<&Event> = batch.iter().map(|&i| &train[i]).collect();
        let n = refs.len() as f64;
        let params = &state.params;
        let results = par::map_chunks(&refs, config.chunk_size, |chunk| {
            model.loss_and_gradients(params, chunk, config.focal_gamma, n)
        });
        let mut grads = BTreeMap::new();
        let mut batch_loss = 0.0;
        let mut k = 0;
        for r in results {
            let (loss, g, outs, c) = r?;
            batch_loss += loss;
            clamped += c;
            add_into(&mut grads, g.by_name());
            for o in outs {
                outputs[batch[k]] = Some(o.into());
                k += 1;
            }
        }
        if !batch_loss.is_finite() || grads.values().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("loss at epoch {epoch}, step {step}")));
        }
        let lr = schedule.lr(epoch as f64 + step as f64 / steps as f64);
        if step == 0 {
            lr_first = lr;
        }
        lr_last = lr;
        adamw_step(&mut state.params, &grads, &mut state.adam, lr, config.weight_decay)?;
        loss_sum += batch_loss * n;
    }

    let preds: Vec<Prediction> = outputs.into_iter().map(|p| p.expect("every event visited")).collect();
    let train_acc = accuracy(&preds, train)?;
    let val_acc = match val {
        Some(v) if !v.is_empty() => Some(evaluate(model, &state.params, v, config.chunk_size)?.1),
        _ => None,
    };
    state.epoch += 1;
    let m = EpochMetrics {
        epoch: state.epoch,
        steps,
        lr_first,
        lr_last,
        train_loss: loss_sum / train.len() as f64,
        train: train_acc,
        val: val_acc,
        clamped,
    };
    state.history.push(m.clone());
    Ok(m)
}

/// Predictions for every event, computed chunk by chunk.
pub fn predict(model: &TransformerCvn, params: &ParamStore, events: &[Event], chunk: usize) -> Result<Vec<Prediction>> {
    let refs: Vec<&Event> = events.iter().collect();
    let chunks = par::map_chunks(&refs, chunk, |c| model.forward_batch(params, c));
    let mut out = Vec::with_capacity(events.len());
    for c in chunks {
        out.extend(c?.into_iter().map(Prediction::from));
    }
    Ok(out)
}

pub fn evaluate(
    model: &TransformerCvn,
    params: &ParamStore,
    events: &[Event],
    chunk: usize,
) -> Result<(Vec<Prediction>, Accuracy)> {
    let preds = predict(model, params, events, chunk)?;
    let acc = accuracy(&preds, events)?;
    Ok((preds, acc))
}

/// Mean joint loss over `events` without updating anything.
pub fn mean_loss(model: &TransformerCvn, params: &ParamStore, events: &[Event], gamma: f64, chunk: usize) -> Result<f64> {
    let refs: Vec<&Event> = events.iter().collect();
    let n = refs.len() as f64;
    let parts = par::map_chunks(&refs, chunk, |c| {
        let mut g = crate::tensor::Graph::new();
        let (l, _) = model.loss_graph(&mut g, params, c, gamma, n)?;
        Ok::<f64, Error>(g.value(l).item())
    });
    parts.into_iter().sum()
}
