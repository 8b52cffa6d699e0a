//! Softmax-regression head trained with cross-entropy and Adam.
//!
//! Training runs a fixed number of epochs over the stored GAP vectors. Each
//! epoch reshuffles the sample order with a ChaCha stream keyed by the
//! session seed and selected by the epoch index, walks mini-batches, and
//! applies one Adam step per batch. Per-sample forward passes may run in
//! parallel but gradients are always summed in batch order, so a given
//! `(data, config, seed)` reproduces the same head bit for bit.

use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{argmax_class, cross_entropy, logits_gradient, softmax, Logits, Probabilities};

/// Fully-connected layer mapping a `K`-dim GAP vector to `C` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    classes: usize,
    features: usize,
    /// Row-major `C x K`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl LinearHead {
    pub fn new(classes: usize, features: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if classes == 0 || features == 0 {
            return Err(Error::invalid("head dimensions must be positive"));
        }
        if weights.len() != classes * features || bias.len() != classes {
            return Err(Error::invalid(format!(
                "a {classes}x{features} head needs {} weights and {classes} biases, got {} and {}",
                classes * features,
                weights.len(),
                bias.len()
            )));
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::invalid("head parameters must be finite"));
        }
        Ok(Self { classes, features, weights, bias })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    /// Weight row of class `c`.
    pub fn row(&self, c: usize) -> &[f64] {
        &self.weights[c * self.features..(c + 1) * self.features]
    }

    fn params_len(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Zero-initialized head.
pub fn init_head(classes: usize, features: usize) -> Result<LinearHead> {
    if classes < 2 {
        return Err(Error::invalid("a head needs at least two classes"));
    }
    if features == 0 {
        return Err(Error::invalid("a head needs at least one feature"));
    }
    Ok(LinearHead {
        classes,
        features,
        weights: vec![0.0; classes * features],
        bias: vec![0.0; classes],
    })
}

fn raw_logits(head: &LinearHead, gap: &[f64]) -> Vec<f64> {
    (0..head.classes)
        .map(|c| {
            head.row(c).iter().zip(gap).map(|(w, x)| w * x).sum::<f64>() + head.bias[c]
        })
        .collect()
}

/// `z_c = sum_k W[c,k] * gap[k] + b[c]`.
pub fn forward(head: &LinearHead, gap: &[f64]) -> Result<Logits> {
    if gap.len() != head.features {
        return Err(Error::invalid(format!(
            "head expects {} features, got {}",
            head.features,
            gap.len()
        )));
    }
    Logits::new(raw_logits(head, gap))
}

/// Hyperparameters. Defaults: ten epochs, batches of 32, and the usual Adam
/// constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.epochs > 0
            && self.batch_size > 0
            && self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.epsilon > 0.0
            && self.epsilon.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid training config {self:?}")))
        }
    }
}

/// First and second moment estimates for Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }
}

/// One Adam update, in place. The epsilon sits outside the square root.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, config: &TrainConfig) -> Result<()> {
    let n = params.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::invalid(format!(
            "adam shapes disagree: params {n}, grads {}, m {}, v {}",
            grads.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for i in 0..n {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
    }
    Ok(())
}

/// A labelled GAP vector.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub features: &'a [f64],
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean cross-entropy of the forward passes made during each epoch.
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
    pub training_ms: f64,
}

/// Reported once per finished epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochProgress {
    /// 1-based.
    pub epoch: usize,
    pub epochs: usize,
    pub mean_loss: f64,
}

fn validate_examples(classes: usize, examples: &[Example<'_>]) -> Result<usize> {
    if classes < 2 {
        return Err(Error::Precondition(format!("training needs at least 2 classes, got {classes}")));
    }
    let dim = examples
        .first()
        .map(|e| e.features.len())
        .ok_or_else(|| Error::Precondition("class 0 has no samples".into()))?;
    if dim == 0 {
        return Err(Error::invalid("examples have no features"));
    }
    let mut counts = vec![0usize; classes];
    for e in examples {
        if e.label >= classes {
            return Err(Error::invalid(format!("label {} out of range for {classes} classes", e.label)));
        }
        if e.features.len() != dim {
            return Err(Error::invalid("examples have inconsistent feature lengths"));
        }
        counts[e.label] += 1;
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Precondition(format!("class {empty} has no samples")));
    }
    Ok(dim)
}

/// Per-sample loss and logit gradient under the current head.
fn sample_terms(head: &LinearHead, example: &Example<'_>) -> (f64, Vec<f64>) {
    let logits = Logits::new(raw_logits(head, example.features)).expect("finite logits");
    let probs = softmax(&logits);
    let loss = cross_entropy(&probs, example.label).expect("label validated");
    let dz = logits_gradient(&probs, example.label).expect("label validated");
    (loss, dz)
}

/// Mean loss and mean gradient over a batch, flattened as `[W..., b...]`.
/// Gradients are accumulated in batch order.
pub fn batch_gradient(head: &LinearHead, batch: &[Example<'_>]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    for e in batch {
        if e.features.len() != head.features || e.label >= head.classes {
            return Err(Error::invalid("example does not match head dimensions"));
        }
    }
    let terms = per_sample_terms(head, batch);
    let (loss_sum, grads) = accumulate(head, batch, &terms);
    let n = batch.len() as f64;
    Ok((loss_sum / n, grads.into_iter().map(|g| g / n).collect()))
}

fn per_sample_terms(head: &LinearHead, batch: &[Example<'_>]) -> Vec<(f64, Vec<f64>)> {
    if batch.len() * head.params_len() >= par::MIN_PARALLEL_WORK {
        par::map_slice(batch, |e| sample_terms(head, e))
    } else {
        batch.iter().map(|e| sample_terms(head, e)).collect()
    }
}

fn accumulate(head: &LinearHead, batch: &[Example<'_>], terms: &[(f64, Vec<f64>)]) -> (f64, Vec<f64>) {
    let k = head.features;
    let mut grads = vec![0.0; head.params_len()];
    let mut loss_sum = 0.0;
    for (e, (loss, dz)) in batch.iter().zip(terms) {
        loss_sum += loss;
        let (gw, gb) = grads.split_at_mut(head.weights.len());
        for (c, &d) in dz.iter().enumerate() {
            for (g, &x) in gw[c * k..(c + 1) * k].iter_mut().zip(e.features) {
                *g += d * x;
            }
            gb[c] += d;
        }
    }
    (loss_sum, grads)
}

/// Shuffle RNG for one epoch: the session seed keys the generator and the
/// epoch index picks the stream.
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// Fraction of examples whose argmax prediction matches the label.
pub fn accuracy(head: &LinearHead, examples: &[Example<'_>]) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    let hits = examples
        .iter()
        .filter(|e| argmax_class(&raw_logits(head, e.features)).ok() == Some(e.label))
        .count();
    hits as f64 / examples.len() as f64
}

/// Trains a zero-initialized head.
///
/// `on_epoch` fires after every epoch. When `cancel` is set the run stops
/// before the next batch and returns [`Error::Cancelled`].
pub fn train(
    classes: usize,
    examples: &[Example<'_>],
    config: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(EpochProgress),
    cancel: Option<&AtomicBool>,
) -> Result<(LinearHead, TrainReport)> {
    config.validate()?;
    let dim = validate_examples(classes, examples)?;
    let started = Instant::now();

    let mut head = init_head(classes, dim)?;
    let mut adam = AdamState::new(head.params_len());
    let mut params = vec![0.0; head.params_len()];
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.sort_unstable();
        order.shuffle(&mut epoch_rng(seed, epoch));
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            if cancel.is_some_and(|c| c.load(Ordering::Relaxed)) {
                return Err(Error::Cancelled);
            }
            let batch: Vec<Example<'_>> = chunk.iter().map(|&i| examples[i]).collect();
            let terms = per_sample_terms(&head, &batch);
            let (batch_loss, mut grads) = accumulate(&head, &batch, &terms);
            loss_sum += batch_loss;
            let n = batch.len() as f64;
            grads.iter_mut().for_each(|g| *g /= n);
            adam_step(&mut params, &grads, &mut adam, config)?;
            let (w, b) = params.split_at(head.weights.len());
            head.weights.copy_from_slice(w);
            head.bias.copy_from_slice(b);
        }
        let mean_loss = loss_sum / examples.len() as f64;
        epoch_losses.push(mean_loss);
        on_epoch(EpochProgress { epoch: epoch + 1, epochs: config.epochs, mean_loss });
    }

    if head.weights.iter().chain(&head.bias).any(|v| !v.is_finite()) {
        return Err(Error::invalid("training diverged to non-finite parameters"));
    }
    let report = TrainReport {
        train_accuracy: accuracy(&head, examples),
        epoch_losses,
        training_ms: started.elapsed().as_secs_f64() * 1e3,
    };
    Ok((head, report))
}

/// Probabilities for one GAP vector.
pub fn predict(head: &LinearHead, gap: &[f64]) -> Result<Probabilities> {
    Ok(softmax(&forward(head, gap)?))
}
