//! End-to-end supervised training: cross-entropy over class tokens,
//! reverse-mode gradients, Adam, and early stopping on validation balanced
//! accuracy.

use ndarray::{Array2, ArrayD, Ix2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureWindow;
use crate::metrics;
use crate::model::{Model, ModelParameters, Tape};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error("metrics: {0}")]
    Metrics(#[from] metrics::MetricsError),
}

/// Training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    /// Stop after this many consecutive epochs without a new best
    /// validation balanced accuracy.
    pub patience: usize,
    /// Hard bound on epochs, on top of patience.
    pub epoch_cap: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 32,
            patience: 20,
            epoch_cap: 1000,
            seed: 0,
        }
    }
}

/// Probability clamp inside the loss.
pub const PROB_FLOOR: f64 = 1e-12;

/// Mean cross-entropy over the L class tokens:
/// `-1/L * sum_l ln(max(probs[l][labels[l]], 1e-12))`.
pub fn loss(probs: &Array2<f64>, labels: &[u8]) -> Result<f64, TrainError> {
    if probs.nrows() != labels.len() || probs.ncols() != 2 {
        return Err(TrainError::ShapeMismatch(format!(
            "probs {:?} vs {} labels",
            probs.shape(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (row, &y) in probs.rows().into_iter().zip(labels) {
        total -= row[usize::from(y != 0)].max(PROB_FLOOR).ln();
    }
    Ok(total / labels.len() as f64)
}

/// Loss and exact gradients of one window under a fixed dropout stream.
/// Gradients come back in parameter visit order.
fn window_gradients(
    model: &Model,
    window: &FeatureWindow,
    dropout_rng: Option<ChaCha20Rng>,
) -> Result<(f64, Vec<ArrayD<f64>>), TrainError> {
    let mut tape = Tape::new();
    let mut rng = dropout_rng;
    let graph = model.build_graph(&mut tape, &window.features, rng.as_mut())?;

    let idx: Vec<usize> = window.labels.iter().map(|&y| usize::from(y != 0)).collect();
    let picked = tape.pick_per_row(graph.probs, std::sync::Arc::new(idx));
    let logs = tape.ln_clamped(picked, PROB_FLOOR);
    let mean = tape.mean(logs);
    let loss_var = tape.neg(mean);
    let loss_value = tape.value(loss_var).sum();

    let mut grads = tape.backward(loss_var);
    let out: Vec<ArrayD<f64>> = graph
        .params
        .iter()
        .map(|(_, var)| {
            grads
                .take(*var)
                .unwrap_or_else(|| ArrayD::zeros(tape.value(*var).raw_dim()))
        })
        .collect();
    Ok((loss_value, out))
}

/// Dropout rng of one window slot within one optimizer step. Tying streams
/// to `(step, position)` keeps masks identical across reruns and thread
/// schedules.
fn window_rng(seed: u64, step: u64, position: usize) -> ChaCha20Rng {
    let mut r = ChaCha20Rng::seed_from_u64(seed);
    r.set_stream(step.wrapping_mul(1 << 20).wrapping_add(position as u64));
    r
}

/// Mean batch loss under the exact dropout masks `batch_gradients` would
/// use, without computing gradients. The finite-difference oracle depends
/// on this pairing.
pub fn batch_loss(
    model: &Model,
    batch: &[&FeatureWindow],
    seed: u64,
    step: u64,
    dropout: bool,
) -> Result<f64, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyDataset("loss batch"));
    }
    let mut total = 0.0;
    for (i, window) in batch.iter().enumerate() {
        let mut rng = dropout.then(|| window_rng(seed, step, i));
        let probs = model.forward(&window.features, rng.as_mut())?;
        total += loss(&probs, &window.labels)?;
    }
    Ok(total / batch.len() as f64)
}

/// Mean loss and gradients over a batch of windows.
///
/// Dropout masks are derived from `(seed, window position)` so results do
/// not depend on thread scheduling; the per-window gradients are reduced in
/// batch order for bit-stable sums.
pub fn batch_gradients(
    model: &Model,
    batch: &[&FeatureWindow],
    seed: u64,
    step: u64,
    dropout: bool,
) -> Result<(f64, Vec<ArrayD<f64>>), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyDataset("gradient batch"));
    }
    let per_window: Vec<Result<(f64, Vec<ArrayD<f64>>), TrainError>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, window)| {
            let rng = dropout.then(|| window_rng(seed, step, i));
            window_gradients(model, window, rng)
        })
        .collect();

    let mut total_loss = 0.0;
    let mut acc: Option<Vec<ArrayD<f64>>> = None;
    for item in per_window {
        let (l, grads) = item?;
        total_loss += l;
        match &mut acc {
            None => acc = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(grads) {
                    *a += &g;
                }
            }
        }
    }
    let n = batch.len() as f64;
    let mut grads = acc.unwrap();
    for g in &mut grads {
        *g /= n;
    }
    let mean_loss = total_loss / n;
    if !mean_loss.is_finite() {
        return Err(TrainError::NonFiniteLoss { step });
    }
    Ok((mean_loss, grads))
}

/// Adam moments, shape-matched to the parameters in visit order.
pub struct AdamState {
    pub m: Vec<ArrayD<f64>>,
    pub v: Vec<ArrayD<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParameters) -> Self {
        let mut m = Vec::new();
        params.visit(|_, t| m.push(ArrayD::zeros(t.raw_dim())));
        let v = m.clone();
        AdamState { m, v, step: 0 }
    }
}

/// One bias-corrected Adam update over every tensor.
pub fn adam_step(
    params: &mut ModelParameters,
    state: &mut AdamState,
    grads: &[ArrayD<f64>],
    config: &TrainConfig,
) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    let mut i = 0usize;
    params.visit_mut(|_, slice| {
        let g = grads[i].as_slice().expect("contiguous gradient");
        let m = state.m[i].as_slice_mut().unwrap();
        let v = state.v[i].as_slice_mut().unwrap();
        for j in 0..slice.len() {
            m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * g[j];
            v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            slice[j] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
        i += 1;
    });
}

/// Early-stopping bookkeeping: strictly-greater improvements reset the
/// counter; `should_stop` fires after `patience` stale epochs.
pub struct EarlyStopper {
    pub patience: usize,
    pub best: Option<f64>,
    pub since_best: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: None,
            since_best: 0,
        }
    }

    /// Record an epoch's validation score; returns true when it is a new
    /// best.
    pub fn observe(&mut self, score: f64) -> bool {
        match self.best {
            Some(best) if score <= best => {
                self.since_best += 1;
                false
            }
            _ => {
                self.best = Some(score);
                self.since_best = 0;
                true
            }
        }
    }

    pub fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }
}

/// Per-epoch training record, one line of the emitted history.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_balanced_accuracy: f64,
    pub is_best: bool,
}

/// Frame-level predictions of a window set, concatenated.
pub fn predict_all(model: &Model, windows: &[FeatureWindow]) -> Result<(Vec<u8>, Vec<u8>), TrainError> {
    let results: Vec<Result<(Vec<u8>, Vec<u8>), TrainError>> = windows
        .par_iter()
        .map(|w| {
            let probs = model.forward(&w.features, None)?;
            Ok((w.labels.clone(), crate::model::predict_labels(&probs)))
        })
        .collect();
    let mut truth = Vec::new();
    let mut pred = Vec::new();
    for r in results {
        let (t, p) = r?;
        truth.extend(t);
        pred.extend(p);
    }
    Ok((truth, pred))
}

/// Balanced accuracy of the model over a window set (frames concatenated).
pub fn balanced_accuracy(model: &Model, windows: &[FeatureWindow]) -> Result<f64, TrainError> {
    let (truth, pred) = predict_all(model, windows)?;
    Ok(metrics::balanced_accuracy(&truth, &pred)?.value)
}

/// Plain frame accuracy of the model over a window set.
pub fn frame_accuracy(model: &Model, windows: &[FeatureWindow]) -> Result<f64, TrainError> {
    let (truth, pred) = predict_all(model, windows)?;
    let correct = truth.iter().zip(&pred).filter(|(t, p)| t == p).count();
    Ok(100.0 * correct as f64 / truth.len().max(1) as f64)
}

/// Train until validation balanced accuracy stops improving for
/// `config.patience` epochs (or the epoch cap). Returns the best-epoch
/// snapshot and the full history. `on_epoch` fires after every epoch with
/// the current stats and parameters (for checkpointing).
pub fn train(
    mut model: Model,
    train_set: &[FeatureWindow],
    val_set: &[FeatureWindow],
    config: &TrainConfig,
    mut on_epoch: Option<&mut dyn FnMut(&EpochStats, &ModelParameters)>,
) -> Result<(ModelParameters, Vec<EpochStats>), TrainError> {
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset("training set"));
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptyDataset("validation set"));
    }

    let mut adam = AdamState::new(&model.params);
    let mut stopper = EarlyStopper::new(config.patience);
    let mut best_params = model.params.clone();
    let mut history = Vec::new();
    let dropout = model.params.config.dropout > 0.0;

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=config.epoch_cap {
        let mut shuffle_rng = ChaCha20Rng::seed_from_u64(config.seed);
        shuffle_rng.set_stream(0x0E90Cu64.wrapping_add(epoch as u64));
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size.max(1)) {
            let batch: Vec<&FeatureWindow> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (l, grads) =
                batch_gradients(&model, &batch, config.seed, adam.step, dropout)?;
            adam_step(&mut model.params, &mut adam, &grads, config);
            epoch_loss += l;
            batches += 1;
        }

        let val_score = balanced_accuracy(&model, val_set)?;
        let is_best = stopper.observe(val_score);
        if is_best {
            best_params = model.params.clone();
        }
        let stats = EpochStats {
            epoch,
            train_loss: epoch_loss / batches as f64,
            val_balanced_accuracy: val_score,
            is_best,
        };
        if let Some(hook) = on_epoch.as_deref_mut() {
            hook(&stats, &model.params);
        }
        history.push(stats);
        if stopper.should_stop() {
            break;
        }
    }
    Ok((best_params, history))
}
