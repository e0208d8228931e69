//! CTC training with Nesterov-momentum mini-batch SGD.
//!
//! Inputs are prepared exactly as the streaming spotter prepares them
//! (stacking, then running CMVN seeded from the model's stored prior), so a
//! trained model sees the same feature distribution at inference time.

mod data;

pub use data::{
    parse_manifest, phoneme_indices, read_manifest, ManifestEntry, TrainingSet, Utterance,
};

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::ctc::loss_and_grad;
use crate::error::{KwsError, Result};
use crate::features::{prepare_inputs, CmvnStats, FrontendConfig};
use crate::network::{Gradients, ModelParameters};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    /// Parameters start uniform on `(-init_range, init_range)`.
    pub init_range: f64,
    /// Utterances per update.
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Halve the learning rate when the relative dev-loss improvement of an
    /// epoch falls below this.
    pub halving_improvement_threshold: f64,
    pub stop_lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.008,
            momentum: 0.9,
            init_range: 0.02,
            batch_size: 8,
            max_epochs: 100,
            halving_improvement_threshold: 0.005,
            stop_lr: 1e-5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// A learning rate of 0 is accepted and turns training into evaluation.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(KwsError::InvalidParams(m.into()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if !(self.init_range > 0.0 && self.init_range.is_finite()) {
            return bad("init_range must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.stop_lr >= 0.0) || !(self.halving_improvement_threshold >= 0.0) {
            return bad("stop_lr and halving threshold must be non-negative");
        }
        Ok(())
    }

    /// The same schedule with a tenth of the learning rate, for fine-tuning.
    pub fn for_adaptation(&self) -> Self {
        TrainConfig {
            learning_rate: self.learning_rate / 10.0,
            ..self.clone()
        }
    }
}

/// A model with every weight and bias drawn i.i.d. from
/// `uniform(-init_range, init_range)` (as `f32`) by a generator seeded with
/// `config.seed`. The CMVN prior is left at zero mean and unit variance.
pub fn initialize(
    frontend: FrontendConfig,
    hidden: &[usize],
    inventory: Vec<String>,
    config: &TrainConfig,
) -> Result<ModelParameters> {
    config.validate()?;
    if inventory.len() < 2 || hidden.contains(&0) {
        return Err(KwsError::InvalidParams(
            "need at least one label besides blank and non-empty hidden layers".into(),
        ));
    }
    frontend.frame.validate()?;
    let mut model = ModelParameters::zeros(frontend, hidden, inventory);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let r = config.init_range as f32;
    for layer in &mut model.layers {
        for t in layer.tensors_mut() {
            t.iter_mut().for_each(|v| *v = rng.gen_range(-r..r) as f64);
        }
    }
    Ok(model)
}

/// Stores the mean and variance of `set`'s stacked inputs in the model as
/// the streaming CMVN prior. Call before training.
pub fn set_cmvn_prior(model: &mut ModelParameters, set: &TrainingSet) {
    let (mean, var) = set.input_statistics(&model.frontend);
    model.cmvn_mean = mean;
    model.cmvn_var = var;
}

/// Momentum buffers, shaped like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct NesterovState {
    pub velocity: Gradients,
}

impl NesterovState {
    pub fn new(model: &ModelParameters) -> Self {
        NesterovState {
            velocity: Gradients::zeros_like(model),
        }
    }

    /// The lookahead point `theta + momentum * v` where the gradient is taken.
    pub fn lookahead(&self, model: &ModelParameters, momentum: f64) -> ModelParameters {
        let mut ahead = model.clone();
        for (l, v) in ahead.layers.iter_mut().zip(&self.velocity.layers) {
            for (t, tv) in l.tensors_mut().into_iter().zip(v.tensors()) {
                t.iter_mut().zip(tv).for_each(|(p, &vv)| *p += momentum * vv);
            }
        }
        ahead
    }

    /// `v <- momentum v - lr g; theta <- theta + v`, then rounds the
    /// parameters to `f32` so the in-memory model equals its saved form.
    pub fn step(&mut self, model: &mut ModelParameters, grad: &Gradients, lr: f64, momentum: f64) {
        for ((l, v), g) in model
            .layers
            .iter_mut()
            .zip(&mut self.velocity.layers)
            .zip(&grad.layers)
        {
            for ((t, tv), tg) in l.tensors_mut().into_iter().zip(v.tensors_mut()).zip(g.tensors()) {
                nesterov_update(t, tv, tg, lr, momentum);
            }
        }
    }
}

fn nesterov_update(theta: &mut [f64], v: &mut [f64], g: &[f64], lr: f64, momentum: f64) {
    for ((p, vv), &gg) in theta.iter_mut().zip(v.iter_mut()).zip(g) {
        *vv = momentum * *vv - lr * gg;
        *p = (*p + *vv) as f32 as f64;
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-frame CTC loss over the epoch's batches.
    pub train_loss: f64,
    /// Mean per-frame CTC loss on the dev set after the epoch.
    pub dev_loss: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
    /// Training utterances skipped as too short for their transcript.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    /// Dev loss of the starting model.
    pub initial_dev_loss: f64,
    pub epochs: Vec<EpochStats>,
    /// Epoch whose model was returned; 0 means the starting model.
    pub best_epoch: usize,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,dev_loss,lr,skipped\n");
        for e in &self.epochs {
            writeln!(
                s,
                "{},{:.9},{:.9},{:e},{}",
                e.epoch, e.train_loss, e.dev_loss, e.lr, e.skipped
            )
            .unwrap();
        }
        s
    }
}

struct UttResult {
    loss: f64,
    frames: usize,
    grad: Option<Gradients>,
}

/// Loss (summed over frames) and optionally the gradient for one utterance;
/// `None` when the utterance is too short for its transcript.
fn utterance_loss(
    model: &ModelParameters,
    prior: &CmvnStats,
    u: &Utterance,
    with_grad: bool,
) -> Result<Option<UttResult>> {
    if !u.feasible() {
        return Ok(None);
    }
    let inputs = prepare_inputs(&u.frames, &model.frontend, prior);
    let (y, cache) = model.forward_cached(&inputs)?;
    let out = loss_and_grad(&u.labels, &y)?;
    let grad = if with_grad {
        Some(model.backward(&cache, &out.grad_logits)?)
    } else {
        None
    };
    Ok(Some(UttResult {
        loss: out.loss,
        frames: u.frames.len(),
        grad,
    }))
}

fn non_finite(epoch: usize, batch: usize, detail: String) -> KwsError {
    KwsError::NonFinite {
        epoch,
        batch,
        detail,
    }
}

/// Mean per-frame CTC loss of `model` on `set`, skipping infeasible items.
pub fn evaluate_loss(model: &ModelParameters, set: &TrainingSet) -> Result<f64> {
    let prior = model.cmvn_prior();
    let results: Vec<_> = set
        .items
        .par_iter()
        .map(|u| utterance_loss(model, &prior, u, false))
        .collect::<Result<_>>()?;
    let (loss, frames) = results
        .into_iter()
        .flatten()
        .fold((0.0, 0usize), |(l, f), r| (l + r.loss, f + r.frames));
    if frames == 0 {
        return Err(KwsError::InsufficientData("no feasible utterance to evaluate".into()));
    }
    Ok(loss / frames as f64)
}

/// One shuffled pass over `set` in mini-batches with Nesterov updates.
/// Per-utterance gradients are computed in parallel and summed in input
/// order, so the result does not depend on the thread count.
pub fn train_epoch(
    model: &mut ModelParameters,
    set: &TrainingSet,
    dev: &TrainingSet,
    config: &TrainConfig,
    lr: f64,
    epoch: usize,
    state: &mut NesterovState,
) -> Result<EpochStats> {
    let prior = model.cmvn_prior();
    let mut order: Vec<usize> = (0..set.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);

    let (mut loss_sum, mut frame_sum, mut skipped) = (0.0, 0usize, 0usize);
    for (b, batch) in order.chunks(config.batch_size).enumerate() {
        let ahead = state.lookahead(model, config.momentum);
        let results: Vec<_> = batch
            .par_iter()
            .map(|&i| utterance_loss(&ahead, &prior, &set.items[i], true))
            .collect::<Result<_>>()?;
        let mut grad = Gradients::zeros_like(model);
        let (mut batch_loss, mut batch_frames) = (0.0, 0usize);
        for r in results {
            match r {
                None => skipped += 1,
                Some(r) => {
                    if !r.loss.is_finite() {
                        return Err(non_finite(epoch, b, format!("utterance loss {}", r.loss)));
                    }
                    batch_loss += r.loss;
                    batch_frames += r.frames;
                    grad.add_assign(r.grad.as_ref().expect("gradient requested"));
                }
            }
        }
        if batch_frames == 0 {
            continue;
        }
        grad.scale(1.0 / batch_frames as f64);
        state.step(model, &grad, lr, config.momentum);
        if model
            .layers
            .iter()
            .any(|l| l.tensors().iter().any(|t| t.iter().any(|v| !v.is_finite())))
        {
            return Err(non_finite(
                epoch,
                b,
                format!("parameters diverged at learning rate {lr}"),
            ));
        }
        loss_sum += batch_loss;
        frame_sum += batch_frames;
    }
    if frame_sum == 0 {
        return Err(KwsError::InsufficientData(
            "every training utterance is too short for its transcript".into(),
        ));
    }
    let dev_loss = evaluate_loss(model, dev)?;
    if !dev_loss.is_finite() {
        return Err(non_finite(epoch, 0, format!("dev loss {dev_loss}")));
    }
    Ok(EpochStats {
        epoch,
        train_loss: loss_sum / frame_sum as f64,
        dev_loss,
        lr,
        skipped,
    })
}

/// Trains until the learning rate drops below `stop_lr` or `max_epochs`
/// pass. The learning rate halves whenever an epoch improves the dev loss by
/// less than `halving_improvement_threshold` (relative). Returns the model
/// with the lowest dev loss seen, which may be the starting model.
pub fn fit(
    model: ModelParameters,
    train: &TrainingSet,
    dev: &TrainingSet,
    config: &TrainConfig,
) -> Result<(ModelParameters, TrainReport)> {
    fit_with(model, train, dev, config, |_| {})
}

/// [`fit`] with a callback after every epoch (progress reporting).
pub fn fit_with(
    mut model: ModelParameters,
    train: &TrainingSet,
    dev: &TrainingSet,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(ModelParameters, TrainReport)> {
    config.validate()?;
    model.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(KwsError::Contract("training and dev sets must be non-empty".into()));
    }
    let mut report = TrainReport {
        initial_dev_loss: evaluate_loss(&model, dev)?,
        ..TrainReport::default()
    };
    let mut best = (report.initial_dev_loss, model.clone());
    let mut prev = report.initial_dev_loss;
    let mut lr = config.learning_rate;
    let mut state = NesterovState::new(&model);
    for epoch in 1..=config.max_epochs {
        if lr < config.stop_lr || lr == 0.0 {
            break;
        }
        let stats = train_epoch(&mut model, train, dev, config, lr, epoch, &mut state)?;
        on_epoch(&stats);
        report.epochs.push(stats);
        if stats.dev_loss < best.0 {
            best = (stats.dev_loss, model.clone());
            report.best_epoch = epoch;
        }
        if halving_due(prev, stats.dev_loss, config.halving_improvement_threshold) {
            lr /= 2.0;
        }
        prev = stats.dev_loss;
    }
    Ok((best.1, report))
}

fn halving_due(prev: f64, cur: f64, threshold: f64) -> bool {
    (prev - cur) / prev.abs().max(f64::MIN_POSITIVE) < threshold
}

/// Fine-tunes an already trained model on keyword-specific data. `config`
/// should carry the reduced learning rate (see [`TrainConfig::for_adaptation`]).
pub fn adapt(
    model: ModelParameters,
    keyword_set: &TrainingSet,
    dev: &TrainingSet,
    config: &TrainConfig,
) -> Result<(ModelParameters, TrainReport)> {
    fit(model, keyword_set, dev, config)
}
