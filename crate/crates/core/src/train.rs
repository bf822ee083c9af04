//! Training machinery: losses, the learning-rate schedule, gradient
//! clipping, AdamW, finite-difference gradient checks, and the training
//! loop itself.
//!
//! Everything here is deterministic given the run seed. Batches are
//! shuffled from a purpose-tagged stream, dropout replays from
//! (seed, step, layer) keys, and the optimizer touches only the flat
//! trainable-parameter vector, so two runs with identical configs produce
//! bitwise-identical checkpoints.

use crate::adapters::{AdapterKind, DropoutKey, LinearLayer};
use crate::error::{Error, Result};
use crate::io::{fmt_f64, sha256_hex};
use crate::linalg::Matrix;
use crate::model::{EvalSummary, Model};
use crate::rng::stream;
use crate::tasks::Dataset;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

/// Finite-difference step for gradient checks.
pub const FD_STEP: f64 = 1e-5;
/// Relative tolerance for gradient checks.
pub const FD_REL_TOL: f64 = 1e-6;
/// Absolute floor below which gradient disagreement is ignored.
pub const FD_ABS_TOL: f64 = 1e-8;

// --- Losses ----------------------------------------------------------------

/// Mean squared error over all entries, with its gradient at `pred`.
pub fn mse(pred: &Matrix, target: &Matrix) -> Result<(f64, Matrix)> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "mse: prediction {}x{} vs target {}x{}",
            pred.rows(),
            pred.cols(),
            target.rows(),
            target.cols()
        )));
    }
    let count = (pred.rows() * pred.cols()) as f64;
    let mut loss = 0.0;
    let mut grad = pred.clone();
    for (g, t) in grad.data_mut().iter_mut().zip(target.data()) {
        let d = *g - t;
        loss += d * d;
        *g = 2.0 * d / count;
    }
    Ok((loss / count, grad))
}

/// Mean cross-entropy of row-wise softmax against integer targets, with
/// its gradient at the logits. Uses the log-sum-exp shift for stability.
pub fn softmax_cross_entropy(logits: &Matrix, targets: &[usize]) -> Result<(f64, Matrix)> {
    if targets.len() != logits.rows() {
        return Err(Error::Shape(format!(
            "cross entropy: {} logit rows vs {} targets",
            logits.rows(),
            targets.len()
        )));
    }
    let classes = logits.cols();
    if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
        return Err(Error::Shape(format!(
            "cross entropy: target {bad} out of range for {classes} classes"
        )));
    }
    let batch = logits.rows() as f64;
    let mut loss = 0.0;
    let mut grad = logits.clone();
    for (i, &target) in targets.iter().enumerate() {
        let row = grad.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        loss += sum.ln() - (row[target].ln());
        for (j, v) in row.iter_mut().enumerate() {
            let p = *v / sum;
            *v = (p - if j == target { 1.0 } else { 0.0 }) / batch;
        }
    }
    Ok((loss / batch, grad))
}

/// Fraction of rows whose argmax matches the target; ties go to the
/// lowest index.
pub fn accuracy(logits: &Matrix, targets: &[usize]) -> f64 {
    if targets.is_empty() {
        return 0.0;
    }
    let mut hits = 0usize;
    for (i, &target) in targets.iter().enumerate() {
        let row = logits.row(i);
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best == target {
            hits += 1;
        }
    }
    hits as f64 / targets.len() as f64
}

// --- Schedule ---------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    #[default]
    Cosine,
}

/// Learning rate at an optimizer step. Linear warmup from 0 reaches
/// `base_lr` exactly at `warmup_steps`; a cosine schedule then decays to 0
/// at `total_steps`, while a constant schedule stays at `base_lr`.
pub fn lr_at(
    step: usize,
    total_steps: usize,
    base_lr: f64,
    warmup_steps: usize,
    schedule: Schedule,
) -> f64 {
    if warmup_steps > 0 && step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    match schedule {
        Schedule::Constant => base_lr,
        Schedule::Cosine => {
            let span = total_steps.saturating_sub(warmup_steps);
            let progress = if span == 0 {
                1.0
            } else {
                ((step - warmup_steps) as f64 / span as f64).min(1.0)
            };
            base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

/// Default base learning rate for an adapter kind. The diagonal-scaling
/// adapter tolerates (and needs) a much hotter rate than dense updates.
pub fn default_lr(kind: AdapterKind) -> f64 {
    match kind {
        AdapterKind::Hyper => 3e-3,
        _ => 1e-4,
    }
}

// --- Clipping ---------------------------------------------------------------

/// Scales `grads` so its global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            *g *= scale;
        }
    }
    norm
}

// --- AdamW -------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moment accumulators for one flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    /// One bias-corrected AdamW update with decoupled weight decay on the
    /// pre-update parameter value.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, cfg: &AdamConfig) {
        assert_eq!(params.len(), self.m.len(), "optimizer state size");
        assert_eq!(grads.len(), self.m.len(), "gradient size");
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            let p = params[i];
            params[i] = p - lr * m_hat / (v_hat.sqrt() + cfg.eps) - lr * cfg.weight_decay * p;
        }
    }
}

// --- Config -------------------------------------------------------------------

fn default_warmup() -> usize {
    100
}

fn default_max_grad_norm() -> Option<f64> {
    Some(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Base learning rate; defaults per adapter kind when absent.
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
    #[serde(default)]
    pub schedule: Schedule,
    /// Global gradient-norm ceiling; null disables clipping.
    #[serde(default = "default_max_grad_norm")]
    pub max_grad_norm: Option<f64>,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Drives epoch shuffling and dropout replay.
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if let Some(lr) = self.lr {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Config(format!("lr must be positive, got {lr}")));
            }
        }
        if let Some(c) = self.max_grad_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config(format!(
                    "max_grad_norm must be positive, got {c}"
                )));
            }
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if !(a.eps.is_finite() && a.eps > 0.0) || !(a.weight_decay.is_finite() && a.weight_decay >= 0.0) {
            return Err(Error::Config("adam eps/weight_decay out of range".into()));
        }
        Ok(())
    }
}

// --- Gradient checking ----------------------------------------------------------

/// Central-difference check of [`LinearLayer::backward`] against the
/// scalar objective L(θ, x) = Σ g_y ∘ forward(x). Perturbs every trainable
/// parameter and every input entry, and returns the worst ratio
/// |fd − analytic| / (rel·scale + abs); ratios ≤ 1 pass. The dropout key,
/// when given, is replayed identically on every evaluation, so the check
/// remains valid with dropout active.
pub fn layer_gradient_check(
    layer: &mut LinearLayer,
    x: &Matrix,
    g_y: &Matrix,
    dropout: Option<DropoutKey>,
) -> Result<f64> {
    let objective = |layer: &LinearLayer, x: &Matrix| -> Result<f64> {
        let y = layer.forward(x, dropout)?;
        Ok(y.data().iter().zip(g_y.data()).map(|(a, b)| a * b).sum())
    };
    let (analytic_params, analytic_x) = layer.backward(x, g_y, dropout)?;

    let mut worst: f64 = 0.0;
    let mut params = layer.params();
    for k in 0..params.len() {
        let saved = params[k];
        params[k] = saved + FD_STEP;
        layer.set_params(&params)?;
        let plus = objective(layer, x)?;
        params[k] = saved - FD_STEP;
        layer.set_params(&params)?;
        let minus = objective(layer, x)?;
        params[k] = saved;
        layer.set_params(&params)?;
        let fd = (plus - minus) / (2.0 * FD_STEP);
        worst = worst.max(grad_error_ratio(fd, analytic_params[k]));
    }

    let mut xp = x.clone();
    for k in 0..xp.data().len() {
        let saved = xp.data()[k];
        xp.data_mut()[k] = saved + FD_STEP;
        let plus = objective(layer, &xp)?;
        xp.data_mut()[k] = saved - FD_STEP;
        let minus = objective(layer, &xp)?;
        xp.data_mut()[k] = saved;
        let fd = (plus - minus) / (2.0 * FD_STEP);
        worst = worst.max(grad_error_ratio(fd, analytic_x.data()[k]));
    }
    Ok(worst)
}

/// |fd − analytic| measured against rel·max(|fd|, |analytic|) + abs.
pub fn grad_error_ratio(fd: f64, analytic: f64) -> f64 {
    let scale = fd.abs().max(analytic.abs());
    (fd - analytic).abs() / (FD_REL_TOL * scale + FD_ABS_TOL)
}

// --- Training loop --------------------------------------------------------------

/// One optimizer step on the loss curve. `loss` is measured before the
/// update, so step 0 records the untouched model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainResult {
    pub config: TrainConfig,
    pub resolved_lr: f64,
    pub steps: usize,
    pub loss_curve: Vec<LossPoint>,
    /// Full-train-split loss of the final parameters, dropout off.
    pub final_train_loss: f64,
    pub eval: EvalSummary,
    /// SHA-256 over the final trainable parameters, little-endian.
    pub param_checksum: String,
}

/// `step,lr,loss` rows with 17-significant-digit floats, so equal curves
/// serialize to equal bytes.
pub fn loss_curve_csv(curve: &[LossPoint]) -> String {
    let mut out = String::from("step,lr,loss\n");
    for p in curve {
        out.push_str(&format!("{},{},{}\n", p.step, fmt_f64(p.lr), fmt_f64(p.loss)));
    }
    out
}

/// Learning rate used when the config leaves `lr` unset: the
/// diagonal-scaling default when every trainable layer is that kind and
/// the embeddings are frozen, the conservative default otherwise.
pub fn resolve_lr(model: &Model, cfg: &TrainConfig) -> f64 {
    if let Some(lr) = cfg.lr {
        return lr;
    }
    let trainable: Vec<AdapterKind> = model
        .layers()
        .iter()
        .map(|l| l.kind())
        .filter(|k| k.is_trainable())
        .collect();
    let uniform_hyper = !trainable.is_empty()
        && trainable.iter().all(|k| *k == AdapterKind::Hyper)
        && !model.spec().train_embeddings;
    if uniform_hyper {
        default_lr(AdapterKind::Hyper)
    } else {
        default_lr(AdapterKind::Full)
    }
}

/// Minibatch AdamW training with warmup plus decay, gradient clipping,
/// and per-epoch reshuffling.
///
/// Invariants the loop enforces rather than assumes: a non-finite loss
/// aborts with the failing step, warmup cannot outlast the run, and the
/// frozen weights are hash-verified after the last update. When one batch
/// covers the whole train split the epoch shuffle is skipped, so losses
/// sum in the dataset's natural order and a zero-update run reproduces
/// the evaluation loss bit for bit.
pub fn train(model: &mut Model, data: &Dataset, cfg: &TrainConfig) -> Result<TrainResult> {
    cfg.validate()?;
    let n = data.train_len();
    if n == 0 {
        return Err(Error::Config("training split is empty".into()));
    }
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    if total_steps > 0 && cfg.warmup_steps > total_steps {
        return Err(Error::Config(format!(
            "warmup_steps {} exceeds the run's {total_steps} total steps",
            cfg.warmup_steps
        )));
    }
    let base_lr = resolve_lr(model, cfg);
    let frozen_before = model.frozen_hashes();

    let mut params = model.params();
    let mut adam = AdamState::new(params.len());
    let mut curve = Vec::with_capacity(total_steps);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        if cfg.batch_size < n {
            order.shuffle(&mut stream(cfg.seed, "shuffle", &[epoch as u64]));
        }
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.gather_train(chunk)?;
            let key = DropoutKey {
                seed: cfg.seed,
                step: step as u64,
            };
            let (loss, mut grads) = model.loss_and_grads(&batch.as_batch(), Some(key))?;
            if !loss.is_finite() {
                return Err(Error::NanLoss { step });
            }
            let lr = lr_at(step, total_steps, base_lr, cfg.warmup_steps, cfg.schedule);
            curve.push(LossPoint { step, lr, loss });
            if let Some(ceiling) = cfg.max_grad_norm {
                clip_global_norm(&mut grads, ceiling);
            }
            adam.step(&mut params, &grads, lr, &cfg.adam);
            model.set_params(&params)?;
            step += 1;
        }
    }

    if model.frozen_hashes() != frozen_before {
        return Err(Error::Structure(
            "frozen weights changed during training".into(),
        ));
    }
    let final_train_loss = model.loss(&data.train_batch())?;
    if !final_train_loss.is_finite() {
        return Err(Error::NanLoss { step });
    }
    let eval = model.evaluate(&data.eval_batch())?;
    let mut bytes = Vec::with_capacity(params.len() * 8);
    for v in &params {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    Ok(TrainResult {
        config: cfg.clone(),
        resolved_lr: base_lr,
        steps: step,
        loss_curve: curve,
        final_train_loss,
        eval,
        param_checksum: sha256_hex(&bytes),
    })
}
