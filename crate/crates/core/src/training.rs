//! Losses, Adam with decoupled weight decay, the learning-rate schedule and
//! the epoch loop with best-validation checkpointing.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{FUTURE_LEN, PAST_LEN};
use crate::error::{Error, Result};
use crate::ingest::Sample;
use crate::model::{Branch, DivrModel, ForwardVars, Matrix, ModelInput, ParamStore, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Per-epoch multiplicative learning-rate decay.
    pub gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    /// Stop after this many optimizer steps, even mid-epoch.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-4,
            gamma: 0.99,
            epochs: 100,
            batch_size: 16,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 5.0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("gamma", self.gamma),
            ("eps", self.eps),
            ("clip_norm", self.clip_norm),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::invalid(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_at(self.lr, self.gamma, epoch)
    }
}

pub fn lr_at(lr0: f64, gamma: f64, epoch: usize) -> f64 {
    lr0 * gamma.powi(epoch as i32)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(rename = "L_total")]
    pub total: f64,
    #[serde(rename = "L_trans")]
    pub trans: f64,
    #[serde(rename = "L_rec")]
    pub rec: f64,
    #[serde(rename = "L_des")]
    pub des: f64,
}

impl LossBreakdown {
    fn accumulate(&mut self, other: &LossBreakdown) {
        self.total += other.total;
        self.trans += other.trans;
        self.rec += other.rec;
        self.des += other.des;
    }

    fn scaled(self, s: f64) -> Self {
        Self {
            total: self.total * s,
            trans: self.trans * s,
            rec: self.rec * s,
            des: self.des * s,
        }
    }

    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let mut acc = LossBreakdown::default();
        for l in items {
            acc.accumulate(l);
        }
        acc.scaled(1.0 / items.len().max(1) as f64)
    }
}

fn check_shape(op: &'static str, m: &Matrix, want: (usize, usize)) -> Result<()> {
    if m.shape() != want {
        return Err(Error::Shape { op, left: m.shape(), right: want });
    }
    if !m.is_finite() {
        return Err(Error::NonFinite(op.into()));
    }
    Ok(())
}

fn l1(a: &Matrix, b: &Matrix) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

fn last_row(m: &Matrix) -> Matrix {
    Matrix::from_rows(&[m.row(m.rows - 1)])
}

/// Unweighted sum of the translation, reconstruction and destination L1
/// terms.
pub fn loss_total(pred: &Matrix, recon: &Matrix, gt_future: &Matrix, gt_past: &Matrix) -> Result<LossBreakdown> {
    check_shape("predicted future", pred, (FUTURE_LEN, 2))?;
    check_shape("ground-truth future", gt_future, (FUTURE_LEN, 2))?;
    check_shape("reconstruction", recon, (PAST_LEN, 2))?;
    check_shape("ground-truth past", gt_past, (PAST_LEN, 2))?;
    let trans = l1(pred, gt_future);
    let rec = l1(recon, gt_past);
    let des = l1(&last_row(pred), &last_row(gt_future));
    Ok(LossBreakdown { total: trans + rec + des, trans, rec, des })
}

/// The same loss recorded on a tape; returns the scalar total.
pub fn loss_on_tape(t: &mut Tape<'_>, out: &ForwardVars, gt_future: &Matrix, gt_past: &Matrix) -> Result<Var> {
    check_shape("ground-truth future", gt_future, (FUTURE_LEN, 2))?;
    check_shape("ground-truth past", gt_past, (PAST_LEN, 2))?;
    let trans = t.l1_mean(out.future, gt_future);
    let rec = t.l1_mean(out.reconstruction, gt_past);
    let last = t.slice_rows(out.future, FUTURE_LEN - 1, 1);
    let des = t.l1_mean(last, &last_row(gt_future));
    Ok(t.sum_all(&[trans, rec, des]))
}

/// The inputs a variant consumes from a sample.
pub fn model_input<'a>(model: &DivrModel, s: &'a Sample) -> ModelInput<'a> {
    ModelInput {
        past: &s.past,
        cloud: model.variant.uses(Branch::Gaze).then_some(&s.cloud),
        graph: model.variant.uses(Branch::Graph).then_some(&s.graph),
    }
}

pub fn sample_loss(model: &DivrModel, s: &Sample) -> Result<LossBreakdown> {
    let p = model.predict(&model_input(model, s))?;
    loss_total(&p.future, &p.reconstruction, &s.future, &s.past)
}

/// Loss and parameter gradients for one sample.
pub fn sample_gradients(model: &DivrModel, s: &Sample) -> Result<(LossBreakdown, Vec<Matrix>)> {
    let mut t = Tape::with_params(&model.params);
    let out = model.forward(&mut t, &model_input(model, s))?;
    let total = loss_on_tape(&mut t, &out, &s.future, &s.past)?;
    let breakdown = loss_total(t.value(out.future), t.value(out.reconstruction), &s.future, &s.past)?;
    if !t.value(total).is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let grads = t.backward(total).params(&t);
    Ok((breakdown, grads))
}

/// Mean loss and mean gradient over a batch; per-sample work runs in
/// parallel, the reduction runs in sample order.
pub fn batch_gradients(model: &DivrModel, batch: &[&Sample]) -> Result<(LossBreakdown, Vec<Matrix>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let per: Vec<(LossBreakdown, Vec<Matrix>)> = batch
        .par_iter()
        .map(|s| sample_gradients(model, s))
        .collect::<Result<_>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut iter = per.into_iter();
    let (mut loss, mut grads) = iter.next().expect("non-empty batch");
    for (l, g) in iter {
        loss.accumulate(&l);
        for (acc, gi) in grads.iter_mut().zip(&g) {
            acc.add_assign(gi);
        }
    }
    let grads = grads.into_iter().map(|g| g.scale(scale)).collect();
    Ok((loss.scaled(scale), grads))
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in &mut g.data {
                *v *= s;
            }
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Matrix> = params.iter().map(|(_, _, p)| Matrix::zeros(p.rows, p.cols)).collect();
        Self { m: zeros.clone(), v: zeros, step: 0 }
    }
}

/// One Adam update at the epoch's decayed learning rate. Weight decay is
/// applied directly to the parameters, outside the moment estimates.
pub fn adam_step(params: &mut ParamStore, grads: &[Matrix], state: &mut AdamState, cfg: &TrainConfig, epoch: usize) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::invalid(format!(
            "{} gradients and {} moments for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    let lr = cfg.lr_at(epoch);
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    for (i, p) in params.values_mut().enumerate() {
        let g = &grads[i];
        if g.shape() != p.shape() {
            return Err(Error::Shape { op: "adam gradient", left: g.shape(), right: p.shape() });
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for k in 0..p.data.len() {
            let gk = g.data[k];
            m.data[k] = cfg.beta1 * m.data[k] + (1.0 - cfg.beta1) * gk;
            v.data[k] = cfg.beta2 * v.data[k] + (1.0 - cfg.beta2) * gk * gk;
            let m_hat = m.data[k] / bc1;
            let v_hat = v.data[k] / bc2;
            p.data[k] -= lr * cfg.weight_decay * p.data[k];
            p.data[k] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Val,
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub split: Partition,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub lr: f64,
}

/// Where a run persists its state while it goes.
#[derive(Debug, Clone)]
pub struct RunFiles {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation loss (train loss without val).
    pub best: DivrModel,
    pub best_epoch: Option<usize>,
    pub records: Vec<MetricRecord>,
    pub steps: usize,
    pub clipped_steps: usize,
}

pub fn evaluate_loss(model: &DivrModel, samples: &[Sample]) -> Result<LossBreakdown> {
    let per: Vec<LossBreakdown> = samples.par_iter().map(|s| sample_loss(model, s)).collect::<Result<_>>()?;
    Ok(LossBreakdown::mean(&per))
}

fn append_record(path: &Path, rec: &MetricRecord) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", serde_json::to_string(rec)?).map_err(|e| Error::io(path, e))
}

/// Trains `model` in place of a copy and returns the best snapshot. With
/// `files`, the initial and every improved snapshot are written to the
/// checkpoint path, so a diverged run leaves the last good one on disk.
pub fn train(model: DivrModel, train_set: &[Sample], val_set: &[Sample], cfg: &TrainConfig, files: Option<&RunFiles>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() && cfg.epochs > 0 {
        return Err(Error::invalid("training split has no windows"));
    }
    if let Some(f) = files {
        if f.metrics.exists() {
            std::fs::remove_file(&f.metrics).map_err(|e| Error::io(&f.metrics, e))?;
        }
        model.save(&f.checkpoint)?;
    }
    let mut current = model.clone();
    let mut best = model;
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = None;
    let mut state = AdamState::new(&current.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut records = Vec::new();
    let mut steps = 0usize;
    let mut clipped = 0usize;

    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_losses = Vec::new();
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, mut grads) = match batch_gradients(&current, &batch) {
                Ok(r) => r,
                Err(Error::NonFinite(_)) => return Err(Error::Diverged { epoch, step: steps }),
                Err(e) => return Err(e),
            };
            if !loss.total.is_finite() {
                return Err(Error::Diverged { epoch, step: steps });
            }
            let norm = clip_global_norm(&mut grads, cfg.clip_norm);
            if norm > cfg.clip_norm {
                clipped += 1;
                log::debug!("step {steps}: gradient norm {norm:.3} clipped to {}", cfg.clip_norm);
            }
            adam_step(&mut current.params, &grads, &mut state, cfg, epoch)?;
            steps += 1;
            seen += batch.len();
            epoch_losses.push(loss.scaled(batch.len() as f64));
        }
        if epoch_losses.is_empty() {
            break 'epochs;
        }
        let mut train_loss = LossBreakdown::default();
        for l in &epoch_losses {
            train_loss.accumulate(l);
        }
        let train_loss = train_loss.scaled(1.0 / seen as f64);
        let lr = cfg.lr_at(epoch);
        let mut epoch_records = vec![MetricRecord { epoch, split: Partition::Train, loss: train_loss, lr }];
        let selection = if val_set.is_empty() {
            train_loss.total
        } else {
            let val_loss = match evaluate_loss(&current, val_set) {
                Ok(l) => l,
                Err(Error::NonFinite(_)) => return Err(Error::Diverged { epoch, step: steps }),
                Err(e) => return Err(e),
            };
            epoch_records.push(MetricRecord { epoch, split: Partition::Val, loss: val_loss, lr });
            val_loss.total
        };
        log::info!("epoch {epoch}: train {:.4} select {selection:.4} lr {lr:.3e}", train_loss.total);
        for rec in &epoch_records {
            if let Some(f) = files {
                append_record(&f.metrics, rec)?;
            }
        }
        records.extend(epoch_records);
        if selection < best_loss {
            best_loss = selection;
            best_epoch = Some(epoch);
            best = current.clone();
            if let Some(f) = files {
                best.save(&f.checkpoint)?;
            }
        }
    }
    Ok(TrainOutcome { best, best_epoch, records, steps, clipped_steps: clipped })
}
