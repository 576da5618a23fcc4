//! The training loop: batching, optimizer steps, running statistics,
//! divergence detection and boundary tracking.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::analysis::Tracker;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::model::{Loss, Model, Targets};
use crate::optim::{is_diverged, Action, Goal, Optimizer, PlateauScheduler};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// `None` trains full-batch.
    pub batch_size: Option<usize>,
    /// Seeds the per-epoch shuffle of minibatches.
    pub shuffle_seed: u64,
    /// Hidden layer whose boundaries are tracked, if any.
    pub track_layer: Option<usize>,
    /// Snapshot every `snapshot_stride` optimizer steps.
    pub snapshot_stride: u64,
    /// Keep every per-unit snapshot (for `trace.csv`), not just the drift summary.
    pub keep_trace_rows: bool,
    /// Evaluate on the test set every this many epochs (and always on the last).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: None,
            shuffle_seed: 0,
            track_layer: None,
            snapshot_stride: 1,
            keep_trace_rows: false,
            eval_every: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean train-mode loss over the epoch's batches.
    pub train_loss: f64,
    /// RMSE for regression, accuracy for classification; NaN when not evaluated.
    pub test_metric: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub history: Vec<EpochMetrics>,
    pub steps: u64,
    /// First optimizer step whose loss or update was unusable.
    pub diverged_at: Option<u64>,
    pub tracker: Option<Tracker>,
}

impl FitReport {
    pub fn diverged(&self) -> bool {
        self.diverged_at.is_some()
    }

    /// The most recent finite test metric.
    pub fn final_test_metric(&self) -> Option<f64> {
        self.history.iter().rev().map(|e| e.test_metric).find(|m| m.is_finite())
    }

    /// The epoch with the best finite test metric; ties go to the earlier one.
    pub fn best_test_epoch(&self, goal: Goal) -> Option<(usize, f64)> {
        self.history
            .iter()
            .filter(|e| e.test_metric.is_finite())
            .fold(None, |best, e| match best {
                Some((_, m)) if !goal.better(e.test_metric, m) => best,
                _ => Some((e.epoch, e.test_metric)),
            })
    }

    pub fn final_train_loss(&self) -> Option<f64> {
        self.history.last().map(|e| e.train_loss)
    }
}

/// Which way the test metric of a loss improves.
pub fn metric_goal(loss: Loss) -> Goal {
    match loss {
        Loss::Mse => Goal::Minimize,
        Loss::SoftmaxCe => Goal::Maximize,
    }
}

/// Eval-mode RMSE (regression) or accuracy (classification).
pub fn evaluate(model: &Model, data: &Dataset) -> Result<f64> {
    let out = model.predict(&data.x)?;
    match &data.y {
        Targets::Values(t) => {
            if out.shape() != t.shape() {
                return Err(Error::Shape {
                    op: "evaluate",
                    detail: format!("output {:?} vs targets {:?}", out.shape(), t.shape()),
                });
            }
            let sse: f64 = out.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum();
            Ok((sse / t.rows() as f64).sqrt())
        }
        Targets::Labels(labels) => {
            let hits = labels
                .iter()
                .enumerate()
                .filter(|&(r, &label)| argmax(out.row(r)) == Some(label))
                .count();
            Ok(hits as f64 / labels.len() as f64)
        }
    }
}

fn argmax(row: &[f64]) -> Option<usize> {
    row.iter()
        .enumerate()
        .filter(|(_, v)| !v.is_nan())
        .fold(None, |best: Option<(usize, f64)>, (i, &v)| match best {
            Some((_, b)) if b >= v => best,
            _ => Some((i, v)),
        })
        .map(|(i, _)| i)
}

/// Numerical blow-ups end a run as divergence; anything else is a real error.
fn is_divergence(err: &Error) -> bool {
    matches!(
        err,
        Error::NonFinite { .. }
            | Error::NonFiniteGradient { .. }
            | Error::DegenerateWeight(_)
            | Error::DegenerateDirection(_)
    )
}

fn batches(n: usize, batch_size: Option<usize>, min_rows: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    match batch_size {
        Some(b) if b < n => {
            order.shuffle(rng);
            order
                .chunks(b)
                .filter(|c| c.len() >= min_rows)
                .map(<[usize]>::to_vec)
                .collect()
        }
        _ => vec![order],
    }
}

/// Trains `model` in place. Divergence stops the run and is reported, not
/// returned as an error.
pub fn fit(
    model: &mut Model,
    opt: &mut Optimizer,
    mut scheduler: Option<&mut PlateauScheduler>,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<FitReport> {
    if cfg.snapshot_stride == 0 || cfg.eval_every == 0 {
        return Err(Error::config("run", "snapshot stride and eval interval must be positive"));
    }
    if let Some(b) = cfg.batch_size {
        if b == 0 {
            return Err(Error::config("run.batch_size", "must be positive"));
        }
    }
    let min_rows = if model.uses_batch_stats() { 2 } else { 1 };
    if train.len() < min_rows {
        return Err(Error::BatchTooSmall(format!(
            "{} training rows, need at least {min_rows}",
            train.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    let mut tracker = cfg.track_layer.map(|l| Tracker::new(l, cfg.keep_trace_rows));
    let mut report = FitReport {
        history: Vec::with_capacity(cfg.epochs),
        steps: 0,
        diverged_at: None,
        tracker: None,
    };

    let mut plan = batches(train.len(), cfg.batch_size, min_rows, &mut rng);
    let full_batch = plan.len() == 1 && plan[0].len() == train.len();
    let batch_data = |idx: &[usize]| {
        if full_batch {
            (train.x.clone(), train.y.clone())
        } else {
            (train.x.select_rows(idx), train.y.select(idx))
        }
    };

    // Seed the running statistics before the first snapshot, so the tracked
    // eval-mode boundaries do not jump when the first batch is committed.
    if model.uses_batch_stats() {
        let (x, y) = batch_data(&plan[0]);
        match model.loss_forward(&x, &y, Mode::Train) {
            Ok(rec) => model.commit_stats(&rec.stats),
            Err(e) if is_divergence(&e) => {
                report.diverged_at = Some(0);
                return Ok(report);
            }
            Err(e) => return Err(e),
        }
    }
    if let Some(t) = tracker.as_mut() {
        t.observe(model, 0)?;
    }

    'epochs: for epoch in 0..cfg.epochs {
        if epoch > 0 {
            plan = batches(train.len(), cfg.batch_size, min_rows, &mut rng);
        }
        let mut loss_sum = 0.0;
        for idx in &plan {
            let (x, y) = batch_data(idx);
            let step = report.steps + 1;
            match train_step(model, opt, &x, &y) {
                Ok(loss) => loss_sum += loss,
                Err(e) if is_divergence(&e) => {
                    report.diverged_at = Some(step);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
            report.steps = step;
            if let Some(t) = tracker.as_mut() {
                if step % cfg.snapshot_stride == 0 {
                    match t.observe(model, step) {
                        Ok(()) => {}
                        Err(e) if is_divergence(&e) => {
                            report.diverged_at = Some(step);
                            break 'epochs;
                        }
                        Err(e) => return Err(e),
                    }
                }
            }
        }
        let train_loss = loss_sum / plan.len() as f64;
        let evaluate_now = (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs;
        let test_metric = match test {
            Some(d) if evaluate_now => evaluate(model, d).unwrap_or(f64::NAN),
            _ => f64::NAN,
        };
        report.history.push(EpochMetrics {
            epoch,
            train_loss,
            test_metric,
            lr: opt.lr(),
        });
        if let Some(s) = scheduler.as_deref_mut() {
            let watched = if test.is_some() && evaluate_now { test_metric } else { train_loss };
            match s.update(watched) {
                Action::Continue => {}
                Action::ReduceLr => s.reduce(opt),
                Action::Stop => break,
            }
        }
    }
    report.tracker = tracker;
    Ok(report)
}

/// One forward, backward and update. Returns the pre-update batch loss.
fn train_step(model: &mut Model, opt: &mut Optimizer, x: &crate::autodiff::Tensor, y: &Targets) -> Result<f64> {
    let rec = model.loss_forward(x, y, Mode::Train)?;
    let loss = rec.loss_value();
    if is_diverged(loss) {
        return Err(Error::NonFinite { op: "training loss" });
    }
    let grads = rec.tape.backward(rec.loss)?;
    opt.step(&mut model.param_tensors_mut(), &grads)?;
    model.commit_stats(&rec.stats);
    model.check_invariants()?;
    Ok(loss)
}
