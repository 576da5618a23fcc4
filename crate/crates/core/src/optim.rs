//! First-order optimizers, a plateau scheduler and learning-rate grid search.

use crate::autodiff::{Gradients, Tensor};
use crate::error::{Error, Result};

/// The learning rates searched by default.
pub const LR_GRID: [f64; 6] = [0.001, 0.003, 0.01, 0.03, 0.1, 0.3];

/// A run whose loss exceeds this (or is not finite) counts as diverged.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

pub fn is_diverged(loss: f64) -> bool {
    !loss.is_finite() || loss > DIVERGENCE_THRESHOLD
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::SgdMomentum { .. } => "sgd",
            OptimizerKind::Adam { .. } => "adam",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step_count: u64,
    // Momentum (SGD) or first moment (Adam), then Adam's second moment.
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::config("optim.lr", format!("must be positive, got {lr}")));
        }
        match kind {
            OptimizerKind::SgdMomentum { momentum } if !(0.0..1.0).contains(&momentum) => {
                return Err(Error::config("optim.momentum", format!("must lie in [0, 1), got {momentum}")));
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                for (field, b) in [("optim.beta1", beta1), ("optim.beta2", beta2)] {
                    if !(b > 0.0 && b < 1.0) {
                        return Err(Error::config(field, format!("must lie in (0, 1), got {b}")));
                    }
                }
                if !(eps > 0.0) {
                    return Err(Error::config("optim.eps", format!("must be positive, got {eps}")));
                }
            }
            _ => {}
        }
        Ok(Self {
            kind,
            lr,
            step_count: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn sgd(lr: f64, momentum: f64) -> Result<Self> {
        Self::new(OptimizerKind::SgdMomentum { momentum }, lr)
    }

    pub fn adam(lr: f64) -> Result<Self> {
        Self::new(OptimizerKind::adam(), lr)
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Updates `params[i]` with the gradient in slot `i`. Every gradient is
    /// validated before anything moves, so a rejected step leaves the
    /// parameters and the optimizer state untouched.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &Gradients) -> Result<()> {
        let mut gs = Vec::with_capacity(params.len());
        for (slot, p) in params.iter().enumerate() {
            let g = grads.get(slot).ok_or_else(|| Error::Shape {
                op: "optimizer_step",
                detail: format!("no gradient for slot {slot}"),
            })?;
            if g.shape() != p.shape() {
                return Err(Error::Shape {
                    op: "optimizer_step",
                    detail: format!("slot {slot}: gradient {:?} for parameter {:?}", g.shape(), p.shape()),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient { slot });
            }
            gs.push(g);
        }
        if self.first.len() != params.len() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        self.step_count += 1;
        let lr = self.lr;
        match self.kind {
            OptimizerKind::SgdMomentum { momentum } => {
                for ((p, g), v) in params.iter_mut().zip(&gs).zip(&mut self.first) {
                    for ((x, gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                        *vi = momentum * *vi + gi;
                        *x -= lr * *vi;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step_count as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, g), m), v) in params.iter_mut().zip(&gs).zip(&mut self.first).zip(&mut self.second) {
                    for (((x, gi), mi), vi) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        let m_hat = *mi / c1;
                        let v_hat = *vi / c2;
                        *x -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Goal {
    Minimize,
    Maximize,
}

impl Goal {
    pub fn better(self, a: f64, b: f64) -> bool {
        match self {
            Goal::Minimize => a < b,
            Goal::Maximize => a > b,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Continue,
    ReduceLr,
    Stop,
}

/// Cuts the learning rate after `patience_reduce` epochs without
/// improvement and stops after `patience_stop`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    pub patience_reduce: usize,
    pub patience_stop: usize,
    pub factor: f64,
    pub goal: Goal,
    best: Option<f64>,
    stale: usize,
}

impl PlateauScheduler {
    pub fn new(patience_reduce: usize, patience_stop: usize, factor: f64, goal: Goal) -> Result<Self> {
        if patience_reduce == 0 || patience_stop < patience_reduce {
            return Err(Error::config(
                "optim.patience",
                format!("need 0 < reduce ≤ stop, got {patience_reduce} and {patience_stop}"),
            ));
        }
        if !(factor > 0.0 && factor < 1.0) {
            return Err(Error::config("optim.factor", format!("must lie in (0, 1), got {factor}")));
        }
        Ok(Self {
            patience_reduce,
            patience_stop,
            factor,
            goal,
            best: None,
            stale: 0,
        })
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// A non-finite metric counts as no improvement.
    pub fn update(&mut self, metric: f64) -> Action {
        let improved = metric.is_finite() && self.best.is_none_or(|b| self.goal.better(metric, b));
        if improved {
            self.best = Some(metric);
            self.stale = 0;
            return Action::Continue;
        }
        self.stale += 1;
        if self.stale >= self.patience_stop {
            Action::Stop
        } else if self.stale % self.patience_reduce == 0 {
            Action::ReduceLr
        } else {
            Action::Continue
        }
    }

    /// Applies a [`Action::ReduceLr`] to `opt`.
    pub fn reduce(&self, opt: &mut Optimizer) {
        opt.set_lr(opt.lr() * self.factor);
    }
}

/// The result of training at one grid point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RunOutcome {
    Metric(f64),
    Diverged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSelection {
    pub best_lr: f64,
    pub best_metric: f64,
    /// Every grid point in the order given.
    pub table: Vec<(f64, RunOutcome)>,
}

/// Evaluates `eval` at each learning rate and returns the best one.
/// Ties go to the smaller learning rate.
pub fn lr_grid_select<F>(grid: &[f64], goal: Goal, mut eval: F) -> Result<GridSelection>
where
    F: FnMut(f64) -> Result<RunOutcome>,
{
    if grid.is_empty() {
        return Err(Error::config("optim.grid", "the learning-rate grid is empty"));
    }
    let table = grid
        .iter()
        .map(|&lr| Ok((lr, eval(lr)?)))
        .collect::<Result<Vec<_>>>()?;
    select_from_table(table, goal)
}

/// Picks the winner from already evaluated grid points.
pub fn select_from_table(table: Vec<(f64, RunOutcome)>, goal: Goal) -> Result<GridSelection> {
    let mut best: Option<(f64, f64)> = None;
    for &(lr, outcome) in &table {
        let RunOutcome::Metric(m) = outcome else { continue };
        if !m.is_finite() {
            continue;
        }
        best = match best {
            None => Some((lr, m)),
            Some((blr, bm)) if goal.better(m, bm) || (m == bm && lr < blr) => Some((lr, m)),
            keep => keep,
        };
    }
    let (best_lr, best_metric) = best.ok_or(Error::NoViableLr)?;
    Ok(GridSelection {
        best_lr,
        best_metric,
        table,
    })
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;

    use super::*;
    use crate::autodiff::Tape;

    fn grads_for(values: &[Tensor]) -> Gradients {
        // d/dp Σ c·p = c: the gradient equals the constant tensor.
        let mut tape = Tape::new();
        let mut total = None;
        for (slot, c) in values.iter().enumerate() {
            let p = tape.param(slot, Tensor::zeros(c.rows(), c.cols()));
            let cv = tape.constant(c.clone());
            let prod = tape.mul(p, cv).unwrap();
            let s = tape.reduce_sum(prod, crate::autodiff::Axis::Rows).unwrap();
            let s = tape.reduce_sum(s, crate::autodiff::Axis::Cols).unwrap();
            total = Some(match total {
                None => s,
                Some(t) => tape.add(t, s).unwrap(),
            });
        }
        tape.backward(total.unwrap()).unwrap()
    }

    #[test]
    fn sgd_single_step() {
        let mut p = Tensor::scalar(0.0);
        let mut opt = Optimizer::sgd(0.1, 0.0).unwrap();
        opt.step(&mut [&mut p], &grads_for(&[Tensor::scalar(1.0)])).unwrap();
        assert_abs_diff_eq!(p.data()[0], -0.1, epsilon = 1e-15);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn sgd_momentum_two_steps_unrolled() {
        let (lr, mu, g) = (0.05, 0.9, 2.0);
        let mut p = Tensor::scalar(1.0);
        let mut opt = Optimizer::sgd(lr, mu).unwrap();
        let grads = grads_for(&[Tensor::scalar(g)]);
        opt.step(&mut [&mut p], &grads).unwrap();
        opt.step(&mut [&mut p], &grads).unwrap();
        assert_abs_diff_eq!(p.data()[0] - 1.0, -lr * g * (2.0 + mu), epsilon = 1e-14);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        for g in [1e-3, 0.5, -7.0, 1e4] {
            let mut p = Tensor::scalar(0.0);
            let mut opt = Optimizer::adam(0.01).unwrap();
            opt.step(&mut [&mut p], &grads_for(&[Tensor::scalar(g)])).unwrap();
            // m̂ = g and v̂ = g², so the step is lr·g/(|g| + eps).
            let expected = -0.01 * g / (g.abs() + 1e-8);
            assert_abs_diff_eq!(p.data()[0], expected, epsilon = 1e-15);
        }
    }

    #[test]
    fn adam_first_step_is_scale_invariant() {
        let base = Tensor::from_rows(&[vec![0.3, -1.2], vec![2.0, 0.01]]).unwrap();
        let step_with = |c: f64| {
            let mut p = Tensor::zeros(2, 2);
            let mut opt = Optimizer::adam(0.1).unwrap();
            opt.step(&mut [&mut p], &grads_for(&[base.map(|v| c * v)])).unwrap();
            p
        };
        let a = step_with(1.0);
        let b = step_with(1000.0);
        for (x, y) in a.data().iter().zip(b.data()) {
            // eps contributes lr·eps/|g| at most, about 1e-7 for the smallest entry.
            assert_abs_diff_eq!(x, y, epsilon = 1e-6);
        }
    }

    #[test]
    fn updates_follow_slot_permutation() {
        let g0 = Tensor::row_vector(vec![1.0, -2.0]);
        let g1 = Tensor::row_vector(vec![0.5, 3.0, -1.0]);
        let run = |order: [usize; 2]| {
            let gs = [g0.clone(), g1.clone()];
            let mut ps = [Tensor::zeros(1, 2), Tensor::zeros(1, 3)];
            let grads = grads_for(&[gs[order[0]].clone(), gs[order[1]].clone()]);
            let mut opt = Optimizer::adam(0.01).unwrap();
            let [a, b] = &mut ps;
            let (pa, pb) = if order[0] == 0 { (a, b) } else { (b, a) };
            for _ in 0..3 {
                opt.step(&mut [&mut *pa, &mut *pb], &grads).unwrap();
            }
            ps
        };
        assert_eq!(run([0, 1]), run([1, 0]));
    }

    #[test]
    fn non_finite_gradient_names_slot_and_leaves_params() {
        let mut a = Tensor::scalar(1.0);
        let mut b = Tensor::scalar(2.0);
        let mut tape = Tape::new();
        let pa = tape.param(0, Tensor::scalar(1.0));
        let pb = tape.param(1, Tensor::scalar(2.0));
        let s = tape.add(pa, pb).unwrap();
        let mut grads = tape.backward(s).unwrap();
        grads.insert(1, Tensor::scalar(f64::NAN));
        let mut opt = Optimizer::adam(0.1).unwrap();
        let err = opt.step(&mut [&mut a, &mut b], &grads).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { slot: 1 }));
        assert_eq!((a.data()[0], b.data()[0]), (1.0, 2.0));
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn invalid_hyperparameters_rejected() {
        assert!(Optimizer::sgd(0.0, 0.9).is_err());
        assert!(Optimizer::sgd(0.1, 1.0).is_err());
        assert!(Optimizer::new(OptimizerKind::Adam { beta1: 1.0, beta2: 0.999, eps: 1e-8 }, 0.1).is_err());
        assert!(PlateauScheduler::new(5, 3, 0.1, Goal::Minimize).is_err());
        assert!(PlateauScheduler::new(5, 10, 1.5, Goal::Minimize).is_err());
    }

    #[test]
    fn scheduler_examples() {
        let mut s = PlateauScheduler::new(3, 6, 0.1, Goal::Minimize).unwrap();
        for i in 0..20 {
            assert_eq!(s.update(10.0 - i as f64), Action::Continue);
        }
        let mut s = PlateauScheduler::new(3, 6, 0.1, Goal::Maximize).unwrap();
        assert_eq!(s.update(0.5), Action::Continue);
        let actions: Vec<Action> = (0..6).map(|_| s.update(0.5)).collect();
        assert_eq!(
            actions,
            [
                Action::Continue,
                Action::Continue,
                Action::ReduceLr,
                Action::Continue,
                Action::Continue,
                Action::Stop
            ]
        );
        let mut opt = Optimizer::adam(0.1).unwrap();
        s.reduce(&mut opt);
        assert_abs_diff_eq!(opt.lr(), 0.01, epsilon = 1e-15);
    }

    #[test]
    fn grid_selection_rules() {
        let one = lr_grid_select(&[0.03], Goal::Minimize, |_| Ok(RunOutcome::Metric(1.0))).unwrap();
        assert_eq!(one.best_lr, 0.03);

        let tie = lr_grid_select(&[0.1, 0.01, 0.3], Goal::Minimize, |_| Ok(RunOutcome::Metric(2.0))).unwrap();
        assert_eq!(tie.best_lr, 0.01);

        let acc = lr_grid_select(&LR_GRID, Goal::Maximize, |lr| {
            Ok(if lr > 0.1 {
                RunOutcome::Diverged
            } else {
                RunOutcome::Metric(lr)
            })
        })
        .unwrap();
        assert_eq!(acc.best_lr, 0.1);
        assert_eq!(acc.table.len(), 6);

        let none = lr_grid_select(&LR_GRID, Goal::Minimize, |_| Ok(RunOutcome::Diverged));
        assert!(matches!(none, Err(Error::NoViableLr)));
        assert!(lr_grid_select(&[], Goal::Minimize, |_| Ok(RunOutcome::Diverged)).is_err());
    }

    #[test]
    fn divergence_rule() {
        assert!(is_diverged(f64::NAN));
        assert!(is_diverged(f64::INFINITY));
        assert!(is_diverged(2e6));
        assert!(!is_diverged(1e6));
    }
}
