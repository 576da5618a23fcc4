//! Dense ReLU layers under four parameterizations.
//!
//! | kind    | unit                                   |
//! |---------|----------------------------------------|
//! | `Sp`    | `g(wᵀx + b)`                           |
//! | `Wn`    | `g(l·(v/‖v‖)ᵀx + b)`                   |
//! | `BnSp`  | `g(γ·(s − Ê[s])/√(V̂ar[s] + ε) + β)`    |
//! | `Gmp`   | `r·g(u(θ)ᵀ(x − μ̂) + λ)`                |
//!
//! Every layer records itself on a [`Tape`], so training, evaluation and
//! gradient checks share one code path.

mod init;
mod params;

pub use init::{gmp_from_sp, init_params, sp_from_wn, InitScheme};
pub use params::ParamSet;

use crate::autodiff::{Axis, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::hypersphere::l2_norm;

/// Added to the batch variance inside the square root.
pub const BN_EPS: f64 = 1e-5;

/// Decay of the exponential moving averages kept for eval mode.
pub const DEFAULT_STAT_DECAY: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Kind {
    Sp,
    Wn,
    BnSp,
    Gmp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PostNorm {
    None,
    /// Mean-only batch normalization of the pre-activations (WN only).
    Mbn,
    /// Input mean normalization (GmP only).
    Imn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub fan_in: usize,
    pub fan_out: usize,
    pub kind: Kind,
    pub post_norm: PostNorm,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn hidden(fan_in: usize, fan_out: usize, kind: Kind, post_norm: PostNorm) -> Self {
        Self {
            fan_in,
            fan_out,
            kind,
            post_norm,
            activation: Activation::Relu,
        }
    }

    /// A linear read-out. Output layers are never reparameterized.
    pub fn output(fan_in: usize, fan_out: usize) -> Self {
        Self {
            fan_in,
            fan_out,
            kind: Kind::Sp,
            post_norm: PostNorm::None,
            activation: Activation::Identity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fan_in == 0 || self.fan_out == 0 {
            return Err(Error::InvalidSpec(format!(
                "layer {}→{} has an empty side",
                self.fan_in, self.fan_out
            )));
        }
        match (self.kind, self.post_norm) {
            (_, PostNorm::None) | (Kind::Wn, PostNorm::Mbn) | (Kind::Gmp, PostNorm::Imn) => Ok(()),
            (kind, norm) => Err(Error::InvalidSpec(format!(
                "{norm:?} cannot be combined with {kind:?}"
            ))),
        }
    }
}

/// Empirical statistics of one training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased per-column variance; empty when the layer does not need it.
    pub var: Vec<f64>,
    pub batch_size: usize,
}

/// Running statistics used in eval mode.
#[derive(Debug, Clone, PartialEq)]
pub struct NormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub decay: f64,
    /// The first committed batch replaces the initial values outright.
    pub initialized: bool,
}

impl NormState {
    fn for_spec(spec: &LayerSpec) -> Self {
        let (mean_len, var_len) = match (spec.kind, spec.post_norm) {
            (Kind::BnSp, _) => (spec.fan_out, spec.fan_out),
            (_, PostNorm::Mbn) => (spec.fan_out, 0),
            (_, PostNorm::Imn) => (spec.fan_in, 0),
            _ => (0, 0),
        };
        Self {
            running_mean: vec![0.0; mean_len],
            running_var: vec![1.0; var_len],
            decay: DEFAULT_STAT_DECAY,
            initialized: false,
        }
    }

    pub fn is_used(&self) -> bool {
        !self.running_mean.is_empty()
    }

    /// `running ← decay·running + (1 − decay)·batch`.
    pub fn commit(&mut self, stats: &BatchStats) {
        let d = if self.initialized { self.decay } else { 0.0 };
        for (r, m) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = d * *r + (1.0 - d) * m;
        }
        for (r, v) in self.running_var.iter_mut().zip(&stats.var) {
            *r = d * *r + (1.0 - d) * v;
        }
        self.initialized = true;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub params: ParamSet,
    pub norm: NormState,
}

impl Layer {
    pub fn new<R: rand::Rng + ?Sized>(spec: LayerSpec, scheme: InitScheme, rng: &mut R) -> Result<Self> {
        let params = init_params(&spec, scheme, rng)?;
        Self::from_params(spec, params)
    }

    pub fn from_params(spec: LayerSpec, params: ParamSet) -> Result<Self> {
        spec.validate()?;
        params.check_shapes(&spec)?;
        Ok(Self {
            norm: NormState::for_spec(&spec),
            spec,
            params,
        })
    }

    /// Registers the trainable tensors as consecutive slots starting at `first_slot`.
    pub fn register(&self, tape: &mut Tape, first_slot: usize) -> Vec<Var> {
        self.params
            .tensors()
            .into_iter()
            .enumerate()
            .map(|(i, t)| tape.param(first_slot + i, t.clone()))
            .collect()
    }

    /// Registers the trainable tensors as constants.
    pub fn register_constants(&self, tape: &mut Tape) -> Vec<Var> {
        self.params
            .tensors()
            .into_iter()
            .map(|t| tape.constant(t.clone()))
            .collect()
    }

    /// Records the layer on `tape`. `vars` are the trainable tensors as
    /// returned by [`Layer::register`]. In train mode, layers with
    /// normalization also return the batch statistics they used.
    pub fn record(
        &self,
        tape: &mut Tape,
        x: Var,
        vars: &[Var],
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (rows, cols) = match tape.value(x).shape() {
            &[r, c] => (r, c),
            s => {
                return Err(Error::Shape {
                    op: "layer",
                    detail: format!("input shape {s:?}"),
                })
            }
        };
        if cols != self.spec.fan_in {
            return Err(Error::Shape {
                op: "layer",
                detail: format!("input has {cols} columns, layer expects {}", self.spec.fan_in),
            });
        }
        if vars.len() != self.params.tensors().len() {
            return Err(Error::Shape {
                op: "layer",
                detail: format!("{} parameter vars for {} tensors", vars.len(), self.params.tensors().len()),
            });
        }
        let needs_batch = mode == Mode::Train && self.norm.is_used();
        if needs_batch && rows == 0 {
            return Err(Error::BatchTooSmall("empty batch".into()));
        }
        if needs_batch && self.spec.kind == Kind::BnSp && rows < 2 {
            return Err(Error::BatchTooSmall(format!(
                "batch normalization needs at least 2 rows in train mode, got {rows}"
            )));
        }

        let (pre, stats) = match &self.params {
            ParamSet::Sp { .. } => (affine(tape, x, vars[0], vars[1])?, None),
            ParamSet::Wn { direction, .. } => {
                check_rows_nonzero(direction)?;
                let w = wn_weight(tape, vars[0], vars[1])?;
                let wt = tape.transpose(w)?;
                let mut s = tape.matmul(x, wt)?;
                let mut stats = None;
                if self.spec.post_norm == PostNorm::Mbn {
                    let (centered, st) = self.center(tape, s, mode)?;
                    s = centered;
                    stats = st;
                }
                (tape.broadcast_add_row(s, vars[2])?, stats)
            }
            ParamSet::BnSp { .. } => {
                let s = affine(tape, x, vars[0], vars[1])?;
                let (mean, var, stats) = match mode {
                    Mode::Train => {
                        let mean = tape.reduce_mean(s, Axis::Rows)?;
                        let var = tape.reduce_var(s, Axis::Rows, true)?;
                        let stats = BatchStats {
                            mean: tape.value(mean).data().to_vec(),
                            var: tape.value(var).data().to_vec(),
                            batch_size: rows,
                        };
                        (mean, var, Some(stats))
                    }
                    Mode::Eval => (
                        tape.constant(Tensor::row_vector(self.norm.running_mean.clone())),
                        tape.constant(Tensor::row_vector(self.norm.running_var.clone())),
                        None,
                    ),
                };
                let neg = tape.scale(mean, -1.0)?;
                let centered = tape.broadcast_add_row(s, neg)?;
                let shifted = tape.add_scalar(var, BN_EPS)?;
                let sd = tape.sqrt(shifted)?;
                let inv = tape.reciprocal(sd)?;
                let normalized = tape.scale_cols(centered, inv)?;
                let scaled = tape.scale_cols(normalized, vars[2])?;
                (tape.broadcast_add_row(scaled, vars[3])?, stats)
            }
            ParamSet::Gmp { frozen_theta, .. } => {
                let (theta_var, radius, scale) = if *frozen_theta {
                    (None, vars[0], vars[1])
                } else {
                    (Some(vars[0]), vars[1], vars[2])
                };
                let u = self.gmp_directions(tape, theta_var)?;
                let (input, stats) = if self.spec.post_norm == PostNorm::Imn {
                    self.center(tape, x, mode)?
                } else {
                    (x, None)
                };
                let ut = tape.transpose(u)?;
                let proj = tape.matmul(input, ut)?;
                let pre = tape.broadcast_add_row(proj, radius)?;
                let act = activate(tape, pre, self.spec.activation)?;
                return Ok((tape.scale_cols(act, scale)?, stats));
            }
        };
        Ok((activate(tape, pre, self.spec.activation)?, stats))
    }

    /// Subtracts the batch mean (train) or the running mean (eval) column-wise.
    fn center(&self, tape: &mut Tape, s: Var, mode: Mode) -> Result<(Var, Option<BatchStats>)> {
        let (mean, stats) = match mode {
            Mode::Train => {
                let mean = tape.reduce_mean(s, Axis::Rows)?;
                let stats = BatchStats {
                    mean: tape.value(mean).data().to_vec(),
                    var: Vec::new(),
                    batch_size: tape.value(s).rows(),
                };
                (mean, Some(stats))
            }
            Mode::Eval => (
                tape.constant(Tensor::row_vector(self.norm.running_mean.clone())),
                None,
            ),
        };
        let neg = tape.scale(mean, -1.0)?;
        Ok((tape.broadcast_add_row(s, neg)?, stats))
    }

    /// `m×n` matrix whose rows are `u(θ_i)`.
    fn gmp_directions(&self, tape: &mut Tape, theta: Option<Var>) -> Result<Var> {
        let Some(theta) = theta else {
            let m = self.spec.fan_out;
            let signs = (0..m)
                .map(|i| self.params.gmp_direction(i).expect("gmp params")[0])
                .collect();
            return Ok(tape.constant(Tensor::column_vector(signs)));
        };
        let k = tape.value(theta).cols();
        let s = tape.sin(theta)?;
        let c = tape.cos(theta)?;
        let mut columns = Vec::with_capacity(k + 1);
        let mut prefix: Option<Var> = None;
        for j in 0..k {
            let cj = tape.slice_cols(c, j, j + 1)?;
            let sj = tape.slice_cols(s, j, j + 1)?;
            columns.push(match prefix {
                None => cj,
                Some(p) => tape.mul(p, cj)?,
            });
            prefix = Some(match prefix {
                None => sj,
                Some(p) => tape.mul(p, sj)?,
            });
        }
        columns.push(prefix.expect("at least one angle"));
        tape.concat(&columns, Axis::Cols)
    }

    /// Evaluates the layer on a plain tensor.
    pub fn apply(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, Option<BatchStats>)> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let vars = self.register_constants(&mut tape);
        let (out, stats) = self.record(&mut tape, xv, &vars, mode)?;
        Ok((tape.value(out).clone(), stats))
    }

    /// The eval-mode pre-activation as an affine map `x ↦ W_eff x + b_eff`.
    ///
    /// For GmP the scale `r` is folded in, so `W_eff` rows are `r·u(θ)`.
    pub fn effective_affine(&self) -> Result<(Tensor, Vec<f64>)> {
        let m = self.spec.fan_out;
        let n = self.spec.fan_in;
        match &self.params {
            ParamSet::Sp { weight, bias } => Ok((weight.clone(), bias.data().to_vec())),
            ParamSet::Wn {
                direction,
                length,
                bias,
            } => {
                check_rows_nonzero(direction)?;
                let mut w = Vec::with_capacity(m * n);
                for i in 0..m {
                    let row = direction.row(i);
                    let k = length.data()[i] / l2_norm(row);
                    w.extend(row.iter().map(|v| k * v));
                }
                let mut b = bias.data().to_vec();
                if self.spec.post_norm == PostNorm::Mbn {
                    for (bi, mu) in b.iter_mut().zip(&self.norm.running_mean) {
                        *bi -= mu;
                    }
                }
                Ok((Tensor::matrix(m, n, w)?, b))
            }
            ParamSet::BnSp {
                weight,
                bias,
                gamma,
                beta,
            } => {
                let mut w = Vec::with_capacity(m * n);
                let mut b = Vec::with_capacity(m);
                for i in 0..m {
                    let k = gamma.data()[i] / (self.norm.running_var[i] + BN_EPS).sqrt();
                    w.extend(weight.row(i).iter().map(|v| k * v));
                    b.push(beta.data()[i] + k * (bias.data()[i] - self.norm.running_mean[i]));
                }
                Ok((Tensor::matrix(m, n, w)?, b))
            }
            ParamSet::Gmp { scale, .. } => {
                let mut w = Vec::with_capacity(m * n);
                let mut b = Vec::with_capacity(m);
                for i in 0..m {
                    let u = self.params.gmp_direction(i).expect("gmp params");
                    let r = scale.data()[i];
                    let lambda = self.gmp_effective_radius(i, &u);
                    w.extend(u.iter().map(|v| r * v));
                    b.push(r * lambda);
                }
                Ok((Tensor::matrix(m, n, w)?, b))
            }
        }
    }

    /// `λ − u(θ)ᵀμ̂_run` for IMN layers, `λ` otherwise.
    pub(crate) fn gmp_effective_radius(&self, unit: usize, u: &[f64]) -> f64 {
        let ParamSet::Gmp { radius, .. } = &self.params else {
            return f64::NAN;
        };
        let lambda = radius.data()[unit];
        if self.spec.post_norm == PostNorm::Imn {
            lambda - crate::hypersphere::dot(u, &self.norm.running_mean)
        } else {
            lambda
        }
    }

    /// Checks the per-step parameter invariants.
    pub fn check_invariants(&self) -> Result<()> {
        match &self.params {
            ParamSet::Wn { direction, .. } => check_rows_nonzero(direction),
            _ => Ok(()),
        }
    }
}

fn affine(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let wt = tape.transpose(w)?;
    let s = tape.matmul(x, wt)?;
    tape.broadcast_add_row(s, b)
}

/// `diag(l)·V̂` where `V̂` has unit rows.
fn wn_weight(tape: &mut Tape, v: Var, l: Var) -> Result<Var> {
    let sq = tape.square(v)?;
    let ss = tape.reduce_sum(sq, Axis::Cols)?;
    let norm = tape.sqrt(ss)?;
    let inv = tape.reciprocal(norm)?;
    let unit = tape.scale_rows(v, inv)?;
    let lt = tape.transpose(l)?;
    tape.scale_rows(unit, lt)
}

fn activate(tape: &mut Tape, x: Var, g: Activation) -> Result<Var> {
    match g {
        Activation::Relu => tape.relu(x),
        Activation::Identity => Ok(x),
    }
}

fn check_rows_nonzero(v: &Tensor) -> Result<()> {
    for i in 0..v.rows() {
        let n = l2_norm(v.row(i));
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::DegenerateWeight(format!(
                "direction row {i} has norm {n}"
            )));
        }
    }
    Ok(())
}

fn expect_kind(layer: &Layer, kind: Kind) -> Result<()> {
    if layer.spec.kind != kind {
        return Err(Error::UnsupportedLayer(format!(
            "expected a {kind:?} layer, got {:?}",
            layer.spec.kind
        )));
    }
    Ok(())
}

pub fn forward_sp(layer: &Layer, x: &Tensor) -> Result<Tensor> {
    expect_kind(layer, Kind::Sp)?;
    Ok(layer.apply(x, Mode::Eval)?.0)
}

pub fn forward_wn(layer: &Layer, x: &Tensor, mode: Mode) -> Result<Tensor> {
    expect_kind(layer, Kind::Wn)?;
    Ok(layer.apply(x, mode)?.0)
}

pub fn forward_bn(layer: &Layer, x: &Tensor, mode: Mode) -> Result<(Tensor, Option<BatchStats>)> {
    expect_kind(layer, Kind::BnSp)?;
    layer.apply(x, mode)
}

/// GmP forward with an explicit input mean; `None` means `μ̂ = 0`.
pub fn forward_gmp(layer: &Layer, x: &Tensor, input_mean: Option<&[f64]>) -> Result<Tensor> {
    expect_kind(layer, Kind::Gmp)?;
    let mut plain = layer.clone();
    plain.spec.post_norm = PostNorm::None;
    let shifted;
    let x = match input_mean {
        Some(mu) => {
            if mu.len() != x.cols() {
                return Err(Error::Shape {
                    op: "forward_gmp",
                    detail: format!("input mean of length {} for {} columns", mu.len(), x.cols()),
                });
            }
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(mu.len()) {
                for (v, m) in row.iter_mut().zip(mu) {
                    *v -= m;
                }
            }
            shifted = Tensor::matrix(x.rows(), x.cols(), data)?;
            &shifted
        }
        None => x,
    };
    Ok(plain.apply(x, Mode::Eval)?.0)
}

/// Subtracts the batch mean (train) or `running_mean` (eval) from each column.
pub fn forward_mbn(pre: &Tensor, running_mean: &[f64], mode: Mode) -> Result<Tensor> {
    let mean = match mode {
        Mode::Train => compute_input_mean(pre)?,
        Mode::Eval => running_mean.to_vec(),
    };
    if mean.len() != pre.cols() {
        return Err(Error::Shape {
            op: "forward_mbn",
            detail: format!("mean of length {} for {} columns", mean.len(), pre.cols()),
        });
    }
    let mut data = pre.data().to_vec();
    for row in data.chunks_mut(mean.len().max(1)) {
        for (v, m) in row.iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    Tensor::matrix(pre.rows(), pre.cols(), data)
}

/// Column means of a batch.
pub fn compute_input_mean(x: &Tensor) -> Result<Vec<f64>> {
    if x.rows() == 0 {
        return Err(Error::BatchTooSmall("empty batch".into()));
    }
    let mut acc = vec![0.0; x.cols()];
    for i in 0..x.rows() {
        for (a, v) in acc.iter_mut().zip(x.row(i)) {
            *a += v;
        }
    }
    Ok(acc.into_iter().map(|a| a / x.rows() as f64).collect())
}
