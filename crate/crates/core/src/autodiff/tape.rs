use std::collections::BTreeMap;

use super::tensor::{matmul_raw, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reduction direction. `Rows` collapses the row dimension (`r×c → 1×c`),
/// `Cols` collapses the column dimension (`r×c → r×1`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    ScaleCols(Var, Var),
    ScaleRows(Var, Var),
    Relu(Var),
    Sin(Var),
    Cos(Var),
    Sqrt(Var),
    Square(Var),
    Reciprocal(Var),
    AddScalar(Var),
    Scale(Var, f64),
    ReduceSum(Var, Axis),
    ReduceMean(Var, Axis),
    ReduceVar { x: Var, axis: Axis, biased: bool },
    Concat(Vec<Var>, Axis),
    SliceCols { x: Var, start: usize },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Tensor },
    Mse(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    slot: Option<usize>,
}

/// Append-only record of primitive applications for reverse-mode
/// differentiation. Operands always precede the nodes that use them.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss, keyed by parameter slot.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_slot: BTreeMap<usize, Tensor>,
}

impl Gradients {
    /// Replaces the gradient of `slot`.
    pub fn insert(&mut self, slot: usize, grad: Tensor) {
        self.by_slot.insert(slot, grad);
    }

    pub fn get(&self, slot: usize) -> Option<&Tensor> {
        self.by_slot.get(&slot)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.by_slot.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.by_slot.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_slot.is_empty()
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

fn dims(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    if !t.is_matrix() {
        return Err(shape_err(op, format!("expected a matrix, got {:?}", t.shape())));
    }
    Ok((t.rows(), t.cols()))
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip_map keeps shape")
}

fn zeros_like(t: &Tensor) -> Tensor {
    Tensor::new(t.shape().to_vec(), vec![0.0; t.len()]).expect("same shape")
}

fn accumulate(slot: &mut Option<Tensor>, grad: Tensor) {
    match slot {
        Some(acc) => {
            for (a, g) in acc.data_mut().iter_mut().zip(grad.data()) {
                *a += g;
            }
        }
        None => *slot = Some(grad),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Trainable leaf whose gradient is reported under `slot`.
    pub fn param(&mut self, slot: usize, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, Some(slot))
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, None)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, slot: Option<usize>) -> Var {
        self.nodes.push(Node { value, op, slot });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        Ok(self.push_raw(value, op, None))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims(self.value(a), "matmul")?;
        let (k2, n) = dims(self.value(b), "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("{m}×{k} · {k2}×{n}")));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul", Tensor::matrix(m, n, out)?, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        dims(self.value(a), "transpose")?;
        let out = self.value(a).transpose();
        self.push("transpose", out, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push("add", out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push("sub", out, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push("mul", out, Op::Mul(a, b))
    }

    /// `x + 1ᵀrow`: adds a `1×c` row to every row of `x`.
    pub fn broadcast_add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = dims(self.value(x), "broadcast_add_row")?;
        if self.value(row).shape() != [1, c] {
            return Err(shape_err(
                "broadcast_add_row",
                format!("row {:?} for {r}×{c}", self.value(row).shape()),
            ));
        }
        let mut out = self.value(x).clone();
        let rv = self.value(row).data().to_vec();
        for chunk in out.data_mut().chunks_mut(c.max(1)) {
            for (o, b) in chunk.iter_mut().zip(&rv) {
                *o += b;
            }
        }
        self.push("broadcast_add_row", out, Op::AddRow(x, row))
    }

    /// Multiplies column `j` of `x` by `scale[0, j]`.
    pub fn scale_cols(&mut self, x: Var, scale: Var) -> Result<Var> {
        let (r, c) = dims(self.value(x), "scale_cols")?;
        if self.value(scale).shape() != [1, c] {
            return Err(shape_err(
                "scale_cols",
                format!("scale {:?} for {r}×{c}", self.value(scale).shape()),
            ));
        }
        let mut out = self.value(x).clone();
        let s = self.value(scale).data().to_vec();
        for chunk in out.data_mut().chunks_mut(c.max(1)) {
            for (o, k) in chunk.iter_mut().zip(&s) {
                *o *= k;
            }
        }
        self.push("scale_cols", out, Op::ScaleCols(x, scale))
    }

    /// Multiplies row `i` of `x` by `scale[i, 0]`.
    pub fn scale_rows(&mut self, x: Var, scale: Var) -> Result<Var> {
        let (r, c) = dims(self.value(x), "scale_rows")?;
        if self.value(scale).shape() != [r, 1] {
            return Err(shape_err(
                "scale_rows",
                format!("scale {:?} for {r}×{c}", self.value(scale).shape()),
            ));
        }
        let mut out = self.value(x).clone();
        let s = self.value(scale).data().to_vec();
        for (chunk, k) in out.data_mut().chunks_mut(c.max(1)).zip(&s) {
            for o in chunk.iter_mut() {
                *o *= k;
            }
        }
        self.push("scale_rows", out, Op::ScaleRows(x, scale))
    }

    fn unary(
        &mut self,
        name: &'static str,
        a: Var,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let out = self.value(a).map(f);
        self.push(name, out, op)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.unary("sin", a, f64::sin, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.unary("cos", a, f64::cos, Op::Cos(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary("sqrt", a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, |x| x * x, Op::Square(a))
    }

    pub fn reciprocal(&mut self, a: Var) -> Result<Var> {
        self.unary("reciprocal", a, |x| 1.0 / x, Op::Reciprocal(a))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, |x| x * c, Op::Scale(a, c))
    }

    fn reduce(&self, a: Var, axis: Axis, op: &'static str) -> Result<(usize, usize, Tensor)> {
        let (r, c) = dims(self.value(a), op)?;
        let x = self.value(a);
        let out = match axis {
            Axis::Rows => {
                let mut acc = vec![0.0; c];
                for i in 0..r {
                    for (s, v) in acc.iter_mut().zip(x.row(i)) {
                        *s += v;
                    }
                }
                Tensor::row_vector(acc)
            }
            Axis::Cols => Tensor::column_vector((0..r).map(|i| x.row(i).iter().sum()).collect()),
        };
        Ok((r, c, out))
    }

    pub fn reduce_sum(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let (_, _, out) = self.reduce(a, axis, "reduce_sum")?;
        self.push("reduce_sum", out, Op::ReduceSum(a, axis))
    }

    pub fn reduce_mean(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let (r, c, sum) = self.reduce(a, axis, "reduce_mean")?;
        let n = match axis {
            Axis::Rows => r,
            Axis::Cols => c,
        };
        if n == 0 {
            return Err(shape_err("reduce_mean", "empty reduction".into()));
        }
        let out = sum.map(|s| s / n as f64);
        self.push("reduce_mean", out, Op::ReduceMean(a, axis))
    }

    /// Variance along `axis`; `biased` divides by `N`, otherwise by `N - 1`.
    pub fn reduce_var(&mut self, a: Var, axis: Axis, biased: bool) -> Result<Var> {
        let (r, c, sum) = self.reduce(a, axis, "reduce_var")?;
        let n = match axis {
            Axis::Rows => r,
            Axis::Cols => c,
        };
        let denom = if biased { n } else { n.saturating_sub(1) };
        if denom == 0 {
            return Err(shape_err("reduce_var", format!("{n} samples")));
        }
        let mean = sum.map(|s| s / n as f64);
        let x = self.value(a);
        let out = match axis {
            Axis::Rows => {
                let mut acc = vec![0.0; c];
                for i in 0..r {
                    for ((s, v), m) in acc.iter_mut().zip(x.row(i)).zip(mean.data()) {
                        *s += (v - m) * (v - m);
                    }
                }
                Tensor::row_vector(acc.into_iter().map(|s| s / denom as f64).collect())
            }
            Axis::Cols => Tensor::column_vector(
                (0..r)
                    .map(|i| {
                        let m = mean.data()[i];
                        x.row(i).iter().map(|v| (v - m) * (v - m)).sum::<f64>() / denom as f64
                    })
                    .collect(),
            ),
        };
        self.push("reduce_var", out, Op::ReduceVar { x: a, axis, biased })
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err("concat", "nothing to concatenate".into()));
        }
        let shapes: Vec<(usize, usize)> = parts
            .iter()
            .map(|&p| dims(self.value(p), "concat"))
            .collect::<Result<_>>()?;
        let out = match axis {
            Axis::Cols => {
                let r = shapes[0].0;
                if shapes.iter().any(|s| s.0 != r) {
                    return Err(shape_err("concat", format!("row counts {shapes:?}")));
                }
                let c: usize = shapes.iter().map(|s| s.1).sum();
                let mut data = Vec::with_capacity(r * c);
                for i in 0..r {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row(i));
                    }
                }
                Tensor::matrix(r, c, data)?
            }
            Axis::Rows => {
                let c = shapes[0].1;
                if shapes.iter().any(|s| s.1 != c) {
                    return Err(shape_err("concat", format!("column counts {shapes:?}")));
                }
                let r: usize = shapes.iter().map(|s| s.0).sum();
                let mut data = Vec::with_capacity(r * c);
                for &p in parts {
                    data.extend_from_slice(self.value(p).data());
                }
                Tensor::matrix(r, c, data)?
            }
        };
        self.push("concat", out, Op::Concat(parts.to_vec(), axis))
    }

    /// Columns `start..end` of `x`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = dims(self.value(x), "slice_cols")?;
        if start > end || end > c {
            return Err(shape_err("slice_cols", format!("{start}..{end} of {c} columns")));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&self.value(x).row(i)[start..end]);
        }
        self.push("slice_cols", Tensor::matrix(r, w, data)?, Op::SliceCols { x, start })
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (r, k) = dims(self.value(logits), "softmax_cross_entropy")?;
        if labels.len() != r || r == 0 {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("{} labels for {r} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("label {bad} out of range for {k} classes"),
            ));
        }
        let z = self.value(logits);
        let mut probs = Vec::with_capacity(r * k);
        let mut loss = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = z.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_sum = sum.ln() + max;
            loss += log_sum - row[label];
            probs.extend(row.iter().map(|v| (v - log_sum).exp()));
        }
        let probs = Tensor::matrix(r, k, probs)?;
        self.push(
            "softmax_cross_entropy",
            Tensor::scalar(loss / r as f64),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("mse", pred, target)?;
        let n = self.value(pred).len();
        if n == 0 {
            return Err(shape_err("mse", "empty input".into()));
        }
        let sum: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        self.push("mse", Tensor::scalar(sum / n as f64), Op::Mse(pred, target))
    }

    /// Reverse sweep from a scalar `loss`. Contributions of leaves sharing a
    /// slot are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let adjoints = self.adjoints(loss)?;
        let mut grads = Gradients::default();
        for (node, adj) in self.nodes.iter().zip(adjoints) {
            if let (Some(slot), Some(g)) = (node.slot, adj) {
                let mut acc = grads.by_slot.remove(&slot);
                accumulate(&mut acc, g);
                grads.by_slot.extend(acc.map(|t| (slot, t)));
            }
        }
        // slots the loss does not depend on get explicit zeros
        for node in &self.nodes {
            if let Some(slot) = node.slot {
                grads.by_slot.entry(slot).or_insert_with(|| zeros_like(&node.value));
            }
        }
        Ok(grads)
    }

    /// Gradient of `loss` with respect to any recorded value.
    pub fn grad_wrt(&self, loss: Var, wrt: Var) -> Result<Tensor> {
        let mut adjoints = self.adjoints(loss)?;
        Ok(adjoints
            .get_mut(wrt.0)
            .and_then(Option::take)
            .unwrap_or_else(|| zeros_like(&self.nodes[wrt.0].value)))
    }

    fn adjoints(&self, loss: Var) -> Result<Vec<Option<Tensor>>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0])?);

        for idx in (0..=loss.0).rev() {
            let g = match &adj[idx] {
                Some(g) => g.clone(),
                None => continue,
            };
            let node = &self.nodes[idx];
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (m, k) = (val(*a).rows(), val(*a).cols());
                    let n = val(*b).cols();
                    // dA = G Bᵀ, dB = Aᵀ G
                    let bt = val(*b).transpose();
                    let da = matmul_raw(g.data(), bt.data(), m, n, k);
                    let at = val(*a).transpose();
                    let db = matmul_raw(at.data(), g.data(), k, m, n);
                    accumulate(&mut adj[a.0], Tensor::matrix(m, k, da)?);
                    accumulate(&mut adj[b.0], Tensor::matrix(k, n, db)?);
                }
                Op::Transpose(a) => accumulate(&mut adj[a.0], g.transpose()),
                Op::Add(a, b) => {
                    accumulate(&mut adj[a.0], g.clone());
                    accumulate(&mut adj[b.0], g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj[a.0], g.clone());
                    accumulate(&mut adj[b.0], g.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    accumulate(&mut adj[a.0], zip_map(&g, val(*b), |x, y| x * y));
                    accumulate(&mut adj[b.0], zip_map(&g, val(*a), |x, y| x * y));
                }
                Op::AddRow(x, row) => {
                    let c = g.cols();
                    let mut dr = vec![0.0; c];
                    for i in 0..g.rows() {
                        for (s, v) in dr.iter_mut().zip(g.row(i)) {
                            *s += v;
                        }
                    }
                    accumulate(&mut adj[x.0], g);
                    accumulate(&mut adj[row.0], Tensor::row_vector(dr));
                }
                Op::ScaleCols(x, s) => {
                    let xv = val(*x);
                    let sv = val(*s).data();
                    let c = xv.cols();
                    let mut dx = g.clone();
                    let mut ds = vec![0.0; c];
                    for i in 0..xv.rows() {
                        for j in 0..c {
                            let gij = g.get(i, j);
                            dx.set(i, j, gij * sv[j]);
                            ds[j] += gij * xv.get(i, j);
                        }
                    }
                    accumulate(&mut adj[x.0], dx);
                    accumulate(&mut adj[s.0], Tensor::row_vector(ds));
                }
                Op::ScaleRows(x, s) => {
                    let xv = val(*x);
                    let sv = val(*s).data();
                    let r = xv.rows();
                    let mut dx = g.clone();
                    let mut ds = vec![0.0; r];
                    for i in 0..r {
                        for j in 0..xv.cols() {
                            let gij = g.get(i, j);
                            dx.set(i, j, gij * sv[i]);
                            ds[i] += gij * xv.get(i, j);
                        }
                    }
                    accumulate(&mut adj[x.0], dx);
                    accumulate(&mut adj[s.0], Tensor::column_vector(ds));
                }
                Op::Relu(a) => {
                    let d = zip_map(&g, val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                    accumulate(&mut adj[a.0], d);
                }
                Op::Sin(a) => {
                    let d = zip_map(&g, val(*a), |gv, x| gv * x.cos());
                    accumulate(&mut adj[a.0], d);
                }
                Op::Cos(a) => {
                    let d = zip_map(&g, val(*a), |gv, x| -gv * x.sin());
                    accumulate(&mut adj[a.0], d);
                }
                Op::Sqrt(a) => {
                    let d = zip_map(&g, &node.value, |gv, y| gv / (2.0 * y));
                    accumulate(&mut adj[a.0], d);
                }
                Op::Square(a) => {
                    let d = zip_map(&g, val(*a), |gv, x| 2.0 * x * gv);
                    accumulate(&mut adj[a.0], d);
                }
                Op::Reciprocal(a) => {
                    let d = zip_map(&g, &node.value, |gv, y| -gv * y * y);
                    accumulate(&mut adj[a.0], d);
                }
                Op::AddScalar(a) => accumulate(&mut adj[a.0], g),
                Op::Scale(a, c) => {
                    let c = *c;
                    accumulate(&mut adj[a.0], g.map(|v| v * c));
                }
                Op::ReduceSum(a, axis) | Op::ReduceMean(a, axis) => {
                    let xv = val(*a);
                    let (r, c) = (xv.rows(), xv.cols());
                    let scale = match (&node.op, axis) {
                        (Op::ReduceMean(..), Axis::Rows) => 1.0 / r as f64,
                        (Op::ReduceMean(..), Axis::Cols) => 1.0 / c as f64,
                        _ => 1.0,
                    };
                    let mut d = Tensor::zeros(r, c);
                    for i in 0..r {
                        for j in 0..c {
                            let gv = match axis {
                                Axis::Rows => g.data()[j],
                                Axis::Cols => g.data()[i],
                            };
                            d.set(i, j, gv * scale);
                        }
                    }
                    accumulate(&mut adj[a.0], d);
                }
                Op::ReduceVar { x, axis, biased } => {
                    let xv = val(*x);
                    let (r, c) = (xv.rows(), xv.cols());
                    let n = match axis {
                        Axis::Rows => r,
                        Axis::Cols => c,
                    };
                    let denom = if *biased { n } else { n - 1 } as f64;
                    let mut d = Tensor::zeros(r, c);
                    match axis {
                        Axis::Rows => {
                            for j in 0..c {
                                let mean = (0..r).map(|i| xv.get(i, j)).sum::<f64>() / r as f64;
                                for i in 0..r {
                                    d.set(i, j, g.data()[j] * 2.0 * (xv.get(i, j) - mean) / denom);
                                }
                            }
                        }
                        Axis::Cols => {
                            for i in 0..r {
                                let mean = xv.row(i).iter().sum::<f64>() / c as f64;
                                for j in 0..c {
                                    d.set(i, j, g.data()[i] * 2.0 * (xv.get(i, j) - mean) / denom);
                                }
                            }
                        }
                    }
                    accumulate(&mut adj[x.0], d);
                }
                Op::Concat(parts, axis) => match axis {
                    Axis::Cols => {
                        let mut offset = 0;
                        for p in parts {
                            let (r, w) = (val(*p).rows(), val(*p).cols());
                            let mut data = Vec::with_capacity(r * w);
                            for i in 0..r {
                                data.extend_from_slice(&g.row(i)[offset..offset + w]);
                            }
                            offset += w;
                            accumulate(&mut adj[p.0], Tensor::matrix(r, w, data)?);
                        }
                    }
                    Axis::Rows => {
                        let mut offset = 0;
                        for p in parts {
                            let len = val(*p).len();
                            let data = g.data()[offset..offset + len].to_vec();
                            offset += len;
                            accumulate(&mut adj[p.0], Tensor::new(val(*p).shape().to_vec(), data)?);
                        }
                    }
                },
                Op::SliceCols { x, start } => {
                    let xv = val(*x);
                    let mut d = Tensor::zeros(xv.rows(), xv.cols());
                    for i in 0..g.rows() {
                        for j in 0..g.cols() {
                            d.set(i, start + j, g.get(i, j));
                        }
                    }
                    accumulate(&mut adj[x.0], d);
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let gv = g.data()[0];
                    let r = probs.rows();
                    let mut d = probs.clone();
                    for (i, &l) in labels.iter().enumerate() {
                        let v = d.get(i, l);
                        d.set(i, l, v - 1.0);
                    }
                    let scale = gv / r as f64;
                    accumulate(&mut adj[logits.0], d.map(|v| v * scale));
                }
                Op::Mse(p, t) => {
                    let n = val(*p).len() as f64;
                    let gv = g.data()[0];
                    let d = zip_map(val(*p), val(*t), |a, b| 2.0 * (a - b) / n * gv);
                    accumulate(&mut adj[t.0], d.map(|v| -v));
                    accumulate(&mut adj[p.0], d);
                }
            }
        }
        Ok(adj)
    }
}
