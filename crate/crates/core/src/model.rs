//! Multilayer perceptrons assembled from [`layers`](crate::layers).

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{gradient_check, GradCheckReport, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{BatchStats, InitScheme, Kind, Layer, LayerSpec, Mode, PostNorm};

/// How the hidden layers of an MLP are parameterized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Parameterization {
    Sp,
    Wn,
    /// WN with mean-only batch normalization on every hidden layer.
    WnMbn,
    /// SP pre-activations wrapped in batch normalization.
    Bn,
    Gmp,
    /// GmP with input mean normalization on intermediate hidden layers.
    GmpImn,
}

impl Parameterization {
    pub const ALL: [Parameterization; 6] = [
        Parameterization::Sp,
        Parameterization::Wn,
        Parameterization::WnMbn,
        Parameterization::Bn,
        Parameterization::Gmp,
        Parameterization::GmpImn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Parameterization::Sp => "sp",
            Parameterization::Wn => "wn",
            Parameterization::WnMbn => "wn-mbn",
            Parameterization::Bn => "bn",
            Parameterization::Gmp => "gmp",
            Parameterization::GmpImn => "gmp-imn",
        }
    }

    pub fn kind(self) -> Kind {
        match self {
            Parameterization::Sp => Kind::Sp,
            Parameterization::Wn | Parameterization::WnMbn => Kind::Wn,
            Parameterization::Bn => Kind::BnSp,
            Parameterization::Gmp | Parameterization::GmpImn => Kind::Gmp,
        }
    }

    /// Post-normalization for hidden layer `index` (0 is the first hidden layer).
    pub fn post_norm(self, index: usize) -> PostNorm {
        match self {
            Parameterization::WnMbn => PostNorm::Mbn,
            // The first layer sees the data itself, whose mean is fixed.
            Parameterization::GmpImn if index > 0 => PostNorm::Imn,
            _ => PostNorm::None,
        }
    }
}

impl fmt::Display for Parameterization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Parameterization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Parameterization::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                Error::config(
                    "model.param",
                    format!("unknown parameterization `{s}` (expected sp, wn, wn-mbn, bn, gmp or gmp-imn)"),
                )
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    Mse,
    SoftmaxCe,
}

impl Loss {
    pub fn name(self) -> &'static str {
        match self {
            Loss::Mse => "mse",
            Loss::SoftmaxCe => "softmax_ce",
        }
    }
}

impl FromStr for Loss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(Loss::Mse),
            "softmax_ce" => Ok(Loss::SoftmaxCe),
            other => Err(Error::config("model.loss", format!("unknown loss `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    pub layers: Vec<LayerSpec>,
    pub loss: Loss,
    pub seed: u64,
}

impl MlpSpec {
    /// `input → hidden[0] → … → output` with the given hidden parameterization
    /// and a linear SP read-out.
    pub fn mlp(
        input: usize,
        hidden: &[usize],
        output: usize,
        param: Parameterization,
        loss: Loss,
        seed: u64,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut fan_in = input;
        for (i, &width) in hidden.iter().enumerate() {
            layers.push(LayerSpec::hidden(fan_in, width, param.kind(), param.post_norm(i)));
            fan_in = width;
        }
        layers.push(LayerSpec::output(fan_in, output));
        Self { layers, loss, seed }
    }

    pub fn validate(&self) -> Result<()> {
        let Some(last) = self.layers.last() else {
            return Err(Error::InvalidSpec("an MLP needs at least one layer".into()));
        };
        for spec in &self.layers {
            spec.validate()?;
        }
        for pair in self.layers.windows(2) {
            if pair[0].fan_out != pair[1].fan_in {
                return Err(Error::InvalidSpec(format!(
                    "fan_out {} feeds fan_in {}",
                    pair[0].fan_out, pair[1].fan_in
                )));
            }
        }
        if *last != LayerSpec::output(last.fan_in, last.fan_out) {
            return Err(Error::InvalidSpec(
                "the output layer must be a plain SP layer with identity activation".into(),
            ));
        }
        if self.loss == Loss::SoftmaxCe && last.fan_out < 2 {
            return Err(Error::InvalidSpec("softmax cross-entropy needs at least 2 outputs".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.fan_in)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }
}

/// Regression targets (`rows×out`) or class labels.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Values(Tensor),
    Labels(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Values(t) => t.rows(),
            Targets::Labels(l) => l.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Values(t) => Targets::Values(t.select_rows(idx)),
            Targets::Labels(l) => Targets::Labels(idx.iter().map(|&i| l[i]).collect()),
        }
    }
}

/// One recorded forward pass.
#[derive(Debug)]
pub struct LossRecord {
    pub tape: Tape,
    pub loss: Var,
    pub output: Var,
    /// Batch statistics per layer, for [`Model::commit_stats`].
    pub stats: Vec<Option<BatchStats>>,
}

impl LossRecord {
    pub fn loss_value(&self) -> f64 {
        self.tape.value(self.loss).data()[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: MlpSpec,
    layers: Vec<Layer>,
}

impl Model {
    /// Builds with each layer's default scheme, seeding from `spec.seed`.
    pub fn from_seed(spec: MlpSpec) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        Self::build(spec, None, &mut rng)
    }

    /// `hidden_scheme` overrides the default init of the hidden layers.
    /// The output layer always uses He.
    pub fn build<R: Rng + ?Sized>(spec: MlpSpec, hidden_scheme: Option<InitScheme>, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let last = spec.layers.len() - 1;
        let layers = spec
            .layers
            .iter()
            .enumerate()
            .map(|(i, ls)| {
                let scheme = match hidden_scheme {
                    Some(s) if i < last => s,
                    _ => InitScheme::default_for(ls.kind),
                };
                Layer::new(*ls, scheme, rng)
            })
            .collect::<Result<_>>()?;
        Ok(Self { spec, layers })
    }

    pub fn from_layers(spec: MlpSpec, layers: Vec<Layer>) -> Result<Self> {
        spec.validate()?;
        if layers.len() != spec.layers.len() || layers.iter().zip(&spec.layers).any(|(l, s)| l.spec != *s) {
            return Err(Error::InvalidSpec("layers do not match the MlpSpec".into()));
        }
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn param_tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.params.tensors()).collect()
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params.tensors_mut()).collect()
    }

    /// `layer{i}.{name}` per trainable tensor, in slot order.
    pub fn param_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.params.names().iter().map(move |n| format!("layer{i}.{n}")))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.params.count()).sum()
    }

    /// Records the network output on `tape`. With `trainable`, parameters
    /// are registered as slots `0..` in [`Model::param_tensors`] order.
    pub fn record(
        &self,
        tape: &mut Tape,
        x: Var,
        mode: Mode,
        trainable: bool,
    ) -> Result<(Var, Vec<Option<BatchStats>>)> {
        let mut h = x;
        let mut slot = 0;
        let mut stats = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let vars = if trainable {
                layer.register(tape, slot)
            } else {
                layer.register_constants(tape)
            };
            slot += vars.len();
            let (out, st) = layer.record(tape, h, &vars, mode)?;
            stats.push(st);
            h = out;
        }
        Ok((h, stats))
    }

    pub fn loss_forward(&self, x: &Tensor, y: &Targets, mode: Mode) -> Result<LossRecord> {
        let mut tape = Tape::new();
        let (loss, output, stats) = self.record_loss(&mut tape, x, y, mode)?;
        Ok(LossRecord {
            tape,
            loss,
            output,
            stats,
        })
    }

    /// Records output and loss on an existing tape, parameters as slots `0..`.
    pub fn record_loss(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        y: &Targets,
        mode: Mode,
    ) -> Result<(Var, Var, Vec<Option<BatchStats>>)> {
        if y.len() != x.rows() {
            return Err(Error::Shape {
                op: "loss_forward",
                detail: format!("{} targets for {} rows", y.len(), x.rows()),
            });
        }
        let xv = tape.constant(x.clone());
        let (output, stats) = self.record(tape, xv, mode, true)?;
        let loss = match (self.spec.loss, y) {
            (Loss::Mse, Targets::Values(t)) => {
                let tv = tape.constant(t.clone());
                tape.mse(output, tv)?
            }
            (Loss::SoftmaxCe, Targets::Labels(labels)) => tape.softmax_cross_entropy(output, labels)?,
            (loss, _) => {
                return Err(Error::InvalidSpec(format!(
                    "targets do not match the {} loss",
                    loss.name()
                )))
            }
        };
        Ok((loss, output, stats))
    }

    /// Central-difference check of the loss gradient over every trainable
    /// tensor. In train mode the batch statistics are recomputed for each
    /// perturbation, so coupling across the batch is checked too.
    pub fn gradient_check(&self, x: &Tensor, y: &Targets, mode: Mode, step: f64, tol: f64) -> Result<GradCheckReport> {
        let params: Vec<Tensor> = self.param_tensors().into_iter().cloned().collect();
        gradient_check(
            |tape, vars| {
                let mut probe = self.clone();
                for (t, v) in probe.param_tensors_mut().into_iter().zip(vars) {
                    *t = tape.value(*v).clone();
                }
                probe.record_loss(tape, x, y, mode).map(|(loss, _, _)| loss)
            },
            &params,
            step,
            tol,
        )
    }

    /// Folds train-mode batch statistics into the running statistics.
    pub fn commit_stats(&mut self, stats: &[Option<BatchStats>]) {
        for (layer, st) in self.layers.iter_mut().zip(stats) {
            if let Some(st) = st {
                layer.norm.commit(st);
            }
        }
    }

    /// Eval-mode forward pass.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (out, _) = self.record(&mut tape, xv, Mode::Eval, false)?;
        Ok(tape.value(out).clone())
    }

    pub fn check_invariants(&self) -> Result<()> {
        self.layers.iter().try_for_each(Layer::check_invariants)
    }

    pub fn uses_batch_stats(&self) -> bool {
        self.layers.iter().any(|l| l.norm.is_used())
    }
}
