//! Experiment configuration and its text format.
//!
//! One `key = value` per line, keys are dotted (`optim.lr = 0.1`). Blank
//! lines and lines starting with `#` are skipped; a `#` after a value starts
//! a comment. Keys may appear once. Lists are comma separated.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{BANANA_NOISE, LEVY_NOISE, LEVY_RANGE};
use crate::error::{Error, Result};
use crate::layers::InitScheme;
use crate::model::{Loss, Parameterization};
use crate::optim::{OptimizerKind, LR_GRID};

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    Levy {
        n_train: usize,
        n_test: usize,
        noise: f64,
        range: (f64, f64),
    },
    /// Synthetic moons unless `path` names an `x1,x2,label` file, which is
    /// then split by `train_fraction`.
    Banana {
        n_train: usize,
        n_test: usize,
        noise: f64,
        path: Option<PathBuf>,
        train_fraction: f64,
    },
    Uci {
        path: PathBuf,
        target: String,
        splits: usize,
        train_fraction: f64,
    },
}

impl DatasetSpec {
    pub fn loss(&self) -> Loss {
        match self {
            DatasetSpec::Banana { .. } => Loss::SoftmaxCe,
            _ => Loss::Mse,
        }
    }

    pub fn splits(&self) -> usize {
        match self {
            DatasetSpec::Uci { splits, .. } => *splits,
            _ => 1,
        }
    }

    fn kind_name(&self) -> &'static str {
        match self {
            DatasetSpec::Levy { .. } => "levy",
            DatasetSpec::Banana { .. } => "banana",
            DatasetSpec::Uci { .. } => "uci",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub param: Parameterization,
    /// Overrides the default init of the hidden layers.
    pub init: Option<InitScheme>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LrChoice {
    Fixed(f64),
    /// Select on a validation split carved from the (first) training set.
    Grid(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlateauConfig {
    pub reduce: usize,
    pub stop: usize,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr: LrChoice,
    pub plateau: Option<PlateauConfig>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: Option<usize>,
    pub snapshot_stride: u64,
    pub track_layer: Option<usize>,
    /// Write per-unit snapshots to `trace.csv`.
    pub trace: bool,
    pub eval_every: usize,
    /// Held out of the training set when selecting a learning rate.
    pub validation_fraction: f64,
    /// Also pick the epoch budget (up to `epochs`) on the validation split.
    pub select_epochs: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub run: RunConfig,
    pub output_dir: PathBuf,
}

const KNOWN_KEYS: &[&str] = &[
    "dataset.kind",
    "dataset.n_train",
    "dataset.n_test",
    "dataset.noise",
    "dataset.x_min",
    "dataset.x_max",
    "dataset.path",
    "dataset.target",
    "dataset.splits",
    "dataset.train_fraction",
    "model.hidden",
    "model.param",
    "model.init",
    "optim.kind",
    "optim.lr",
    "optim.grid",
    "optim.momentum",
    "optim.beta1",
    "optim.beta2",
    "optim.eps",
    "optim.plateau_reduce",
    "optim.plateau_stop",
    "optim.plateau_factor",
    "run.name",
    "run.seed",
    "run.epochs",
    "run.batch_size",
    "run.snapshot_stride",
    "run.track_layer",
    "run.trace",
    "run.eval_every",
    "run.validation_fraction",
    "run.select_epochs",
    "output.dir",
];

/// Raw `key = value` pairs, before interpretation.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut pairs = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::config(format!("line {}", i + 1), format!("expected `key = value`, got `{line}`")));
        };
        let key = key.trim();
        if !KNOWN_KEYS.contains(&key) {
            return Err(Error::config(key, "unknown key"));
        }
        if pairs.insert(key.to_string(), value.trim().to_string()).is_some() {
            return Err(Error::config(key, "given more than once"));
        }
    }
    Ok(pairs)
}

struct Fields(BTreeMap<String, String>);

impl Fields {
    fn raw(&mut self, key: &str) -> Option<String> {
        self.0.remove(key)
    }

    fn get<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .map(|v| v.parse::<T>().map_err(|e| Error::config(key, format!("`{v}`: {e}"))))
            .transpose()
    }

    fn or<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    fn required<T: std::str::FromStr>(&mut self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key)?.ok_or_else(|| Error::config(key, "required"))
    }

    fn list<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        let Some(raw) = self.raw(key) else { return Ok(None) };
        raw.split(',')
            .map(|s| {
                let s = s.trim();
                s.parse::<T>().map_err(|e| Error::config(key, format!("`{s}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    /// Keys meant for another dataset kind are errors, not silently ignored.
    fn finish(self) -> Result<()> {
        match self.0.into_keys().next() {
            Some(key) => Err(Error::config(key, "not used by this configuration")),
            None => Ok(()),
        }
    }
}

fn parse_init(raw: &str) -> std::result::Result<InitScheme, String> {
    raw.parse::<InitScheme>().map_err(|e| e.to_string())
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut f = Fields(parse_pairs(text)?);

        let kind: String = f.required("dataset.kind")?;
        let dataset = match kind.as_str() {
            "levy" => DatasetSpec::Levy {
                n_train: f.or("dataset.n_train", 256)?,
                n_test: f.or("dataset.n_test", 256)?,
                noise: f.or("dataset.noise", LEVY_NOISE)?,
                range: (f.or("dataset.x_min", LEVY_RANGE.0)?, f.or("dataset.x_max", LEVY_RANGE.1)?),
            },
            "banana" => DatasetSpec::Banana {
                n_train: f.or("dataset.n_train", 400)?,
                n_test: f.or("dataset.n_test", 400)?,
                noise: f.or("dataset.noise", BANANA_NOISE)?,
                path: f.get("dataset.path")?,
                train_fraction: f.or("dataset.train_fraction", 0.8)?,
            },
            "uci" => DatasetSpec::Uci {
                path: f.required("dataset.path")?,
                target: f.required("dataset.target")?,
                splits: f.or("dataset.splits", 10)?,
                train_fraction: f.or("dataset.train_fraction", 0.8)?,
            },
            other => {
                return Err(Error::config(
                    "dataset.kind",
                    format!("`{other}` is not one of levy, banana, uci"),
                ))
            }
        };

        let model = ModelConfig {
            hidden: f.list("model.hidden")?.ok_or_else(|| Error::config("model.hidden", "required"))?,
            param: f.required("model.param")?,
            init: f
                .raw("model.init")
                .map(|v| parse_init(&v).map_err(|e| Error::config("model.init", e)))
                .transpose()?,
        };

        let kind_name: String = f.or("optim.kind", "adam".to_string())?;
        let kind = match kind_name.as_str() {
            "adam" => {
                let OptimizerKind::Adam { beta1, beta2, eps } = OptimizerKind::adam() else {
                    unreachable!()
                };
                OptimizerKind::Adam {
                    beta1: f.or("optim.beta1", beta1)?,
                    beta2: f.or("optim.beta2", beta2)?,
                    eps: f.or("optim.eps", eps)?,
                }
            }
            "sgd" => OptimizerKind::SgdMomentum {
                momentum: f.or("optim.momentum", 0.9)?,
            },
            other => return Err(Error::config("optim.kind", format!("`{other}` is not one of adam, sgd"))),
        };
        let lr_raw = f.raw("optim.lr");
        let grid: Option<Vec<f64>> = f.list("optim.grid")?;
        let lr = match (lr_raw.as_deref(), grid) {
            (Some(_), Some(_)) => return Err(Error::config("optim.grid", "give either optim.lr or optim.grid")),
            (Some("grid"), None) => LrChoice::Grid(LR_GRID.to_vec()),
            (Some(v), None) => LrChoice::Fixed(
                v.parse()
                    .map_err(|e| Error::config("optim.lr", format!("`{v}`: {e}")))?,
            ),
            (None, Some(g)) => LrChoice::Grid(g),
            (None, None) => return Err(Error::config("optim.lr", "required (a number or `grid`)")),
        };
        let plateau = match (
            f.get::<usize>("optim.plateau_reduce")?,
            f.get::<usize>("optim.plateau_stop")?,
            f.get::<f64>("optim.plateau_factor")?,
        ) {
            (None, None, None) => None,
            (Some(reduce), Some(stop), factor) => Some(PlateauConfig {
                reduce,
                stop,
                factor: factor.unwrap_or(0.1),
            }),
            _ => {
                return Err(Error::config(
                    "optim.plateau_reduce",
                    "plateau scheduling needs both plateau_reduce and plateau_stop",
                ))
            }
        };

        let batch_raw: String = f.or("run.batch_size", "full".to_string())?;
        let batch_size = match batch_raw.as_str() {
            "full" => None,
            v => Some(
                v.parse()
                    .map_err(|_| Error::config("run.batch_size", format!("`{v}` is neither `full` nor a count")))?,
            ),
        };
        let track_raw: String = f.or("run.track_layer", "0".to_string())?;
        let track_layer = match track_raw.as_str() {
            "none" => None,
            v => Some(
                v.parse()
                    .map_err(|_| Error::config("run.track_layer", format!("`{v}` is neither `none` nor an index")))?,
            ),
        };
        let run = RunConfig {
            name: f.or("run.name", "experiment".to_string())?,
            seed: f.required("run.seed")?,
            epochs: f.or("run.epochs", 1000)?,
            batch_size,
            snapshot_stride: f.or("run.snapshot_stride", 1)?,
            track_layer,
            trace: f.or("run.trace", true)?,
            eval_every: f.or("run.eval_every", 1)?,
            validation_fraction: f.or("run.validation_fraction", 0.2)?,
            select_epochs: f.or("run.select_epochs", false)?,
        };
        let output_dir = f.or("output.dir", PathBuf::from("runs").join(&run.name))?;
        f.finish()?;

        let cfg = Self {
            dataset,
            model,
            optim: OptimConfig { kind, lr, plateau },
            run,
            output_dir,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks everything that can be checked without touching data.
    pub fn validate(&self) -> Result<()> {
        let fraction_ok = |x: f64| x > 0.0 && x < 1.0;
        match &self.dataset {
            DatasetSpec::Levy {
                n_train,
                n_test,
                noise,
                range,
            } => {
                if *n_train == 0 || *n_test == 0 {
                    return Err(Error::config("dataset.n_train", "sizes must be positive"));
                }
                if !(noise.is_finite() && *noise >= 0.0) {
                    return Err(Error::config("dataset.noise", "must be finite and non-negative"));
                }
                if !(range.0.is_finite() && range.1.is_finite() && range.0 < range.1) {
                    return Err(Error::config("dataset.x_min", "need finite x_min < x_max"));
                }
            }
            DatasetSpec::Banana {
                n_train,
                n_test,
                noise,
                train_fraction,
                ..
            } => {
                if *n_train < 2 || *n_test < 2 || n_train % 2 == 1 || n_test % 2 == 1 {
                    return Err(Error::config("dataset.n_train", "banana sizes must be even and ≥ 2"));
                }
                if !(noise.is_finite() && *noise >= 0.0) {
                    return Err(Error::config("dataset.noise", "must be finite and non-negative"));
                }
                if !fraction_ok(*train_fraction) {
                    return Err(Error::config("dataset.train_fraction", "must lie in (0, 1)"));
                }
            }
            DatasetSpec::Uci {
                splits,
                train_fraction,
                target,
                ..
            } => {
                if *splits == 0 {
                    return Err(Error::config("dataset.splits", "must be positive"));
                }
                if !fraction_ok(*train_fraction) {
                    return Err(Error::config("dataset.train_fraction", "must lie in (0, 1)"));
                }
                if target.is_empty() {
                    return Err(Error::config("dataset.target", "must name a column"));
                }
            }
        }
        if self.model.hidden.is_empty() || self.model.hidden.contains(&0) {
            return Err(Error::config("model.hidden", "need at least one non-empty hidden layer"));
        }
        if let Some(scheme) = self.model.init {
            let gmp_scheme = matches!(scheme, InitScheme::GmpDefault | InitScheme::GmpPerAngleUniform);
            let gmp_model = self.model.param.kind() == crate::layers::Kind::Gmp;
            if gmp_scheme != gmp_model {
                return Err(Error::config(
                    "model.init",
                    format!("{} does not apply to {}", scheme.name(), self.model.param),
                ));
            }
        }
        match &self.optim.lr {
            LrChoice::Fixed(lr) if !(lr.is_finite() && *lr > 0.0) => {
                return Err(Error::config("optim.lr", "must be finite and positive"));
            }
            LrChoice::Grid(g) if g.is_empty() || g.iter().any(|lr| !(lr.is_finite() && *lr > 0.0)) => {
                return Err(Error::config("optim.grid", "need one or more finite positive rates"));
            }
            _ => {}
        }
        // Reuse the optimizer's own checks on momentum and betas.
        crate::optim::Optimizer::new(self.optim.kind, 1.0)
            .map_err(|e| Error::config(format!("optim.{}", self.optim.kind.name()), e.to_string()))?;
        if let Some(p) = self.optim.plateau {
            crate::optim::PlateauScheduler::new(p.reduce, p.stop, p.factor, crate::optim::Goal::Minimize)?;
        }
        let r = &self.run;
        if r.epochs == 0 {
            return Err(Error::config("run.epochs", "must be positive"));
        }
        if r.batch_size == Some(0) {
            return Err(Error::config("run.batch_size", "must be positive"));
        }
        if r.snapshot_stride == 0 {
            return Err(Error::config("run.snapshot_stride", "must be positive"));
        }
        if r.eval_every == 0 {
            return Err(Error::config("run.eval_every", "must be positive"));
        }
        if let Some(l) = r.track_layer {
            if l >= self.model.hidden.len() {
                return Err(Error::config(
                    "run.track_layer",
                    format!("layer {l} is not hidden; the net has {}", self.model.hidden.len()),
                ));
            }
        }
        if !fraction_ok(r.validation_fraction) {
            return Err(Error::config("run.validation_fraction", "must lie in (0, 1)"));
        }
        if r.name.is_empty() || r.name.contains(char::is_whitespace) {
            return Err(Error::config("run.name", "must be a non-empty word"));
        }
        Ok(())
    }

    /// The fully resolved config; [`ExperimentConfig::parse`] reads it back
    /// to an equal value.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("dataset.kind", self.dataset.kind_name().into());
        match &self.dataset {
            DatasetSpec::Levy {
                n_train,
                n_test,
                noise,
                range,
            } => {
                kv("dataset.n_train", n_train.to_string());
                kv("dataset.n_test", n_test.to_string());
                kv("dataset.noise", noise.to_string());
                kv("dataset.x_min", range.0.to_string());
                kv("dataset.x_max", range.1.to_string());
            }
            DatasetSpec::Banana {
                n_train,
                n_test,
                noise,
                path,
                train_fraction,
            } => {
                kv("dataset.n_train", n_train.to_string());
                kv("dataset.n_test", n_test.to_string());
                kv("dataset.noise", noise.to_string());
                if let Some(p) = path {
                    kv("dataset.path", p.display().to_string());
                }
                kv("dataset.train_fraction", train_fraction.to_string());
            }
            DatasetSpec::Uci {
                path,
                target,
                splits,
                train_fraction,
            } => {
                kv("dataset.path", path.display().to_string());
                kv("dataset.target", target.clone());
                kv("dataset.splits", splits.to_string());
                kv("dataset.train_fraction", train_fraction.to_string());
            }
        }
        kv("model.hidden", join(&self.model.hidden));
        kv("model.param", self.model.param.name().into());
        if let Some(init) = self.model.init {
            kv("model.init", init.name().into());
        }
        kv("optim.kind", self.optim.kind.name().into());
        match self.optim.kind {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                kv("optim.beta1", beta1.to_string());
                kv("optim.beta2", beta2.to_string());
                kv("optim.eps", eps.to_string());
            }
            OptimizerKind::SgdMomentum { momentum } => kv("optim.momentum", momentum.to_string()),
        }
        match &self.optim.lr {
            LrChoice::Fixed(lr) => kv("optim.lr", lr.to_string()),
            LrChoice::Grid(g) => kv("optim.grid", join(g)),
        }
        if let Some(p) = self.optim.plateau {
            kv("optim.plateau_reduce", p.reduce.to_string());
            kv("optim.plateau_stop", p.stop.to_string());
            kv("optim.plateau_factor", p.factor.to_string());
        }
        let r = &self.run;
        kv("run.name", r.name.clone());
        kv("run.seed", r.seed.to_string());
        kv("run.epochs", r.epochs.to_string());
        kv("run.batch_size", r.batch_size.map_or("full".into(), |b| b.to_string()));
        kv("run.snapshot_stride", r.snapshot_stride.to_string());
        kv("run.track_layer", r.track_layer.map_or("none".into(), |l| l.to_string()));
        kv("run.trace", r.trace.to_string());
        kv("run.eval_every", r.eval_every.to_string());
        kv("run.validation_fraction", r.validation_fraction.to_string());
        kv("run.select_epochs", r.select_epochs.to_string());
        kv("output.dir", self.output_dir.display().to_string());
        s
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}
