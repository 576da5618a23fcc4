//! Named experiment setups.

use std::path::{Path, PathBuf};

use super::config::{DatasetSpec, ExperimentConfig, LrChoice, ModelConfig, OptimConfig, RunConfig};
use crate::data::{BANANA_NOISE, LEVY_NOISE, LEVY_RANGE};
use crate::error::{Error, Result};
use crate::layers::Kind;
use crate::model::Parameterization;
use crate::optim::OptimizerKind;

pub const LEVY_WIDTH: usize = 100;
pub const BANANA_WIDTH: usize = 10;
pub const UCI_WIDTH: usize = 100;
pub const UCI_SPLITS: usize = 10;
pub const LEVY_EPOCHS: usize = 2000;
pub const BANANA_EPOCHS: usize = 1000;
/// Upper bound; the budget actually used is picked on validation data.
pub const UCI_MAX_EPOCHS: usize = 1000;

/// Bundled UCI tables and their target columns.
pub const UCI_DATASETS: [(&str, &str); 3] = [("boston", "medv"), ("wine_red", "quality"), ("auto_mpg", "mpg")];

/// Where the bundled UCI tables live in the source tree.
pub fn default_data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join("uci")
}

/// The learning rate that does best on the small benchmarks: larger for
/// GmP than for the other parameterizations.
pub fn tuned_lr(param: Parameterization) -> f64 {
    if param.kind() == Kind::Gmp {
        0.1
    } else {
        0.01
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PresetOptions {
    pub param: Parameterization,
    /// `None` keeps the preset's own choice.
    pub lr: Option<LrChoice>,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub data_dir: PathBuf,
}

impl PresetOptions {
    pub fn new(param: Parameterization, seed: u64) -> Self {
        Self {
            param,
            lr: None,
            seed,
            out: None,
            epochs: None,
            data_dir: default_data_dir(),
        }
    }
}

/// Splits `levy-gmp` style names into the preset and a parameterization.
pub fn split_name(name: &str) -> (&str, Option<Parameterization>) {
    let mut params = Parameterization::ALL;
    // longest first so `gmp-imn` wins over `imn`-less `gmp`
    params.sort_by_key(|p| std::cmp::Reverse(p.name().len()));
    for p in params {
        if let Some(base) = name.strip_suffix(p.name()).and_then(|b| b.strip_suffix('-')) {
            if is_known(base) {
                return (base, Some(p));
            }
        }
    }
    (name, None)
}

fn is_known(name: &str) -> bool {
    matches!(name, "levy" | "banana") || uci_target(name.strip_prefix("uci-").unwrap_or("")).is_some()
}

fn uci_target(name: &str) -> Option<&'static str> {
    UCI_DATASETS.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

pub fn preset_names() -> Vec<String> {
    let mut names = vec!["levy".to_string(), "banana".to_string()];
    names.extend(UCI_DATASETS.iter().map(|(n, _)| format!("uci-{n}")));
    names
}

pub fn preset(name: &str, opts: &PresetOptions) -> Result<ExperimentConfig> {
    let param = opts.param;
    let (dataset, hidden, epochs, default_lr, select_epochs) = match name {
        "levy" => (
            DatasetSpec::Levy {
                n_train: 256,
                n_test: 256,
                noise: LEVY_NOISE,
                range: LEVY_RANGE,
            },
            LEVY_WIDTH,
            LEVY_EPOCHS,
            tuned_lr(param),
            false,
        ),
        "banana" => (
            DatasetSpec::Banana {
                n_train: 400,
                n_test: 400,
                noise: BANANA_NOISE,
                path: None,
                train_fraction: 0.8,
            },
            BANANA_WIDTH,
            BANANA_EPOCHS,
            0.1,
            false,
        ),
        other => {
            let Some(target) = other.strip_prefix("uci-").and_then(uci_target) else {
                return Err(Error::config(
                    "preset",
                    format!("unknown preset `{other}`; known: {}", preset_names().join(", ")),
                ));
            };
            let file = &other["uci-".len()..];
            (
                DatasetSpec::Uci {
                    path: opts.data_dir.join(format!("{file}.csv")),
                    target: target.to_string(),
                    splits: UCI_SPLITS,
                    train_fraction: 0.8,
                },
                UCI_WIDTH,
                UCI_MAX_EPOCHS,
                tuned_lr(param),
                true,
            )
        }
    };
    let uci = matches!(dataset, DatasetSpec::Uci { .. });
    let run_name = format!("{name}-{}", param.name());
    let cfg = ExperimentConfig {
        dataset,
        model: ModelConfig {
            hidden: vec![hidden],
            param,
            init: None,
        },
        optim: OptimConfig {
            kind: OptimizerKind::adam(),
            lr: opts.lr.clone().unwrap_or(LrChoice::Fixed(default_lr)),
            plateau: None,
        },
        run: RunConfig {
            name: run_name.clone(),
            seed: opts.seed,
            epochs: opts.epochs.unwrap_or(epochs),
            batch_size: None,
            // UCI runs are about test error, so boundaries are sampled sparsely
            snapshot_stride: if uci { 10 } else { 1 },
            track_layer: Some(0),
            trace: !uci,
            eval_every: if uci { 10 } else { 1 },
            validation_fraction: 0.2,
            select_epochs,
        },
        output_dir: opts.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(run_name)),
    };
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn widths_and_split_counts() {
        let opts = PresetOptions::new(Parameterization::Gmp, 0);
        assert_eq!(preset("banana", &opts).unwrap().model.hidden, vec![10]);
        assert_eq!(preset("levy", &opts).unwrap().model.hidden, vec![100]);
        let uci = preset("uci-boston", &opts).unwrap();
        assert_eq!(uci.dataset.splits(), 10);
        assert_eq!(uci.model.hidden, vec![100]);
        assert_eq!(uci.run.batch_size, None);
    }

    #[test]
    fn default_learning_rates() {
        let lr = |p| preset("levy", &PresetOptions::new(p, 0)).unwrap().optim.lr;
        assert_eq!(lr(Parameterization::Gmp), LrChoice::Fixed(0.1));
        assert_eq!(lr(Parameterization::Bn), LrChoice::Fixed(0.01));
        let banana = preset("banana", &PresetOptions::new(Parameterization::Sp, 0)).unwrap();
        assert_eq!(banana.optim.lr, LrChoice::Fixed(0.1));
    }

    #[test]
    fn suffixed_names() {
        assert_eq!(split_name("levy-gmp"), ("levy", Some(Parameterization::Gmp)));
        assert_eq!(split_name("banana-gmp-imn"), ("banana", Some(Parameterization::GmpImn)));
        assert_eq!(split_name("uci-wine_red-wn-mbn"), ("uci-wine_red", Some(Parameterization::WnMbn)));
        assert_eq!(split_name("uci-boston"), ("uci-boston", None));
        assert_eq!(split_name("mnist-gmp"), ("mnist-gmp", None));
    }

    #[test]
    fn unknown_preset_is_a_config_error() {
        let err = preset("mnist", &PresetOptions::new(Parameterization::Sp, 0)).unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "preset"));
    }

    #[test]
    fn presets_survive_the_text_format() {
        for name in preset_names() {
            let cfg = preset(&name, &PresetOptions::new(Parameterization::WnMbn, 3)).unwrap();
            assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg, "{name}");
        }
    }
}
