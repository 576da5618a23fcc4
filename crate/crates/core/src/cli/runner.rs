//! Executes an [`ExperimentConfig`] and writes its run directory.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::save_checkpoint;
use super::config::{DatasetSpec, ExperimentConfig, LrChoice};
use crate::analysis::{export_trace, StabilityTrace};
use crate::csvio::{fmt_f64, CsvOut};
use crate::data::{gen_banana, gen_levy, load_banana_csv, load_uci_csv_with, split_indices, Dataset};
use crate::error::{Error, Result};
use crate::model::{MlpSpec, Model};
use crate::optim::{select_from_table, GridSelection, Optimizer, PlateauScheduler, RunOutcome};
use crate::train::{fit, metric_goal, EpochMetrics, FitReport, TrainConfig};

pub const METRICS_HEADER: [&str; 4] = ["epoch", "train_loss", "test_metric", "lr"];
pub const RESULTS_HEADER: [&str; 5] = ["split", "lr", "test_metric", "steps", "diverged_at"];
pub const GRID_HEADER: [&str; 4] = ["lr", "validation_metric", "best_epoch", "diverged"];

/// Maps `f` over `items` on up to `threads` scoped workers. Results come
/// back in input order whatever the scheduling.
pub fn parallel_map<T, R, F>(items: &[T], threads: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<R>> = std::iter::repeat_with(|| None).take(items.len()).collect();
    let done = std::sync::Mutex::new(Vec::with_capacity(items.len()));
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(i, &items[i]);
                done.lock().expect("worker panicked").push((i, r));
            });
        }
    });
    for (i, r) in done.into_inner().expect("worker panicked") {
        slots[i] = Some(r);
    }
    slots.into_iter().map(|r| r.expect("every item ran")).collect()
}

/// Worker cap from `GEOPARAM_THREADS`, if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    std::env::var("GEOPARAM_THREADS")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n: &usize| n > 0)
}

/// The (train, test) pairs a config trains on, one per split.
pub fn load_splits(cfg: &ExperimentConfig) -> Result<Vec<(Dataset, Dataset)>> {
    let seed = cfg.run.seed;
    match &cfg.dataset {
        DatasetSpec::Levy {
            n_train,
            n_test,
            noise,
            range,
        } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let train = gen_levy(*n_train, *noise, *range, &mut rng)?;
            let test = gen_levy(*n_test, *noise, *range, &mut rng)?;
            Ok(vec![(train, test)])
        }
        DatasetSpec::Banana {
            n_train,
            n_test,
            noise,
            path: None,
            ..
        } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let train = gen_banana(*n_train, *noise, &mut rng)?;
            let test = gen_banana(*n_test, *noise, &mut rng)?;
            Ok(vec![(train, test)])
        }
        DatasetSpec::Banana {
            path: Some(path),
            train_fraction,
            ..
        } => {
            let all = load_banana_csv(path)?;
            let (tr, te) = split_indices(all.len(), *train_fraction, seed);
            if tr.is_empty() || te.is_empty() {
                return Err(Error::Data(format!("{}: too few rows to split", path.display())));
            }
            Ok(vec![(all.select(&tr), all.select(&te))])
        }
        DatasetSpec::Uci {
            path,
            target,
            splits,
            train_fraction,
        } => (0..*splits as u64)
            .map(|s| load_uci_csv_with(path, target, seed + s, *train_fraction))
            .collect(),
    }
}

fn mlp_spec(cfg: &ExperimentConfig, data: &Dataset, seed: u64) -> MlpSpec {
    let outputs = match &data.y {
        crate::model::Targets::Values(t) => t.cols(),
        crate::model::Targets::Labels(_) => 2,
    };
    MlpSpec::mlp(data.dim(), &cfg.model.hidden, outputs, cfg.model.param, cfg.dataset.loss(), seed)
}

fn build_model(cfg: &ExperimentConfig, data: &Dataset, seed: u64) -> Result<Model> {
    let spec = mlp_spec(cfg, data, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Model::build(spec, cfg.model.init, &mut rng)
}

fn train_config(cfg: &ExperimentConfig, seed: u64, track: bool) -> TrainConfig {
    TrainConfig {
        epochs: cfg.run.epochs,
        batch_size: cfg.run.batch_size,
        shuffle_seed: seed,
        track_layer: if track { cfg.run.track_layer } else { None },
        snapshot_stride: cfg.run.snapshot_stride,
        keep_trace_rows: cfg.run.trace,
        eval_every: cfg.run.eval_every,
    }
}

/// Trains one fresh model; `seed` drives init and batch order.
pub fn train_once(
    cfg: &ExperimentConfig,
    lr: f64,
    seed: u64,
    train: &Dataset,
    test: Option<&Dataset>,
    track: bool,
) -> Result<(Model, FitReport)> {
    let mut model = build_model(cfg, train, seed)?;
    let mut opt = Optimizer::new(cfg.optim.kind, lr)?;
    let mut sched = cfg
        .optim
        .plateau
        .map(|p| PlateauScheduler::new(p.reduce, p.stop, p.factor, metric_goal(cfg.dataset.loss())))
        .transpose()?;
    let report = fit(
        &mut model,
        &mut opt,
        sched.as_mut(),
        train,
        test,
        &train_config(cfg, seed, track),
    )?;
    Ok((model, report))
}

/// What the validation stage settled on.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub grid: GridSelection,
    /// Best validation epoch per grid point (`None` when diverged).
    pub best_epochs: Vec<Option<usize>>,
    /// Epoch budget for the final runs.
    pub epochs: usize,
}

/// Trains at each grid point on a validation split carved out of `train`.
/// With `run.select_epochs` the score of a grid point is its best
/// validation epoch, otherwise its final one.
pub fn select_hyper(cfg: &ExperimentConfig, grid: &[f64], train: &Dataset, threads: usize) -> Result<Selection> {
    let (fit_idx, val_idx) = split_indices(train.len(), 1.0 - cfg.run.validation_fraction, cfg.run.seed);
    if fit_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::Data("training set too small to hold out a validation split".into()));
    }
    let (fit_set, val_set) = (train.select(&fit_idx), train.select(&val_idx));
    let goal = metric_goal(cfg.dataset.loss());
    let runs = parallel_map(grid, threads, |_, &lr| -> Result<Option<(usize, f64)>> {
        let (_, report) = train_once(cfg, lr, cfg.run.seed, &fit_set, Some(&val_set), false)?;
        if report.diverged() {
            return Ok(None);
        }
        Ok(if cfg.run.select_epochs {
            report.best_test_epoch(goal)
        } else {
            report.history.last().filter(|e| e.test_metric.is_finite()).map(|e| (e.epoch, e.test_metric))
        })
    });
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let table = grid
        .iter()
        .zip(&runs)
        .map(|(&lr, r)| (lr, r.map_or(RunOutcome::Diverged, |(_, m)| RunOutcome::Metric(m))))
        .collect();
    let sel = select_from_table(table, goal)?;
    let best_epochs: Vec<Option<usize>> = runs.iter().map(|r| r.map(|(e, _)| e)).collect();
    let winner = grid.iter().position(|&lr| lr == sel.best_lr).expect("winner is on the grid");
    let epochs = match best_epochs[winner] {
        Some(e) if cfg.run.select_epochs => e + 1,
        _ => cfg.run.epochs,
    };
    Ok(Selection {
        grid: sel,
        best_epochs,
        epochs,
    })
}

#[derive(Debug, Clone)]
pub struct SplitResult {
    pub split: usize,
    pub seed: u64,
    pub test_metric: Option<f64>,
    pub steps: u64,
    pub diverged_at: Option<u64>,
    pub history: Vec<EpochMetrics>,
    pub param_count: usize,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub lr: f64,
    /// Epoch budget of the final runs.
    pub epochs: usize,
    pub selection: Option<Selection>,
    pub splits: Vec<SplitResult>,
}

impl RunSummary {
    /// Finite test metrics of the splits that did not diverge.
    pub fn metrics(&self) -> Vec<f64> {
        self.splits.iter().filter_map(|s| s.test_metric).collect()
    }

    pub fn mean_std(&self) -> Option<(f64, f64)> {
        mean_std(&self.metrics())
    }

    pub fn all_diverged(&self) -> bool {
        self.splits.iter().all(|s| s.test_metric.is_none())
    }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Some((mean, var.sqrt()))
}

fn write_metrics(path: &Path, history: &[EpochMetrics]) -> Result<()> {
    let header: Vec<String> = METRICS_HEADER.iter().map(|s| s.to_string()).collect();
    let mut out = CsvOut::create(path, &header)?;
    for e in history {
        out.row(&[e.epoch.to_string(), fmt_f64(e.train_loss), fmt_f64(e.test_metric), fmt_f64(e.lr)])?;
    }
    out.finish()
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn opt_str<T: ToString>(x: Option<T>) -> String {
    x.map_or_else(|| "none".to_string(), |v| v.to_string())
}

/// Runs `cfg` on up to `threads` workers (splits and grid points in
/// parallel) and writes the run directory.
///
/// With every split diverged the manifest is still written before
/// [`Error::NoViableLr`] is returned.
pub fn run(cfg: &ExperimentConfig, threads: usize) -> Result<RunSummary> {
    cfg.validate()?;
    let splits = load_splits(cfg)?;
    let out_dir = cfg.output_dir.clone();
    create_dir(&out_dir)?;
    let config_path = out_dir.join("config.txt");
    fs::write(&config_path, cfg.to_text()).map_err(|e| Error::io(&config_path, e))?;

    let grid = match &cfg.optim.lr {
        LrChoice::Fixed(lr) if cfg.run.select_epochs => Some(vec![*lr]),
        LrChoice::Fixed(_) => None,
        LrChoice::Grid(g) => Some(g.clone()),
    };
    let selection = match grid {
        None => None,
        Some(g) => match select_hyper(cfg, &g, &splits[0].0, threads) {
            Ok(sel) => Some(sel),
            Err(Error::NoViableLr) => {
                write_manifest(&out_dir, cfg, None, None, None, &[], "all_lr_diverged")?;
                return Err(Error::NoViableLr);
            }
            Err(e) => return Err(e),
        },
    };
    if let Some(sel) = &selection {
        let mut out = CsvOut::create(&out_dir.join("grid.csv"), &GRID_HEADER.map(String::from))?;
        for ((lr, o), epoch) in sel.grid.table.iter().zip(&sel.best_epochs) {
            let (metric, diverged) = match o {
                RunOutcome::Metric(m) => (*m, false),
                RunOutcome::Diverged => (f64::NAN, true),
            };
            out.row(&[fmt_f64(*lr), fmt_f64(metric), opt_str(*epoch), diverged.to_string()])?;
        }
        out.finish()?;
    }
    let (lr, epochs) = match (&cfg.optim.lr, &selection) {
        (_, Some(sel)) => (sel.grid.best_lr, sel.epochs),
        (LrChoice::Fixed(lr), None) => (*lr, cfg.run.epochs),
        (LrChoice::Grid(_), None) => unreachable!("a grid always yields a selection"),
    };
    let mut final_cfg = cfg.clone();
    final_cfg.run.epochs = epochs;
    let cfg = &final_cfg;

    let multi = splits.len() > 1;
    let results = parallel_map(&splits, threads, |i, (train, test)| -> Result<SplitResult> {
        let seed = cfg.run.seed + i as u64;
        let dir = if multi {
            out_dir.join(format!("split_{i:02}"))
        } else {
            out_dir.clone()
        };
        create_dir(&dir)?;
        let (model, report) = train_once(cfg, lr, seed, train, Some(test), true)?;
        write_metrics(&dir.join("metrics.csv"), &report.history)?;
        let (trace, rows) = match &report.tracker {
            Some(t) => (t.trace.clone(), t.rows.clone()),
            None => (StabilityTrace::default(), Vec::new()),
        };
        let dim = cfg
            .run
            .track_layer
            .map_or(0, |l| if l == 0 { train.dim() } else { cfg.model.hidden[l - 1] });
        export_trace(&dir, dim, &trace, &rows)?;
        save_checkpoint(&model, &dir.join("checkpoint.bin"))?;
        Ok(SplitResult {
            split: i,
            seed,
            test_metric: if report.diverged() { None } else { report.final_test_metric() },
            steps: report.steps,
            diverged_at: report.diverged_at,
            history: report.history,
            param_count: model.param_count(),
        })
    });
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;

    let mut out = CsvOut::create(&out_dir.join("results.csv"), &RESULTS_HEADER.map(String::from))?;
    for r in &results {
        out.row(&[
            r.split.to_string(),
            fmt_f64(lr),
            fmt_f64(r.test_metric.unwrap_or(f64::NAN)),
            r.steps.to_string(),
            opt_str(r.diverged_at),
        ])?;
    }
    out.finish()?;

    let summary = RunSummary {
        out_dir: out_dir.clone(),
        lr,
        epochs,
        selection,
        splits: results,
    };
    let status = if summary.all_diverged() {
        "all_lr_diverged"
    } else if summary.splits.iter().any(|s| s.diverged_at.is_some()) {
        "diverged"
    } else {
        "ok"
    };
    write_manifest(&out_dir, cfg, Some(lr), Some(epochs), summary.mean_std(), &summary.splits, status)?;
    if summary.all_diverged() {
        return Err(Error::NoViableLr);
    }
    Ok(summary)
}

/// `key = value` lines: the resolved config followed by `manifest.*` results,
/// so the file alone reproduces the run.
fn write_manifest(
    dir: &Path,
    cfg: &ExperimentConfig,
    lr: Option<f64>,
    epochs: Option<usize>,
    stats: Option<(f64, f64)>,
    splits: &[SplitResult],
    status: &str,
) -> Result<()> {
    let mut s = cfg.to_text();
    s.push_str(&format!("manifest.version = {}\n", env!("CARGO_PKG_VERSION")));
    s.push_str(&format!("manifest.status = {status}\n"));
    s.push_str(&format!("manifest.lr = {}\n", opt_str(lr.map(fmt_f64))));
    s.push_str(&format!("manifest.epochs = {}\n", opt_str(epochs)));
    s.push_str(&format!("manifest.metric = {}\n", if cfg.dataset.loss() == crate::model::Loss::Mse { "rmse" } else { "accuracy" }));
    if let Some((mean, std)) = stats {
        s.push_str(&format!("manifest.test_metric_mean = {}\n", fmt_f64(mean)));
        s.push_str(&format!("manifest.test_metric_std = {}\n", fmt_f64(std)));
    }
    if let Some(first) = splits.first() {
        s.push_str(&format!("manifest.param_count = {}\n", first.param_count));
    }
    for r in splits {
        s.push_str(&format!(
            "manifest.split.{}.test_metric = {}\nmanifest.split.{}.diverged_at = {}\n",
            r.split,
            opt_str(r.test_metric.map(fmt_f64)),
            r.split,
            opt_str(r.diverged_at)
        ));
    }
    let path = dir.join("manifest.txt");
    fs::write(&path, s).map_err(|e| Error::io(&path, e))
}

/// Reads a manifest's `manifest.*` entries.
pub fn read_manifest(path: &Path) -> Result<std::collections::BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .filter(|(k, _)| k.starts_with("manifest."))
        .collect())
}
